"""Operator CLI for the coordinator API.

Connection settings come from --base-url/--token or the FUNCFAB_URL and
FUNCFAB_TOKEN environment variables. ``result --raw`` writes the result
payload bytes verbatim to stdout for byte-exact comparisons.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from funcfab.client.http import ClientError, FabricClient, TaskFailedError, TaskTimeout
from funcfab.core.envelope import CODEC_RAW, CODEC_TEXT, Envelope, serialize
from funcfab.wire import payloads


def _client(args) -> FabricClient:
    base = args.base_url or os.environ.get("FUNCFAB_URL")
    token = args.token or os.environ.get("FUNCFAB_TOKEN")
    if not base or not token:
        print("set --base-url/--token or FUNCFAB_URL/FUNCFAB_TOKEN", file=sys.stderr)
        raise SystemExit(2)
    return FabricClient(base, token)


def _input_envelope(args) -> Envelope:
    if args.input_json is not None:
        return serialize(json.loads(args.input_json), registry=(CODEC_TEXT,))
    if args.input_bytes is not None:
        return Envelope(CODEC_RAW, args.input_bytes.encode("utf-8"))
    if args.input_b64 is not None:
        return Envelope(int(args.input_codec), payloads.unb64(args.input_b64))
    return Envelope(CODEC_RAW, b"")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="funcfab-client")
    parser.add_argument("--base-url", default=None)
    parser.add_argument("--token", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    reg = sub.add_parser("register-function")
    reg.add_argument("--name", required=True)
    reg.add_argument("--runtime", default="bench", choices=["bench", "shell"])
    reg.add_argument("--body", required=True, help="body text (bench JSON op or shell command)")
    reg.add_argument("--container-tag", default="")
    reg.add_argument("--memoize", action="store_true")
    reg.add_argument("--share-with", action="append", default=[])

    ep = sub.add_parser("register-endpoint")
    ep.add_argument("--name", default="")

    submit = sub.add_parser("submit")
    submit.add_argument("--function-id", required=True)
    submit.add_argument("--endpoint-id", required=True)
    submit.add_argument("--input-json", default=None)
    submit.add_argument("--input-bytes", default=None)
    submit.add_argument("--input-b64", default=None)
    submit.add_argument("--input-codec", default=0)
    submit.add_argument("--not-retriable", action="store_true")

    status = sub.add_parser("status")
    status.add_argument("task_id")

    result = sub.add_parser("result")
    result.add_argument("task_id")
    result.add_argument("--timeout", type=float, default=30.0)
    result.add_argument("--raw", action="store_true", help="write payload bytes to stdout")

    batch = sub.add_parser("submit-batch")
    batch.add_argument("--function-id", required=True)
    batch.add_argument("--endpoint-id", required=True)
    batch.add_argument("--inputs-json", required=True, help="JSON array of input values")
    batch.add_argument("--batch-size", type=int, default=None)
    batch.add_argument("--batch-count", type=int, default=None)

    args = parser.parse_args(argv)
    client = _client(args)
    try:
        if args.command == "register-function":
            function_id = client.register_function(
                args.name,
                args.body.encode("utf-8"),
                runtime=args.runtime,
                container_tag=args.container_tag,
                memoize=args.memoize,
                allowed_principals=args.share_with,
            )
            print(function_id)
        elif args.command == "register-endpoint":
            print(json.dumps(client.register_endpoint(args.name)))
        elif args.command == "submit":
            task_id = client.submit(
                args.function_id,
                args.endpoint_id,
                _input_envelope(args),
                retriable=not args.not_retriable,
            )
            print(task_id)
        elif args.command == "status":
            print(json.dumps(client.status(args.task_id), indent=2))
        elif args.command == "result":
            env = client.result(args.task_id, timeout=args.timeout)
            if args.raw:
                sys.stdout.buffer.write(env.payload)
                sys.stdout.buffer.flush()
            else:
                print(json.dumps(payloads.env_to_wire(env)))
        elif args.command == "submit-batch":
            inputs = [
                serialize(v) for v in json.loads(args.inputs_json)
            ]
            task_ids, sizes = client.submit_batch(
                args.function_id,
                args.endpoint_id,
                inputs,
                batch_size=args.batch_size,
                batch_count=args.batch_count,
            )
            print(json.dumps({"task_ids": task_ids, "sizes": sizes}))
    except TaskTimeout as exc:
        print("timeout: %s" % exc, file=sys.stderr)
        return 4
    except TaskFailedError as exc:
        print("task failed: %s" % exc.body.get("task_error"), file=sys.stderr)
        return 5
    except ClientError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
