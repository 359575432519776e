"""HTTP surface of the coordinator.

Routes (JSON bodies, bearer-token auth):

    POST   /api/functions              register / update (owner) a function
    POST   /api/endpoints              register / re-register an endpoint
    POST   /api/tasks                  submit one task
    POST   /api/batches                partition inputs and submit batch tasks
    GET    /api/tasks/{id}             task status
    GET    /api/tasks/{id}/result      result envelope (marks it retrieved)
    GET    /api/endpoints/{id}         endpoint info, queue depths, metrics
    DELETE /api/endpoints/{id}         deregister
    GET    /api/tasks/export           bulk per-task rows for reporting
"""

from __future__ import annotations

import json
import logging
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from funcfab.core.batching import BatchSpec, InvalidSpec
from funcfab.service import errors
from funcfab.service.coordinator import Coordinator
from funcfab.wire import payloads

log = logging.getLogger(__name__)

_TASK_RE = re.compile(r"^/api/tasks/([0-9a-f]{32})$")
_RESULT_RE = re.compile(r"^/api/tasks/([0-9a-f]{32})/result$")
_ENDPOINT_RE = re.compile(r"^/api/endpoints/([0-9a-f]{32})$")

MAX_BODY = 256 * 1024 * 1024


class ApiServer:
    def __init__(self, coordinator: Coordinator, host: str, port: int):
        self.coordinator = coordinator
        handler = _make_handler(coordinator)
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self.httpd.daemon_threads = True
        self.address = self.httpd.server_address
        self._thread = threading.Thread(
            target=self.httpd.serve_forever, name="http", daemon=True
        )

    def start(self):
        self._thread.start()

    def stop(self):
        self.httpd.shutdown()
        self.httpd.server_close()


def _make_handler(coordinator: Coordinator):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"
        disable_nagle_algorithm = True  # small JSON replies stall 40ms otherwise
        timeout = 60  # keep-alive handler threads exit after idle clients vanish

        def log_message(self, fmt, *args):  # route through logging, quietly
            log.debug(fmt, *args)

        # ------------------------------------------------------------------

        def _reply(self, status: int, obj: dict):
            data = json.dumps(obj).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _reply_error(self, exc: errors.ServiceError):
            self._reply(exc.status, exc.payload())

        def _principal(self) -> str:
            header = self.headers.get("Authorization", "")
            token = header[7:] if header.startswith("Bearer ") else None
            return coordinator.principal_for(token)

        def _body(self) -> dict:
            length = int(self.headers.get("Content-Length", "0"))
            if length > MAX_BODY:
                raise errors.PayloadTooLarge(length, MAX_BODY)
            if length == 0:
                return {}
            raw = self.rfile.read(length)
            try:
                return json.loads(raw.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise errors.BadRequest("request body is not valid JSON: %s" % exc)

        def _dispatch(self, method: str):
            path = urlparse(self.path)
            try:
                principal = self._principal()
                handler = self._route(method, path.path)
                if handler is None:
                    raise errors.BadRequest("no route for %s %s" % (method, path.path))
                handler(principal, path)
            except errors.ServiceError as exc:
                self._reply_error(exc)
            except InvalidSpec as exc:
                self._reply(400, {"error": "InvalidSpec", "message": str(exc)})
            except BrokenPipeError:
                pass
            except Exception as exc:
                log.exception("request failed: %s %s", method, self.path)
                self._reply(500, {"error": "Internal", "message": str(exc)})

        def _route(self, method: str, path: str):
            if method == "POST":
                return {
                    "/api/functions": self._post_function,
                    "/api/endpoints": self._post_endpoint,
                    "/api/tasks": self._post_task,
                    "/api/batches": self._post_batch,
                }.get(path)
            if method == "GET":
                if path == "/api/tasks/export":
                    return self._get_export
                if _RESULT_RE.match(path):
                    return self._get_result
                if _TASK_RE.match(path):
                    return self._get_status
                if _ENDPOINT_RE.match(path):
                    return self._get_endpoint
                return None
            if method == "DELETE":
                if _ENDPOINT_RE.match(path):
                    return self._delete_endpoint
            return None

        def do_POST(self):
            self._dispatch("POST")

        def do_GET(self):
            self._dispatch("GET")

        def do_DELETE(self):
            self._dispatch("DELETE")

        # ------------------------------------------------------------------

        def _post_function(self, principal, path):
            body = self._body()
            function_id, version = coordinator.register_function(
                principal,
                name=body.get("name", ""),
                body=payloads.unb64(body.get("body", "")),
                runtime=body.get("runtime", "bench"),
                container_tag=body.get("container_tag", ""),
                memoize=bool(body.get("memoize", False)),
                allowed_principals=body.get("allowed_principals", []),
                function_id=body.get("function_id"),
            )
            self._reply(200, {"function_id": function_id, "version": version})

        def _post_endpoint(self, principal, path):
            body = self._body()
            endpoint_id, host, port = coordinator.register_endpoint(
                principal,
                name=body.get("name", ""),
                description=body.get("description", ""),
                endpoint_id=body.get("endpoint_id"),
            )
            self._reply(
                200,
                {
                    "endpoint_id": endpoint_id,
                    "forwarder_host": host,
                    "forwarder_port": port,
                },
            )

        def _post_task(self, principal, path):
            body = self._body()
            task_id = coordinator.submit_task(
                principal,
                body.get("function_id", ""),
                body.get("endpoint_id", ""),
                payloads.env_from_wire(body.get("input", {"c": 0, "p": ""})),
                retriable=bool(body.get("retriable", True)),
            )
            self._reply(200, {"task_id": task_id})

        def _post_batch(self, principal, path):
            body = self._body()
            spec = BatchSpec(
                batch_size=body.get("batch_size"),
                batch_count=body.get("batch_count"),
            )
            inputs = [payloads.env_from_wire(e) for e in body.get("inputs", [])]
            task_ids, sizes = coordinator.submit_batch(
                principal,
                body.get("function_id", ""),
                body.get("endpoint_id", ""),
                inputs,
                spec,
                retriable=bool(body.get("retriable", True)),
            )
            self._reply(200, {"task_ids": task_ids, "sizes": sizes})

        def _get_status(self, principal, path):
            task_id = _TASK_RE.match(path.path).group(1)
            self._reply(200, coordinator.get_status(principal, task_id))

        def _get_result(self, principal, path):
            task_id = _RESULT_RE.match(path.path).group(1)
            env = coordinator.get_result(principal, task_id)
            self._reply(200, payloads.env_to_wire(env))

        def _get_endpoint(self, principal, path):
            endpoint_id = _ENDPOINT_RE.match(path.path).group(1)
            self._reply(200, coordinator.endpoint_info(endpoint_id))

        def _delete_endpoint(self, principal, path):
            endpoint_id = _ENDPOINT_RE.match(path.path).group(1)
            coordinator.delete_endpoint(principal, endpoint_id)
            self._reply(200, {"deleted": endpoint_id})

        def _get_export(self, principal, path):
            query = parse_qs(path.query)
            endpoint_id = query.get("endpoint_id", [None])[0]
            rows = coordinator.export_task_rows(endpoint_id=endpoint_id)
            self._reply(200, {"tasks": rows})

    return Handler
