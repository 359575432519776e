/**
 * Client session against the coordinator HTTP API.
 *
 * Results are polled, not pushed: TaskFuture is lazy and getResult drives
 * the polling loop; once a future observes a terminal state it caches it
 * and never touches the network again. Everything the client does is
 * observable through the public HTTP API alone.
 */

import {
  ClientError,
  PayloadTooLargeError,
  ResultPurgedError,
  TaskFailedError,
  TimeoutError,
  UnauthorizedError,
  UnknownTaskError,
} from "./errors.js";
import {
  Envelope,
  WireEnvelope,
  deserialize,
  fromWire,
  serialize,
  toWire,
} from "./envelope.js";
import { BatchSpec, partition } from "./partition.js";

export interface ClientOptions {
  baseUrl: string;
  token: string;
  pollIntervalMs?: number;
  /** Injectable for tests; defaults to global fetch. */
  fetchImpl?: typeof fetch;
}

export interface RegisterFunctionOptions {
  name: string;
  /** Opaque body the target runtime interprets (bench op spec or shell command). */
  body: Uint8Array | string;
  runtime?: "bench" | "shell";
  containerTag?: string;
  memoize?: boolean;
  allowedPrincipals?: string[];
  functionId?: string;
}

interface TerminalState {
  state: "SUCCEEDED" | "FAILED";
  result?: Envelope;
  error?: Record<string, unknown>;
}

export class TaskFuture {
  private terminal?: TerminalState;

  constructor(
    private readonly client: FabricClient,
    readonly taskId: string,
    /** For fmap futures: decode the result into an ordered element list. */
    readonly isBatch: boolean = false,
  ) {}

  get done(): boolean {
    return this.terminal !== undefined;
  }

  /** @internal */
  cache(state: TerminalState): void {
    this.terminal = state;
  }

  /** @internal */
  cached(): TerminalState | undefined {
    return this.terminal;
  }

  async result(timeoutMs = 30_000): Promise<unknown> {
    return this.client.getResult(this, timeoutMs);
  }
}

const sleep = (ms: number) => new Promise((r) => setTimeout(r, ms));

export class FabricClient {
  readonly baseUrl: string;
  readonly pollIntervalMs: number;
  private readonly token: string;
  private readonly fetchImpl: typeof fetch;

  constructor(options: ClientOptions) {
    this.baseUrl = options.baseUrl.replace(/\/+$/, "");
    this.token = options.token;
    this.pollIntervalMs = options.pollIntervalMs ?? 500;
    this.fetchImpl = options.fetchImpl ?? fetch;
  }

  // ------------------------------------------------------------------

  private async request(
    method: string,
    path: string,
    body?: unknown,
  ): Promise<{ status: number; body: Record<string, unknown> }> {
    const response = await this.fetchImpl(this.baseUrl + path, {
      method,
      headers: {
        Authorization: `Bearer ${this.token}`,
        ...(body !== undefined ? { "Content-Type": "application/json" } : {}),
      },
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    let parsed: Record<string, unknown> = {};
    try {
      parsed = (await response.json()) as Record<string, unknown>;
    } catch {
      parsed = {};
    }
    return { status: response.status, body: parsed };
  }

  private fail(status: number, body: Record<string, unknown>): never {
    switch (body.error) {
      case "Unauthorized":
        throw new UnauthorizedError(status, body);
      case "PayloadTooLarge":
        throw new PayloadTooLargeError(status, body);
      case "UnknownTask":
        throw new UnknownTaskError(status, body);
      case "TaskFailed":
        throw new TaskFailedError(status, body);
      case "ResultPurged":
        throw new ResultPurgedError(status, body);
      default:
        throw new ClientError(status, body);
    }
  }

  private async call(
    method: string,
    path: string,
    body?: unknown,
  ): Promise<Record<string, unknown>> {
    const { status, body: parsed } = await this.request(method, path, body);
    if (status !== 200) this.fail(status, parsed);
    return parsed;
  }

  // ------------------------------------------------------------------

  async registerFunction(options: RegisterFunctionOptions): Promise<string> {
    const bodyBytes =
      typeof options.body === "string"
        ? Buffer.from(options.body, "utf-8")
        : Buffer.from(options.body);
    const out = await this.call("POST", "/api/functions", {
      name: options.name,
      body: bodyBytes.toString("base64"),
      runtime: options.runtime ?? "bench",
      container_tag: options.containerTag ?? "",
      memoize: options.memoize ?? false,
      allowed_principals: options.allowedPrincipals ?? [],
      ...(options.functionId ? { function_id: options.functionId } : {}),
    });
    return out.function_id as string;
  }

  /** Submit one invocation; returns immediately with a lazy future. */
  async run(
    functionId: string,
    endpointId: string,
    input: unknown,
    options?: { retriable?: boolean },
  ): Promise<TaskFuture> {
    const env = input && (input as Envelope).payload instanceof Uint8Array
      ? (input as Envelope)
      : serialize(input);
    const out = await this.call("POST", "/api/tasks", {
      function_id: functionId,
      endpoint_id: endpointId,
      input: toWire(env),
      retriable: options?.retriable ?? true,
    });
    return new TaskFuture(this, out.task_id as string);
  }

  async status(taskId: string): Promise<Record<string, unknown>> {
    return this.call("GET", `/api/tasks/${taskId}`);
  }

  /**
   * Poll until the task is terminal or the timeout lapses. Terminal
   * outcomes are cached on the future; repeated calls after that do not
   * touch the network.
   */
  async getResult(
    future: TaskFuture | string,
    timeoutMs = 30_000,
  ): Promise<unknown> {
    const handle =
      typeof future === "string" ? new TaskFuture(this, future) : future;
    const cached = handle.cached();
    if (cached) return this.unwrap(handle, cached);
    const deadline = Date.now() + timeoutMs;
    for (;;) {
      const { status, body } = await this.request(
        "GET",
        `/api/tasks/${handle.taskId}/result`,
      );
      if (status === 200) {
        const terminal: TerminalState = {
          state: "SUCCEEDED",
          result: fromWire(body as unknown as WireEnvelope),
        };
        handle.cache(terminal);
        return this.unwrap(handle, terminal);
      }
      if (status === 202) {
        if (Date.now() >= deadline) {
          throw new TimeoutError(handle.taskId, timeoutMs);
        }
        await sleep(this.pollIntervalMs);
        continue;
      }
      if (body.error === "TaskFailed") {
        handle.cache({
          state: "FAILED",
          error: (body.task_error ?? {}) as Record<string, unknown>,
        });
      }
      this.fail(status, body);
    }
  }

  private unwrap(future: TaskFuture, terminal: TerminalState): unknown {
    if (terminal.state === "FAILED") {
      throw new TaskFailedError(409, {
        error: "TaskFailed",
        task_error: terminal.error ?? {},
      });
    }
    const env = terminal.result!;
    if (!future.isBatch) {
      return deserialize(env);
    }
    const elements = deserialize(env) as WireEnvelope[];
    return elements.map((wire) => deserialize(fromWire(wire)));
  }

  /**
   * Partition inputs client-side (batch_count governs over batch_size) and
   * submit each batch as one task whose result is the ordered list of
   * element results. Returns one future per batch.
   */
  async fmap(
    functionId: string,
    inputs: Iterable<unknown>,
    endpointId: string,
    batchSize?: number,
    batchCount?: number,
  ): Promise<TaskFuture[]> {
    const spec: BatchSpec = { batchSize, batchCount };
    const batches = partition(Array.from(inputs), spec);
    const futures: TaskFuture[] = [];
    for (const batch of batches) {
      const out = await this.call("POST", "/api/batches", {
        function_id: functionId,
        endpoint_id: endpointId,
        inputs: batch.map((value) => toWire(serialize(value))),
        batch_count: 1,
      });
      const ids = out.task_ids as string[];
      futures.push(new TaskFuture(this, ids[0], true));
    }
    return futures;
  }

  async endpointInfo(endpointId: string): Promise<Record<string, unknown>> {
    return this.call("GET", `/api/endpoints/${endpointId}`);
  }
}
