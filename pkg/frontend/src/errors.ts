/** Errors surfaced by the coordinator API and the polling client. */

export class ClientError extends Error {
  constructor(
    readonly status: number,
    readonly body: Record<string, unknown>,
    message?: string,
  ) {
    super(message ?? `HTTP ${status}: ${JSON.stringify(body)}`);
    this.name = new.target.name;
  }
}

export class UnauthorizedError extends ClientError {}

export class UnknownTaskError extends ClientError {}

export class PayloadTooLargeError extends ClientError {
  readonly cap: number;
  constructor(status: number, body: Record<string, unknown>) {
    super(status, body, `payload too large (cap ${body.cap} bytes)`);
    this.cap = Number(body.cap ?? 0);
  }
}

export class TaskFailedError extends ClientError {
  readonly taskError: Record<string, unknown>;
  constructor(status: number, body: Record<string, unknown>) {
    const taskError = (body.task_error ?? {}) as Record<string, unknown>;
    super(status, body, `task failed: ${taskError.type}: ${taskError.message}`);
    this.taskError = taskError;
  }
}

export class ResultPurgedError extends ClientError {}

export class TimeoutError extends Error {
  constructor(readonly taskId: string, timeoutMs: number) {
    super(`task ${taskId} not terminal after ${timeoutMs}ms`);
    this.name = "TimeoutError";
  }
}

export class SerializationError extends Error {
  constructor(value: unknown) {
    super(`no codec accepts value of type ${typeof value}`);
    this.name = "SerializationError";
  }
}

export class InvalidSpecError extends Error {
  constructor(message: string) {
    super(message);
    this.name = "InvalidSpecError";
  }
}
