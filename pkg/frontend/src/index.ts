export { FabricClient, TaskFuture } from "./client.js";
export type { ClientOptions, RegisterFunctionOptions } from "./client.js";
export {
  CODEC_RAW,
  CODEC_TEXT,
  deserialize,
  fromWire,
  serialize,
  toWire,
} from "./envelope.js";
export type { Envelope, WireEnvelope } from "./envelope.js";
export { partition, partitionSizes, validateSpec } from "./partition.js";
export type { BatchSpec } from "./partition.js";
export {
  ClientError,
  InvalidSpecError,
  PayloadTooLargeError,
  ResultPurgedError,
  SerializationError,
  TaskFailedError,
  TimeoutError,
  UnauthorizedError,
  UnknownTaskError,
} from "./errors.js";
