/**
 * Codec-tagged payload envelopes, wire-compatible with the coordinator.
 *
 * Codec 0 carries raw bytes untouched; codec 1 carries JSON-compatible
 * values as compact UTF-8 JSON (JSON.stringify produces the same bytes as
 * the service side's compact encoder for the shared value domain). Payloads
 * travel base64-encoded inside JSON bodies as {c, p} pairs.
 */

import { SerializationError } from "./errors.js";

export const CODEC_RAW = 0;
export const CODEC_TEXT = 1;

export interface Envelope {
  codecId: number;
  payload: Uint8Array;
}

export interface WireEnvelope {
  c: number;
  p: string; // base64
}

export function toWire(env: Envelope): WireEnvelope {
  return { c: env.codecId, p: Buffer.from(env.payload).toString("base64") };
}

export function fromWire(wire: WireEnvelope): Envelope {
  return { codecId: wire.c, payload: Buffer.from(wire.p, "base64") };
}

function jsonCompatible(value: unknown, depth = 0): boolean {
  if (depth > 64) return false;
  if (value === null) return true;
  const kind = typeof value;
  if (kind === "string" || kind === "boolean") return true;
  if (kind === "number") return Number.isFinite(value as number);
  if (Array.isArray(value)) {
    return value.every((v) => jsonCompatible(v, depth + 1));
  }
  if (kind === "object") {
    return Object.values(value as Record<string, unknown>).every((v) =>
      jsonCompatible(v, depth + 1),
    );
  }
  return false;
}

/** Encode with the first codec that accepts the value: raw bytes, then JSON. */
export function serialize(value: unknown): Envelope {
  if (value instanceof Uint8Array) {
    return { codecId: CODEC_RAW, payload: value };
  }
  if (jsonCompatible(value)) {
    return {
      codecId: CODEC_TEXT,
      payload: Buffer.from(JSON.stringify(value), "utf-8"),
    };
  }
  throw new SerializationError(value);
}

export function deserialize(env: Envelope): unknown {
  if (env.codecId === CODEC_RAW) {
    return env.payload;
  }
  if (env.codecId === CODEC_TEXT) {
    return JSON.parse(Buffer.from(env.payload).toString("utf-8"));
  }
  throw new Error(`cannot decode codec ${env.codecId} client-side`);
}
