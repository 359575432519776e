/**
 * Batch partitioning, size-for-size consistent with the coordinator.
 *
 * batch_count governs when both knobs are set; the split is as even as
 * possible with larger batches first, and empty batches are never produced.
 */

import { InvalidSpecError } from "./errors.js";

export interface BatchSpec {
  batchSize?: number;
  batchCount?: number;
}

export function validateSpec(spec: BatchSpec): BatchSpec {
  if (spec.batchSize === undefined && spec.batchCount === undefined) {
    throw new InvalidSpecError("one of batchSize or batchCount must be set");
  }
  if (spec.batchSize !== undefined && (!Number.isInteger(spec.batchSize) || spec.batchSize < 1)) {
    throw new InvalidSpecError(`batchSize must be >= 1, got ${spec.batchSize}`);
  }
  if (spec.batchCount !== undefined && (!Number.isInteger(spec.batchCount) || spec.batchCount < 1)) {
    throw new InvalidSpecError(`batchCount must be >= 1, got ${spec.batchCount}`);
  }
  return spec;
}

/** Batch sizes for n items under the spec. */
export function partitionSizes(n: number, spec: BatchSpec): number[] {
  validateSpec(spec);
  if (n < 0 || !Number.isInteger(n)) {
    throw new InvalidSpecError(`n must be a non-negative integer, got ${n}`);
  }
  if (n === 0) return [];
  if (spec.batchCount !== undefined) {
    const c = spec.batchCount;
    const q = Math.floor(n / c);
    const r = n % c;
    const sizes: number[] = [];
    for (let i = 0; i < c; i++) {
      const size = i < r ? q + 1 : q;
      if (size > 0) sizes.push(size);
    }
    return sizes;
  }
  const k = spec.batchSize!;
  const sizes: number[] = [];
  for (let done = 0; done < n; done += k) {
    sizes.push(Math.min(k, n - done));
  }
  return sizes;
}

/** Split items into batches per the spec, preserving order. */
export function partition<T>(items: Iterable<T>, spec: BatchSpec): T[][] {
  const all = Array.from(items);
  const batches: T[][] = [];
  let offset = 0;
  for (const size of partitionSizes(all.length, spec)) {
    batches.push(all.slice(offset, offset + size));
    offset += size;
  }
  return batches;
}
