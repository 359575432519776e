import { execFileSync } from "node:child_process";
import { describe, expect, it } from "vitest";

import { InvalidSpecError } from "../src/errors.js";
import { partition, partitionSizes } from "../src/partition.js";

describe("partitionSizes", () => {
  it("splits by batchSize with a short tail", () => {
    expect(partitionSizes(10, { batchSize: 3 })).toEqual([3, 3, 3, 1]);
  });

  it("batchCount governs when both are set, larger batches first", () => {
    expect(partitionSizes(10, { batchSize: 2, batchCount: 4 })).toEqual([3, 3, 2, 2]);
  });

  it("never yields empty batches", () => {
    expect(partitionSizes(3, { batchCount: 5 })).toEqual([1, 1, 1]);
    expect(partitionSizes(0, { batchCount: 4 })).toEqual([]);
  });

  it("rejects invalid specs", () => {
    expect(() => partitionSizes(5, {})).toThrow(InvalidSpecError);
    expect(() => partitionSizes(5, { batchSize: 0 })).toThrow(InvalidSpecError);
    expect(() => partitionSizes(5, { batchCount: -2 })).toThrow(InvalidSpecError);
  });
});

describe("partition", () => {
  it("preserves order and multiplicity", () => {
    const items = Array.from({ length: 23 }, (_, i) => i);
    const batches = partition(items, { batchCount: 4 });
    expect(batches.flat()).toEqual(items);
    expect(batches.map((b) => b.length)).toEqual(partitionSizes(23, { batchCount: 4 }));
  });

  it("handles empty input", () => {
    expect(partition([], { batchSize: 2 })).toEqual([]);
  });
});

describe("parity with the coordinator-side partitioner", () => {
  it("matches split sizes for 50 random (n, spec) pairs", () => {
    // deterministic LCG so the corpus is stable across runs
    let state = 0x5eed;
    const next = (bound: number) => {
      state = (state * 1103515245 + 12345) & 0x7fffffff;
      return state % bound;
    };
    const pairs: { n: number; batch_size?: number; batch_count?: number }[] = [];
    for (let i = 0; i < 50; i++) {
      const n = next(500);
      const roll = next(3);
      if (roll === 0) pairs.push({ n, batch_size: 1 + next(20) });
      else if (roll === 1) pairs.push({ n, batch_count: 1 + next(20) });
      else pairs.push({ n, batch_size: 1 + next(20), batch_count: 1 + next(20) });
    }
    const script = [
      "import json, sys",
      "from funcfab.core.batching import BatchSpec, partition_sizes",
      "pairs = json.loads(sys.argv[1])",
      "out = []",
      "for p in pairs:",
      "    spec = BatchSpec(batch_size=p.get('batch_size'), batch_count=p.get('batch_count'))",
      "    out.append(partition_sizes(p['n'], spec))",
      "print(json.dumps(out))",
    ].join("\n");
    const reference = JSON.parse(
      execFileSync("python3", ["-c", script, JSON.stringify(pairs)]).toString(),
    ) as number[][];
    const local = pairs.map((p) =>
      partitionSizes(p.n, { batchSize: p.batch_size, batchCount: p.batch_count }),
    );
    expect(local).toEqual(reference);
  });
});
