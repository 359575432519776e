import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { FabricClient } from "../src/client.js";
import {
  PayloadTooLargeError,
  TaskFailedError,
  TimeoutError,
} from "../src/errors.js";
import { PyFabric, TOKEN } from "./fabric.js";

const fabric = new PyFabric();
let client: FabricClient;
let echoId: string;

beforeAll(async () => {
  await fabric.start();
  client = new FabricClient({
    baseUrl: fabric.baseUrl,
    token: TOKEN,
    pollIntervalMs: 25,
  });
  echoId = await client.registerFunction({
    name: "echo",
    body: JSON.stringify({ op: "echo" }),
  });
});

afterAll(() => fabric.stop());

describe("register / run / getResult", () => {
  it("echoes a JSON value", async () => {
    const future = await client.run(echoId, fabric.endpointId, { msg: "hi", n: 3 });
    expect(await future.result(30_000)).toEqual({ msg: "hi", n: 3 });
  });

  it("echoes raw bytes untouched", async () => {
    const payload = new Uint8Array([0, 1, 2, 250]);
    const future = await client.run(echoId, fabric.endpointId, payload);
    const out = (await future.result(30_000)) as Uint8Array;
    expect(Buffer.from(out)).toEqual(Buffer.from(payload));
  });

  it("short timeout raises but the task still completes server-side", async () => {
    const sleepId = await client.registerFunction({
      name: "sleepy",
      body: JSON.stringify({ op: "sleep_ms", ms: 1000 }),
    });
    const future = await client.run(sleepId, fabric.endpointId, "x");
    await expect(future.result(10)).rejects.toBeInstanceOf(TimeoutError);
    expect(await future.result(30_000)).toBeNull();
  });

  it("task failures surface the structured error", async () => {
    const failId = await client.registerFunction({
      name: "boom",
      body: JSON.stringify({ op: "fail", message: "kapow" }),
    });
    const future = await client.run(failId, fabric.endpointId, "x");
    await expect(future.result(30_000)).rejects.toSatisfy((err: unknown) => {
      return (
        err instanceof TaskFailedError && String(err.taskError.message) === "kapow"
      );
    });
  });

  it("oversized bodies surface the cap", async () => {
    const big = new Uint8Array(1024 * 1024 + 1);
    await expect(
      client.registerFunction({ name: "big", body: big }),
    ).rejects.toSatisfy(
      (err: unknown) =>
        err instanceof PayloadTooLargeError && err.cap === 1024 * 1024,
    );
  });

  it("terminal futures never poll again", async () => {
    let calls = 0;
    const counting: typeof fetch = (input, init) => {
      calls += 1;
      return fetch(input, init);
    };
    const counted = new FabricClient({
      baseUrl: fabric.baseUrl,
      token: TOKEN,
      pollIntervalMs: 25,
      fetchImpl: counting,
    });
    const future = await counted.run(echoId, fabric.endpointId, "cached");
    expect(await future.result(30_000)).toBe("cached");
    const after = calls;
    expect(await future.result(30_000)).toBe("cached");
    expect(await future.result(30_000)).toBe("cached");
    expect(calls).toBe(after); // cache hit, no network
  });
});

describe("fmap", () => {
  it("splits 10 inputs into [3,3,2,2] with batchCount=4", async () => {
    const inputs = Array.from({ length: 10 }, (_, i) => `v${i}`);
    const futures = await client.fmap(
      echoId,
      inputs,
      fabric.endpointId,
      2, // batchSize loses to batchCount
      4,
    );
    expect(futures).toHaveLength(4);
    const lists = (await Promise.all(
      futures.map((f) => f.result(60_000)),
    )) as unknown[][];
    expect(lists.map((l) => l.length)).toEqual([3, 3, 2, 2]);
    expect(lists.flat()).toEqual(inputs);
  });

  it("flattened fmap results equal sequential run results", async () => {
    const inputs = Array.from({ length: 9 }, (_, i) => ({ idx: i }));
    const futures = await client.fmap(echoId, inputs, fabric.endpointId, 4);
    const flattened = (
      (await Promise.all(futures.map((f) => f.result(60_000)))) as unknown[][]
    ).flat();
    const sequential: unknown[] = [];
    for (const value of inputs) {
      const future = await client.run(echoId, fabric.endpointId, value);
      sequential.push(await future.result(30_000));
    }
    expect(flattened).toEqual(sequential);
  });

  it("empty iterator produces no futures", async () => {
    expect(await client.fmap(echoId, [], fabric.endpointId, 4)).toEqual([]);
  });
});
