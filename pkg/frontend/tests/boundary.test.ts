import path from "node:path";
import { fileURLToPath } from "node:url";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { loadBoundaryCases, toF64 } from "../src/data.js";
import { EngineClient, EngineError, SessionHandle, Status } from "../src/engine.js";

const here = path.dirname(fileURLToPath(import.meta.url));
const fixturesDir = path.join(here, "..", "fixtures");

let client: EngineClient;

beforeAll(() => {
  client = EngineClient.start();
});

afterAll(() => {
  client.close();
});

describe("boundary equivalence", () => {
  it("forward and backward are bitwise-equal to native results on 1000 cases", async () => {
    const { programs, cases } = loadBoundaryCases(path.join(fixturesDir, "boundary_cases.jsonl"));
    expect(cases.length).toBe(1000);
    const handles: SessionHandle[] = [];
    for (const program of programs) {
      handles.push(await client.compile(program.text, program.k));
    }
    let forwardMismatch = 0;
    let backwardMismatch = 0;
    for (const c of cases) {
      const handle = handles[c.program];
      const fwd = await handle.forwardBytes(toF64(c.env));
      if (Buffer.compare(fwd, c.forward) !== 0) forwardMismatch++;
      const bwd = await handle.backwardBytes(toF64(c.upstream));
      if (Buffer.compare(bwd, c.backward) !== 0) backwardMismatch++;
    }
    expect(forwardMismatch).toBe(0);
    expect(backwardMismatch).toBe(0);
    for (const handle of handles) await handle.release();
  });

  it("publishes fact ordering via factNames", async () => {
    const handle = await client.compile(
      "input digit(img: 0..1, val: 0..2) exclusive val.\noutput sum(s: 0..4).\nsum(A + B) :- digit(0, A), digit(1, B).\n",
      3,
    );
    const names = await handle.factNames();
    expect(names).toEqual([
      "digit(0, 0)", "digit(0, 1)", "digit(0, 2)",
      "digit(1, 0)", "digit(1, 1)", "digit(1, 2)",
    ]);
    expect(await handle.outputNames()).toEqual(["(0)", "(1)", "(2)", "(3)", "(4)"]);
    // deterministic one-hot digits: one-hot sum
    const env = new Float64Array([0, 0, 1, 0, 0, 1]);
    const out = await handle.forward(env);
    expect(out[4]).toBe(1);
    expect(Math.max(...out.slice(0, 4))).toBe(0);
    // uniform digits: [1, 2, 3, 2, 1] / 9 over sums 0..4
    const uniform = new Float64Array(6).fill(1 / 3);
    const probs = await handle.forward(uniform);
    const expected = [1 / 9, 2 / 9, 3 / 9, 2 / 9, 1 / 9];
    probs.forEach((p, i) => expect(Math.abs(p - expected[i])).toBeLessThan(1e-12));
    await handle.release();
  });

  it("surfaces error codes for bad input and stale handles", async () => {
    await expect(client.compile("not a program", 3)).rejects.toMatchObject({
      code: Status.CompileError,
    });

    const handle = await client.compile(
      "input a(x: 0..1).\noutput q(y: 0..1).\nq(X) :- a(X).\n",
      2,
    );
    // wrong array length
    await expect(handle.forward(new Float64Array([0.5]))).rejects.toMatchObject({
      code: Status.LengthMismatch,
    });
    // backward before forward
    await expect(handle.backward(new Float64Array(2))).rejects.toMatchObject({
      code: Status.StaleState,
    });
    await handle.release();
    // released handle
    let released: unknown;
    try {
      await handle.forward(new Float64Array([0.5, 0.5]));
    } catch (err) {
      released = err;
    }
    expect(released).toBeInstanceOf(EngineError);
    expect((released as EngineError).code).toBe(Status.BadHandle);
    // double release
    await expect(handle.release()).rejects.toMatchObject({ code: Status.BadHandle });
  });

  it("keeps handles independent", async () => {
    const source = "input a(x: 0..1).\noutput q(y: 0..1).\nq(X) :- a(X).\n";
    const first = await client.compile(source, 2);
    const second = await client.compile(source, 2);
    await first.release();
    const out = await second.forward(new Float64Array([0.25, 0.75]));
    expect(out[0]).toBeCloseTo(0.25, 12);
    expect(out[1]).toBeCloseTo(0.75, 12);
    await second.release();
  });

  it("honors test-time k overrides", async () => {
    const handle = await client.compile(
      "input digit(img: 0..1, val: 0..2) exclusive val.\noutput sum(s: 0..4).\nsum(A + B) :- digit(0, A), digit(1, B).\n",
      3,
    );
    const env = new Float64Array([0.2, 0.5, 0.3, 0.1, 0.6, 0.3]);
    const atTrainK = await handle.forward(env);
    await handle.setTestK(1);
    const atK1 = await handle.forward(env);
    // top-1 keeps only the heaviest proof, so probabilities cannot grow
    for (let i = 0; i < atK1.length; i++) {
      expect(atK1[i]).toBeLessThanOrEqual(atTrainK[i] + 1e-15);
    }
    await handle.release();
  });
});
