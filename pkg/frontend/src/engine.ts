/**
 * Client for the nslogic engine boundary (`python3 -m nslogic.engine_stdio`).
 *
 * The wire protocol is a strict request/response stream of little-endian
 * frames (`u8 opcode | u32 len | payload` out, `u8 status | u32 len |
 * payload` back); fact and answer arrays are flat float64 in the engine's
 * grounding order, so results are bitwise identical to native calls.
 * Requests are serialized internally — callers may fire promises freely.
 */

import { spawn, type ChildProcessByStdio } from "node:child_process";
import type { Readable, Writable } from "node:stream";

type EngineProcess = ChildProcessByStdio<Writable, Readable, null>;

export enum Opcode {
  Compile = 1,
  FactNames = 2,
  OutputNames = 3,
  Forward = 4,
  Backward = 5,
  SetTestK = 6,
  Release = 7,
}

export enum Status {
  Ok = 0,
  CompileError = 1,
  BadHandle = 2,
  LengthMismatch = 3,
  StaleState = 4,
  Malformed = 5,
}

export class EngineError extends Error {
  constructor(
    readonly code: Status,
    message: string,
  ) {
    super(message);
    this.name = "EngineError";
  }
}

interface Pending {
  resolve(body: Buffer): void;
  reject(err: Error): void;
}

export class EngineClient {
  private readonly proc: EngineProcess;
  private buffer: Buffer = Buffer.alloc(0);
  private readonly pending: Pending[] = [];
  private chain: Promise<unknown> = Promise.resolve();
  private closed = false;

  private constructor(proc: EngineProcess) {
    this.proc = proc;
    proc.stdout.on("data", (chunk: Buffer) => this.onData(chunk));
    proc.on("exit", () => this.failAll(new Error("engine process exited")));
  }

  /** Spawn the engine subprocess (the nslogic package must be installed). */
  static start(python = process.env.NSLOGIC_PYTHON ?? "python3"): EngineClient {
    const proc = spawn(python, ["-m", "nslogic.engine_stdio"], {
      stdio: ["pipe", "pipe", "inherit"],
    });
    return new EngineClient(proc);
  }

  private onData(chunk: Buffer): void {
    this.buffer = this.buffer.length === 0 ? chunk : Buffer.concat([this.buffer, chunk]);
    while (this.buffer.length >= 5) {
      const status = this.buffer.readUInt8(0) as Status;
      const length = this.buffer.readUInt32LE(1);
      if (this.buffer.length < 5 + length) return;
      const body = this.buffer.subarray(5, 5 + length);
      this.buffer = this.buffer.subarray(5 + length);
      const waiter = this.pending.shift();
      if (!waiter) continue;
      if (status === Status.Ok) {
        waiter.resolve(Buffer.from(body));
      } else {
        waiter.reject(new EngineError(status, body.toString("utf-8")));
      }
    }
  }

  private failAll(err: Error): void {
    while (this.pending.length) this.pending.shift()!.reject(err);
  }

  request(opcode: Opcode, payload: Buffer): Promise<Buffer> {
    if (this.closed) return Promise.reject(new Error("client closed"));
    const result = this.chain.then(
      () =>
        new Promise<Buffer>((resolve, reject) => {
          this.pending.push({ resolve, reject });
          const header = Buffer.alloc(5);
          header.writeUInt8(opcode, 0);
          header.writeUInt32LE(payload.length, 1);
          this.proc.stdin.write(Buffer.concat([header, payload]));
        }),
    );
    this.chain = result.catch(() => undefined); // keep the queue moving on errors
    return result;
  }

  async compile(source: string, k: number): Promise<SessionHandle> {
    const text = Buffer.from(source, "utf-8");
    const payload = Buffer.alloc(4 + text.length);
    payload.writeUInt32LE(k, 0);
    text.copy(payload, 4);
    const body = await this.request(Opcode.Compile, payload);
    return new SessionHandle(this, body.readUInt32LE(0));
  }

  close(): void {
    if (!this.closed) {
      this.closed = true;
      this.proc.stdin.end();
    }
  }
}

function f64ToBuffer(values: Float64Array): Buffer {
  return Buffer.from(values.buffer, values.byteOffset, values.byteLength);
}

function bufferToF64(body: Buffer): Float64Array {
  const copy = Buffer.from(body); // align + detach from the stream buffer
  return new Float64Array(copy.buffer, copy.byteOffset, copy.length / 8);
}

export class SessionHandle {
  constructor(
    private readonly client: EngineClient,
    readonly id: number,
  ) {}

  private handlePayload(extra = 0): Buffer {
    const buf = Buffer.alloc(4 + extra);
    buf.writeUInt32LE(this.id, 0);
    return buf;
  }

  async factNames(): Promise<string[]> {
    const body = await this.client.request(Opcode.FactNames, this.handlePayload());
    return body.length ? body.toString("utf-8").split("\n") : [];
  }

  async outputNames(): Promise<string[]> {
    const body = await this.client.request(Opcode.OutputNames, this.handlePayload());
    return body.length ? body.toString("utf-8").split("\n") : [];
  }

  /** Fact probabilities in grounding order -> answer probabilities. */
  async forward(probs: Float64Array): Promise<Float64Array> {
    const payload = Buffer.concat([this.handlePayload(), f64ToBuffer(probs)]);
    return bufferToF64(await this.client.request(Opcode.Forward, payload));
  }

  /** Raw response bytes, for bitwise comparisons against native output. */
  async forwardBytes(probs: Float64Array): Promise<Buffer> {
    const payload = Buffer.concat([this.handlePayload(), f64ToBuffer(probs)]);
    return this.client.request(Opcode.Forward, payload);
  }

  /** Upstream loss gradient per answer -> gradient per input fact. */
  async backward(upstream: Float64Array): Promise<Float64Array> {
    const payload = Buffer.concat([this.handlePayload(), f64ToBuffer(upstream)]);
    return bufferToF64(await this.client.request(Opcode.Backward, payload));
  }

  async backwardBytes(upstream: Float64Array): Promise<Buffer> {
    const payload = Buffer.concat([this.handlePayload(), f64ToBuffer(upstream)]);
    return this.client.request(Opcode.Backward, payload);
  }

  async setTestK(k: number): Promise<void> {
    const payload = this.handlePayload(4);
    payload.writeUInt32LE(k, 4);
    await this.client.request(Opcode.SetTestK, payload);
  }

  async release(): Promise<void> {
    await this.client.request(Opcode.Release, this.handlePayload());
  }
}
