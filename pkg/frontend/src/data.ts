/** Fixture loaders: the JSONL boundary cases and the flattened-feature
 * CSV datasets emitted by `python3 -m nslogic.boundary_fixtures`. */

import { readFileSync } from "node:fs";
import type { Sample } from "./model.js";

export interface BoundaryProgram {
  text: string;
  k: number;
}

export interface BoundaryCase {
  program: number;
  env: Buffer;
  forward: Buffer;
  upstream: Buffer;
  backward: Buffer;
}

export function loadBoundaryCases(path: string): { programs: BoundaryProgram[]; cases: BoundaryCase[] } {
  const lines = readFileSync(path, "utf-8").trim().split("\n");
  const head = JSON.parse(lines[0]) as { programs: BoundaryProgram[] };
  const cases = lines.slice(1).map((line) => {
    const row = JSON.parse(line) as Record<string, string | number>;
    return {
      program: row.program as number,
      env: Buffer.from(row.env as string, "base64"),
      forward: Buffer.from(row.forward as string, "base64"),
      upstream: Buffer.from(row.upstream as string, "base64"),
      backward: Buffer.from(row.backward as string, "base64"),
    };
  });
  return { programs: head.programs, cases };
}

export function toF64(buf: Buffer): Float64Array {
  const copy = Buffer.from(buf);
  return new Float64Array(copy.buffer, copy.byteOffset, copy.length / 8);
}

/** CSV with header f0,...,fn,label; features reshaped into `slots` rows. */
export function loadCsvDataset(path: string, slots: number): Sample[] {
  const lines = readFileSync(path, "utf-8").trim().split("\n");
  const header = lines[0].split(",");
  const nFeatures = header.length - 1;
  if (header[nFeatures] !== "label") throw new Error(`${path}: expected trailing label column`);
  const perSlot = nFeatures / slots;
  if (!Number.isInteger(perSlot)) throw new Error(`${path}: ${nFeatures} features not divisible into ${slots} slots`);
  return lines.slice(1).map((line) => {
    const parts = line.split(",");
    const features: Float64Array[] = [];
    for (let s = 0; s < slots; s++) {
      const slot = new Float64Array(perSlot);
      for (let i = 0; i < perSlot; i++) slot[i] = Number(parts[s * perSlot + i]);
      features.push(slot);
    }
    return { features, label: Number(parts[nFeatures]) };
  });
}

export interface TrainMeta {
  program: string;
  k: number;
  slots: number;
  feature_dim: number;
  classes: number;
  n_answers: number;
  native_accuracy: number;
  train: { lr: number; epochs: number; batch_size: number; seed: number; hidden: number };
}

export function loadTrainMeta(path: string): TrainMeta {
  return JSON.parse(readFileSync(path, "utf-8")) as TrainMeta;
}
