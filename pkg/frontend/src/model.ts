/**
 * A small two-layer perception model trained *through* the engine: the
 * symbolic program supplies answer probabilities and the gradient of the
 * loss w.r.t. every input fact, and this module backpropagates the rest
 * of the way into its own weights.  Mirrors the classic setup where an
 * external framework owns the perception parameters and the reasoner is
 * a differentiable layer in the middle.
 */

import type { SessionHandle } from "./engine.js";

export interface Sample {
  /** One feature vector per slot, values in [0, 1]. */
  features: Float64Array[];
  label: number;
}

const CLIP = 1e-12; // mirrors the engine-side BCE clip

function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a |= 0;
    a = (a + 0x6d2b79f5) | 0;
    let t = Math.imul(a ^ (a >>> 15), 1 | a);
    t = (t + Math.imul(t ^ (t >>> 7), 61 | t)) | 0;
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

class Matrix {
  readonly data: Float64Array;
  constructor(
    readonly rows: number,
    readonly cols: number,
    init?: () => number,
  ) {
    this.data = new Float64Array(rows * cols);
    if (init) for (let i = 0; i < this.data.length; i++) this.data[i] = init();
  }
}

function matvec(m: Matrix, x: Float64Array, out: Float64Array): void {
  for (let r = 0; r < m.rows; r++) {
    let acc = 0;
    const base = r * m.cols;
    for (let c = 0; c < m.cols; c++) acc += m.data[base + c] * x[c];
    out[r] = acc;
  }
}

export interface TrainOptions {
  lr: number;
  epochs: number;
  batchSize: number;
  momentum: number;
  seed: number;
}

/** Two affine layers with tanh between; softmax per slot over the classes. */
export class SlotModel {
  readonly w1: Matrix;
  readonly b1: Float64Array;
  readonly w2: Matrix;
  readonly b2: Float64Array;

  constructor(
    readonly inDim: number,
    readonly hidden: number,
    readonly classes: number,
    readonly slots: number,
    seed = 0,
  ) {
    const rand = mulberry32(seed + 1);
    const init = (fanIn: number) => () => ((rand() * 2 - 1) / Math.sqrt(fanIn));
    this.w1 = new Matrix(hidden, inDim, init(inDim));
    this.b1 = new Float64Array(hidden);
    this.w2 = new Matrix(classes, hidden, init(hidden));
    this.b2 = new Float64Array(classes);
  }

  /** Per-slot softmax probabilities, concatenated in slot order. */
  factProbs(sample: Sample): { probs: Float64Array; hiddens: Float64Array[] } {
    const probs = new Float64Array(this.slots * this.classes);
    const hiddens: Float64Array[] = [];
    const z1 = new Float64Array(this.hidden);
    const z2 = new Float64Array(this.classes);
    for (let s = 0; s < this.slots; s++) {
      matvec(this.w1, sample.features[s], z1);
      const h = new Float64Array(this.hidden);
      for (let i = 0; i < this.hidden; i++) h[i] = Math.tanh(z1[i] + this.b1[i]);
      hiddens.push(h);
      matvec(this.w2, h, z2);
      let max = -Infinity;
      for (let i = 0; i < this.classes; i++) {
        z2[i] += this.b2[i];
        if (z2[i] > max) max = z2[i];
      }
      let total = 0;
      for (let i = 0; i < this.classes; i++) {
        z2[i] = Math.exp(z2[i] - max);
        total += z2[i];
      }
      for (let i = 0; i < this.classes; i++) probs[s * this.classes + i] = z2[i] / total;
    }
    return { probs, hiddens };
  }

  gradients(): Float64Array[] {
    return [
      new Float64Array(this.w1.data.length),
      new Float64Array(this.b1.length),
      new Float64Array(this.w2.data.length),
      new Float64Array(this.b2.length),
    ];
  }

  parameters(): Float64Array[] {
    return [this.w1.data, this.b1, this.w2.data, this.b2];
  }

  /** Accumulate parameter gradients given dLoss/dFactProb for one sample. */
  accumulate(sample: Sample, cache: { probs: Float64Array; hiddens: Float64Array[] }, gradFacts: Float64Array, grads: Float64Array[]): void {
    const [gw1, gb1, gw2, gb2] = grads;
    for (let s = 0; s < this.slots; s++) {
      const q = cache.probs.subarray(s * this.classes, (s + 1) * this.classes);
      const g = gradFacts.subarray(s * this.classes, (s + 1) * this.classes);
      // softmax backward: dz = q * (g - <g, q>)
      let dot = 0;
      for (let i = 0; i < this.classes; i++) dot += g[i] * q[i];
      const dz2 = new Float64Array(this.classes);
      for (let i = 0; i < this.classes; i++) dz2[i] = q[i] * (g[i] - dot);
      const h = cache.hiddens[s];
      const dh = new Float64Array(this.hidden);
      for (let r = 0; r < this.classes; r++) {
        const base = r * this.hidden;
        for (let c = 0; c < this.hidden; c++) {
          gw2[base + c] += dz2[r] * h[c];
          dh[c] += this.w2.data[base + c] * dz2[r];
        }
        gb2[r] += dz2[r];
      }
      const x = sample.features[s];
      for (let r = 0; r < this.hidden; r++) {
        const dz1 = dh[r] * (1 - h[r] * h[r]);
        const base = r * this.inDim;
        for (let c = 0; c < this.inDim; c++) gw1[base + c] += dz1 * x[c];
        gb1[r] += dz1;
      }
    }
  }
}

/** Binary cross entropy against a one-hot target over the answers. */
export function bceLossGrad(answerProbs: Float64Array, label: number): { loss: number; grad: Float64Array } {
  let loss = 0;
  const grad = new Float64Array(answerProbs.length);
  for (let i = 0; i < answerProbs.length; i++) {
    const raw = answerProbs[i];
    const q = Math.min(Math.max(raw, CLIP), 1 - CLIP);
    const y = i === label ? 1 : 0;
    loss -= y * Math.log(q) + (1 - y) * Math.log(1 - q);
    grad[i] = raw > CLIP && raw < 1 - CLIP ? (q - y) / (q * (1 - q)) : 0;
  }
  return { loss, grad };
}

export async function trainThroughEngine(
  model: SlotModel,
  session: SessionHandle,
  dataset: Sample[],
  opts: TrainOptions,
): Promise<number[]> {
  const params = model.parameters();
  const velocity = params.map((p) => new Float64Array(p.length));
  const rand = mulberry32(opts.seed + 77);
  const curve: number[] = [];
  for (let epoch = 0; epoch < opts.epochs; epoch++) {
    const order = dataset.map((_, i) => i);
    for (let i = order.length - 1; i > 0; i--) {
      const j = Math.floor(rand() * (i + 1));
      [order[i], order[j]] = [order[j], order[i]];
    }
    let epochLoss = 0;
    for (let start = 0; start < order.length; start += opts.batchSize) {
      const batch = order.slice(start, start + opts.batchSize);
      const grads = model.gradients();
      for (const idx of batch) {
        const sample = dataset[idx];
        const cache = model.factProbs(sample);
        const answerProbs = await session.forward(cache.probs);
        const { loss, grad } = bceLossGrad(answerProbs, sample.label);
        epochLoss += loss;
        const gradFacts = await session.backward(grad);
        model.accumulate(sample, cache, gradFacts, grads);
      }
      const scale = opts.lr / batch.length;
      params.forEach((p, pi) => {
        const v = velocity[pi];
        const g = grads[pi];
        for (let i = 0; i < p.length; i++) {
          v[i] = opts.momentum * v[i] - scale * g[i];
          p[i] += v[i];
        }
      });
    }
    curve.push(epochLoss / dataset.length);
  }
  return curve;
}

export async function accuracyThroughEngine(model: SlotModel, session: SessionHandle, dataset: Sample[]): Promise<number> {
  let correct = 0;
  for (const sample of dataset) {
    const { probs } = model.factProbs(sample);
    const answers = await session.forward(probs);
    let best = 0;
    for (let i = 1; i < answers.length; i++) if (answers[i] > answers[best]) best = i;
    if (best === sample.label) correct++;
  }
  return correct / dataset.length;
}
