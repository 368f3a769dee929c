"""Desk-scale perception models and end-to-end training.

A `PerceptionModel` is a small affine stack with tanh nonlinearities,
applied independently to each feature slot of a sample.  In `nesy` mode
the final layer emits logits for the grounded input facts of one slot,
squashed per head (softmax over an exclusion group, sigmoid for free
facts); training backpropagates through the reasoner's output
probabilities.  In `nn` mode the per-slot embeddings feed a classifier
head over the answer classes directly.  Everything is float64 numpy with
explicit backward passes so pipeline gradients can be checked against
finite differences.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .provenance import FactSpace, ProbAssignment

# Deep conjunctive programs start with tiny answer probabilities (a product
# of six 24-way softmax factors is ~4e-9); the clip must sit well below
# them or BCE loses its gradient exactly where learning has to start.
CLIP_EPS = 1e-12


class TrainingDiverged(Exception):
    pass


@dataclass(frozen=True)
class Head:
    kind: str  # 'softmax' | 'sigmoid'
    size: int

    def __post_init__(self):
        if self.kind not in ("softmax", "sigmoid"):
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.size < 1:
            raise ValueError("head size must be positive")


@dataclass
class Sample:
    """One labelled example: `features` has shape (slots, feature_dim) with
    values in [0, 1]; `label` indexes the task's class list."""

    features: np.ndarray
    label: int
    group: str | None = None
    true_facts: tuple | None = None


@dataclass
class TrainConfig:
    lr: float = 0.05
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    momentum: float = 0.9
    loss: str = "auto"  # bce (nesy) or ce (nn)
    shuffle: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")


def _init_layer(rng, n_in, n_out):
    bound = 1.0 / np.sqrt(n_in)
    w = rng.uniform(-bound, bound, size=(n_out, n_in))
    b = rng.uniform(-bound, bound, size=n_out)
    return [w, b]


class PerceptionModel:
    """Affine stack shared across slots, plus mode-specific output heads."""

    def __init__(self, mode, backbone, heads=(), classifier=(), slots=1):
        if mode not in ("nesy", "nn"):
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.backbone = backbone  # [[W, b], ...]; final layer emits logits
        self.heads = list(heads)
        self.classifier = list(classifier)
        self.slots = slots

    # -- construction --------------------------------------------------------

    @classmethod
    def build(cls, mode, in_dim, slots, heads=None, n_classes=None, hidden=32, seed=0):
        rng = np.random.default_rng(seed)
        if mode == "nesy":
            fact_dim = sum(h.size for h in heads)
            backbone = [_init_layer(rng, in_dim, hidden), _init_layer(rng, hidden, fact_dim)]
            return cls("nesy", backbone, heads=heads, slots=slots)
        backbone = [_init_layer(rng, in_dim, hidden)]
        classifier = [
            _init_layer(rng, hidden * slots, hidden),
            _init_layer(rng, hidden, n_classes),
        ]
        return cls("nn", backbone, classifier=classifier, slots=slots)

    def parameters(self):
        for layer in self.backbone:
            yield from layer
        for layer in self.classifier:
            yield from layer

    @property
    def fact_dim(self):
        return sum(h.size for h in self.heads)

    # -- forward -------------------------------------------------------------

    def _stack_forward(self, layers, x, final_linear):
        """Run an affine stack; tanh between layers (and after the last one
        unless `final_linear`).  Returns activations for backward."""
        acts = [x]
        for i, (w, b) in enumerate(layers):
            z = w @ acts[-1] + b
            if i < len(layers) - 1 or not final_linear:
                z = np.tanh(z)
            acts.append(z)
        return acts

    def _stack_backward(self, layers, acts, grad_out, final_linear):
        grads = []
        g = grad_out
        for i in range(len(layers) - 1, -1, -1):
            w, _ = layers[i]
            out = acts[i + 1]
            if i < len(layers) - 1 or not final_linear:
                g = g * (1.0 - out * out)  # tanh'
            grads.append((np.outer(g, acts[i]), g.copy()))
            g = w.T @ g
        grads.reverse()
        return grads, g  # per-layer (dW, db) and gradient w.r.t. the input

    def _apply_heads(self, logits):
        probs = np.empty_like(logits)
        off = 0
        for h in self.heads:
            z = logits[off : off + h.size]
            if h.kind == "softmax":
                e = np.exp(z - z.max())
                probs[off : off + h.size] = e / e.sum()
            else:
                probs[off : off + h.size] = 1.0 / (1.0 + np.exp(-z))
            off += h.size
        return probs

    def _heads_backward(self, probs, grad_probs):
        grad_logits = np.empty_like(grad_probs)
        off = 0
        for h in self.heads:
            q = probs[off : off + h.size]
            g = grad_probs[off : off + h.size]
            if h.kind == "softmax":
                grad_logits[off : off + h.size] = q * (g - float(g @ q))
            else:
                grad_logits[off : off + h.size] = g * q * (1.0 - q)
            off += h.size
        return grad_logits

    def fact_probs(self, features):
        """NESY forward: per-slot fact probabilities, concatenated in slot
        order (matching the grounding's fact order).  Returns (probs, cache)."""
        caches = []
        chunks = []
        for s in range(self.slots):
            acts = self._stack_forward(self.backbone, np.asarray(features[s], dtype=np.float64), True)
            probs = self._apply_heads(acts[-1])
            caches.append((acts, probs))
            chunks.append(probs)
        return np.concatenate(chunks), caches

    def fact_probs_backward(self, caches, grad_probs):
        """Gradient of a scalar loss w.r.t. parameters and input features,
        given d loss / d fact-probabilities."""
        param_grads = [np.zeros_like(p) for p in self.parameters()]
        input_grads = []
        dim = self.fact_dim
        for s in range(self.slots):
            acts, probs = caches[s]
            g_logits = self._heads_backward(probs, grad_probs[s * dim : (s + 1) * dim])
            layer_grads, g_in = self._stack_backward(self.backbone, acts, g_logits, True)
            input_grads.append(g_in)
            i = 0
            for dw, db in layer_grads:
                param_grads[i] += dw
                param_grads[i + 1] += db
                i += 2
        return param_grads, np.stack(input_grads)

    def class_probs(self, features):
        """NN forward: softmax over answer classes.  Returns (probs, cache)."""
        slot_acts = []
        embeds = []
        for s in range(self.slots):
            acts = self._stack_forward(self.backbone, np.asarray(features[s], dtype=np.float64), False)
            slot_acts.append(acts)
            embeds.append(acts[-1])
        joint = np.concatenate(embeds)
        cls_acts = self._stack_forward(self.classifier, joint, True)
        logits = cls_acts[-1]
        e = np.exp(logits - logits.max())
        probs = e / e.sum()
        return probs, (slot_acts, cls_acts, probs)

    def class_probs_backward(self, cache, grad_logits):
        slot_acts, cls_acts, _ = cache
        n_backbone = 2 * len(self.backbone)
        param_grads = [np.zeros_like(p) for p in self.parameters()]
        cls_grads, g_joint = self._stack_backward(self.classifier, cls_acts, grad_logits, True)
        i = n_backbone
        for dw, db in cls_grads:
            param_grads[i] += dw
            param_grads[i + 1] += db
            i += 2
        hidden = len(g_joint) // self.slots
        input_grads = []
        for s in range(self.slots):
            layer_grads, g_in = self._stack_backward(
                self.backbone, slot_acts[s], g_joint[s * hidden : (s + 1) * hidden], False
            )
            input_grads.append(g_in)
            i = 0
            for dw, db in layer_grads:
                param_grads[i] += dw
                param_grads[i + 1] += db
                i += 2
        return param_grads, np.stack(input_grads)


def perceive(model: PerceptionModel, sample: Sample, space: FactSpace) -> ProbAssignment:
    """Map one sample's features to input-fact probabilities."""
    if model.mode != "nesy":
        raise ValueError("perceive requires a NESY-mode model")
    probs, _ = model.fact_probs(sample.features)
    if len(probs) != space.n:
        raise ValueError(f"model emits {len(probs)} facts, grounding has {space.n}")
    return ProbAssignment(space, probs, normalized=bool(space.groups))


# ---------------------------------------------------------------------------
# Losses.  NESY uses binary cross entropy against the (possibly
# sub-normalized) answer distribution; NN uses plain cross entropy.


def bce_loss_grad(probs, target):
    q = np.clip(probs, CLIP_EPS, 1.0 - CLIP_EPS)
    loss = -float(np.sum(target * np.log(q) + (1.0 - target) * np.log(1.0 - q)))
    inside = (probs > CLIP_EPS) & (probs < 1.0 - CLIP_EPS)
    grad = np.where(inside, (q - target) / (q * (1.0 - q)), 0.0)
    return loss, grad


def ce_loss_grad(probs, label):
    q = max(float(probs[label]), CLIP_EPS)
    loss = -float(np.log(q))
    grad_logits = probs.copy()
    grad_logits[label] -= 1.0
    return loss, grad_logits


def _nesy_target(n_answers, label):
    t = np.zeros(n_answers)
    t[label] = 1.0
    return t


def nesy_sample_grads(model, session, sample, binary=False):
    """Loss and parameter/input gradients for one sample through the full
    perception -> reasoner -> BCE pipeline."""
    probs, caches = model.fact_probs(sample.features)
    if not np.all(np.isfinite(probs)):
        raise TrainingDiverged("model emitted non-finite fact probabilities")
    env = ProbAssignment(session.space, probs, normalized=bool(session.space.groups))
    out = session.forward(env)
    if binary:
        target = np.array([float(sample.label)])
    else:
        target = _nesy_target(len(out.answers), sample.label)
    loss, grad_q = bce_loss_grad(out.probs, target)
    upstream = {a: float(g) for a, g in zip(out.answers, grad_q) if g != 0.0}
    grad_facts = session.backward(env, upstream, forward=out)
    param_grads, input_grads = model.fact_probs_backward(caches, grad_facts)
    return loss, param_grads, input_grads, out


def nn_sample_grads(model, sample):
    probs, cache = model.class_probs(sample.features)
    if not np.all(np.isfinite(probs)):
        raise TrainingDiverged("model emitted non-finite class probabilities")
    loss, grad_logits = ce_loss_grad(probs, sample.label)
    param_grads, input_grads = model.class_probs_backward(cache, grad_logits)
    return loss, param_grads, input_grads, probs


def train(model: PerceptionModel, session, dataset, config: TrainConfig):
    """Gradient descent with optional momentum; deterministic given seed and
    dataset order.  `session` must be provided iff the model is NESY-mode.
    Returns the per-epoch mean loss curve (the model is updated in place)."""
    if not dataset:
        raise ValueError("dataset is empty")
    if (session is None) == (model.mode == "nesy"):
        raise ValueError("session required exactly for NESY-mode training")
    binary = model.mode == "nesy" and session.answers == [()]
    params = list(model.parameters())
    velocity = [np.zeros_like(p) for p in params]
    rng = np.random.default_rng(config.seed)
    curve = []
    for _ in range(config.epochs):
        order = rng.permutation(len(dataset)) if config.shuffle else np.arange(len(dataset))
        epoch_loss = 0.0
        for start in range(0, len(dataset), config.batch_size):
            batch = [dataset[i] for i in order[start : start + config.batch_size]]
            grads = [np.zeros_like(p) for p in params]
            batch_loss = 0.0
            for sample in batch:
                if model.mode == "nesy":
                    loss, pgrads, _, _ = nesy_sample_grads(model, session, sample, binary)
                else:
                    loss, pgrads, _, _ = nn_sample_grads(model, sample)
                batch_loss += loss
                for g, pg in zip(grads, pgrads):
                    g += pg
            if not np.isfinite(batch_loss):
                raise TrainingDiverged(f"non-finite loss {batch_loss!r}")
            scale = 1.0 / len(batch)
            for p, v, g in zip(params, velocity, grads):
                v *= config.momentum
                v -= config.lr * scale * g
                p += v
            epoch_loss += batch_loss
        curve.append(epoch_loss / len(dataset))
    return curve


def finite_diff_check(model, session, sample, epsilon=1e-4, n_coords=50, seed=0):
    """Compare the analytic pipeline gradient against central differences on
    a random subset of parameter coordinates; returns the max relative error.
    Coordinates where both sides are below 1e-12 count as zero error."""
    binary = session.answers == [()]

    def loss_of():
        probs, _ = model.fact_probs(sample.features)
        env = ProbAssignment(session.space, probs, normalized=bool(session.space.groups))
        out = session.forward(env)
        target = np.array([float(sample.label)]) if binary else _nesy_target(len(out.answers), sample.label)
        loss, _ = bce_loss_grad(out.probs, target)
        return loss

    _, param_grads, _, _ = nesy_sample_grads(model, session, sample, binary)
    params = list(model.parameters())
    rng = np.random.default_rng(seed)
    flat = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    picks = rng.choice(len(flat), size=min(n_coords, len(flat)), replace=False)
    worst = 0.0
    for pick in picks:
        i, j = flat[int(pick)]
        view = params[i].reshape(-1)
        saved = view[j]
        view[j] = saved + epsilon
        hi = loss_of()
        view[j] = saved - epsilon
        lo = loss_of()
        view[j] = saved
        fd = (hi - lo) / (2 * epsilon)
        an = param_grads[i].reshape(-1)[j]
        if abs(fd) < 1e-12 and abs(an) < 1e-12:
            continue
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst


class Pipeline:
    """Uniform prediction/gradient surface over a trained model, with the
    reasoner in the loop for NESY mode.

    Confidence is the probability of the predicted answer; for NESY this is
    the raw (possibly sub-normalized) output unless `normalize` is set.
    Binary tasks (nullary query) threshold the single success probability
    at 0.5.
    """

    def __init__(self, model: PerceptionModel, session=None, normalize=False):
        if (session is None) != (model.mode == "nn"):
            raise ValueError("session required exactly for NESY-mode pipelines")
        self.model = model
        self.session = session
        self.normalize = normalize
        self.binary = session is not None and session.answers == [()]

    @property
    def n_classes(self):
        if self.model.mode == "nn":
            return self.model.classifier[-1][0].shape[0]
        return 2 if self.binary else len(self.session.answers)

    def answer_probs(self, sample):
        if self.model.mode == "nn":
            probs, _ = self.model.class_probs(sample.features)
            return probs
        env = perceive(self.model, sample, self.session.space)
        return self.session.forward(env).probs

    def predict(self, sample):
        """Returns (predicted label index, confidence)."""
        probs = self.answer_probs(sample)
        if self.binary:
            p = float(probs[0])
            pred = int(p >= 0.5)
            return pred, p if pred else 1.0 - p
        pred = int(np.argmax(probs))
        conf = float(probs[pred])
        if self.normalize and self.model.mode == "nesy":
            total = float(probs.sum())
            conf = conf / total if total > 0 else 0.0
        return pred, min(conf, 1.0)

    def loss_and_input_grad(self, sample):
        """True-label loss and its gradient w.r.t. the sample features."""
        if self.model.mode == "nn":
            loss, _, input_grads, _ = nn_sample_grads(self.model, sample)
        else:
            loss, _, input_grads, _ = nesy_sample_grads(self.model, self.session, sample, self.binary)
        return loss, input_grads


# ---------------------------------------------------------------------------
# Checkpoints: little-endian binary, magic "NSLC", version 1.  Layout:
# mode byte (0=nn, 1=nesy), slots u32, heads (count u32, then kind byte +
# size u32 each), then backbone and classifier stacks (count u32, then
# rows u32 x cols u32 + row-major float64 W + float64 b per layer).

_MAGIC = b"NSLC"
_VERSION = 1


def _write_stack(fh, layers):
    fh.write(struct.pack("<I", len(layers)))
    for w, b in layers:
        fh.write(struct.pack("<II", w.shape[0], w.shape[1]))
        fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def _read_stack(fh):
    (count,) = struct.unpack("<I", fh.read(4))
    layers = []
    for _ in range(count):
        rows, cols = struct.unpack("<II", fh.read(8))
        w = np.frombuffer(fh.read(8 * rows * cols), dtype="<f8").reshape(rows, cols).copy()
        b = np.frombuffer(fh.read(8 * rows), dtype="<f8").copy()
        layers.append([w, b])
    return layers


def save_model(model: PerceptionModel, path):
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<BI", 1 if model.mode == "nesy" else 0, model.slots))
        fh.write(struct.pack("<I", len(model.heads)))
        for h in model.heads:
            fh.write(struct.pack("<BI", 1 if h.kind == "softmax" else 0, h.size))
        _write_stack(fh, model.backbone)
        _write_stack(fh, model.classifier)


def load_model(path) -> PerceptionModel:
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a model checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        mode_byte, slots = struct.unpack("<BI", fh.read(5))
        (n_heads,) = struct.unpack("<I", fh.read(4))
        heads = []
        for _ in range(n_heads):
            kind, size = struct.unpack("<BI", fh.read(5))
            heads.append(Head("softmax" if kind else "sigmoid", size))
        backbone = _read_stack(fh)
        classifier = _read_stack(fh)
    return PerceptionModel(
        "nesy" if mode_byte else "nn", backbone, heads=heads, classifier=classifier, slots=slots
    )
