"""Assurance metrics and stress evaluation.

Calibration (ECE/MCE over equal-width confidence bins), adversarial
degradation (ASR via projected gradient descent through the full
differentiable pipeline), corruption degradation (CSR over an in-repo
transform suite), user-performance disparity over majority/minority
meta-groups, and the symbolic-shortcut inspector (cross-input fact
variance and top-m activation overlap).  All computations are pure and
deterministic given seeds; per-sample records are kept so every aggregate
can be recomputed for audit.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .perception import Pipeline, perceive

# ---------------------------------------------------------------------------
# Calibration.


@dataclass
class CalibrationBins:
    """Equal-width confidence bins accumulating (confidence, correctness)."""

    bins: int = 15
    conf_sum: np.ndarray = field(default=None)
    acc_sum: np.ndarray = field(default=None)
    count: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.bins < 1:
            raise ValueError("need at least one bin")
        self.conf_sum = np.zeros(self.bins)
        self.acc_sum = np.zeros(self.bins)
        self.count = np.zeros(self.bins, dtype=np.int64)

    def add(self, confidence, correct):
        b = min(int(confidence * self.bins), self.bins - 1)
        self.conf_sum[b] += confidence
        self.acc_sum[b] += bool(correct)
        self.count[b] += 1

    def expected_error(self):
        n = self.count.sum()
        if n == 0:
            raise ValueError("no observations")
        mask = self.count > 0
        gap = np.abs(self.acc_sum[mask] / self.count[mask] - self.conf_sum[mask] / self.count[mask])
        return float((self.count[mask] / n * gap).sum())

    def max_error(self):
        if self.count.sum() == 0:
            raise ValueError("no observations")
        mask = self.count > 0
        gap = np.abs(self.acc_sum[mask] / self.count[mask] - self.conf_sum[mask] / self.count[mask])
        return float(gap.max())


def _fill_bins(confidences, correct, bins):
    confidences = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correct)
    if confidences.size == 0 or confidences.size != correct.size:
        raise ValueError("need equal-length nonempty confidence/correctness lists")
    if confidences.min() < 0 or confidences.max() > 1:
        raise ValueError("confidences must lie in [0, 1]")
    cb = CalibrationBins(bins)
    for c, ok in zip(confidences, correct):
        cb.add(float(c), bool(ok))
    return cb


def ece(confidences, correct, bins=15):
    """Expected calibration error: the count-weighted average of the
    absolute accuracy/confidence gap across bins."""
    return _fill_bins(confidences, correct, bins).expected_error()


def mce(confidences, correct, bins=15):
    """Maximum calibration error: the worst bin's absolute gap."""
    return _fill_bins(confidences, correct, bins).max_error()


# ---------------------------------------------------------------------------
# Degradation rates and parity.


def asr(acc, acc_adv):
    """Fraction of accuracy degraded by the attack; negative when the
    attack helps, and reported raw either way."""
    if acc <= 0:
        raise ValueError("adversarial success rate undefined at zero accuracy")
    return (acc - acc_adv) / acc


def csr(acc, acc_cor):
    """Fraction of accuracy lost under corruption (mean over a suite)."""
    if acc <= 0:
        raise ValueError("corruption success rate undefined at zero accuracy")
    if np.ndim(acc_cor) > 0:
        return float(np.mean([(acc - a) / acc for a in acc_cor]))
    return (acc - acc_cor) / acc


def meta_split(group_counts):
    """Greedy majority/minority split: groups sorted by sample count
    (descending, ties by name) are taken until they cover at least half of
    all samples; those form the majority meta-group."""
    if not group_counts:
        raise ValueError("no groups")
    total = sum(group_counts.values())
    majority = set()
    covered = 0
    for g in sorted(group_counts, key=lambda g: (-group_counts[g], str(g))):
        if covered >= total / 2:
            break
        majority.add(g)
        covered += group_counts[g]
    minority = set(group_counts) - majority
    return majority, minority


def disparity(per_group, majority=None):
    """Absolute gap between sample-weighted majority and minority accuracy.

    `per_group` maps group -> (n_correct, n_total).  When `majority` is not
    given it is derived from the group sizes via `meta_split`.
    """
    if majority is None:
        majority, _ = meta_split({g: t for g, (_, t) in per_group.items()})
    maj_c = sum(c for g, (c, t) in per_group.items() if g in majority)
    maj_t = sum(t for g, (c, t) in per_group.items() if g in majority)
    min_c = sum(c for g, (c, t) in per_group.items() if g not in majority)
    min_t = sum(t for g, (c, t) in per_group.items() if g not in majority)
    if maj_t == 0 or min_t == 0:
        raise ValueError("a meta-group has no samples")
    return abs(maj_c / maj_t - min_c / min_t)


# ---------------------------------------------------------------------------
# Evaluation records.


@dataclass
class Record:
    index: int
    label: int
    pred: int
    confidence: float
    correct: bool
    group: str | None = None


def evaluate(pipeline: Pipeline, dataset):
    """Per-sample predictions for one dataset; aggregates recompute from
    these records exactly."""
    records = []
    for i, sample in enumerate(dataset):
        pred, conf = pipeline.predict(sample)
        records.append(Record(i, sample.label, pred, conf, pred == sample.label, sample.group))
    return records


def accuracy_of(records):
    if not records:
        raise ValueError("no records")
    return sum(r.correct for r in records) / len(records)


def calibration_of(records, bins=15):
    return (
        ece([r.confidence for r in records], [r.correct for r in records], bins),
        mce([r.confidence for r in records], [r.correct for r in records], bins),
    )


def per_group_of(records):
    out = {}
    for r in records:
        if r.group is None:
            continue
        c, t = out.get(r.group, (0, 0))
        out[r.group] = (c + r.correct, t + 1)
    return out


# ---------------------------------------------------------------------------
# Projected gradient descent (L-infinity).


@dataclass
class AttackConfig:
    epsilon: float
    steps: int
    step_size: float | None = None  # default 2.5 * epsilon / steps
    random_start: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")

    @property
    def alpha(self):
        return self.step_size if self.step_size is not None else 2.5 * self.epsilon / self.steps


@dataclass
class AttackResult:
    adversarial: np.ndarray
    pred_clean: int
    pred_adv: int
    conf_adv: float
    loss_clean: float
    loss_adv: float
    failed: str | None = None  # diagnostic when the sample was aborted


def pgd_attack(pipeline: Pipeline, sample, config: AttackConfig, seed=0) -> AttackResult:
    """Iterated sign-gradient ascent on the true-label loss, projected into
    the epsilon ball around the input intersected with [0, 1]^d."""
    from .perception import Sample  # local import to avoid cycles at load

    x0 = np.asarray(sample.features, dtype=np.float64)
    pred_clean, _ = pipeline.predict(sample)
    loss_clean, _ = pipeline.loss_and_input_grad(sample)
    rng = np.random.default_rng(seed)
    if config.random_start and config.epsilon > 0:
        x = x0 + rng.uniform(-config.epsilon, config.epsilon, size=x0.shape)
    else:
        x = x0.copy()
    x = np.clip(np.clip(x, x0 - config.epsilon, x0 + config.epsilon), 0.0, 1.0)
    for _ in range(config.steps):
        probe = Sample(x, sample.label, group=sample.group)
        _, grad = pipeline.loss_and_input_grad(probe)
        if not np.all(np.isfinite(grad)):
            return AttackResult(x0, pred_clean, pred_clean, 0.0, loss_clean, loss_clean, failed="non-finite gradient")
        x = x + config.alpha * np.sign(grad)
        x = np.clip(np.clip(x, x0 - config.epsilon, x0 + config.epsilon), 0.0, 1.0)
    adv = Sample(x, sample.label, group=sample.group)
    pred_adv, conf_adv = pipeline.predict(adv)
    loss_adv, _ = pipeline.loss_and_input_grad(adv)
    return AttackResult(x, pred_clean, pred_adv, conf_adv, loss_clean, loss_adv)


def attack_sweep(pipeline, dataset, config, seed=0):
    """Attack every sample; returns (adversarial records, results)."""
    records = []
    results = []
    for i, sample in enumerate(dataset):
        res = pgd_attack(pipeline, sample, config, seed=seed + i)
        results.append(res)
        records.append(Record(i, sample.label, res.pred_adv, res.conf_adv, res.pred_adv == sample.label, sample.group))
    return records, results


# ---------------------------------------------------------------------------
# Corruption transforms (MNIST-C/CIFAR-10-C stand-ins, 5 severities each).

CORRUPTION_KINDS = ("gaussian-noise", "rotation", "occlusion", "brightness")

_NOISE_SIGMA = (0.04, 0.08, 0.14, 0.22, 0.32)
_ROT_DEGREES = (5.0, 10.0, 20.0, 45.0, 90.0)
_OCCLUSION_FRACTION = (0.15, 0.25, 0.35, 0.45, 0.55)
_BRIGHTNESS_SHIFT = (0.1, 0.2, 0.3, 0.4, 0.5)


@dataclass
class CorruptionConfig:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ValueError("severity must be in 1..5")


def _rotate_square(vec, degrees):
    side = int(round(np.sqrt(vec.size)))
    if side * side != vec.size:
        raise ValueError("rotation needs square images")
    img = vec.reshape(side, side)
    if degrees % 90 == 0:
        out = np.rot90(img, int(degrees // 90) % 4)
    else:
        out = ndimage.rotate(img, degrees, reshape=False, order=1, mode="nearest")
    return out.reshape(-1)


def corrupt(sample, config: CorruptionConfig, salt=0):
    """Deterministic corruption of one sample, clipped to [0, 1]."""
    from .perception import Sample

    feats = np.asarray(sample.features, dtype=np.float64).copy()
    rng = np.random.default_rng((config.seed, config.severity, salt))
    for s in range(feats.shape[0]):
        if config.kind == "gaussian-noise":
            feats[s] += rng.normal(0.0, _NOISE_SIGMA[config.severity - 1], feats[s].shape)
        elif config.kind == "rotation":
            feats[s] = _rotate_square(feats[s], _ROT_DEGREES[config.severity - 1])
        elif config.kind == "occlusion":
            side = int(round(np.sqrt(feats[s].size)))
            if side * side != feats[s].size:
                raise ValueError("occlusion needs square images")
            patch = max(1, int(round(side * _OCCLUSION_FRACTION[config.severity - 1])))
            r = int(rng.integers(0, side - patch + 1))
            c = int(rng.integers(0, side - patch + 1))
            img = feats[s].reshape(side, side)
            img[r : r + patch, c : c + patch] = 0.0
            feats[s] = img.reshape(-1)
        else:  # brightness
            feats[s] += _BRIGHTNESS_SHIFT[config.severity - 1]
    np.clip(feats, 0.0, 1.0, out=feats)
    return Sample(feats, sample.label, group=sample.group, true_facts=sample.true_facts)


def corruption_sweep(pipeline, dataset, kinds=CORRUPTION_KINDS, severities=(1, 2, 3, 4, 5), seed=0):
    """Accuracy per (kind, severity) condition over the suite."""
    conditions = {}
    for kind in kinds:
        for severity in severities:
            cfg = CorruptionConfig(kind, severity, seed)
            correct = 0
            for i, sample in enumerate(dataset):
                pred, _ = pipeline.predict(corrupt(sample, cfg, salt=i))
                correct += pred == sample.label
            conditions[(kind, severity)] = correct / len(dataset)
    return conditions


# ---------------------------------------------------------------------------
# Shortcut inspection: a constant symbolic circuit shows near-zero fact
# variance across inputs and near-total overlap of the top-m activated
# fact sets.


@dataclass
class ShortcutReport:
    score: float
    m: int
    fact_mean: np.ndarray
    fact_variance: np.ndarray

    def constant_facts(self, tol=1e-9):
        return [int(i) for i in np.nonzero(self.fact_variance <= tol)[0]]


def _top_m_sets(prob_matrix, m):
    n, f = prob_matrix.shape
    sets = []
    for i in range(n):
        # ties broken by fact id for determinism
        order = np.lexsort((np.arange(f), -prob_matrix[i]))
        sets.append(frozenset(int(j) for j in order[:m]))
    return sets


def shortcut_score_from_probs(prob_matrix, m) -> ShortcutReport:
    prob_matrix = np.asarray(prob_matrix, dtype=np.float64)
    n = prob_matrix.shape[0]
    if n < 2:
        raise ValueError("need at least two samples to measure overlap")
    m = max(1, min(int(m), prob_matrix.shape[1]))
    sets = _top_m_sets(prob_matrix, m)
    total = 0.0
    pairs = 0
    for i in range(n):
        for j in range(i + 1, n):
            inter = len(sets[i] & sets[j])
            union = len(sets[i] | sets[j])
            total += inter / union
            pairs += 1
    return ShortcutReport(
        score=total / pairs,
        m=m,
        fact_mean=prob_matrix.mean(axis=0),
        fact_variance=prob_matrix.var(axis=0),
    )


def shortcut_score(session, model, dataset) -> ShortcutReport:
    """Mean pairwise Jaccard overlap of the top-m activated fact sets, with
    m the expected true-fact count per sample; scores near 1 indicate a
    constant circuit decoupled from the inputs."""
    probs = np.stack([perceive(model, s, session.space).values for s in dataset])
    true_counts = [len(s.true_facts) for s in dataset if s.true_facts is not None]
    if true_counts:
        m = int(round(float(np.mean(true_counts))))
    else:
        m = int(round(float(probs.sum(axis=1).mean())))
    return shortcut_score_from_probs(probs, m)


# ---------------------------------------------------------------------------
# Fact maps (PGM, P5): dots on the grid, edges on the in-between lattice.


def write_pgm(matrix, path):
    m = np.asarray(matrix, dtype=np.float64)
    data = np.clip(np.round(m * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        dims = fh.readline().split()
        maxval = int(fh.readline())
        w, h = int(dims[0]), int(dims[1])
        data = np.frombuffer(fh.read(w * h), dtype=np.uint8)
        return data.reshape(h, w).astype(np.float64) / maxval


def emit_fact_map(dot_probs, edge_probs, side, out_dir, prefix="facts"):
    """Write dot and edge probability maps for a grid task as PGM images.

    Dots render as an side x side image; edges render on the (2*side-1)^2
    lattice with horizontal edges at even rows / odd columns and vertical
    edges at odd rows / even columns.  Returns the written paths.
    """
    from pathlib import Path

    from .tasks import grid_edges

    dot_probs = np.asarray(dot_probs, dtype=np.float64)
    if dot_probs.size != side * side:
        raise ValueError("dot probabilities do not match the grid geometry")
    edges = grid_edges(side)
    edge_probs = np.asarray(edge_probs, dtype=np.float64)
    if edge_probs.size != len(edges):
        raise ValueError("edge probabilities do not match the grid geometry")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dots_path = out_dir / f"{prefix}_dots.pgm"
    write_pgm(dot_probs.reshape(side, side), dots_path)
    lattice = np.zeros((2 * side - 1, 2 * side - 1))
    for (a, b), p in zip(edges, edge_probs):
        ra, ca = divmod(a, side)
        rb, cb = divmod(b, side)
        lattice[ra + rb, ca + cb] = p
    edges_path = out_dir / f"{prefix}_edges.pgm"
    write_pgm(lattice, edges_path)
    return dots_path, edges_path


# ---------------------------------------------------------------------------
# Aggregated report.


@dataclass
class MetricsReport:
    task: str
    mode: str
    accuracy: float
    ece: float | None = None
    mce: float | None = None
    asr: float | None = None
    csr: float | None = None
    disparity: float | None = None
    shortcut_score: float | None = None
    per_group_accuracy: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("accuracy", "ece", "mce"):
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("asr", "csr"):
            v = getattr(self, name)
            if v is not None and v > 1.0 + 1e-12:
                raise ValueError(f"{name} cannot exceed 1, got {v}")

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))
