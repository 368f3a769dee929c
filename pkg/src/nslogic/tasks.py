"""Builtin task programs and desk-scale dataset generation.

Each task bundles a program, the per-slot perception head layout (which
must match the grounding's fact order: relations in declaration order,
tuples sorted), a class list for labels, per-task adversarial budgets, and
a deterministic synthetic dataset generator.  Generators draw class
prototypes plus Gaussian noise, clipped to [0, 1]; every sample carries
its ground-truth fact set so shortcut diagnostics have an oracle.
"""

from __future__ import annotations

import struct
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from .logic import Program, validate
from .parser import parse_program
from .perception import Head, Sample
from .reasoner import Session, compile_program

# ---------------------------------------------------------------------------
# Task specification.


@dataclass
class TaskSpec:
    name: str
    program: Program
    slots: int
    feature_dim: int
    heads: tuple  # per-slot Head layout
    classes: tuple  # class values for reporting; labels index this tuple
    binary: bool
    attack_epsilon: float
    attack_steps: int
    has_groups: bool
    params: dict = field(default_factory=dict)
    grid_side: int | None = None  # spatial geometry (fact maps), if any

    def __post_init__(self):
        diags = validate(self.program)
        if diags:
            raise ValueError(f"task '{self.name}' has an invalid program: {diags[0]}")
        if self.attack_epsilon <= 0 or self.attack_steps < 1:
            raise ValueError("attack budget and step count must be positive")

    def compile(self, k: int, ground_cap=None) -> Session:
        if ground_cap is None:
            return compile_program(self.program, k)
        return compile_program(self.program, k, ground_cap=ground_cap)

    @property
    def fact_count(self):
        return sum(h.size for h in self.heads) * self.slots

    def make_dataset(self, n, seed, sigma=None):
        return _GENERATORS[self.name](self, n, seed, sigma)


def builtin_program(name: str, **params) -> TaskSpec:
    """Construct one of the builtin tasks; raises on unknown names/params."""
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise ValueError(f"unknown task '{name}'; choose from {sorted(_BUILDERS)}") from None
    return builder(**params)


# ---------------------------------------------------------------------------
# Digit arithmetic tasks.


def _chained_sum_rules(out_rel, src_rel, n):
    if n == 1:
        return [f"{out_rel}(A) :- {src_rel}(0, A)."]
    if n == 2:
        return [f"{out_rel}(A + B) :- {src_rel}(0, A), {src_rel}(1, B)."]
    rules = [f"acc1(A) :- {src_rel}(0, A)."]
    for i in range(1, n - 1):
        rules.append(f"acc{i + 1}(S + A) :- acc{i}(S), {src_rel}({i}, A).")
    rules.append(f"{out_rel}(S + A) :- acc{n - 1}(S), {src_rel}({n - 1}, A).")
    return rules


def sum_digits_task(n=2, classes=3, side=8, sigma=0.1):
    top = n * (classes - 1)
    text = "\n".join(
        [
            f"input digit(img: 0..{n - 1}, val: 0..{classes - 1}) exclusive val.",
            f"output sum(s: 0..{top}).",
            *_chained_sum_rules("sum", "digit", n),
        ]
    )
    program = parse_program(text, f"sum_digits_{n}.nsl")
    return TaskSpec(
        name="sum_digits",
        program=program,
        slots=n,
        feature_dim=side * side,
        heads=(Head("softmax", classes),),
        classes=tuple(program.query_domain()),
        binary=False,
        attack_epsilon=0.03,
        attack_steps=100,
        has_groups=False,
        params={"n": n, "classes": classes, "side": side, "sigma": sigma},
    )


def how_many_3_or_4_task(n=2, side=8, sigma=0.1):
    lines = [
        f"input digit(img: 0..{n - 1}, val: 0..9) exclusive val.",
        f"output count(c: 0..{n}).",
        "hit(I, 1) :- digit(I, 3).",
        "hit(I, 1) :- digit(I, 4).",
        "hit(I, 0) :- digit(I, D), D != 3, D != 4.",
    ]
    if n == 1:
        lines.append("count(B) :- hit(0, B).")
    else:
        lines.append("acc1(B) :- hit(0, B).")
        for i in range(1, n - 1):
            lines.append(f"acc{i + 1}(S + B) :- acc{i}(S), hit({i}, B).")
        lines.append(f"count(S + B) :- acc{n - 1}(S), hit({n - 1}, B).")
    program = parse_program("\n".join(lines), f"how_many_{n}.nsl")
    return TaskSpec(
        name="how_many_3_or_4",
        program=program,
        slots=n,
        feature_dim=side * side,
        heads=(Head("softmax", 10),),
        classes=tuple(program.query_domain()),
        binary=False,
        attack_epsilon=0.03,
        attack_steps=100,
        has_groups=False,
        params={"n": n, "side": side, "sigma": sigma},
    )


# ---------------------------------------------------------------------------
# Knowledge-base concept classification.

CONCEPTS = (
    "is_animal",
    "has_feathers",
    "is_mammal",
    "has_hooves",
    "has_antlers",
    "has_retractable_claws",
    "has_wheels",
    "has_wings",
    "has_trailer",
    "is_transportation",
    "is_amphibian",
)

KB_CLASSES = (
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
)

_KB_ROWS = (
    (0, 0, 0, 0, 0, 0, 1, 1, 0, 1, 0),  # airplane
    (0, 0, 0, 0, 0, 0, 1, 0, 0, 1, 0),  # automobile
    (1, 1, 0, 0, 0, 0, 0, 1, 0, 0, 0),  # bird
    (1, 0, 1, 0, 0, 1, 0, 0, 0, 0, 0),  # cat
    (1, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0),  # deer
    (1, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0),  # dog
    (1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1),  # frog
    (1, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0),  # horse
    (0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0),  # ship
    (0, 0, 0, 0, 0, 0, 1, 0, 1, 1, 0),  # truck
)


@dataclass(frozen=True)
class TruthTable:
    classes: tuple
    concepts: tuple
    rows: tuple

    def row(self, cls):
        return self.rows[self.classes.index(cls)]

    def concepts_of(self, cls):
        return tuple(c for c, v in zip(self.concepts, self.row(cls)) if v)


def cifar_truth_table() -> TruthTable:
    """The 10-class x 11-concept class-attribute table; rows are pairwise
    distinct so concepts disentangle every class."""
    return TruthTable(KB_CLASSES, CONCEPTS, _KB_ROWS)


def kb_classify_task(feature_dim=24, sigma=0.1):
    table = cifar_truth_table()
    lines = [
        "input concept(c: {" + ", ".join(CONCEPTS) + "}).",
        "output class(y: {" + ", ".join(KB_CLASSES) + "}).",
    ]
    for cls, row in zip(table.classes, table.rows):
        body = ", ".join(
            (f"concept({c})" if v else f"not concept({c})") for c, v in zip(CONCEPTS, row)
        )
        lines.append(f"class({cls}) :- {body}.")
    program = parse_program("\n".join(lines), "kb_classify.nsl")
    return TaskSpec(
        name="kb_classify",
        program=program,
        slots=1,
        feature_dim=feature_dim,
        heads=(Head("sigmoid", len(CONCEPTS)),),
        classes=tuple(program.query_domain()),
        binary=False,
        attack_epsilon=0.03,
        attack_steps=100,
        has_groups=False,
        params={"feature_dim": feature_dim, "sigma": sigma},
    )


# ---------------------------------------------------------------------------
# Pathfinder: dot/edge facts on a grid, connectivity between fixed corners.


def grid_edges(side):
    """Undirected 4-neighborhood adjacency, deduplicated (a < b)."""
    edges = []
    for r in range(side):
        for c in range(side):
            p = r * side + c
            if c + 1 < side:
                edges.append((p, p + 1))
            if r + 1 < side:
                edges.append((p, p + side))
    return sorted(edges)


def pathfinder_task(side=8, sigma=0.05):
    n = side * side
    edges = grid_edges(side)
    lines = [
        f"input dot(p: 0..{n - 1}).",
        f"input edge(a: 0..{n - 1}, b: 0..{n - 1}).",
        *[f"fact edge({a}, {b})." for a, b in edges],
        "output connected.",
        "link(A, B) :- edge(A, B).",
        "link(B, A) :- edge(A, B).",
        "reach(A, B) :- link(A, B).",
        "reach(A, C) :- reach(A, B), link(B, C).",
        f"connected :- dot(0), dot({n - 1}), reach(0, {n - 1}).",
    ]
    program = parse_program("\n".join(lines), f"pathfinder_{side}.nsl")
    return TaskSpec(
        name="pathfinder",
        program=program,
        slots=1,
        feature_dim=n,
        heads=(Head("sigmoid", n), Head("sigmoid", len(edges))),
        classes=(0, 1),
        binary=True,
        attack_epsilon=0.03,
        attack_steps=10,
        has_groups=False,
        params={"side": side, "sigma": sigma},
        grid_side=side,
    )


# ---------------------------------------------------------------------------
# Phoneme-slot word classification (13 words, 6 slots, 24-symbol alphabet).

PHONEMES = (
    "pau", "ah", "ao", "ay", "eh", "ey", "f", "hh", "ih", "iy", "k", "l",
    "m", "n", "ow", "r", "s", "t", "th", "uw", "v", "w", "y", "z",
)

WORDS = {
    "zero": ("z", "ih", "r", "ow"),
    "one": ("w", "ah", "n"),
    "two": ("t", "uw"),
    "three": ("th", "r", "iy"),
    "four": ("f", "ao", "r"),
    "five": ("f", "ay", "v"),
    "six": ("s", "ih", "k", "s"),
    "seven": ("s", "eh", "v", "ah", "n"),
    "eight": ("ey", "t"),
    "nine": ("n", "ay", "n"),
    "hey": ("hh", "ey"),
    "yes": ("y", "eh", "s"),
    "no": ("n", "ow"),
}


def phoneme_word_task(slots=6, feature_dim=32, sigma=0.1):
    alphabet = PHONEMES
    lines = [
        f"input phoneme(slot: 0..{slots - 1}, ph: {{{', '.join(alphabet)}}}) exclusive ph.",
        "output word(w: {" + ", ".join(WORDS) + "}).",
    ]
    for word, phones in WORDS.items():
        padded = list(phones) + ["pau"] * (slots - len(phones))
        body = ", ".join(f"phoneme({i}, {p})" for i, p in enumerate(padded))
        lines.append(f"word({word}) :- {body}.")
    program = parse_program("\n".join(lines), "phoneme_word.nsl")
    return TaskSpec(
        name="phoneme_word",
        program=program,
        slots=1,
        feature_dim=feature_dim,
        heads=tuple(Head("softmax", len(alphabet)) for _ in range(slots)),
        classes=tuple(program.query_domain()),
        binary=False,
        attack_epsilon=0.001,
        attack_steps=200,
        has_groups=True,
        params={"slots": slots, "alphabet": len(alphabet), "feature_dim": feature_dim, "sigma": sigma},
    )


# ---------------------------------------------------------------------------
# Grounded attribute reasoning (shape / margin / texture triples).

SHAPES = ("oval", "star", "lobed", "heart", "linear")
MARGINS = ("entire", "serrate", "dentate", "crenate", "undulate", "smooth")
TEXTURES = ("glossy", "matte", "rough", "veined")

ATTRIBUTE_CLASSES = tuple(f"a{i}" for i in range(11))
ATTRIBUTE_TRIPLES = tuple((i % 5, (2 * i) % 6, (3 * i) % 4) for i in range(11))


def attribute_classify_task(feature_dim=24, sigma=0.1):
    lines = [
        "input shape(s: {" + ", ".join(SHAPES) + "}) exclusive s.",
        "input margin(m: {" + ", ".join(MARGINS) + "}) exclusive m.",
        "input texture(t: {" + ", ".join(TEXTURES) + "}) exclusive t.",
        "output class(y: {" + ", ".join(ATTRIBUTE_CLASSES) + "}).",
    ]
    for cls, (si, mi, ti) in zip(ATTRIBUTE_CLASSES, ATTRIBUTE_TRIPLES):
        lines.append(f"class({cls}) :- shape({SHAPES[si]}), margin({MARGINS[mi]}), texture({TEXTURES[ti]}).")
    program = parse_program("\n".join(lines), "attribute_classify.nsl")
    return TaskSpec(
        name="attribute_classify",
        program=program,
        slots=1,
        feature_dim=feature_dim,
        heads=(Head("softmax", 5), Head("softmax", 6), Head("softmax", 4)),
        classes=tuple(program.query_domain()),
        binary=False,
        attack_epsilon=0.03,
        attack_steps=100,
        has_groups=False,
        params={"feature_dim": feature_dim, "sigma": sigma},
    )


_BUILDERS = {
    "sum_digits": sum_digits_task,
    "how_many_3_or_4": how_many_3_or_4_task,
    "kb_classify": kb_classify_task,
    "pathfinder": pathfinder_task,
    "phoneme_word": phoneme_word_task,
    "attribute_classify": attribute_classify_task,
}


# ---------------------------------------------------------------------------
# Synthetic datasets.  Prototypes are deterministic per (kind, index); noise
# comes from the caller's seed, so two seeds share marginals but not noise.


def _prototype(kind, index, dim):
    # zlib.crc32 keeps prototypes stable across processes (str hash is not).
    key = f"{kind}:{index}:{dim}".encode()
    rng = np.random.default_rng(zlib.crc32(key))
    return rng.uniform(0.1, 0.9, dim)


@dataclass
class SyntheticDigitConfig:
    classes: int = 3
    side: int = 8
    sigma: float = 0.1
    samples: int = 100
    slots: int = 2
    compose: str = "sum"  # 'sum' | 'count34' | 'class'

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.sigma < 0:
            raise ValueError("noise level must be nonnegative")


def gen_synthetic_digits(config: SyntheticDigitConfig, seed: int):
    """Prototype-plus-noise digit images; labels composed per task."""
    rng = np.random.default_rng(seed)
    protos = np.stack([_prototype("digit", c, config.side**2) for c in range(config.classes)])
    out = []
    for _ in range(config.samples):
        digits = rng.integers(0, config.classes, size=config.slots)
        feats = protos[digits] + rng.normal(0.0, config.sigma, size=(config.slots, config.side**2))
        np.clip(feats, 0.0, 1.0, out=feats)
        if config.compose == "sum":
            label = int(digits.sum())
        elif config.compose == "count34":
            label = int(np.isin(digits, (3, 4)).sum())
        elif config.compose == "class":
            label = int(digits[0])
        else:
            raise ValueError(f"unknown composition {config.compose!r}")
        true_facts = tuple(int(s * config.classes + d) for s, d in enumerate(digits))
        out.append(Sample(feats, label, true_facts=true_facts))
    return out


def _digit_dataset(task, n, seed, sigma):
    p = task.params
    config = SyntheticDigitConfig(
        classes=task.heads[0].size,
        side=p["side"],
        sigma=p["sigma"] if sigma is None else sigma,
        samples=n,
        slots=task.slots,
        compose="sum" if task.name == "sum_digits" else "count34",
    )
    return gen_synthetic_digits(config, seed)


def _concept_dataset(task, n, seed, sigma):
    """Per-class prototype features; true facts are the class's concept set."""
    table = cifar_truth_table()
    sigma = task.params["sigma"] if sigma is None else sigma
    rng = np.random.default_rng(seed)
    protos = np.stack([_prototype("kb", c, task.feature_dim) for c in range(len(table.classes))])
    out = []
    for _ in range(n):
        c = int(rng.integers(0, len(table.classes)))
        feats = protos[c] + rng.normal(0.0, sigma, task.feature_dim)
        np.clip(feats, 0.0, 1.0, out=feats)
        true = tuple(i for i, v in enumerate(table.rows[c]) if v)
        out.append(Sample(feats[None, :], c, true_facts=true))
    return out


def _attribute_dataset(task, n, seed, sigma):
    sigma = task.params["sigma"] if sigma is None else sigma
    rng = np.random.default_rng(seed)
    protos = np.stack([_prototype("attr", c, task.feature_dim) for c in range(11)])
    out = []
    for _ in range(n):
        c = int(rng.integers(0, 11))
        feats = protos[c] + rng.normal(0.0, sigma, task.feature_dim)
        np.clip(feats, 0.0, 1.0, out=feats)
        si, mi, ti = ATTRIBUTE_TRIPLES[c]
        true = (si, 5 + mi, 11 + ti)  # shape facts, then margin, then texture
        out.append(Sample(feats[None, :], c, true_facts=true))
    return out


def _phoneme_dataset(task, n, seed, sigma):
    """Word prototypes plus a per-speaker bias; speaker frequencies are
    skewed so majority/minority meta-groups are meaningful."""
    sigma = task.params["sigma"] if sigma is None else sigma
    slots = task.params["slots"]
    rng = np.random.default_rng(seed)
    words = list(WORDS)
    protos = np.stack([_prototype("word", w, task.feature_dim) for w in range(len(words))])
    n_speakers = 8
    speaker_bias = np.stack([_prototype("speaker", s, task.feature_dim) - 0.5 for s in range(n_speakers)])
    weights = 1.0 / np.arange(1, n_speakers + 1)
    weights /= weights.sum()
    out = []
    for _ in range(n):
        c = int(rng.integers(0, len(words)))
        s = int(rng.choice(n_speakers, p=weights))
        feats = protos[c] + 0.15 * speaker_bias[s] + rng.normal(0.0, sigma, task.feature_dim)
        np.clip(feats, 0.0, 1.0, out=feats)
        phones = list(WORDS[words[c]]) + ["pau"] * (slots - len(WORDS[words[c]]))
        true = tuple(i * len(PHONEMES) + PHONEMES.index(p) for i, p in enumerate(phones))
        out.append(Sample(feats[None, :], c, group=f"spk{s}", true_facts=true))
    return out


def _staircase_paths(side):
    """All monotone corner-to-corner lattice paths, as pixel sequences."""
    paths = []

    def walk(r, c, acc):
        if (r, c) == (side - 1, side - 1):
            paths.append(tuple(acc))
            return
        if c + 1 < side:
            walk(r, c + 1, acc + [r * side + c + 1])
        if r + 1 < side:
            walk(r + 1, c, acc + [(r + 1) * side + c])
    walk(0, 0, [0])
    return paths


def _pathfinder_dataset(task, n, seed, sigma):
    side = task.params["side"]
    sigma = task.params["sigma"] if sigma is None else sigma
    edges = grid_edges(side)
    edge_index = {e: i for i, e in enumerate(edges)}
    n_pixels = side * side
    paths = _staircase_paths(side)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        path = list(paths[int(rng.integers(0, len(paths)))])
        connected = int(rng.integers(0, 2))
        if not connected:
            gap = int(rng.integers(1, len(path) - 1))
            broken_pixel = path[gap]
        else:
            broken_pixel = None
        img = rng.normal(0.08, sigma, n_pixels)
        inked = [p for p in path if p != broken_pixel]
        for p in inked:
            img[p] = 0.92 + rng.normal(0.0, sigma)
        np.clip(img, 0.0, 1.0, out=img)
        true_dots = [0, n_pixels - 1] if connected else [p for p in (0, n_pixels - 1) if p != broken_pixel]
        true_edges = []
        for a, b in zip(path, path[1:]):
            if a != broken_pixel and b != broken_pixel:
                true_edges.append(n_pixels + edge_index[(min(a, b), max(a, b))])
        out.append(Sample(img[None, :], connected, true_facts=tuple(sorted(true_dots + true_edges))))
    return out


_GENERATORS = {
    "sum_digits": _digit_dataset,
    "how_many_3_or_4": _digit_dataset,
    "kb_classify": _concept_dataset,
    "pathfinder": _pathfinder_dataset,
    "phoneme_word": _phoneme_dataset,
    "attribute_classify": _attribute_dataset,
}


# ---------------------------------------------------------------------------
# Subsampling and external files.


def subsample(dataset, fraction, seed=0):
    """Stratified-by-label subsample; deterministic; keeps at least one
    sample per label (with a warning) when the fraction rounds to zero."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must be in (0, 1]")
    if fraction == 1.0:
        return list(dataset)
    by_label: dict[int, list[int]] = {}
    for i, s in enumerate(dataset):
        by_label.setdefault(s.label, []).append(i)
    rng = np.random.default_rng(seed)
    chosen = []
    for label in sorted(by_label):
        idxs = by_label[label]
        m = int(round(fraction * len(idxs)))
        if m == 0:
            warnings.warn(f"fraction {fraction} yields no samples for label {label}; keeping 1")
            m = 1
        picks = rng.choice(len(idxs), size=m, replace=False)
        chosen.extend(idxs[int(i)] for i in picks)
    return [dataset[i] for i in sorted(chosen)]


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path, expect_magic):
    with open(path, "rb") as fh:
        (magic,) = struct.unpack(">I", fh.read(4))
        if magic != expect_magic:
            raise ValueError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
        rank = magic & 0xFF
        dims = struct.unpack(f">{rank}I", fh.read(4 * rank))
        data = np.frombuffer(fh.read(), dtype=np.uint8)
        if data.size != int(np.prod(dims)):
            raise ValueError(f"{path}: payload size does not match dimensions {dims}")
        return data.reshape(dims)


def load_external(path, format, labels_path=None):
    """Load a dataset from disk: 'idx' (big-endian image+label pair) or
    'csv' (header f0,...,fn,label[,group]).  Features are scaled to [0, 1]."""
    if format == "idx":
        if labels_path is None:
            raise ValueError("idx format needs a labels file")
        images = _read_idx(path, IDX_IMAGES_MAGIC)
        labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
        if images.shape[0] != labels.shape[0]:
            raise ValueError("image/label counts differ")
        feats = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
        return [Sample(f[None, :], int(l)) for f, l in zip(feats, labels)]
    if format == "csv":
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip().split(",")
            has_group = header[-1] == "group"
            n_feats = len(header) - 1 - int(has_group)
            if header[:n_feats] != [f"f{i}" for i in range(n_feats)] or header[n_feats] != "label":
                raise ValueError(f"{path}: expected header f0,...,fn,label[,group]")
            rows = []
            for line_no, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                parts = line.strip().split(",")
                if len(parts) != len(header):
                    raise ValueError(f"{path}:{line_no}: expected {len(header)} columns")
                rows.append(parts)
        feats = np.array([[float(v) for v in r[:n_feats]] for r in rows], dtype=np.float64)
        top = feats.max() if feats.size else 1.0
        if top > 1.0:
            feats /= top
        out = []
        for r, f in zip(rows, feats):
            group = r[-1] if has_group else None
            out.append(Sample(f[None, :], int(r[n_feats]), group=group))
        return out
    raise ValueError(f"unknown dataset format {format!r}")
