"""Generate boundary-test fixtures for foreign-runtime clients.

Writes a JSONL file of (program, assignment, native forward, upstream,
native backward) cases with float64 arrays base64-encoded little-endian,
plus train/test CSVs for the two-digit sum task and a metadata file
carrying the natively trained reference accuracy.  Clients replay the
cases through the stdio engine boundary and compare bytes.

    python3 -m nslogic.boundary_fixtures --out frontend/fixtures --cases 1000
"""

from __future__ import annotations

import argparse
import base64
import json
import random
from pathlib import Path

import numpy as np

from .assurance import accuracy_of, evaluate
from .logic import pretty_print
from .parser import parse_program
from .perception import Pipeline, PerceptionModel, TrainConfig, train
from .reasoner import compile_program, random_assignment
from .tasks import builtin_program


def _b64(arr):
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _random_program(rng):
    n = rng.randint(3, 4)
    lines = [f"input e(a: 0..{n - 1}, b: 0..{n - 1})."]
    pairs = set()
    while len(pairs) < rng.randint(2, 5):
        pairs.add((rng.randrange(n), rng.randrange(n)))
    lines += [f"fact e({a}, {b})." for a, b in sorted(pairs)]
    lines.append(f"input m(x: 0..{n - 1}).")
    lines.append(f"output q(a: 0..{n - 1}, b: 0..{n - 1}).")
    lines.append("t(A, B) :- e(A, B).")
    lines.append("t(A, C) :- t(A, B), e(B, C).")
    lines.append("q(A, B) :- t(A, B), not m(A)." if rng.random() < 0.5 else "q(A, B) :- t(A, B), m(B).")
    return "\n".join(lines)


def generate_cases(out_dir, n_cases=1000, seed=0):
    rng = random.Random(seed)
    nrng = np.random.default_rng(seed)
    programs = [
        (pretty_print(builtin_program("sum_digits", n=2, classes=3).program), 3),
        (pretty_print(builtin_program("how_many_3_or_4", n=2).program), 3),
        (pretty_print(builtin_program("pathfinder", side=3).program), 8),
    ]
    for _ in range(17):
        programs.append((_random_program(rng), rng.choice([1, 2, 3, 8])))

    sessions = [compile_program(parse_program(text), k) for text, k in programs]

    lines = [json.dumps({"programs": [{"text": text, "k": k} for text, k in programs]}, sort_keys=True)]
    for i in range(n_cases):
        idx = i % len(programs)
        session = sessions[idx]
        env = random_assignment(session, nrng)
        out = session.forward(env)
        upstream = nrng.uniform(-1.0, 1.0, len(session.answers))
        grad = session.backward(env, {a: float(g) for a, g in zip(session.answers, upstream)}, forward=out)
        lines.append(
            json.dumps(
                {
                    "program": idx,
                    "env": _b64(env.values),
                    "forward": _b64(out.probs),
                    "upstream": _b64(upstream),
                    "backward": _b64(grad),
                },
                sort_keys=True,
            )
        )
    (out_dir / "boundary_cases.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return len(lines) - 1


def _flatten_csv(dataset, path):
    slots, dim = dataset[0].features.shape
    header = ",".join([f"f{i}" for i in range(slots * dim)] + ["label"])
    rows = [header]
    for s in dataset:
        flat = s.features.reshape(-1)
        rows.append(",".join(repr(float(v)) for v in flat) + f",{s.label}")
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")


def generate_training_fixture(out_dir, seed=0):
    task = builtin_program("sum_digits", n=2, classes=3)
    session = task.compile(3)
    train_ds = task.make_dataset(150, seed=1000 + seed)
    test_ds = task.make_dataset(100, seed=2000 + seed)
    _flatten_csv(train_ds, out_dir / "train.csv")
    _flatten_csv(test_ds, out_dir / "test.csv")

    model = PerceptionModel.build("nesy", task.feature_dim, task.slots, heads=task.heads, hidden=16, seed=seed)
    cfg = TrainConfig(lr=0.1, epochs=10, batch_size=16, seed=seed)
    train(model, session, train_ds, cfg)
    native_acc = accuracy_of(evaluate(Pipeline(model, session), test_ds))
    meta = {
        "program": pretty_print(task.program),
        "k": 3,
        "slots": task.slots,
        "feature_dim": task.feature_dim,
        "classes": task.heads[0].size,
        "n_answers": len(task.classes),
        "native_accuracy": native_acc,
        "train": {"lr": cfg.lr, "epochs": cfg.epochs, "batch_size": cfg.batch_size, "seed": cfg.seed, "hidden": 16},
    }
    (out_dir / "train_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return native_acc


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--cases", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = generate_cases(out_dir, args.cases, args.seed)
    acc = generate_training_fixture(out_dir, args.seed)
    print(f"wrote {n} boundary cases and training fixtures (native accuracy {acc:.3f}) to {out_dir}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
