#!/usr/bin/env python3
"""Benchmark the compiled proof-bag kernels against the pure-Python twin.

Micro-benchmarks hit the semiring operations directly; the end-to-end rows
time reasoner forward/backward passes, which is what training and PGD
loops actually pay for.  Run after `pip install -e . --no-build-isolation`:

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import random
import time

import numpy as np

import nslogic._pykernels as pure

try:
    import nslogic._native as native
except ImportError:
    native = None


def timeit(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def micro_cases(n_facts=24, n_bags=200, seed=0):
    rng = random.Random(seed)
    gids = np.array([0, 0, 0, 1, 1, 1] + [-1] * (n_facts - 6), dtype=np.int32)
    probs = np.array([rng.uniform(0.05, 0.95) for _ in range(n_facts)])
    for g in (0, 1):
        idx = np.nonzero(gids == g)[0]
        probs[idx] /= probs[idx].sum()

    def proof():
        facts = rng.sample(range(n_facts), rng.randint(2, 6))
        return tuple(sorted((f << 1) | rng.randint(0, 1) for f in facts))

    bags = []
    for _ in range(n_bags):
        cands = [proof() for _ in range(rng.randint(1, 8))]
        bags.append(pure.normalize(cands, 8, probs, gids))
    return probs, gids, bags


def bench_micro(impl, probs, gids, bags):
    out = {}

    def run_combine():
        for i in range(0, len(bags) - 1, 2):
            impl.combine(bags[i], bags[i + 1], 5, probs, gids)

    def run_merge():
        for i in range(0, len(bags) - 1, 2):
            impl.merge(bags[i], bags[i + 1], 5, probs, gids)

    def run_wmc():
        for bag in bags:
            impl.wmc(bag, probs, gids)

    def run_grad():
        for bag in bags:
            impl.wmc_gradient(bag, probs, gids)

    out["otimes"] = run_combine
    out["oplus"] = run_merge
    out["dnf_probability"] = run_wmc
    out["dnf_gradient"] = run_grad
    return out


def bench_end_to_end():
    """Forward+backward through compiled sessions, per backend."""
    from nslogic.reasoner import random_assignment
    from nslogic.tasks import builtin_program

    cases = []
    for name, params, k in [
        ("sum_digits", {"n": 5, "classes": 3}, 3),
        ("pathfinder", {"side": 3}, 64),
    ]:
        session = builtin_program(name, **params).compile(k)
        rng = np.random.default_rng(0)
        envs = [random_assignment(session, rng) for _ in range(10)]

        def run(session=session, envs=envs):
            for env in envs:
                out = session.forward(env)
                upstream = {a: 1.0 for a in out.answers}
                session.backward(env, upstream, forward=out)

        cases.append((f"{name} fwd+bwd x10 (k={k})", run))
    return cases


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    if native is None:
        print("compiled extension not available; showing pure timings only")

    probs, gids, bags = micro_cases()
    rows = []
    pure_micro = bench_micro(pure, probs, gids, bags)
    native_micro = bench_micro(native, probs, gids, bags) if native else {}
    for name, fn in pure_micro.items():
        t_pure = timeit(fn, args.repeat)
        if native:
            t_native = timeit(native_micro[name], args.repeat)
            rows.append((name, t_pure, t_native))
        else:
            rows.append((name, t_pure, None))

    import nslogic.kernels as kernels

    print(f"selected backend: {kernels.BACKEND}")
    print(f"{'operation':34s} {'pure':>12s} {'native':>12s} {'speedup':>9s}")
    for name, t_pure, t_native in rows:
        if t_native is None:
            print(f"{name:34s} {t_pure * 1e3:10.2f}ms {'-':>12s} {'-':>9s}")
        else:
            print(f"{name:34s} {t_pure * 1e3:10.2f}ms {t_native * 1e3:10.2f}ms {t_pure / t_native:8.1f}x")

    # End-to-end rows flip the backend via the kernels module seam.
    import nslogic.reasoner as reasoner

    for label, fn in bench_end_to_end():
        kernels.impl = pure
        reasoner.impl = pure
        t_pure = timeit(fn, args.repeat)
        if native is not None:
            kernels.impl = native
            reasoner.impl = native
            t_native = timeit(fn, args.repeat)
            reasoner.impl = kernels.impl = native
            print(f"{label:34s} {t_pure * 1e3:10.2f}ms {t_native * 1e3:10.2f}ms {t_pure / t_native:8.1f}x")
        else:
            print(f"{label:34s} {t_pure * 1e3:10.2f}ms {'-':>12s} {'-':>9s}")


if __name__ == "__main__":
    main()
