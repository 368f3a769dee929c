"""Batch experiment driver.

Subcommands: train, eval, attack, corrupt, inspect, oracle-check, sweep,
report.  Configuration is a flat key=value INI file overridable with
`--set section.key=value` flags; every artifact embeds its fully resolved
configuration so runs are self-describing.  Reruns with identical config
and seeds produce byte-identical artifacts (no timestamps anywhere).

Exit codes: 0 success, 1 configuration error, 2 runtime failure,
3 oracle-check failure.
"""

from __future__ import annotations

import argparse
import configparser
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import assurance
from .assurance import (
    AttackConfig,
    MetricsReport,
    accuracy_of,
    attack_sweep,
    calibration_of,
    corruption_sweep,
    disparity,
    emit_fact_map,
    evaluate,
    meta_split,
    per_group_of,
    shortcut_score,
)
from .parser import load_program
from .perception import Pipeline, PerceptionModel, TrainConfig, load_model, perceive, save_model, train
from .reasoner import compile_program, random_assignment
from .tasks import builtin_program, subsample


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # config errors exit 1, not argparse's 2
        raise ConfigError(message)


DEFAULTS = {
    "experiment": {
        "task": "sum_digits",
        "task_params": "",
        "mode": "nesy",
        "train_k": "3",
        "test_k": "",
        "fraction": "1.0",
        "seed": "0",
        "n_train": "200",
        "n_test": "100",
        "sigma": "",
        "hidden": "32",
        "normalize": "false",
    },
    "train": {
        "lr": "0.05",
        "epochs": "10",
        "batch_size": "16",
        "momentum": "0.9",
    },
    "attack": {
        "epsilon": "",
        "steps": "",
        "samples": "",
    },
    "corrupt": {
        "kinds": ",".join(assurance.CORRUPTION_KINDS),
        "severities": "1,2,3,4,5",
        "samples": "",
    },
    "inspect": {
        "samples": "4",
    },
}


def load_config(path=None, overrides=()):
    config = {sec: dict(values) for sec, values in DEFAULTS.items()}
    if path is not None:
        cp = configparser.ConfigParser()
        read = cp.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        for sec in cp.sections():
            if sec not in config:
                raise ConfigError(f"unknown config section [{sec}]")
            for key, value in cp.items(sec):
                if key not in config[sec]:
                    raise ConfigError(f"unknown config key {sec}.{key}")
                config[sec][key] = value
    for item in overrides or ():
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        target, value = item.split("=", 1)
        sec, key = target.split(".", 1)
        if sec not in config or key not in config[sec]:
            raise ConfigError(f"unknown config key {sec}.{key}")
        config[sec][key] = value
    return config


def resolved_ini(config):
    out = io.StringIO()
    for sec in sorted(config):
        out.write(f"[{sec}]\n")
        for key in sorted(config[sec]):
            out.write(f"{key} = {config[sec][key]}\n")
        out.write("\n")
    return out.getvalue()


def _parse_params(text):
    params = {}
    if not text:
        return params
    for pair in text.split(","):
        if "=" not in pair:
            raise ConfigError(f"bad task parameter {pair!r} (expected name=value)")
        key, value = pair.split("=", 1)
        try:
            params[key.strip()] = int(value)
        except ValueError:
            try:
                params[key.strip()] = float(value)
            except ValueError:
                params[key.strip()] = value.strip()
    return params


def parse_task_field(text):
    """Parse 'name' or 'name:key=value,key=value' task references."""
    if ":" in text:
        name, rest = text.split(":", 1)
        return name, _parse_params(rest)
    return text, {}


def _experiment(config):
    exp = config["experiment"]
    name, params = parse_task_field(exp["task"])
    params.update(_parse_params(exp["task_params"]))
    try:
        task = builtin_program(name, **params)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    train_k = int(exp["train_k"])
    test_k = int(exp["test_k"]) if exp["test_k"] else train_k
    return task, train_k, test_k


def _datasets(task, config):
    exp = config["experiment"]
    seed = int(exp["seed"])
    sigma = float(exp["sigma"]) if exp["sigma"] else None
    train_ds = task.make_dataset(int(exp["n_train"]), seed=1000 + seed, sigma=sigma)
    test_ds = task.make_dataset(int(exp["n_test"]), seed=2000 + seed, sigma=sigma)
    fraction = float(exp["fraction"])
    if fraction < 1.0:
        train_ds = subsample(train_ds, fraction, seed=seed)
    return train_ds, test_ds


def _metadata(config, **extra):
    meta = {f"{sec}.{key}": value for sec in sorted(config) for key, value in sorted(config[sec].items())}
    meta.update(extra)
    return meta


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _records_csv(records):
    lines = ["index,label,pred,confidence,correct,group"]
    for r in records:
        group = r.group if r.group is not None else ""
        lines.append(f"{r.index},{r.label},{r.pred},{r.confidence!r},{int(r.correct)},{group}")
    return "\n".join(lines) + "\n"


def _load_run(run_dir, overrides=()):
    run_dir = Path(run_dir)
    config_path = run_dir / "config.ini"
    checkpoint = run_dir / "checkpoint.bin"
    if not config_path.exists() or not checkpoint.exists():
        raise ConfigError(f"{run_dir} is not a training run (missing config.ini/checkpoint.bin)")
    config = load_config(config_path, overrides)
    task, train_k, test_k = _experiment(config)
    model = load_model(checkpoint)
    session = None
    if config["experiment"]["mode"] == "nesy":
        session = task.compile(train_k)
        if test_k != train_k:
            session = session.set_test_k(test_k)
    pipeline = Pipeline(model, session, normalize=config["experiment"]["normalize"].lower() == "true")
    return config, task, session, model, pipeline


def _pipeline_metrics(config, task, pipeline, test_ds, subcommand, **fields):
    records = evaluate(pipeline, test_ds)
    acc = accuracy_of(records)
    e, m = calibration_of(records)
    per_group = per_group_of(records)
    disp = None
    per_group_acc = {}
    if per_group:
        majority, _ = meta_split({g: t for g, (_, t) in per_group.items()})
        disp = disparity(per_group, majority)
        per_group_acc = {g: c / t for g, (c, t) in sorted(per_group.items())}
    exp = config["experiment"]
    report = MetricsReport(
        task=task.name,
        mode=exp["mode"],
        accuracy=acc,
        ece=e,
        mce=m,
        disparity=disp,
        per_group_accuracy=per_group_acc,
        metadata=_metadata(config, subcommand=subcommand),
        **fields,
    )
    return report, records


# ---------------------------------------------------------------------------
# Subcommands.


def cmd_train(args):
    config = load_config(args.config, args.set)
    if args.task:
        config["experiment"]["task"] = args.task
    if args.mode:
        config["experiment"]["mode"] = args.mode
    if args.k is not None:
        config["experiment"]["train_k"] = str(args.k)
    if args.seed is not None:
        config["experiment"]["seed"] = str(args.seed)
    if args.fraction is not None:
        config["experiment"]["fraction"] = str(args.fraction)
    if args.epochs is not None:
        config["train"]["epochs"] = str(args.epochs)
    if args.lr is not None:
        config["train"]["lr"] = str(args.lr)

    out = Path(args.out)
    task, train_k, _ = _experiment(config)
    exp = config["experiment"]
    mode = exp["mode"]
    if mode not in ("nesy", "nn"):
        raise ConfigError(f"mode must be nesy or nn, got {mode!r}")
    train_ds, _ = _datasets(task, config)
    session = task.compile(train_k) if mode == "nesy" else None
    seed = int(exp["seed"])
    model = PerceptionModel.build(
        mode,
        task.feature_dim,
        task.slots,
        heads=task.heads,
        n_classes=len(task.classes),
        hidden=int(exp["hidden"]),
        seed=seed,
    )
    cfg = TrainConfig(
        lr=float(config["train"]["lr"]),
        epochs=int(config["train"]["epochs"]),
        batch_size=int(config["train"]["batch_size"]),
        momentum=float(config["train"]["momentum"]),
        seed=seed,
    )
    curve = train(model, session, train_ds, cfg)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.ini", resolved_ini(config))
    from .logic import pretty_print

    _write(out / "program.nsl", pretty_print(task.program))
    save_model(model, out / "checkpoint.bin")
    _write(out / "loss_curve.csv", "epoch,loss\n" + "".join(f"{i},{l!r}\n" for i, l in enumerate(curve)))
    print(f"trained {mode} model on {task.name}: final loss {curve[-1]:.6f} -> {out}")
    return 0


def cmd_eval(args):
    config, task, session, model, pipeline = _load_run(args.run, args.set)
    _, test_ds = _datasets(task, config)
    report, records = _pipeline_metrics(config, task, pipeline, test_ds, "eval")
    run = Path(args.run)
    _write(run / "metrics_eval.json", report.to_json())
    _write(run / "records_eval.csv", _records_csv(records))
    print(f"eval {task.name}: accuracy {report.accuracy:.4f} ece {report.ece:.4f} mce {report.mce:.4f}")
    return 0


def cmd_attack(args):
    config, task, session, model, pipeline = _load_run(args.run, args.set)
    _, test_ds = _datasets(task, config)
    atk = config["attack"]
    epsilon = float(atk["epsilon"]) if atk["epsilon"] else task.attack_epsilon
    steps = int(atk["steps"]) if atk["steps"] else task.attack_steps
    if atk["samples"]:
        test_ds = test_ds[: int(atk["samples"])]
    seed = int(config["experiment"]["seed"])
    clean_records = evaluate(pipeline, test_ds)
    acc = accuracy_of(clean_records)
    adv_records, results = attack_sweep(pipeline, test_ds, AttackConfig(epsilon=epsilon, steps=steps), seed=seed)
    acc_adv = accuracy_of(adv_records)
    failures = [r.failed for r in results if r.failed]
    report, _ = _pipeline_metrics(
        config,
        task,
        pipeline,
        test_ds,
        "attack",
        asr=assurance.asr(acc, acc_adv),
    )
    report.metadata["attack.resolved_epsilon"] = repr(epsilon)
    report.metadata["attack.resolved_steps"] = str(steps)
    report.metadata["attack.adversarial_accuracy"] = repr(acc_adv)
    report.metadata["attack.aborted_samples"] = str(len(failures))
    run = Path(args.run)
    _write(run / "metrics_attack.json", report.to_json())
    _write(run / "records_attack.csv", _records_csv(adv_records))
    print(f"attack {task.name}: accuracy {acc:.4f} -> {acc_adv:.4f} (asr {report.asr:.4f})")
    return 0


def cmd_corrupt(args):
    config, task, session, model, pipeline = _load_run(args.run, args.set)
    _, test_ds = _datasets(task, config)
    cor = config["corrupt"]
    kinds = tuple(k.strip() for k in cor["kinds"].split(",") if k.strip())
    severities = tuple(int(s) for s in cor["severities"].split(","))
    if cor["samples"]:
        test_ds = test_ds[: int(cor["samples"])]
    seed = int(config["experiment"]["seed"])
    clean_records = evaluate(pipeline, test_ds)
    acc = accuracy_of(clean_records)
    conditions = corruption_sweep(pipeline, test_ds, kinds=kinds, severities=severities, seed=seed)
    accs = [conditions[key] for key in sorted(conditions)]
    report, _ = _pipeline_metrics(config, task, pipeline, test_ds, "corrupt", csr=assurance.csr(acc, accs))
    run = Path(args.run)
    _write(run / "metrics_corrupt.json", report.to_json())
    lines = ["kind,severity,accuracy"]
    for kind, severity in sorted(conditions):
        lines.append(f"{kind},{severity},{conditions[(kind, severity)]!r}")
    _write(run / "corruption_conditions.csv", "\n".join(lines) + "\n")
    print(f"corrupt {task.name}: accuracy {acc:.4f}, csr {report.csr:.4f} over {len(conditions)} conditions")
    return 0


def cmd_inspect(args):
    config, task, session, model, pipeline = _load_run(args.run, args.set)
    if session is None:
        raise ConfigError("inspect requires a NESY run")
    _, test_ds = _datasets(task, config)
    report = shortcut_score(session, model, test_ds)
    run = Path(args.run)
    payload = {
        "score": report.score,
        "m": report.m,
        "constant_fact_count": len(report.constant_facts()),
        "fact_variance_mean": float(report.fact_variance.mean()),
        "fact_variance_min": float(report.fact_variance.min()),
        "metadata": _metadata(config, subcommand="inspect"),
    }
    _write(run / "shortcut.json", json.dumps(payload, sort_keys=True, indent=2) + "\n")
    if task.grid_side:
        side = task.grid_side
        n_dots = side * side
        n_show = min(int(config["inspect"]["samples"]), len(test_ds))
        for i in range(n_show):
            env = perceive(model, test_ds[i], session.space)
            emit_fact_map(env.values[:n_dots], env.values[n_dots:], side, run, prefix=f"sample{i}")
        mean_probs = np.stack(
            [perceive(model, s, session.space).values for s in test_ds]
        ).mean(axis=0)
        emit_fact_map(mean_probs[:n_dots], mean_probs[n_dots:], side, run, prefix="mean")
    print(f"inspect {task.name}: shortcut score {report.score:.4f} (m={report.m})")
    return 0


def cmd_oracle_check(args):
    rng = np.random.default_rng(args.seed)
    rows = []
    ok = True
    if args.program:
        sessions = [(Path(args.program).stem, compile_program(load_program(args.program), args.k))]
    else:
        names = args.task or ["sum_digits:n=2,classes=3", "how_many_3_or_4:n=2", "pathfinder:side=3"]
        sessions = []
        for text in names:
            name, params = parse_task_field(text)
            task = builtin_program(name, **params)
            sessions.append((text, task.compile(args.k)))
    for name, session in sessions:
        worst_fwd = 0.0
        for _ in range(args.trials):
            env = random_assignment(session, rng)
            diff = float(np.max(np.abs(session.forward(env).probs - session.oracle_forward(env).probs)))
            worst_fwd = max(worst_fwd, diff)
        fwd_pass = worst_fwd < args.forward_tol
        worst_grad = 0.0
        for _ in range(max(1, args.trials // 10)):
            env = random_assignment(session, rng)
            out = session.forward(env)
            upstream = {a: float(rng.uniform(-1, 1)) for a in out.answers}
            grad = session.backward(env, upstream, forward=out)
            eps = 1e-4
            for f in range(session.n_facts):
                hi = env.values.copy()
                lo = env.values.copy()
                hi[f] += eps
                lo[f] -= eps
                p_hi = session.forward(session.assignment(hi, normalized=False)).probs
                p_lo = session.forward(session.assignment(lo, normalized=False)).probs
                fd = sum(upstream[a] * (h - l) for a, h, l in zip(out.answers, p_hi, p_lo)) / (2 * eps)
                denom = max(abs(grad[f]), abs(fd), 1e-8)
                worst_grad = max(worst_grad, abs(grad[f] - fd) / denom)
        grad_pass = worst_grad < args.grad_tol
        ok = ok and fwd_pass and grad_pass
        rows.append((name, worst_fwd, fwd_pass, worst_grad, grad_pass))
    lines = [f"{'task':40s} {'fwd-vs-oracle':>14s} {'pass':>5s} {'grad-vs-fd':>12s} {'pass':>5s}"]
    for name, wf, fp, wg, gp in rows:
        lines.append(f"{name:40s} {wf:14.3e} {str(fp):>5s} {wg:12.3e} {str(gp):>5s}")
    table = "\n".join(lines) + "\n"
    print(table, end="")
    if args.out:
        _write(Path(args.out), table)
    return 0 if ok else 3


def cmd_sweep(args):
    config = load_config(args.config, args.set)
    if args.task:
        config["experiment"]["task"] = args.task
    if args.mode:
        config["experiment"]["mode"] = args.mode
    test_ks = [int(v) for v in args.test_k.split(",")] if args.test_k else [int(config["experiment"]["train_k"])]
    fractions = [float(v) for v in args.fraction.split(",")] if args.fraction else [1.0]
    seeds = [int(v) for v in args.seed.split(",")] if args.seed else [int(config["experiment"]["seed"])]
    out = Path(args.out)
    jobs = [
        (config, fraction, seed, str(out / f"f{fraction}_s{seed}"), test_ks)
        for fraction in fractions
        for seed in seeds
    ]

    all_rows = []
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            for rows in pool.map(_sweep_child_entry, jobs):
                all_rows.extend(rows)
    else:
        for job in jobs:
            all_rows.extend(_sweep_child_entry(job))

    base_k = int(config["experiment"]["train_k"])
    base_acc = {(f, s): acc for f, s, k, acc, _, _ in all_rows if k == base_k}
    lines = ["fraction,seed,test_k,accuracy,ece,mce,accuracy_delta_vs_train_k"]
    for f, s, k, acc, e, m in sorted(all_rows):
        delta = acc - base_acc.get((f, s), acc)
        lines.append(f"{f!r},{s},{k},{acc!r},{e!r},{m!r},{delta!r}")
    _write(out / "sweep_summary.csv", "\n".join(lines) + "\n")
    print(f"sweep complete: {len(all_rows)} reports -> {out / 'sweep_summary.csv'}")
    return 0


def _train_from_config(config, out):
    import os
    import tempfile

    ns = argparse.Namespace(
        config=None, set=[], task=None, mode=None, k=None, seed=None, fraction=None, epochs=None, lr=None, out=str(out)
    )
    fd, path = tempfile.mkstemp(suffix=".ini")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(resolved_ini(config))
        ns.config = path
        return cmd_train(ns)
    finally:
        os.unlink(path)


def _sweep_child_entry(payload):
    config, fraction, seed, run_dir, test_ks = payload
    child = {sec: dict(v) for sec, v in config.items()}
    child["experiment"]["fraction"] = repr(fraction)
    child["experiment"]["seed"] = str(seed)
    _train_from_config(child, run_dir)
    rows = []
    for test_k in test_ks:
        cfg2, task, session, model, pipeline = _load_run(run_dir, [f"experiment.test_k={test_k}"])
        _, test_ds = _datasets(task, cfg2)
        report, _ = _pipeline_metrics(cfg2, task, pipeline, test_ds, f"sweep:test_k={test_k}")
        _write(Path(run_dir) / f"metrics_k{test_k}.json", report.to_json())
        rows.append((fraction, seed, test_k, report.accuracy, report.ece, report.mce))
    return rows


def cmd_report(args):
    root = Path(args.dir)
    rows = []
    for path in sorted(root.rglob("metrics_*.json")) + sorted(root.rglob("metrics.json")):
        rep = MetricsReport.from_json(path.read_text())
        rows.append((str(path.relative_to(root)), rep))
    columns = ["file", "task", "mode", "accuracy", "ece", "mce", "asr", "csr", "disparity", "shortcut"]
    print(" | ".join(f"{c:>10s}" for c in columns))
    lines = [",".join(columns)]
    for name, rep in rows:
        vals = [name, rep.task, rep.mode] + [
            ("" if v is None else f"{v:.4f}")
            for v in (rep.accuracy, rep.ece, rep.mce, rep.asr, rep.csr, rep.disparity, rep.shortcut_score)
        ]
        print(" | ".join(f"{v:>10s}" for v in vals))
        lines.append(",".join(vals))
    if args.csv:
        _write(Path(args.csv), "\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="nslogic", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL", help="override a config value")

    p = sub.add_parser("train", help="train a model; writes checkpoint + loss curve")
    common(p)
    p.add_argument("--task", help="task name, e.g. sum_digits:n=2,classes=3")
    p.add_argument("--mode", choices=["nesy", "nn"])
    p.add_argument("--k", type=int, help="train-time top-k proof count")
    p.add_argument("--seed", type=int)
    p.add_argument("--fraction", type=float, help="training data fraction")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    for name, func, help_text in [
        ("eval", cmd_eval, "accuracy + calibration (+ disparity) on the test set"),
        ("attack", cmd_attack, "PGD attack sweep; reports ASR"),
        ("corrupt", cmd_corrupt, "corruption suite; reports CSR"),
        ("inspect", cmd_inspect, "shortcut score + fact maps"),
    ]:
        p = sub.add_parser(name, help=help_text)
        common(p)
        p.add_argument("--run", required=True, help="training run directory")
        p.set_defaults(func=func)

    p = sub.add_parser("oracle-check", help="forward-vs-oracle and gradient-vs-finite-difference checks")
    p.add_argument("--task", action="append", help="task reference (repeatable)")
    p.add_argument("--program", help="check a custom .nsl program instead")
    p.add_argument("--k", type=int, default=64)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--forward-tol", type=float, default=1e-9)
    p.add_argument("--grad-tol", type=float, default=1e-4)
    p.add_argument("--out", help="write the pass/fail table here")
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("sweep", help="expand {test-k, fraction, seed} grids into child runs")
    common(p)
    p.add_argument("--task")
    p.add_argument("--mode", choices=["nesy", "nn"])
    p.add_argument("--test-k", help="comma-separated test-k values")
    p.add_argument("--fraction", help="comma-separated data fractions")
    p.add_argument("--seed", help="comma-separated seeds")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="tabulate metrics JSON files under a directory")
    p.add_argument("--dir", required=True)
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
