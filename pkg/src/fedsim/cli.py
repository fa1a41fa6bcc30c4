"""Command-line front end.

Subcommands:

    run               execute a config (multi-seed), write metrics artifacts
    compare           tabulate finished runs side by side, optionally assert
    gradcheck         analytic-vs-numeric gradient verification
    partition-report  print the client partition a config would produce

Exit codes: 0 success, 1 configuration/input error, 2 runtime failure,
3 failed --assert comparison.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import config as configmod
from . import data as datamod
from . import fedcore, losses, nnet
from .errors import ConfigurationError, DomainError, FedSimError, FormatError
from .evalmetrics import matrix_to_csv

SUMMARY_METRICS = ("gfl_global", "pfl_global", "pfl_personal")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedsim",
                                description="deterministic federated learning simulator")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a config file")
    run.add_argument("config", help="TOML config file")
    run.add_argument("--out", help="output directory (default: from config or runs/<name>)")
    run.add_argument("--force", action="store_true",
                     help="allow writing into a nonempty output directory")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="override a config entry, e.g. --set alpha=0.1")
    for flag, key in (("--algorithm", "algorithm"), ("--loss", "loss.kind"),
                      ("--alpha", "alpha"), ("--rounds", "rounds"),
                      ("--seed", "seed"), ("--seeds", "repeat.seeds"),
                      ("--workers", "workers")):
        run.add_argument(flag, dest=f"ov_{key.replace('.', '_')}", metavar="V",
                         help=f"shorthand for --set {key}=V")

    cmp_p = sub.add_parser("compare", help="tabulate finished run directories")
    cmp_p.add_argument("dirs", nargs="+", help="run output directories")
    cmp_p.add_argument("--assert", dest="asserts", action="append", default=[],
                       metavar="EXPR", help="e.g. 'runA.pfl_personal >= runB.pfl_personal'")

    gc = sub.add_parser("gradcheck", help="verify analytic gradients numerically")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--points", type=int, default=10)
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-4)

    pr = sub.add_parser("partition-report", help="print the partition for a config")
    pr.add_argument("config", nargs="?", help="TOML config file (defaults apply if omitted)")
    pr.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    return p


def _load_user_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as f:
            return configmod.tomllib.load(f)
    except OSError as exc:
        raise FedSimError(f"cannot read config {path}: {exc}") from exc
    except configmod.tomllib.TOMLDecodeError as exc:
        raise FedSimError(f"{path}: {exc}") from exc


def _gather_overrides(args) -> list[str]:
    overrides = []
    for key in ("algorithm", "loss.kind", "alpha", "rounds", "seed",
                "repeat.seeds", "workers"):
        value = getattr(args, f"ov_{key.replace('.', '_')}")
        if value is not None:
            if key in ("algorithm", "loss.kind"):
                value = f'"{value}"'
            overrides.append(f"{key}={value}")
    return overrides + list(args.set)


def _fmt_float(v: float) -> str:
    return repr(float(v))


def cmd_run(args) -> int:
    user = _load_user_config(args.config)
    user = configmod.apply_overrides(user, _gather_overrides(args))
    cfg = configmod.resolve(user)

    out_dir = args.out or cfg["output"]["dir"] or \
        os.path.join("runs", os.path.splitext(os.path.basename(args.config))[0])
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not args.force:
        print(f"error: output directory {out_dir!r} is not empty (use --force)",
              file=sys.stderr)
        return 1
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved.toml"), "w") as f:
        f.write(configmod.to_toml(cfg))

    seeds = [cfg["seed"] + i for i in range(cfg["repeat"]["seeds"])]
    finals = []
    for seed in seeds:
        seed_dir = os.path.join(out_dir, f"seed_{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        ckpt_dir = os.path.join(seed_dir, "checkpoints") \
            if cfg["eval"]["checkpoint_every"] else None
        result = fedcore.run_experiment(cfg, seed, checkpoint_dir=ckpt_dir)
        with open(os.path.join(seed_dir, "metrics.csv"), "w") as f:
            f.write(result.log.to_csv())
        with open(os.path.join(seed_dir, "metrics.json"), "w") as f:
            f.write(result.log.to_json())
        with open(os.path.join(seed_dir, "cross_client_matrix.csv"), "w") as f:
            f.write(matrix_to_csv(result.log.final["cross_client_matrix"]))
        finals.append(result.log.last())
        print(f"seed {seed}: " + "  ".join(
            f"{k}={finals[-1][k]:.4f}" for k in SUMMARY_METRICS))

    lines = ["metric,mean,std"]
    for key in SUMMARY_METRICS:
        vals = np.array([row[key] for row in finals])
        lines.append(f"{key},{_fmt_float(vals.mean())},{_fmt_float(vals.std())}")
    with open(os.path.join(out_dir, "summary.csv"), "w") as f:
        f.write("\n".join(lines) + "\n")
    print(f"wrote {out_dir}/summary.csv")
    return 0


def _read_summary(run_dir: str) -> dict[str, float]:
    path = os.path.join(run_dir, "summary.csv")
    try:
        with open(path) as f:
            rows = [line.strip().split(",") for line in f if line.strip()]
    except OSError as exc:
        raise FedSimError(f"cannot read {path}: {exc}") from exc
    if not rows or rows[0] != ["metric", "mean", "std"]:
        raise FedSimError(f"{path}: not a summary file")
    return {name: float(mean) for name, mean, _ in rows[1:]}


def cmd_compare(args) -> int:
    names = []
    table = {}
    for d in args.dirs:
        name = os.path.basename(os.path.normpath(d))
        if name in table:
            raise FedSimError(f"duplicate run name {name!r}")
        names.append(name)
        table[name] = _read_summary(d)

    width = max(len(n) for n in names) + 2
    header = "run".ljust(width) + "".join(m.rjust(14) for m in SUMMARY_METRICS)
    print(header)
    for name in names:
        row = name.ljust(width)
        for metric in SUMMARY_METRICS:
            value = table[name].get(metric)
            row += (f"{value:.4f}" if value is not None else "-").rjust(14)
        print(row)

    failed = False
    for expr in args.asserts:
        ok = _eval_assert(expr, table)
        print(f"assert {expr}: {'ok' if ok else 'FAILED'}")
        failed = failed or not ok
    return 3 if failed else 0


def _eval_assert(expr: str, table: dict) -> bool:
    for op in (">=", "<=", ">", "<"):
        if op in expr:
            lhs, rhs = (s.strip() for s in expr.split(op, 1))
            break
    else:
        raise FedSimError(f"assert {expr!r}: no comparison operator")

    def value(ref: str) -> float:
        name, _, metric = ref.partition(".")
        if name not in table:
            raise FedSimError(f"assert {expr!r}: unknown run {name!r}")
        if metric not in table[name]:
            raise FedSimError(f"assert {expr!r}: unknown metric {metric!r}")
        return table[name][metric]

    a, b = value(lhs), value(rhs)
    return {">=": a >= b, "<=": a <= b, ">": a > b, "<": a < b}[op]


def gradcheck_suite(seed: int = 0, points: int = 10, eps: float = 1e-5) -> float:
    """Max relative error over seeded random checks of every loss kind and branch."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(points):
        c = 3 + (i % 3)
        net = nnet.NetworkSpec(input_dim=5, hidden_dims=(6,), feature_dim=4,
                               num_classes=c)
        theta = nnet.init_extractor(net, rng, std=0.3)
        psi = nnet.init_head(net, rng, std=0.3)
        x = rng.standard_normal(5)
        counts = rng.integers(1, 50, size=c)
        y = int(rng.integers(0, c))
        kind = losses.KINDS[i % len(losses.KINDS)]
        spec = losses.LossSpec(kind, ir_power=0.5 if (kind == "ir" and i % 2) else 1.0)
        worst = max(worst, nnet.grad_check(net, spec, counts, x, y, theta, psi, eps=eps))
        phi = nnet.init_head(net, rng, std=0.3)
        worst = max(worst, nnet.grad_check(net, spec, counts, x, y, theta, psi,
                                           phi=phi, eps=eps))
    return worst


def cmd_gradcheck(args) -> int:
    worst = gradcheck_suite(args.seed, args.points, args.eps)
    ok = worst < args.tol
    print(f"gradcheck: max relative error {worst:.3e} over {args.points} points "
          f"({'ok' if ok else 'FAILED'}, tolerance {args.tol:g})")
    return 0 if ok else 2


def cmd_partition_report(args) -> int:
    user = _load_user_config(args.config)
    user = configmod.apply_overrides(user, args.set)
    cfg = configmod.resolve(user)
    ds = cfg["dataset"]
    if ds["kind"] == "synthetic":
        train, _ = datamod.synthetic_train_test(
            ds["classes"], ds["dim"], ds["n_per_class"], ds["test_per_class"],
            ds["separation"], [cfg["seed"], 0])
    else:
        train = datamod.load_idx(ds["images_path"], ds["labels_path"])
    train = datamod.exponential_imbalance(train, cfg["imbalance_ratio"],
                                          [cfg["seed"], 6])
    partition = datamod.dirichlet_partition(train, cfg["clients"], cfg["alpha"],
                                            cfg["seed"])
    print(json.dumps(partition.report(), indent=2))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "run": cmd_run,
        "compare": cmd_compare,
        "gradcheck": cmd_gradcheck,
        "partition-report": cmd_partition_report,
    }
    try:
        return handlers[args.command](args)
    except (ConfigurationError, FormatError, DomainError, FedSimError) as exc:
        if isinstance(exc, (ConfigurationError, FormatError, DomainError)) or \
                type(exc) is FedSimError:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure, distinct from bad input
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
