"""mor-kit command line: train, sweep, bench, fault, inspect.

Exit codes: 0 success, 2 config/schema error, 3 numeric divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .experiments import run_bench, run_fault, run_sweep, run_train
from .layer import load_checkpoint, save_checkpoint
from .trainer import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("mor_kit")

TRAIN_LOG_COLUMNS = ["step", "epoch", "task", "balance_expert", "balance_router", "total", "wall_ms"]


def write_csv(path: Path, rows: list[dict], columns: list[str] | None = None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def write_json(path: Path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _parse_list(text: str, kind):
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad list {text!r}: {e}") from e


def _prepare(args) -> tuple[ExperimentConfig, Path]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.out is not None:
        cfg.output.directory = args.out
    out = Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(cfg.to_json())
    return cfg, out


def cmd_train(args) -> int:
    cfg, out = _prepare(args)
    run = run_train(cfg)
    save_checkpoint(run.model, out / "checkpoint.json")
    write_csv(out / "train_log.csv", run.result.step_log, TRAIN_LOG_COLUMNS)
    write_csv(out / "epoch_log.csv", run.result.epoch_log)
    (out / "balance_report.json").write_text(run.report.to_json() + "\n")
    (out / "histogram.csv").write_text(run.report.histogram_csv(condition=run.summary["mode"]))
    write_json(out / "summary.json", run.summary)
    log.info("final task loss %.6g (epoch 0: %.6g), CoV %.3f", run.summary["final_task"],
             run.summary["initial_task"], run.summary["cov"])
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, out = _prepare(args)
    rows = run_sweep(cfg, args.routers)
    write_csv(out / "sweep.csv", rows)
    for row in rows:
        log.info("r=%d task=%.4g cov=%.3f fwd=%.3gus overhead=%+.1f%%", row["n_routers"], row["final_task"],
                 row["cov"], row["forward_us_per_token"], 100 * row["forward_overhead"])
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg, out = _prepare(args)
    report = run_bench(cfg, args.routers)
    (out / "latency.json").write_text(report.to_json() + "\n")
    (out / "latency.csv").write_text(report.to_csv())
    for e in report.entries:
        log.info("r=%d forward %.3gus/token (%+.1f%%), train step %.3gms (%+.1f%%)", e.n_routers,
                 e.forward_us_per_token, 100 * e.overhead, e.train_step_ms, 100 * e.train_overhead)
    return EXIT_OK


def cmd_fault(args) -> int:
    cfg, out = _prepare(args)
    rows, summary = run_fault(cfg, args.sigma)
    write_csv(out / "fault_rows.csv", rows)
    write_csv(out / "fault_summary.csv", [asdict(s) for s in summary])
    for s in summary:
        log.info("sigma=%g agreement single=%.4f mor=%.4f diff=%.4f [%.4f, %.4f]", s.sigma,
                 s.single_agreement, s.mor_agreement, s.diff_mean, s.diff_ci_low, s.diff_ci_high)
    return EXIT_OK


def inspect_summary(path) -> str:
    model = load_checkpoint(path)
    data = json.loads(Path(path).read_text())
    lines = [f"schema: {data['schema']}", f"layers: {len(model.layers)}"]
    for i, layer in enumerate(model.layers):
        bank, router = layer.bank, layer.router
        lines.append(f"layer {i}: mode={layer.mode} d_in={layer.d_in} d_out={layer.d_out} "
                     f"experts={bank.n_experts} rank={bank.rank} scaling={bank.scaling:g} "
                     f"k_experts={layer.k_experts} routers={router.n_routers} k_routers={layer.k_routers}")
        lines.append(f"  w0 norm: {np.linalg.norm(layer.w0):.6g}")
        lines.append("  A norms: " + " ".join(f"{np.linalg.norm(a):.6g}" for a in bank.a))
        lines.append("  B norms: " + " ".join(f"{np.linalg.norm(b):.6g}" for b in bank.b))
        lines.append("  sub-router norms: " + " ".join(f"{np.linalg.norm(s):.6g}" for s in router.subs))
        if router.main is not None:
            lines.append(f"  main router norm: {np.linalg.norm(router.main):.6g}")
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    path = args.checkpoint or args.path
    if path is None:
        raise ConfigError("--checkpoint", "a checkpoint path is required")
    print(inspect_summary(path))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mor-kit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {"train": cmd_train, "sweep": cmd_sweep, "bench": cmd_bench, "fault": cmd_fault}
    for name, fn in handlers.items():
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--routers", type=lambda s: _parse_list(s, int))
        p.add_argument("--sigma", type=lambda s: _parse_list(s, float))
        p.set_defaults(func=fn)
    p = sub.add_parser("inspect")
    p.add_argument("path", nargs="?")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        # malformed checkpoints and other schema-level rejections
        print(f"schema error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
