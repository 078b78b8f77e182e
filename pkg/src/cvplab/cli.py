"""Command line entry point: ``cvplab {generate,train,analyze,sweep}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .datagen import DataError, generate, save_csv
from .experiment import RESOLVED, history_for, run_analyze, run_sweep, run_train
from .model import load_checkpoint
from .trainer import Ablation, NumericFailure

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

ABLATIONS = [a.value for a in Ablation if a is not Ablation.NO_ANT]


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    if getattr(args, "ablation", None):
        cfg.ablation = args.ablation
    return cfg


def cmd_generate(args) -> int:
    cfg = _config(args)
    if cfg.dataset.generator is None:
        raise ConfigError("generate needs a 'dataset.generator' section")
    out = Path(cfg.output_dir)
    source, target = generate(cfg.dataset.generator, cfg.seed)
    try:
        for ds in (source, target):
            path = save_csv(out / f"{ds.domain}.csv", ds)
            print(f"wrote {path} ({len(ds)} rows)")
    except OSError as e:
        raise DataError(f"cannot write to {out}: {e}") from None
    cfg.resolved().dump(out / RESOLVED)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    base = Path(args.config).resolve().parent
    res = run_train(cfg, cfg.output_dir, resume=args.resume, base_dir=base)
    rec = res.final
    if rec is not None:
        print(f"cycle {rec.cycle}: src_acc {rec.src_acc:.4f} tgt_acc {rec.tgt_acc:.4f}")
    print(f"wrote {res.out_dir}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _config(args)
    base = Path(args.config).resolve().parent
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(cfg.output_dir) / "checkpoint.npz"
    if not ckpt.is_file():
        raise DataError(f"{ckpt}: no such checkpoint")
    try:
        params = load_checkpoint(ckpt).params
    except (ValueError, KeyError, OSError) as e:
        raise DataError(f"{ckpt}: {e}") from None
    history = history_for(ckpt, args.metrics)
    report = run_analyze(cfg, params, cfg.output_dir, history, base_dir=base)
    osc = report.get("oscillation", {})
    if osc.get("value") is not None:
        print(f"oscillation suite: {osc['value']:.4f}")
    for name, c in report.get("uncertainty", {}).get("correlations", {}).items():
        shown = f"{c['r']:+.3f}" if c["r"] is not None else c["status"]
        print(f"r(sigma, {name}) = {shown}")
    print(f"wrote {Path(cfg.output_dir) / 'analysis.json'}")
    return EXIT_OK


def _values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values must be comma separated numbers, got {text!r}") from None


def cmd_sweep(args) -> int:
    cfg = _config(args)
    rows = run_sweep(cfg, args.axis, _values(args.values), cfg.output_dir, args.seeds, args.jobs)
    for r in rows:
        acc = "failed" if r["tgt_acc_mean"] is None else f"{100 * r['tgt_acc_mean']:.2f}%"
        print(f"{r['axis']}={r['value']}: {acc}")
    if all(r["runs"] == r["failed"] for r in rows):
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cvplab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log every cycle")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--seed", type=int, help="override the global seed")
        sp.add_argument("--out", help="override the output directory")

    g = sub.add_parser("generate", help="write source/target CSVs from a generator spec")
    common(g)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="pretrain and adapt, write checkpoint and metrics")
    common(t)
    t.add_argument("--ablation", choices=ABLATIONS)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(fn=cmd_train)

    a = sub.add_parser("analyze", help="oscillation, correlations and sigma trajectory")
    common(a)
    a.add_argument("--checkpoint", help="defaults to <out>/checkpoint.npz")
    a.add_argument("--metrics", help="metrics CSV; defaults to the history in the checkpoint")
    a.set_defaults(fn=cmd_analyze)

    s = sub.add_parser("sweep", help="target accuracy over alpha or M")
    common(s)
    s.add_argument("--ablation", choices=ABLATIONS)
    s.add_argument("--axis", choices=["alpha", "M"], required=True)
    s.add_argument("--values", required=True, help="comma separated, e.g. 32,64,128,256")
    s.add_argument("--seeds", type=int, default=1, help="runs per value, seeds seed..seed+n-1")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericFailure as e:
        print(f"numeric failure: {e} (step {e.step}, term {e.term})", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
