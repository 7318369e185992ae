from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import workbench as wb
from .config import ExperimentConfig


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment JSON (defaults built in when omitted)")
    p.add_argument("--seed", type=int, help="override the config's global seed")
    p.add_argument("--out", type=Path, help="output directory (default: config output_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dyrank", description="Rank-selective continual adapter workbench")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("pretrain", help="pre-train the dual encoder on the base domains")
    _experiment_args(p)

    for name, text in (("run", "learn the continual stream"),
                       ("sweep", "rank x placement sweep with plain fixed-rank adapters"),
                       ("ablate", "zero per-site updates of one trained task")):
        p = sub.add_parser(name, help=text)
        _experiment_args(p)
        p.add_argument("--pretrained", type=Path, help="start from this checkpoint instead of pre-training")

    p = sub.add_parser("analyze", help="amplification factors and rank allocation for one task of a run")
    p.add_argument("--run-dir", type=Path, required=True)
    p.add_argument("--task", type=int, help="1-based task index (default: last)")
    p.add_argument("--amp-rank", type=int, help="singular directions per matrix (default: active ranks)")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("metrics", help="Transfer / Average / Last from a stored accuracy matrix")
    p.add_argument("--matrix", type=Path, required=True, help="matrix JSON or run.json")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("params", help="trainable adapter parameters for a model geometry")
    p.add_argument("--preset", help="named geometry, e.g. vit-b16 or desk")
    p.add_argument("--config", type=Path)
    p.add_argument("--rank", type=int, default=16)
    p.add_argument("--sites", nargs="*", help="placements, e.g. all, attn, vision.Q")
    return parser


def _experiment(args) -> tuple[ExperimentConfig, Path]:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    out = args.out or Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def dispatch(args) -> dict:
    cmd = args.command
    if cmd == "pretrain":
        cfg, out = _experiment(args)
        return wb.cmd_pretrain(cfg, out)
    if cmd == "run":
        cfg, out = _experiment(args)
        rec = wb.cmd_run(cfg, out, args.pretrained)
        return {"run": str(out / "run.json"), "metrics": rec.to_dict()["metrics"]}
    if cmd == "sweep":
        cfg, out = _experiment(args)
        return {"records": [r.to_dict() for r in wb.cmd_sweep(cfg, out, args.pretrained)]}
    if cmd == "ablate":
        cfg, out = _experiment(args)
        return {"rows": wb.cmd_ablate(cfg, out, args.pretrained)}
    if cmd == "analyze":
        out = args.out or args.run_dir
        out.mkdir(parents=True, exist_ok=True)
        summary = wb.cmd_analyze(args.run_dir, out, args.task, args.amp_rank)
        return {"task": summary["task"], "allocation": summary["allocation"]}
    if cmd == "metrics":
        result = wb.cmd_metrics(args.matrix)
        if args.out:
            wb.write_json(args.out, result)
        return result
    if cmd == "params":
        cfg = ExperimentConfig.load(args.config) if args.config else None
        if args.preset is None and cfg is None:
            args.preset = "desk"
        return wb.cmd_params(args.preset, cfg, args.rank, args.sites or None)
    raise UsageError(f"unknown command {cmd!r}")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        result = dispatch(args)
    except Exception as exc:  # every failure leaves as one JSON line on stderr
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 2 if isinstance(exc, UsageError) else 1
    sys.stdout.write(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
