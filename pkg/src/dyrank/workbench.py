"""Experiment orchestration behind the command line: build data, pre-train,
run the stream, and export JSON/CSV reports."""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Iterable, Sequence

from .adapter import adapter_shapes, count_low_rank_parameters, count_parameters
from .analysis import ablate_modules, amplification_report, placement_rank_sweep, rank_allocation
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PRESETS, ExperimentConfig
from .data import DomainTask, build_pretrain_corpus, generate_domain
from .model import DualEncoderConfig, DualEncoderModel
from .trainer import AccuracyMatrix, RunRecord, evaluate, metrics, pretrain, run_stream, train_task

log = logging.getLogger(__name__)

SWEEP_FIELDS = ("placement", "rank", "seed", "new_acc", "ref_acc")
ALLOCATION_FIELDS = ("encoder", "layer", "site", "active_ranks")
AMPLIFICATION_FIELDS = ("encoder", "layer", "site", "amp", "r")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, fields: Sequence[str], rows: Iterable[dict]) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(fields)
        for row in rows:
            w.writerow([_cell(row.get(f)) for f in fields])
    return path


def read_csv(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def build_tasks(cfg: ExperimentConfig) -> dict[str, list[DomainTask]]:
    return {
        "base": [generate_domain(s) for s in cfg.data.base],
        "reference": [generate_domain(s) for s in cfg.data.reference],
        "stream": [generate_domain(s) for s in cfg.data.stream],
    }


def pretrained_model(cfg: ExperimentConfig, tasks: dict[str, list[DomainTask]] | None = None) -> DualEncoderModel:
    tasks = tasks or build_tasks(cfg)
    model = DualEncoderModel(cfg.model, seed=cfg.global_seed)
    corpus = build_pretrain_corpus(tasks["base"], cfg.data.mix_seed)
    return pretrain(model, corpus, cfg.pretrain)


def _load_or_pretrain(cfg: ExperimentConfig, tasks, checkpoint) -> DualEncoderModel:
    if checkpoint:
        return load_checkpoint(checkpoint)
    return pretrained_model(cfg, tasks)


def cmd_pretrain(cfg: ExperimentConfig, out: Path) -> dict:
    tasks = build_tasks(cfg)
    model = pretrained_model(cfg, tasks)
    save_checkpoint(model, out / "pretrained.ckpt")
    summary = {
        "base": {f"domain_{t.domain_id}": evaluate(model, t) for t in tasks["base"]},
        "reference": {f"domain_{t.domain_id}": evaluate(model, t) for t in tasks["reference"]},
        "checkpoint": "pretrained.ckpt",
    }
    write_json(out / "pretrain.json", summary)
    return summary


def matrix_rows(matrix: AccuracyMatrix) -> list[dict]:
    rows = []
    if matrix.zero_shot is not None:
        rows.append({"step": 0, **dict(zip(matrix.columns, matrix.zero_shot))})
    for i, r in enumerate(matrix.rows, start=1):
        rows.append({"step": i, **dict(zip(matrix.columns, r))})
    return rows


def cmd_run(cfg: ExperimentConfig, out: Path, checkpoint=None) -> RunRecord:
    tasks = build_tasks(cfg)
    model = _load_or_pretrain(cfg, tasks, checkpoint)
    ckdir = out / "checkpoints"
    ckdir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, ckdir / "step_0.ckpt")
    paths = ["checkpoints/step_0.ckpt"]

    def on_task_end(i, m, _stats):
        save_checkpoint(m, ckdir / f"step_{i + 1}.ckpt")
        paths.append(f"checkpoints/step_{i + 1}.ckpt")

    _, record = run_stream(model, tasks["stream"], cfg.train, tasks["reference"],
                           config_snapshot=cfg.to_dict(), on_task_end=on_task_end)
    record.checkpoints = paths
    write_json(out / "run.json", record.to_dict())
    write_csv(out / "accuracy.csv", ["step"] + record.matrix.columns, matrix_rows(record.matrix))
    write_csv(out / "ranks.csv", ("task",) + ALLOCATION_FIELDS, record.adapter_rows())
    return record


def cmd_sweep(cfg: ExperimentConfig, out: Path, checkpoint=None) -> list:
    tasks = build_tasks(cfg)
    model = _load_or_pretrain(cfg, tasks, checkpoint)
    a = cfg.analysis
    records = placement_rank_sweep(model, tasks["stream"][0], tasks["reference"][0],
                                   a.sweep_placements, a.sweep_ranks, a.sweep_seeds, cfg.train)
    write_csv(out / "sweep.csv", SWEEP_FIELDS, [r.to_dict() for r in records])
    return records


def cmd_ablate(cfg: ExperimentConfig, out: Path, checkpoint=None) -> list[dict]:
    tasks = build_tasks(cfg)
    pre = _load_or_pretrain(cfg, tasks, checkpoint)
    probe, reference = tasks["stream"][0], tasks["reference"][0]
    adapted = pre.clone()
    stats = train_task(adapted, probe, cfg.train, keep_deltas=True)
    rows = []
    for selector in cfg.analysis.ablate_selectors:
        expanded = []
        for item in selector:
            expanded.extend([f"{item}.{s}" for s in ("Q", "K", "V", "O", "FC", "Proj")]
                            if "." not in item else [item])
        p_acc, r_acc = ablate_modules(pre, stats.deltas, expanded, probe, reference)
        rows.append({"zeroed": "+".join(selector) or "none", "probe_acc": p_acc, "ref_acc": r_acc})
    write_csv(out / "ablate.csv", ("zeroed", "probe_acc", "ref_acc"), rows)
    return rows


def cmd_analyze(run_dir: Path, out: Path, task: int | None = None, amp_rank: int | None = None) -> dict:
    record = RunRecord.from_dict(json.loads((run_dir / "run.json").read_text(encoding="utf-8")))
    n = len(record.task_stats)
    task = n if task is None else task
    if not 1 <= task <= n:
        raise ValueError(f"task must lie in [1, {n}]")
    stats = record.task_stats[task - 1]
    before = load_checkpoint(run_dir / record.checkpoints[task - 1])
    after = load_checkpoint(run_dir / record.checkpoints[task])
    ranks = {(a["encoder"], a["layer"], a["site"]): a["active_ranks"] for a in stats.adapters}
    amp = amplification_report(before, after, ranks, amp_rank)
    alloc = rank_allocation(stats.adapters)
    write_csv(out / "amplification.csv", AMPLIFICATION_FIELDS, amp)
    write_csv(out / "allocation.csv", ALLOCATION_FIELDS, alloc["rows"])
    summary = {"task": task, "allocation": {
        "total": alloc["total"],
        "by_encoder_site": {f"{e}.{s}": v for (e, s), v in alloc["by_encoder_site"].items()},
        "by_encoder_layer": {f"{e}.{l}": v for (e, l), v in alloc["by_encoder_layer"].items()},
    }, "amplification": amp}
    write_json(out / "analysis.json", summary)
    return summary


def load_matrix(path) -> AccuracyMatrix:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if "matrix" in doc:
        doc = doc["matrix"]
    return AccuracyMatrix.from_dict(doc)


def cmd_metrics(matrix_path) -> dict:
    return metrics(load_matrix(matrix_path)).to_dict()


def parameter_budget(model_cfg: DualEncoderConfig, rank: int, sites=None) -> dict:
    shapes = adapter_shapes(model_cfg, rank, sites)
    low = count_low_rank_parameters(shapes)
    total = count_parameters(shapes)
    return {"adapters": len(shapes), "rank": rank, "low_rank": low,
            "importance": total - low, "total": total}


def cmd_params(preset: str | None, cfg: ExperimentConfig | None, rank: int, sites=None) -> dict:
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        model_cfg = PRESETS[preset]
    else:
        model_cfg = (cfg or ExperimentConfig()).model
    return parameter_budget(model_cfg, rank, sites)
