"""Pre-training, the sequential task loop, evaluation, and continual-learning metrics."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .adapter import AdapterConfig, ThresholdSchedule, attach_adapters, count_parameters, merge_adapters, prune, proximal_step
from .data import DomainTask, PairedSet, endless_batches
from .model import DualEncoderModel, contrastive_loss, encode_text_set
from .optim import AdamW, OptimConfig

log = logging.getLogger(__name__)

EVAL_MODES = ("per-domain", "union")

# Transfer for a stream column averages only post-task rows 1..j-1; the
# zero-shot row 0 is left out. Flip to include it.
TRANSFER_INCLUDES_ZERO_SHOT = False


def _seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class PretrainConfig:
    iterations: int = 1500
    batch_size: int = 32
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=2e-3))
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.optim, dict):
            self.optim = OptimConfig(**self.optim)
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


@dataclass
class TrainConfig:
    iterations_per_task: int = 200
    batch_size: int = 32
    optim: OptimConfig = field(default_factory=OptimConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    eval_mode: str = "per-domain"
    global_seed: int = 0

    def __post_init__(self):
        if isinstance(self.optim, dict):
            self.optim = OptimConfig(**self.optim)
        if isinstance(self.adapter, dict):
            self.adapter = AdapterConfig(**self.adapter)
        if self.iterations_per_task < 1:
            raise ValueError("iterations_per_task must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.eval_mode not in EVAL_MODES:
            raise ValueError(f"eval_mode must be one of {EVAL_MODES}")

    @classmethod
    def full_scale_preset(cls, **overrides) -> TrainConfig:
        """500 iterations per task, as in the full-scale recipe."""
        return cls(iterations_per_task=500, **overrides)


def contrastive_step(model: DualEncoderModel, images: np.ndarray, texts: np.ndarray) -> T.Tensor:
    return contrastive_loss(model.encode_images(images), model.encode_texts(texts), model.temperature)


def pretrain(model: DualEncoderModel, corpus: PairedSet, cfg: PretrainConfig) -> DualEncoderModel:
    """Train every base parameter of ``model`` in place on ``corpus``; returns ``model``."""
    if len(corpus) == 0:
        raise ValueError("pre-training corpus is empty")
    if cfg.iterations == 0:
        return model
    model.set_trainable(True)
    params = [p for _, p in model.named_parameters()]
    decay = [p for name, p in model.named_parameters() if p.ndim == 2 and "emb" not in name]
    opt = AdamW(params, cfg.optim, decay=decay)
    stream = endless_batches(corpus, cfg.batch_size, _seed(cfg.seed, 0xBA5E))
    for it in range(cfg.iterations):
        batch = next(stream)
        opt.zero_grad()
        loss = contrastive_step(model, batch.images, batch.texts)
        T.backward(loss)
        opt.step()
        if it % 250 == 0:
            log.debug("pretrain it=%d loss=%.4f", it, loss.item())
    model.set_trainable(False)
    return model


@dataclass
class TaskStats:
    task_index: int
    domain_id: int
    adapters: list[dict]
    params_trained: int
    params_kept: int
    final_loss: float
    seconds: float
    deltas: dict | None = None

    @property
    def total_active(self) -> int:
        return sum(a["active_ranks"] for a in self.adapters)

    @property
    def total_r_init(self) -> int:
        return sum(a["r_init"] for a in self.adapters)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("deltas")
        return d


def train_task(model: DualEncoderModel, task: DomainTask, cfg: TrainConfig, task_index: int = 0,
               keep_deltas: bool = False) -> TaskStats:
    """Learn one task through fresh rank-selective adapters, then prune and merge them.

    The model is modified in place. Only the current task's data is seen.
    """
    if model.adapters():
        raise RuntimeError("model still carries adapters from a previous task")
    start = time.perf_counter()
    acfg = cfg.adapter
    rng = np.random.default_rng([cfg.global_seed, task_index, 1])
    adapters = attach_adapters(model, acfg, rng)
    A_B = [t for a in adapters for t in (a.A, a.B)]
    opt = AdamW([t for a in adapters for t in a.parameters()], cfg.optim, decay=A_B)
    schedule = ThresholdSchedule(cfg.iterations_per_task, acfg.dense_ratio, acfg.kappa_max)
    stream = endless_batches(task.train_set(), cfg.batch_size, _seed(cfg.global_seed, task_index, 2))
    loss = None
    for t in range(cfg.iterations_per_task):
        batch = next(stream)
        opt.zero_grad()
        loss = contrastive_step(model, batch.images, batch.texts)
        T.backward(loss)
        opt.step()
        if not schedule.is_dense(t):
            kappa = schedule.threshold_at(t)
            for a in adapters:
                a.w.data = proximal_step(a.w.data, kappa, acfg.threshold_mode)

    trained = count_parameters(adapters)
    rows = []
    for enc_name in ("vision", "text"):
        enc = model.encoder(enc_name)
        for key, ad in list(enc.adapters.items()):
            slim, active = prune(ad, 0.0)
            enc.adapters[key] = slim
            rows.append({"encoder": enc_name, "layer": key[0], "site": key[1],
                         "r_init": ad.r_init, "active_ranks": active})
    kept = count_parameters(model.adapters())
    deltas = merge_adapters(model)
    return TaskStats(task_index, task.domain_id, rows, trained, kept,
                     float(loss.item()), time.perf_counter() - start,
                     deltas if keep_deltas else None)


@dataclass
class LabelSpace:
    """Candidate class texts plus where each domain's classes start."""

    texts: list[list[int]]
    offsets: dict[int, int]

    @classmethod
    def for_domains(cls, tasks: Sequence[DomainTask]) -> LabelSpace:
        texts, offsets = [], {}
        for t in tasks:
            offsets[t.domain_id] = len(texts)
            texts.extend(t.class_text_tokens.tolist())
        return cls(texts, offsets)


def evaluate(model: DualEncoderModel, task: DomainTask, label_space: LabelSpace | None = None) -> float:
    """Top-1 zero-shot accuracy on ``task``'s test split.

    With no ``label_space`` the candidates are the task's own classes;
    otherwise predictions range over the whole union space.
    """
    if label_space is None:
        label_space = LabelSpace.for_domains([task])
    if task.domain_id not in label_space.offsets:
        raise ValueError(f"label space does not contain domain {task.domain_id}")
    with T.no_grad():
        z_img = model.encode_images(task.test_tokens).data
    z_txt = encode_text_set(model, label_space.texts)
    pred = (z_img @ z_txt.T).argmax(axis=1)
    truth = task.test_labels + label_space.offsets[task.domain_id]
    return float(np.mean(pred == truth))


@dataclass
class AccuracyMatrix:
    """Accuracies after each learning step (rows) on each evaluation dataset (columns).

    ``zero_shot`` is the row measured before any continual update; ``rows[i]``
    holds the accuracies after task ``i + 1``. Stream columns are ordered
    like the tasks; ``reference`` names the held-out columns.
    """

    columns: list[str]
    rows: list[list[float]]
    zero_shot: list[float] | None = None
    reference: list[str] = field(default_factory=list)

    @property
    def num_tasks(self) -> int:
        return len(self.rows)

    def stream_columns(self) -> list[str]:
        return [c for c in self.columns if c not in self.reference]

    def full(self) -> np.ndarray:
        rows = ([self.zero_shot] if self.zero_shot is not None else []) + list(self.rows)
        return np.array(rows, dtype=np.float64)

    def validate(self) -> None:
        n = len(self.columns)
        if not self.rows:
            raise ValueError("accuracy matrix has no task rows")
        all_rows = list(self.rows) + ([self.zero_shot] if self.zero_shot is not None else [])
        for r in all_rows:
            if len(r) != n:
                raise ValueError("accuracy matrix row length does not match columns")
            arr = np.asarray(r, dtype=np.float64)
            if not np.all(np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
                raise ValueError("accuracy matrix entries must be finite values in [0, 1]")
        if len(self.stream_columns()) != self.num_tasks:
            raise ValueError("need one stream column per learned task")
        if any(c not in self.columns for c in self.reference):
            raise ValueError("reference column not present in columns")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> AccuracyMatrix:
        return cls(list(d["columns"]), [list(map(float, r)) for r in d["rows"]],
                   None if d.get("zero_shot") is None else list(map(float, d["zero_shot"])),
                   list(d.get("reference", [])))


@dataclass
class Metrics:
    columns: list[str]
    transfer: list[float | None]
    average: list[float]
    last: list[float]
    reference: dict[str, dict[str, float]]

    @property
    def transfer_mean(self) -> float | None:
        vals = [v for v in self.transfer if v is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def average_mean(self) -> float:
        return float(np.mean(self.average))

    @property
    def last_mean(self) -> float:
        return float(np.mean(self.last))

    def to_dict(self) -> dict:
        return {"columns": self.columns, "transfer": self.transfer, "average": self.average,
                "last": self.last, "transfer_mean": self.transfer_mean,
                "average_mean": self.average_mean, "last_mean": self.last_mean,
                "reference": self.reference}


def metrics(matrix: AccuracyMatrix) -> Metrics:
    """Transfer / Average / Last per stream column, plus held-out reference columns."""
    matrix.validate()
    A = np.array(matrix.rows, dtype=np.float64)
    n_tasks = A.shape[0]
    col_index = {c: i for i, c in enumerate(matrix.columns)}
    stream = matrix.stream_columns()
    transfer, average, last = [], [], []
    for j, name in enumerate(stream, start=1):
        col = A[:, col_index[name]]
        before = list(col[: j - 1])
        if TRANSFER_INCLUDES_ZERO_SHOT and matrix.zero_shot is not None:
            before.insert(0, matrix.zero_shot[col_index[name]])
        transfer.append(float(np.mean(before)) if before else None)
        average.append(float(col.mean()))
        last.append(float(col[n_tasks - 1]))
    reference = {}
    for name in matrix.reference:
        col = A[:, col_index[name]]
        reference[name] = {"transfer": float(col.mean()), "average": float(col.mean()),
                           "last": float(col[-1])}
    return Metrics(stream, transfer, average, last, reference)


@dataclass
class RunRecord:
    config: dict
    matrix: AccuracyMatrix
    task_stats: list[TaskStats]
    checkpoints: list[str] = field(default_factory=list)

    def adapter_rows(self) -> list[dict]:
        return [{"task": s.task_index + 1, "domain_id": s.domain_id, **row}
                for s in self.task_stats for row in s.adapters]

    def to_dict(self, timing: bool = True) -> dict:
        stats = [s.to_dict() for s in self.task_stats]
        if not timing:
            for s in stats:
                s.pop("seconds")
        return {"config": self.config, "matrix": self.matrix.to_dict(),
                "metrics": metrics(self.matrix).to_dict(), "task_stats": stats,
                "checkpoints": self.checkpoints}

    @classmethod
    def from_dict(cls, d: dict) -> RunRecord:
        stats = [TaskStats(**{k: v for k, v in s.items()}) for s in d["task_stats"]]
        return cls(d["config"], AccuracyMatrix.from_dict(d["matrix"]), stats, list(d.get("checkpoints", [])))


def evaluate_row(model: DualEncoderModel, tasks: Sequence[DomainTask], eval_mode: str) -> list[float]:
    space = LabelSpace.for_domains(tasks) if eval_mode == "union" else None
    return [evaluate(model, t, space) for t in tasks]


def run_stream(pretrained: DualEncoderModel, stream: Sequence[DomainTask], cfg: TrainConfig,
               reference: Sequence[DomainTask] = (), config_snapshot: dict | None = None,
               on_task_end=None) -> tuple[DualEncoderModel, RunRecord]:
    """Learn ``stream`` in order from a copy of ``pretrained``; evaluate every column after each step."""
    if len(stream) < 1:
        raise ValueError("the task stream is empty")
    model = pretrained.clone()
    model.set_trainable(False)
    columns_tasks = list(stream) + list(reference)
    columns = [f"domain_{t.domain_id}" for t in columns_tasks]
    ref_names = [f"domain_{t.domain_id}" for t in reference]
    zero = evaluate_row(model, columns_tasks, cfg.eval_mode)
    rows, stats = [], []
    for i, task in enumerate(stream):
        s = train_task(model, task, cfg, task_index=i)
        stats.append(s)
        rows.append(evaluate_row(model, columns_tasks, cfg.eval_mode))
        log.info("task %d (domain %d): active ranks %d/%d, acc %.3f", i + 1, task.domain_id,
                 s.total_active, s.total_r_init, rows[-1][i])
        if on_task_end is not None:
            on_task_end(i, model, s)
    matrix = AccuracyMatrix(columns, rows, zero, ref_names)
    return model, RunRecord(config_snapshot or {}, matrix, stats)
