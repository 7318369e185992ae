"""Measurement tools: amplification factors, rank-allocation tallies,
rank/placement sweeps and module ablations."""

from __future__ import annotations

import math
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .adapter import parse_site_filter
from .data import DomainTask
from .linalg import jacobi_svd
from .model import ENCODERS, SITES, DualEncoderModel, site_name
from .trainer import LabelSpace, TrainConfig, evaluate, train_task


def _top_r_ratio(W0: np.ndarray, dW: np.ndarray, U: np.ndarray, Vt: np.ndarray) -> float:
    denom = float(np.linalg.norm(U.T @ W0 @ Vt.T))
    if denom == 0.0:
        warnings.warn("base weight has no energy in the update's top singular directions; "
                      "amplification reported as inf", RuntimeWarning, stacklevel=3)
        return math.inf
    return float(np.linalg.norm(dW)) / denom


def _check_amp_args(W0, dW, r) -> tuple[np.ndarray, np.ndarray]:
    W0 = np.asarray(W0, dtype=np.float64)
    dW = np.asarray(dW, dtype=np.float64)
    if W0.shape != dW.shape or W0.ndim != 2:
        raise ValueError(f"W0 {W0.shape} and delta {dW.shape} must be matrices of equal shape")
    if not 1 <= r <= min(dW.shape):
        raise ValueError(f"r must lie in [1, {min(dW.shape)}]")
    return W0, dW


def amplification_factor(W0, dW, r: int) -> float | None:
    """``||dW||_F / ||U_r^T W0 V_r||_F`` with ``U_r, V_r`` the top-``r`` singular vectors of ``dW``.

    Returns ``None`` for a zero update (the ratio is undefined there).
    """
    W0, dW = _check_amp_args(W0, dW, r)
    if not np.any(dW):
        return None
    U, _, Vt = jacobi_svd(dW)
    return _top_r_ratio(W0, dW, U[:, :r], Vt[:r])


def amplification_factor_eig(W0, dW, r: int) -> float | None:
    """Same quantity via the eigendecomposition of ``dW^T dW`` (independent second path)."""
    W0, dW = _check_amp_args(W0, dW, r)
    if not np.any(dW):
        return None
    evals, evecs = np.linalg.eigh(dW.T @ dW)
    order = np.argsort(evals)[::-1][:r]
    V = evecs[:, order]
    sig = np.sqrt(np.maximum(evals[order], 0.0))
    U = (dW @ V) / np.where(sig > 0, sig, 1.0)
    return _top_r_ratio(W0, dW, U, V.T)


def amplification_report(before: DualEncoderModel, after: DualEncoderModel,
                         ranks: dict[tuple[str, int, str], int] | None = None,
                         r: int | None = None) -> list[dict]:
    """Per-matrix amplification of ``after - before``.

    ``r`` fixes the number of singular directions; otherwise each matrix uses
    its entry in ``ranks`` (typically the post-prune active rank).
    """
    out = []
    for enc in ENCODERS:
        e_before, e_after = before.encoder(enc), after.encoder(enc)
        for layer in range(e_before.cfg.num_layers):
            for site in SITES:
                key = site_name(layer, site)
                W0 = e_before.params[key].data
                dW = e_after.params[key].data - W0
                rr = r if r is not None else (ranks or {}).get((enc, layer, site), 0)
                rr = min(rr, min(W0.shape))
                amp = amplification_factor(W0, dW, rr) if rr >= 1 and np.any(dW) else None
                out.append({"encoder": enc, "layer": layer, "site": site, "amp": amp, "r": rr})
    return out


def rank_allocation(rows: Iterable[dict]) -> dict:
    """Active-rank tallies grouped by (encoder, site) and by (encoder, layer).

    ``rows`` are per-adapter statistics with ``encoder``, ``layer``, ``site``,
    ``active_ranks`` and ``r_init`` keys (and optionally ``task``).
    """
    rows = list(rows)
    by_site: dict[tuple[str, str], list[int]] = defaultdict(list)
    by_layer: dict[tuple[str, int], list[int]] = defaultdict(list)
    by_task: dict[int, int] = defaultdict(int)
    for row in rows:
        n = int(row["active_ranks"])
        by_site[(row["encoder"], row["site"])].append(n)
        by_layer[(row["encoder"], int(row["layer"]))].append(n)
        by_task[int(row.get("task", 1))] += n

    def summarize(groups):
        return {k: {"sum": int(sum(v)), "mean": float(np.mean(v)), "count": len(v)}
                for k, v in sorted(groups.items())}

    return {
        "by_encoder_site": summarize(by_site),
        "by_encoder_layer": summarize(by_layer),
        "by_task": dict(sorted(by_task.items())),
        "total": int(sum(int(r["active_ranks"]) for r in rows)),
        "rows": [{k: r[k] for k in ("encoder", "layer", "site", "active_ranks")} | (
            {"task": r["task"]} if "task" in r else {}) for r in rows],
    }


@dataclass
class SweepRecord:
    placement: str
    rank: int
    seed: int
    new_acc: float
    ref_acc: float

    def to_dict(self) -> dict:
        return asdict(self)


def placement_rank_sweep(pretrained: DualEncoderModel, probe: DomainTask, reference: DomainTask,
                         placements: Sequence[str], ranks: Sequence[int], seeds: Sequence[int],
                         cfg: TrainConfig) -> list[SweepRecord]:
    """Train plain fixed-rank adapters (no thresholding) for each grid cell from the same snapshot."""
    if not placements or not ranks or not seeds:
        raise ValueError("sweep grid is empty")
    out = []
    for placement in placements:
        parse_site_filter(placement)
        for r in ranks:
            for seed in seeds:
                model = pretrained.clone()
                if r > 0:
                    acfg = replace(cfg.adapter, r_init=int(r), kappa_max=0.0, site_filter=[placement])
                    train_task(model, probe, replace(cfg, adapter=acfg, global_seed=int(seed)))
                out.append(SweepRecord(placement, int(r), int(seed),
                                       evaluate(model, probe), evaluate(model, reference)))
    return out


def _selector_pairs(selector: Iterable) -> set[tuple[str, str]]:
    pairs = set()
    for item in selector:
        enc, site = item.split(".", 1) if isinstance(item, str) else item
        if enc not in ENCODERS or site not in SITES:
            raise ValueError(f"unknown site {enc}.{site}")
        pairs.add((enc, site))
    return pairs


def apply_deltas(pretrained: DualEncoderModel, deltas: dict, zeroed: Iterable = ()) -> DualEncoderModel:
    """Copy of ``pretrained`` with every stored delta added except those at ``zeroed`` sites."""
    skip = _selector_pairs(zeroed)
    model = pretrained.clone()
    for (enc, layer, site), d in deltas.items():
        if (enc, site) in skip:
            continue
        p = model.encoder(enc).params[site_name(layer, site)]
        p.data = p.data + d
    return model


def ablate_modules(pretrained: DualEncoderModel, deltas: dict, selector: Iterable,
                   probe: DomainTask, reference: DomainTask,
                   label_space: LabelSpace | None = None) -> tuple[float, float]:
    """Accuracies on (probe, reference) with the selected sites' updates removed."""
    model = apply_deltas(pretrained, deltas, selector)
    return evaluate(model, probe, label_space), evaluate(model, reference, label_space)
