"""Rank-selective low-rank adapters with L1-proximal importance weights.

Each adapter contributes ``delta = B @ diag(w) @ A`` to one frozen base
matrix. The importance vector ``w`` is shrunk toward zero by a soft-threshold
after every optimizer step of the sparse phase; ranks whose importance is
exactly zero at the end of a task are pruned and the remainder is folded
into the base weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .model import ATTN_SITES, ENCODERS, MLP_SITES, SITES, DualEncoderConfig, DualEncoderModel, site_name
from .tensor import Tensor

THRESHOLD_MODES = ("shrink", "paper_literal")

Target = tuple[str, int, str]  # (encoder, layer, site)


def parse_site_filter(spec: str | Iterable[str] | None) -> tuple[tuple[str, str], ...]:
    """Expand a placement description into ``(encoder, site)`` pairs.

    Accepts ``None``/``"all"``, group names (``attn``, ``mlp``, ``vision``,
    ``text``, ``vision-attn``, ...), explicit ``"vision.Q"`` entries, or a
    list of any of these.
    """
    if spec is None:
        spec = ["all"]
    elif isinstance(spec, str):
        spec = [spec]
    out: list[tuple[str, str]] = []
    for item in spec:
        for pair in _expand(item):
            if pair not in out:
                out.append(pair)
    if not out:
        raise ValueError("site filter selects no adapter sites")
    return tuple(out)


def _expand(item: str) -> list[tuple[str, str]]:
    if "." in item:
        enc, site = item.split(".", 1)
        if enc not in ENCODERS or site not in SITES:
            raise ValueError(f"unknown site {item!r}")
        return [(enc, site)]
    groups = {"all": SITES, "attn": ATTN_SITES, "mlp": MLP_SITES}
    if "-" in item:
        enc, grp = item.split("-", 1)
        encs = [enc]
    elif item in ENCODERS:
        encs, grp = [item], "all"
    else:
        encs, grp = list(ENCODERS), item
    if grp not in groups or any(e not in ENCODERS for e in encs):
        raise ValueError(f"unknown placement {item!r}")
    return [(e, s) for e in encs for s in groups[grp]]


@dataclass
class AdapterConfig:
    r_init: int = 16
    kappa_max: float = 0.005
    dense_ratio: float = 0.5
    threshold_mode: str = "shrink"
    site_filter: list[str] = field(default_factory=lambda: ["all"])

    def __post_init__(self):
        if self.r_init < 1:
            raise ValueError("r_init must be >= 1")
        if self.kappa_max < 0:
            raise ValueError("kappa_max must be >= 0")
        if not 0.0 <= self.dense_ratio < 1.0:
            raise ValueError("dense_ratio must lie in [0, 1)")
        if self.threshold_mode not in THRESHOLD_MODES:
            raise ValueError(f"threshold_mode must be one of {THRESHOLD_MODES}")
        if isinstance(self.site_filter, str):
            self.site_filter = [self.site_filter]
        self.site_filter = list(self.site_filter)
        parse_site_filter(self.site_filter)

    def sites(self) -> tuple[tuple[str, str], ...]:
        return parse_site_filter(self.site_filter)


class RankSelectiveAdapter:
    """Trainable ``(A, B, w)`` attached to one base matrix of shape ``(d, k)``."""

    def __init__(self, target: Target, A: np.ndarray, B: np.ndarray, w: np.ndarray,
                 r_init: int | None = None):
        A, B, w = (np.asarray(x, dtype=np.float64) for x in (A, B, w))
        r = w.shape[0]
        if A.shape[0] != r or B.shape[1] != r or w.ndim != 1:
            raise ValueError(f"inconsistent adapter ranks: A {A.shape}, B {B.shape}, w {w.shape}")
        self.target = tuple(target)
        self.A = Tensor(A, requires_grad=True)
        self.B = Tensor(B, requires_grad=True)
        self.w = Tensor(w, requires_grad=True)
        self.r_init = r if r_init is None else int(r_init)

    @classmethod
    def initialize(cls, target: Target, d: int, k: int, r: int,
                   rng: np.random.Generator) -> RankSelectiveAdapter:
        bound = 1.0 / math.sqrt(k)
        A = rng.uniform(-bound, bound, (r, k))
        B = np.zeros((d, r))
        w = rng.uniform(0.0, 1.0, r)
        return cls(target, A, B, w, r)

    @property
    def rank(self) -> int:
        return self.w.shape[0]

    @property
    def d(self) -> int:
        return self.B.shape[0]

    @property
    def k(self) -> int:
        return self.A.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B, self.w]

    def delta(self) -> Tensor:
        """Recorded ``(B * w) @ A``, i.e. the rank-weighted sum of outer products."""
        return (self.B * self.w) @ self.A

    def delta_array(self) -> np.ndarray:
        return delta(self)

    def active_ranks(self) -> int:
        return int(np.count_nonzero(self.w.data))

    def clone(self) -> RankSelectiveAdapter:
        return RankSelectiveAdapter(self.target, self.A.data.copy(), self.B.data.copy(),
                                    self.w.data.copy(), self.r_init)

    def __repr__(self) -> str:
        enc, layer, site = self.target
        return f"RankSelectiveAdapter({enc}.{layer}.{site}, d={self.d}, k={self.k}, rank={self.rank})"


def delta(adapter: RankSelectiveAdapter) -> np.ndarray:
    if adapter.rank == 0:
        return np.zeros((adapter.d, adapter.k))
    return (adapter.B.data * adapter.w.data) @ adapter.A.data


def proximal_step(w_hat, kappa: float, mode: str = "shrink") -> np.ndarray:
    """Soft-threshold the post-gradient importances ``w_hat`` at level ``kappa``.

    ``shrink`` is the proximal map of ``kappa * ||w||_1``:
    ``sign(x) * max(|x| - kappa, 0)``. ``paper_literal`` keeps survivors and
    pushes them *away* from zero, ``1(|x| > kappa) * (x + sign(x) * kappa)``.
    """
    if kappa < 0:
        raise ValueError("threshold kappa must be non-negative")
    x = np.asarray(w_hat, dtype=np.float64)
    if mode == "shrink":
        return np.sign(x) * np.maximum(np.abs(x) - kappa, 0.0)
    if mode == "paper_literal":
        return np.where(np.abs(x) > kappa, x + np.sign(x) * kappa, 0.0)
    raise ValueError(f"unknown threshold mode {mode!r}")


@dataclass(frozen=True)
class ThresholdSchedule:
    """Zero threshold for the dense prefix, then a linear ramp to ``kappa_max``."""

    total_iters: int
    dense_ratio: float
    kappa_max: float

    def __post_init__(self):
        if self.total_iters < 1:
            raise ValueError("total_iters must be >= 1")
        if not 0.0 <= self.dense_ratio < 1.0:
            raise ValueError("dense_ratio must lie in [0, 1)")
        if self.kappa_max < 0:
            raise ValueError("kappa_max must be >= 0")

    @property
    def dense_iters(self) -> int:
        return int(math.floor(self.dense_ratio * self.total_iters))

    def is_dense(self, t: int) -> bool:
        return t < self.dense_iters

    def threshold_at(self, t: int) -> float:
        return threshold_at(self, t)


def threshold_at(schedule: ThresholdSchedule, t: int) -> float:
    T = schedule.total_iters
    if not 0 <= t < T:
        raise IndexError(f"iteration {t} outside [0, {T})")
    td = schedule.dense_iters
    if t < td:
        return 0.0
    if t == T - 1:
        # also covers a one-step sparse phase, where the ramp has no length
        return schedule.kappa_max
    return schedule.kappa_max * (t - td) / max(T - 1 - td, 1)


def prune(adapter: RankSelectiveAdapter, eps: float = 0.0) -> tuple[RankSelectiveAdapter, int]:
    """Drop ranks with ``|w_i| <= eps``; returns the slimmed adapter and its rank."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    keep = np.abs(adapter.w.data) > eps
    out = RankSelectiveAdapter(adapter.target, adapter.A.data[keep], adapter.B.data[:, keep],
                               adapter.w.data[keep], adapter.r_init)
    return out, out.rank


def merge(W0, adapter: RankSelectiveAdapter) -> np.ndarray:
    W0 = W0.data if isinstance(W0, Tensor) else np.asarray(W0, dtype=np.float64)
    if W0.shape != (adapter.d, adapter.k):
        raise ValueError(f"base shape {W0.shape} does not match adapter ({adapter.d}, {adapter.k})")
    return W0 + delta(adapter)


def attach_adapters(model: DualEncoderModel, cfg: AdapterConfig,
                    rng: np.random.Generator) -> list[RankSelectiveAdapter]:
    """Freeze the model and hang a fresh adapter on every selected matrix."""
    sites = cfg.sites()
    if model.adapters():
        raise RuntimeError("model already carries adapters; merge them first")
    model.set_trainable(False)
    out = []
    for enc_name in ENCODERS:
        enc = model.encoder(enc_name)
        for layer in range(enc.cfg.num_layers):
            for site in SITES:
                if (enc_name, site) not in sites:
                    continue
                d, k = enc.params[site_name(layer, site)].shape
                ad = RankSelectiveAdapter.initialize((enc_name, layer, site), d, k, cfg.r_init, rng)
                enc.adapters[(layer, site)] = ad
                out.append(ad)
    return out


def merge_adapters(model: DualEncoderModel) -> dict[Target, np.ndarray]:
    """Fold every attached adapter into its base weight and detach it.

    Returns the per-target deltas that were applied.
    """
    applied = {}
    for enc_name in ENCODERS:
        enc = model.encoder(enc_name)
        for (layer, site), ad in sorted(enc.adapters.items()):
            base = enc.params[site_name(layer, site)]
            applied[(enc_name, layer, site)] = delta(ad)
            base.data = merge(base, ad)
        enc.adapters.clear()
    return applied


@dataclass(frozen=True)
class AdapterShape:
    """Geometry-only stand-in for an adapter, for parameter budgeting."""

    target: Target
    d: int
    k: int
    rank: int


def adapter_shapes(cfg: DualEncoderConfig, r: int,
                   site_filter: Sequence[str] | str | None = None) -> list[AdapterShape]:
    sites = parse_site_filter(site_filter)
    out = []
    for enc_name in ENCODERS:
        ecfg = getattr(cfg, enc_name)
        for layer in range(ecfg.num_layers):
            for site in SITES:
                if (enc_name, site) in sites:
                    d, k = ecfg.site_shape(site)
                    out.append(AdapterShape((enc_name, layer, site), d, k, r))
    return out


def count_parameters(adapters: Iterable) -> int:
    """Trainable entries of A, B and w: ``sum r * (d + k) + r``."""
    return sum(a.rank * (a.d + a.k) + a.rank for a in adapters)


def count_low_rank_parameters(adapters: Iterable) -> int:
    return sum(a.rank * (a.d + a.k) for a in adapters)
