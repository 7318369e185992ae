"""Miniature CLIP-style dual encoder built on :mod:`dyrank.tensor`."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

SITES = ("Q", "K", "V", "O", "FC", "Proj")
ATTN_SITES = ("Q", "K", "V", "O")
MLP_SITES = ("FC", "Proj")
ENCODERS = ("vision", "text")


@dataclass
class EncoderConfig:
    num_layers: int = 2
    hidden_dim: int = 64
    mlp_dim: int = 128
    num_heads: int = 4
    vocab_size: int = 32
    max_seq_len: int = 16
    embed_dim: int = 32

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "mlp_dim", "num_heads",
                     "vocab_size", "max_seq_len", "embed_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")

    def site_shape(self, site: str) -> tuple[int, int]:
        d, dm = self.hidden_dim, self.mlp_dim
        if site in ATTN_SITES:
            return d, d
        if site == "FC":
            return d, dm
        if site == "Proj":
            return dm, d
        raise KeyError(f"unknown site {site!r}")


@dataclass
class DualEncoderConfig:
    vision: EncoderConfig = field(default_factory=lambda: EncoderConfig(vocab_size=16, max_seq_len=12))
    text: EncoderConfig = field(default_factory=lambda: EncoderConfig(vocab_size=32, max_seq_len=8))
    temperature: float = 0.07

    def __post_init__(self):
        if isinstance(self.vision, dict):
            self.vision = EncoderConfig(**self.vision)
        if isinstance(self.text, dict):
            self.text = EncoderConfig(**self.text)
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.vision.embed_dim != self.text.embed_dim:
            raise ValueError("vision and text encoders must share embed_dim")

    def to_dict(self) -> dict:
        return asdict(self)


def site_name(layer: int, site: str) -> str:
    return f"layers.{layer}.{site}"


class TransformerEncoder:
    """Pre-LN transformer over token ids, mean-pooled and projected to a unit vector."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator | None = None,
                 params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        self.adapters: dict[tuple[int, str], object] = {}
        if params is None:
            params = self._init_params(rng if rng is not None else np.random.default_rng(0))
        self.params: dict[str, Tensor] = {k: Tensor(v, requires_grad=True) for k, v in params.items()}

    def _init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        c = self.cfg
        d, dm = c.hidden_dim, c.mlp_dim
        p = {
            "tok_emb": rng.normal(0.0, 0.5, (c.vocab_size, d)),
            "pos_emb": rng.normal(0.0, 0.5, (c.max_seq_len, d)),
        }
        for l in range(c.num_layers):
            p[f"layers.{l}.ln1.gain"] = np.ones(d)
            p[f"layers.{l}.ln1.bias"] = np.zeros(d)
            for s in ATTN_SITES:
                p[site_name(l, s)] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
            p[f"layers.{l}.ln2.gain"] = np.ones(d)
            p[f"layers.{l}.ln2.bias"] = np.zeros(d)
            p[site_name(l, "FC")] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, dm))
            p[f"layers.{l}.FC.bias"] = np.zeros(dm)
            p[site_name(l, "Proj")] = rng.normal(0.0, 1.0 / math.sqrt(dm), (dm, d))
            p[f"layers.{l}.Proj.bias"] = np.zeros(d)
        p["ln_f.gain"] = np.ones(d)
        p["ln_f.bias"] = np.zeros(d)
        p["head"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, c.embed_dim))
        return p

    def weight(self, layer: int, site: str) -> Tensor:
        """Effective dense matrix ``W0 + delta`` of one site."""
        base = self.params[site_name(layer, site)]
        adapter = self.adapters.get((layer, site))
        if adapter is None:
            return base
        return base + adapter.delta()

    def project(self, x: Tensor, layer: int, site: str) -> Tensor:
        """``x @ W0`` plus the adapter's factored path ``((x @ B) * w) @ A``."""
        out = x @ self.params[site_name(layer, site)]
        adapter = self.adapters.get((layer, site))
        if adapter is not None and adapter.rank > 0:
            out = out + ((x @ adapter.B) * adapter.w) @ adapter.A
        return out

    def check_ids(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise ValueError(f"expected a (batch, seq) array of token ids, got shape {ids.shape}")
        if ids.shape[1] > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq_len {self.cfg.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise ValueError(f"token id out of range [0, {self.cfg.vocab_size})")
        return ids.astype(np.int64)

    def _attention(self, x: Tensor, l: int) -> Tensor:
        b, n, d = x.shape
        h = self.cfg.num_heads
        dh = d // h

        def heads(t: Tensor) -> Tensor:
            return t.reshape(b, n, h, dh).transpose(0, 2, 1, 3).reshape(b * h, n, dh)

        q = heads(self.project(x, l, "Q"))
        k = heads(self.project(x, l, "K"))
        v = heads(self.project(x, l, "V"))
        scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
        ctx = T.softmax(scores) @ v
        ctx = ctx.reshape(b, h, n, dh).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.project(ctx, l, "O")

    def _mlp(self, x: Tensor, l: int) -> Tensor:
        p = self.params
        hid = T.gelu(self.project(x, l, "FC") + p[f"layers.{l}.FC.bias"])
        return self.project(hid, l, "Proj") + p[f"layers.{l}.Proj.bias"]

    def forward(self, ids: np.ndarray) -> Tensor:
        ids = self.check_ids(ids)
        p = self.params
        n = ids.shape[1]
        pos = T.embedding(p["pos_emb"], np.arange(n))
        x = T.embedding(p["tok_emb"], ids) + pos
        for l in range(self.cfg.num_layers):
            x = x + self._attention(T.layer_norm(x, p[f"layers.{l}.ln1.gain"], p[f"layers.{l}.ln1.bias"]), l)
            x = x + self._mlp(T.layer_norm(x, p[f"layers.{l}.ln2.gain"], p[f"layers.{l}.ln2.bias"]), l)
        pooled = T.layer_norm(x.mean(axis=1), p["ln_f.gain"], p["ln_f.bias"])
        return T.l2_normalize(pooled @ p["head"])


class DualEncoderModel:
    def __init__(self, cfg: DualEncoderConfig | None = None, seed: int = 0,
                 params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg or DualEncoderConfig()
        rng = np.random.default_rng(seed)
        if params is None:
            self.vision = TransformerEncoder(self.cfg.vision, rng)
            self.text = TransformerEncoder(self.cfg.text, rng)
        else:
            split = {enc: {k.split("/", 1)[1]: v for k, v in params.items() if k.startswith(enc + "/")}
                     for enc in ENCODERS}
            self.vision = TransformerEncoder(self.cfg.vision, params=split["vision"])
            self.text = TransformerEncoder(self.cfg.text, params=split["text"])

    @property
    def temperature(self) -> float:
        return self.cfg.temperature

    def encoder(self, name: str) -> TransformerEncoder:
        if name == "vision":
            return self.vision
        if name == "text":
            return self.text
        raise KeyError(f"unknown encoder {name!r}")

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for enc in ENCODERS:
            for k, v in self.encoder(enc).params.items():
                yield f"{enc}/{k}", v

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def set_trainable(self, flag: bool) -> None:
        for _, p in self.named_parameters():
            p.requires_grad = flag
            p.grad = None

    def adapters(self) -> list:
        return [a for enc in ENCODERS for a in self.encoder(enc).adapters.values()]

    def clone(self) -> DualEncoderModel:
        """Independent copy with fresh tensors (adapters are cloned too)."""
        twin = DualEncoderModel(self.cfg, params=self.state_dict())
        for (_, src), (_, dst) in zip(self.named_parameters(), twin.named_parameters()):
            dst.requires_grad = src.requires_grad
        for enc in ENCODERS:
            for key, ad in self.encoder(enc).adapters.items():
                twin.encoder(enc).adapters[key] = ad.clone()
        return twin

    def encode_images(self, ids: np.ndarray) -> Tensor:
        return self.vision.forward(ids)

    def encode_texts(self, ids: np.ndarray) -> Tensor:
        return self.text.forward(ids)


def encode_image(model: DualEncoderModel, tokens: Sequence[int]) -> Tensor:
    return model.encode_images(np.asarray(tokens)[None, :]).reshape(-1)


def encode_text(model: DualEncoderModel, tokens: Sequence[int]) -> Tensor:
    return model.encode_texts(np.asarray(tokens)[None, :]).reshape(-1)


def encode_text_set(model: DualEncoderModel, sequences: Sequence[Sequence[int]]) -> np.ndarray:
    """Embed a list of possibly ragged token sequences; returns an (n, D) array."""
    out = np.empty((len(sequences), model.cfg.text.embed_dim))
    by_len: dict[int, list[int]] = {}
    for i, s in enumerate(sequences):
        by_len.setdefault(len(s), []).append(i)
    with T.no_grad():
        for idx in by_len.values():
            out[idx] = model.encode_texts(np.array([sequences[i] for i in idx])).data
    return out


def class_probabilities(sims: np.ndarray, temperature: float) -> np.ndarray:
    """Softmax of cosine similarities over the last axis at ``temperature``."""
    z = np.asarray(sims, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def classify(model: DualEncoderModel, image_tokens: Sequence[int],
             class_token_sequences: Sequence[Sequence[int]]) -> np.ndarray:
    if len(class_token_sequences) == 0:
        raise ValueError("classify needs at least one candidate class")
    with T.no_grad():
        z_img = encode_image(model, image_tokens).data
    z_txt = encode_text_set(model, class_token_sequences)
    return class_probabilities(z_txt @ z_img, model.temperature)


def contrastive_loss(image_emb: Tensor, text_emb: Tensor, temperature: float) -> Tensor:
    """Symmetric InfoNCE over the batch similarity matrix with matched pairs on the diagonal."""
    if image_emb.shape != text_emb.shape or image_emb.ndim != 2:
        raise T.ShapeError(f"embedding batches must share a (B, D) shape, got "
                           f"{image_emb.shape} and {text_emb.shape}")
    b = image_emb.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs a batch of at least 2 pairs")
    logits = (image_emb @ text_emb.T) * (1.0 / temperature)
    targets = np.arange(b)
    return (T.cross_entropy(logits, targets) + T.cross_entropy(logits.T, targets)) * 0.5
