"""JSON experiment configuration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .adapter import AdapterConfig
from .data import DomainSpec, default_stream_specs
from .model import DualEncoderConfig, EncoderConfig
from .trainer import PretrainConfig, TrainConfig

FULL_SCALE_ITERATIONS = 500
FULL_SCALE_KAPPA_MAX = 0.005


def desk_kappa_max(iterations: int) -> float:
    """``FULL_SCALE_KAPPA_MAX`` rescaled so a shorter schedule applies the same total shrinkage."""
    return FULL_SCALE_KAPPA_MAX * FULL_SCALE_ITERATIONS / iterations


VIT_B16 = DualEncoderConfig(
    vision=EncoderConfig(num_layers=12, hidden_dim=768, mlp_dim=3072, num_heads=12,
                         vocab_size=1, max_seq_len=197, embed_dim=512),
    text=EncoderConfig(num_layers=12, hidden_dim=512, mlp_dim=2048, num_heads=8,
                       vocab_size=49408, max_seq_len=77, embed_dim=512),
)
PRESETS = {"vit-b16": VIT_B16, "desk": DualEncoderConfig()}


def _specs(items) -> list[DomainSpec]:
    return [s if isinstance(s, DomainSpec) else DomainSpec(**s) for s in items]


@dataclass
class DataConfig:
    base: list[DomainSpec] = field(default_factory=lambda: default_stream_specs()["base"])
    reference: list[DomainSpec] = field(default_factory=lambda: default_stream_specs()["reference"])
    stream: list[DomainSpec] = field(default_factory=lambda: default_stream_specs()["stream"])
    mix_seed: int = 0

    def __post_init__(self):
        self.base = _specs(self.base)
        self.reference = _specs(self.reference)
        self.stream = _specs(self.stream)
        ids = [s.domain_id for s in self.base + self.reference + self.stream]
        if len(set(ids)) != len(ids):
            raise ValueError("domain ids must be unique across base, reference and stream")


@dataclass
class AnalysisConfig:
    amp_rank: int | None = None
    sweep_placements: list[str] = field(default_factory=lambda: ["all", "attn", "mlp", "vision", "text"])
    sweep_ranks: list[int] = field(default_factory=lambda: [0, 2, 4, 8, 16])
    sweep_seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    ablate_selectors: list[list[str]] = field(default_factory=lambda: (
        [[]] + [[f"{e}.{s}"] for e in ("vision", "text") for s in ("Q", "K", "V", "O", "FC", "Proj")]
        + [["vision"], ["text"]]))


def _default_train() -> TrainConfig:
    return TrainConfig(adapter=AdapterConfig(kappa_max=desk_kappa_max(200)))


@dataclass
class ExperimentConfig:
    model: DualEncoderConfig = field(default_factory=DualEncoderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=lambda: PretrainConfig(iterations=800))
    train: TrainConfig = field(default_factory=_default_train)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    output_dir: str = "out"
    global_seed: int = 0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = DualEncoderConfig(**self.model)
        if isinstance(self.data, dict):
            self.data = DataConfig(**self.data)
        if isinstance(self.pretrain, dict):
            self.pretrain = PretrainConfig(**self.pretrain)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if isinstance(self.analysis, dict):
            self.analysis = AnalysisConfig(**self.analysis)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> ExperimentConfig:
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def with_seed(self, seed: int) -> ExperimentConfig:
        """Route one master seed to model init, pre-training and the task loop."""
        return replace(self, global_seed=seed, pretrain=replace(self.pretrain, seed=seed),
                       train=replace(self.train, global_seed=seed))
