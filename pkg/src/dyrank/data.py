"""Deterministic synthetic domains standing in for multi-domain image datasets.

An "image" is a short vector of features quantized into token ids. Every
class prototype mixes a shared *concept* vector (one per class index, common
to all domains, so knowledge can transfer between domains) with a
domain-private component. A domain may also rotate which concept each class
index maps to, which makes it disagree with what the pre-trained model has
learned. Class "text" is ``[domain marker, class marker, d1, d0]``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

NUM_CONCEPTS = 10
IMAGE_LEN = 12
IMAGE_LEVELS = 16
QUANT_RANGE = 2.5

CLASS_MARKER = 1
DIGIT_BASE = 2
DOMAIN_BASE = 12
CLASS_DIGITS = 2
TEXT_LEN = 2 + CLASS_DIGITS
TEXT_VOCAB = 32
MAX_DOMAINS = TEXT_VOCAB - DOMAIN_BASE


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    num_classes: int = 10
    train_per_class: int = 16
    test_per_class: int = 20
    prototype_scale: float = 1.0
    noise_scale: float = 0.35
    seed: int = 0
    concept_weight: float = 0.8
    concept_offset: int = 0
    world_seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DomainTask:
    spec: DomainSpec
    class_text_tokens: np.ndarray   # (C, TEXT_LEN)
    prototypes: np.ndarray          # (C, IMAGE_LEN) continuous features
    train_tokens: np.ndarray        # (N, IMAGE_LEN)
    train_labels: np.ndarray
    test_tokens: np.ndarray
    test_labels: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def domain_id(self) -> int:
        return self.spec.domain_id

    @property
    def train_examples(self) -> list[tuple[np.ndarray, int]]:
        return list(zip(self.train_tokens, self.train_labels.tolist()))

    @property
    def test_examples(self) -> list[tuple[np.ndarray, int]]:
        return list(zip(self.test_tokens, self.test_labels.tolist()))

    def train_set(self) -> PairedSet:
        return PairedSet(self.train_tokens, self.class_text_tokens[self.train_labels], self.train_labels)


@dataclass
class PairedSet:
    """Aligned (image tokens, text tokens, label) rows, ready for batching."""

    images: np.ndarray
    texts: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def class_tokens(domain_id: int, class_index: int) -> list[int]:
    if not 0 <= domain_id < MAX_DOMAINS:
        raise ValueError(f"domain_id must lie in [0, {MAX_DOMAINS})")
    if not 0 <= class_index < 10 ** CLASS_DIGITS:
        raise ValueError("class index does not fit the class digit field")
    digits = [int(ch) for ch in f"{class_index:0{CLASS_DIGITS}d}"]
    return [DOMAIN_BASE + domain_id, CLASS_MARKER] + [DIGIT_BASE + x for x in digits]


def quantize(features: np.ndarray) -> np.ndarray:
    edges = np.linspace(-QUANT_RANGE, QUANT_RANGE, IMAGE_LEVELS - 1)
    return np.digitize(features, edges).astype(np.int64)


def concept_vectors(world_seed: int) -> np.ndarray:
    rng = np.random.default_rng([world_seed, 7919])
    return rng.normal(0.0, 1.0, (NUM_CONCEPTS, IMAGE_LEN))


def generate_domain(spec: DomainSpec) -> DomainTask:
    C = spec.num_classes
    if C < 2:
        raise ValueError("a domain needs at least 2 classes")
    if C > 10 ** CLASS_DIGITS:
        raise ValueError(f"at most {10 ** CLASS_DIGITS} classes per domain")
    if not 0.0 <= spec.concept_weight <= 1.0:
        raise ValueError("concept_weight must lie in [0, 1]")
    concepts = concept_vectors(spec.world_seed)
    rng = np.random.default_rng([spec.seed, spec.domain_id])
    private = rng.normal(0.0, 1.0, (C, IMAGE_LEN))
    cw = spec.concept_weight
    idx = (np.arange(C) + spec.concept_offset) % NUM_CONCEPTS
    protos = spec.prototype_scale * (cw * concepts[idx] + np.sqrt(1.0 - cw * cw) * private)

    def draw(per_class: int) -> tuple[np.ndarray, np.ndarray]:
        labels = np.repeat(np.arange(C), per_class)
        noise = rng.normal(0.0, 1.0, (labels.size, IMAGE_LEN)) * spec.noise_scale
        return quantize(protos[labels] + noise), labels

    train_tokens, train_labels = draw(spec.train_per_class)
    test_tokens, test_labels = draw(spec.test_per_class)
    text = np.array([class_tokens(spec.domain_id, c) for c in range(C)], dtype=np.int64)
    return DomainTask(spec, text, protos, train_tokens, train_labels, test_tokens, test_labels)


def nearest_prototype_accuracy(task: DomainTask) -> float:
    """Test accuracy of classifying each test image by its closest quantized prototype."""
    centers = quantize(task.prototypes).astype(np.float64)
    x = task.test_tokens.astype(np.float64)
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    return float(np.mean(d2.argmin(axis=1) == task.test_labels))


def build_pretrain_corpus(tasks: Sequence[DomainTask], mix_seed: int) -> PairedSet:
    """Seeded shuffle of every training example of the given base domains."""
    if len(tasks) < 2:
        raise ValueError("pre-training needs at least 2 base domains")
    images = np.concatenate([t.train_tokens for t in tasks])
    texts = np.concatenate([t.class_text_tokens[t.train_labels] for t in tasks])
    offsets = np.cumsum([0] + [t.num_classes for t in tasks[:-1]])
    labels = np.concatenate([t.train_labels + off for t, off in zip(tasks, offsets)])
    order = np.random.default_rng(mix_seed).permutation(len(labels))
    return PairedSet(images[order], texts[order], labels[order])


@dataclass
class Batch:
    images: np.ndarray
    texts: np.ndarray
    labels: np.ndarray
    index: np.ndarray


def batches(data, batch_size: int, epoch_seed: int) -> Iterator[Batch]:
    """One shuffled epoch of full batches; a trailing partial batch is dropped."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2 for a contrastive loss")
    if isinstance(data, DomainTask):
        data = data.train_set()
    order = np.random.default_rng(epoch_seed).permutation(len(data))
    for start in range(0, len(order) - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(data.images[idx], data.texts[idx], data.labels[idx], idx)


def endless_batches(data, batch_size: int, seed: int) -> Iterator[Batch]:
    """Epoch after epoch of :func:`batches`, each epoch reshuffled from ``(seed, epoch)``."""
    epoch = 0
    while True:
        emitted = False
        for b in batches(data, batch_size, int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])):
            emitted = True
            yield b
        if not emitted:
            raise ValueError("dataset smaller than one batch")
        epoch += 1


def default_stream_specs(seed: int = 0, num_stream: int = 5) -> dict[str, list[DomainSpec]]:
    """Four base domains, one held-out reference domain, and the continual stream."""
    base = [DomainSpec(i, train_per_class=40, seed=seed) for i in range(4)]
    reference = [DomainSpec(4, seed=seed)]
    stream = [DomainSpec(5 + i, seed=seed, concept_weight=0.4) for i in range(num_stream)]
    return {"base": base, "reference": reference, "stream": stream}
