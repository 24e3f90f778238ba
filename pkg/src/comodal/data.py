"""Synthetic multimodal data: several noisy views of one shared latent."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigError, ContractError

__all__ = [
    "MultimodalBatch",
    "SyntheticDataset",
    "ViewSpec",
    "SyntheticDatasetSpec",
    "generate_synthetic",
    "dataset_for",
    "least_squares_probe",
]


@dataclass
class MultimodalBatch:
    """Per-modality inputs [B, *input_shape] and targets [B] (int labels or floats)."""

    inputs: dict[str, np.ndarray]
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)

    def take(self, idx: np.ndarray) -> "MultimodalBatch":
        return MultimodalBatch({k: v[idx] for k, v in self.inputs.items()}, self.targets[idx])


@dataclass
class SyntheticDataset:
    train: MultimodalBatch
    val: MultimodalBatch
    test: MultimodalBatch
    latents: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def split(self, name: str) -> MultimodalBatch:
        if name not in ("train", "val", "test"):
            raise ContractError(f"unknown split {name!r}")
        return getattr(self, name)

    def batches(self, split: str, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[MultimodalBatch]:
        data = self.split(split)
        order = np.arange(len(data)) if rng is None else rng.permutation(len(data))
        for start in range(0, len(order), batch_size):
            yield data.take(order[start:start + batch_size])


@dataclass(frozen=True)
class ViewSpec:
    shape: tuple[int, ...]
    noise: float
    gain: float = 0.7
    overlap: float = 0.25
    latent_noise: float = 0.0


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    latent_dim: int
    views: Mapping[str, ViewSpec]
    task: str = "classification"
    num_classes: int = 4
    n_train: int = 256
    n_val: int = 256
    n_test: int = 2000
    label_noise: float = 0.0

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "SyntheticDatasetSpec":
        d = cfg.data
        views = {m.name: ViewSpec(tuple(m.input_shape), m.noise, d.view_gain, d.view_overlap, m.latent_noise)
                 for m in cfg.modalities}
        return cls(d.latent_dim, views, cfg.task.kind, cfg.task.num_classes, d.n_train, d.n_val, d.n_test,
                   d.label_noise)


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def generate_synthetic(spec: SyntheticDatasetSpec, seed: int) -> SyntheticDataset:
    """Draw latents, labels and per-modality views; deterministic in ``seed``.

    Labels are the argmax of a random linear readout of ``z`` (classification)
    or a clipped projection of it (regression). With ``label_noise > 0`` they
    become stochastic: sampled from ``softmax(scores / label_noise)``, or
    perturbed by Gaussian noise of that scale.

    A view's channel pattern is ``tanh(gain * (z * emphasis) @ M_view / sqrt(k))``;
    every time step and spatial position carries a fresh noisy reading of it
    (``+ noise * eps``). ``M_view`` [k, C] is a fixed random map keyed by the
    modality name. ``emphasis`` is 1 on the latent dims a view owns and
    ``overlap`` elsewhere; ownership is round-robin over the sorted modality
    names, so each view is informative about a different part of the latent
    and reordering modalities changes neither the views nor the labels.
    """
    k = spec.latent_dim
    if k <= 0:
        raise ConfigError("latent_dim must be positive")
    sizes = (spec.n_train, spec.n_val, spec.n_test)
    if min(sizes) <= 0:
        raise ConfigError(f"split sizes must be positive, got {sizes}")
    n = sum(sizes)
    z = np.random.default_rng([seed, 0]).standard_normal((n, k))
    label_rng = np.random.default_rng([seed, 1])
    jitter_rng = np.random.default_rng([seed, 4])
    if spec.task == "classification":
        readout = label_rng.standard_normal((k, spec.num_classes))
        scores = z @ readout
        if spec.label_noise > 0:
            # sample from softmax(scores / label_noise) via the Gumbel-max trick
            scores = scores / spec.label_noise + jitter_rng.gumbel(size=scores.shape)
        targets = np.argmax(scores, axis=1).astype(np.int64)
    else:
        direction = label_rng.standard_normal(k)
        score = 1.5 * z @ (direction / np.linalg.norm(direction))
        if spec.label_noise > 0:
            score = score + spec.label_noise * jitter_rng.standard_normal(n)
        targets = np.clip(score, -3.0, 3.0)

    ranks = {name: i for i, name in enumerate(sorted(spec.views))}
    inputs = {}
    for name, view in spec.views.items():
        emphasis = np.where(np.arange(k) % len(ranks) == ranks[name], 1.0, view.overlap)
        channels = view.shape[0]
        mixing = np.random.default_rng([seed, 2, _name_key(name)]).standard_normal((k, channels))
        seen = z * emphasis
        if view.latent_noise > 0:
            seen = seen + view.latent_noise * np.random.default_rng([seed, 5, _name_key(name)]).standard_normal((n, k))
        clean = np.tanh(view.gain * seen @ mixing / np.sqrt(k))
        clean = clean.reshape(n, channels, *([1] * (len(view.shape) - 1)))
        noise = np.random.default_rng([seed, 3, _name_key(name)]).standard_normal((n, *view.shape))
        inputs[name] = clean + view.noise * noise

    cuts = np.cumsum(sizes)[:-1]
    parts = [np.arange(n)[s] for s in (slice(0, cuts[0]), slice(cuts[0], cuts[1]), slice(cuts[1], n))]
    full = MultimodalBatch(inputs, targets)
    return SyntheticDataset(*(full.take(p) for p in parts),
                            latents={s: z[p] for s, p in zip(("train", "val", "test"), parts)})


def dataset_for(cfg: ExperimentConfig, seed: int | None = None) -> SyntheticDataset:
    """Dataset implied by a config; the data seed defaults to the run seed."""
    if seed is None:
        seed = cfg.data.seed if cfg.data.seed is not None else cfg.seed
    return generate_synthetic(SyntheticDatasetSpec.from_config(cfg), seed)


def least_squares_probe(train_x: np.ndarray, train_y: np.ndarray, eval_x: np.ndarray,
                        num_classes: int, ridge: float = 1e-6) -> np.ndarray:
    """Predicted labels of a one-vs-rest least-squares linear probe."""
    def design(x):
        x = x.reshape(len(x), -1)
        return np.hstack([x, np.ones((len(x), 1))])

    a = design(train_x)
    onehot = np.eye(num_classes)[train_y]
    w = np.linalg.solve(a.T @ a + ridge * np.eye(a.shape[1]), a.T @ onehot)
    return np.argmax(design(eval_x) @ w, axis=1)
