"""Synthetic multimodal data with a shared latent, plus the `.mbds` container.

Each modality is a fixed linear map of a shared latent plus modality-private
noise, so cross-modal reconstruction is learnable by construction; the label is
a noisy linear readout of the same latent. Missing modalities are zero-padded
and tracked by a presence mask, with at least one modality observed per sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .network import Batch, NetworkConfig
from .params import MODALITIES, Modality, ParameterStore, TensorEntry, load_store, save_store


@dataclass(frozen=True)
class SynthSpec:
    num_samples: int = 1600
    latent_dim: int = 6
    seed: int = 7
    feature_scale: float = 0.8
    private_noise: float = 0.062
    # channel asymmetry: noisy narrow side channels make fusion lean on the
    # reconstruction pathway, which is what the deletion diagnostics measure
    noise_scale_l: float = 4.0
    noise_scale_a: float = 1.0
    noise_scale_v: float = 4.0
    label_noise: float = 0.3
    # missing regime: either a fixed observed pattern or a global missing rate
    missing_rate: float = 0.25
    fixed_pattern: tuple[str, ...] | None = None
    task: str = "regression"
    n_classes: int = 2

    def __post_init__(self) -> None:
        if self.num_samples < 1 or self.latent_dim < 1:
            raise ValueError("num_samples and latent_dim must be positive")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must be in [0, 1)")
        if self.fixed_pattern is not None:
            tags = set(self.fixed_pattern)
            if not tags or not tags <= {"L", "A", "V"}:
                raise ValueError("fixed_pattern must be a nonempty subset of {L, A, V}")

    def modality_noise(self, m: Modality) -> float:
        scale = {"L": self.noise_scale_l, "A": self.noise_scale_a,
                 "V": self.noise_scale_v}[m.value]
        return self.private_noise * scale

    def to_dict(self) -> dict:
        d = {"num_samples": self.num_samples, "latent_dim": self.latent_dim,
             "seed": self.seed, "feature_scale": self.feature_scale,
             "private_noise": self.private_noise,
             "noise_scale_l": self.noise_scale_l, "noise_scale_a": self.noise_scale_a,
             "noise_scale_v": self.noise_scale_v,
             "label_noise": self.label_noise,
             "missing_rate": self.missing_rate, "task": self.task,
             "n_classes": self.n_classes}
        if self.fixed_pattern is not None:
            d["fixed_pattern"] = list(self.fixed_pattern)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if "fixed_pattern" in d and d["fixed_pattern"] is not None:
            d["fixed_pattern"] = tuple(d["fixed_pattern"])
        return cls(**d)


@dataclass
class Dataset:
    """True (unmasked) features, presence mask, labels. Zero-padding on demand."""

    true_x: dict[Modality, np.ndarray]
    present: dict[Modality, np.ndarray]
    y: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.y)
        for m in MODALITIES:
            if self.true_x[m].shape[0] != n or self.present[m].shape[0] != n:
                raise ValueError(f"dataset arrays disagree on sample count for {m.value}")
        observed = np.zeros(n, dtype=int)
        for m in MODALITIES:
            observed += self.present[m].astype(int)
        if n and observed.min() < 1:
            raise ValueError("every sample must observe at least one modality")

    @property
    def size(self) -> int:
        return len(self.y)

    def batch(self) -> Batch:
        """Zero-padded view: absent modalities read as zero vectors."""
        x = {}
        for m in MODALITIES:
            mask = self.present[m].astype(np.float64).reshape(-1, 1)
            x[m] = self.true_x[m] * mask
        return Batch(x=x, present={m: self.present[m].copy() for m in MODALITIES}, y=self.y.copy())

    def take(self, rows: np.ndarray) -> "Dataset":
        return Dataset(
            true_x={m: self.true_x[m][rows] for m in MODALITIES},
            present={m: self.present[m][rows] for m in MODALITIES},
            y=self.y[rows],
        )

    def mask_out(self, m: Modality) -> "Dataset":
        """Copy with modality m marked absent in every sample.

        Samples that observed only m are dropped: with nothing left to observe
        they carry no signal for a model never exposed to m.
        """
        present = {o: self.present[o].copy() for o in MODALITIES}
        present[m] = np.zeros(self.size, dtype=bool)
        keep = np.zeros(self.size, dtype=int)
        for o in MODALITIES:
            keep += present[o].astype(int)
        rows = np.flatnonzero(keep >= 1)
        return Dataset(true_x={o: self.true_x[o][rows] for o in MODALITIES},
                       present={o: present[o][rows] for o in MODALITIES},
                       y=self.y[rows])


def synth_dataset(spec: SynthSpec, config: NetworkConfig) -> Dataset:
    """Deterministic draw of the synthetic corpus for the given feature dims."""
    if spec.task != config.task:
        raise ValueError(f"spec task {spec.task!r} != network task {config.task!r}")
    rng = np.random.default_rng(spec.seed)
    n, k = spec.num_samples, spec.latent_dim
    latent = rng.normal(size=(n, k))

    true_x: dict[Modality, np.ndarray] = {}
    for m in MODALITIES:
        d_m = config.dim(m)
        mixing = rng.normal(0.0, spec.feature_scale / np.sqrt(k), size=(k, d_m))
        noise = rng.normal(0.0, spec.modality_noise(m), size=(n, d_m))
        true_x[m] = latent @ mixing + noise

    readout = rng.normal(0.0, 1.0 / np.sqrt(k), size=k)
    signal = latent @ readout
    if spec.task == "regression":
        y = signal + rng.normal(0.0, spec.label_noise, size=n)
    else:
        edges = np.quantile(signal, np.linspace(0, 1, spec.n_classes + 1)[1:-1])
        y = np.digitize(signal, edges).astype(np.float64)

    present = _draw_presence(spec, rng, n)
    return Dataset(true_x=true_x, present=present, y=y)


def _draw_presence(spec: SynthSpec, rng: np.random.Generator, n: int) -> dict[Modality, np.ndarray]:
    if spec.fixed_pattern is not None:
        observed = {m: m.value in spec.fixed_pattern for m in MODALITIES}
        return {m: np.full(n, observed[m], dtype=bool) for m in MODALITIES}
    if spec.missing_rate == 0.0:
        return {m: np.ones(n, dtype=bool) for m in MODALITIES}
    rows = np.empty((n, 3), dtype=bool)
    for i in range(n):
        while True:
            row = rng.random(3) >= spec.missing_rate
            if row.any():
                rows[i] = row
                break
    return {m: rows[:, j].copy() for j, m in enumerate(MODALITIES)}


def split_dataset(dataset: Dataset, train: int, calib: int, test: int,
                  seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Disjoint train/calibration/test split by seeded permutation."""
    if train + calib + test > dataset.size:
        raise ValueError(f"split sizes {train}+{calib}+{test} exceed dataset size {dataset.size}")
    order = np.random.default_rng(seed).permutation(dataset.size)
    a, b = train, train + calib
    return (dataset.take(order[:a]), dataset.take(order[a:b]),
            dataset.take(order[b:b + test]))


def fully_observed(dataset: Dataset) -> Dataset:
    """Copy with every modality marked present (calibration batches use this)."""
    return Dataset(true_x={m: dataset.true_x[m].copy() for m in MODALITIES},
                   present={m: np.ones(dataset.size, dtype=bool) for m in MODALITIES},
                   y=dataset.y.copy())


def save_dataset(dataset: Dataset, path: str | Path) -> str:
    """Persist as the canonical-tensor container with mask/label sections."""
    present = np.stack([dataset.present[m].astype(np.float64) for m in MODALITIES], axis=1)
    entries = [TensorEntry(f"data.true.{m.value}", dataset.true_x[m]) for m in MODALITIES]
    entries.append(TensorEntry("data.present", present))
    entries.append(TensorEntry("data.y", dataset.y))
    return save_store(ParameterStore(entries), path)


def load_dataset(path: str | Path) -> Dataset:
    store = load_store(path)
    present = store.values("data.present")
    return Dataset(
        true_x={m: store.values(f"data.true.{m.value}").copy() for m in MODALITIES},
        present={m: present[:, j].astype(bool) for j, m in enumerate(MODALITIES)},
        y=store.values("data.y").copy(),
    )


def validate_batch_dims(batch: Batch, config: NetworkConfig) -> None:
    """Raise with a precise message when feature widths disagree with the config."""
    for m in MODALITIES:
        want = config.dim(m)
        got = batch.x[m].shape[1]
        if got != want:
            raise ValueError(f"modality {m.value} has width {got}, config expects {want}")
        absent = ~batch.present[m]
        if absent.any() and not np.allclose(batch.x[m][absent], 0.0):
            raise ValueError(f"absent {m.value} features must be zero-padded")
