"""Joint SGD training of the backbone, plus a fit/predict estimator wrapper.

Plain SGD with momentum; the property embeddings have their own learning rate.
Everything is deterministic given (data seed, init seed, config): batch order
comes from per-epoch seeded permutations and all reductions are single-threaded
numpy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator

from .data import Dataset, validate_batch_dims
from .network import Backbone, Batch, LossBreakdown, LossWeights, NetworkConfig, init_params
from .params import Modality, ParameterStore, TensorEntry

LOSS_LOG_COLUMNS = ("epoch", "task", "re", "or", "inv", "app", "pe", "con", "total")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, term: str):
        super().__init__(f"non-finite loss (term {term!r}) at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 320
    batch_size: int = 128
    lr: float = 2e-3
    momentum: float = 0.9
    prop_lr: float = 1e-3  # property embeddings train slower
    seed: int = 0
    average_tail: float = 0.25  # Polyak tail: returned params average this final step fraction
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lr < 0 or self.prop_lr < 0:
            raise ValueError("learning rates must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if not 0 <= self.average_tail < 1:
            raise ValueError("average_tail must be in [0, 1)")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
                "momentum": self.momentum, "prop_lr": self.prop_lr, "seed": self.seed,
                "average_tail": self.average_tail, "weights": self.weights.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


def train(dataset: Dataset, net_config: NetworkConfig, config: TrainConfig,
          init_seed: int) -> tuple[ParameterStore, list[LossBreakdown]]:
    """SGD over the dataset; returns the final store and one breakdown per epoch.

    The logged breakdown for an epoch is the loss over the full dataset evaluated
    with the parameters at the end of that epoch (epoch 0 row = initialization).
    """
    if dataset.size == 0:
        raise ValueError("cannot train on an empty dataset")
    net = Backbone(net_config)
    full = dataset.batch()
    validate_batch_dims(full, net_config)
    store = init_params(net_config, init_seed)

    values = {e.name: e.values.copy() for e in store}
    velocity = {name: np.zeros_like(v) for name, v in values.items()}
    tags = {e.name: e.role_tags for e in store}
    template = list(store)

    def snapshot() -> ParameterStore:
        return ParameterStore([TensorEntry(e.name, values[e.name].copy(), e.role_tags)
                               for e in template])

    log: list[LossBreakdown] = []
    _, initial = net.total_loss(snapshot(), full, config.weights)
    log.append(initial)

    n = dataset.size
    steps_per_epoch = sum(1 for start in range(0, n, config.batch_size)
                          if min(config.batch_size, n - start) >= 2)
    total_steps = steps_per_epoch * config.epochs
    tail_start = int(np.floor(total_steps * (1.0 - config.average_tail)))
    averaged = {name: np.zeros_like(v) for name, v in values.items()}
    averaged_steps = 0
    step = 0
    moved = False
    for epoch in range(1, config.epochs + 1):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        for start in range(0, n, config.batch_size):
            rows = order[start:start + config.batch_size]
            if rows.size < 2:
                continue  # contrastive/invariance terms need at least two samples
            batch = full.take(rows)
            try:
                _, grads = net.gradient(snapshot(), batch, config.weights)
            except ArithmeticError as err:
                raise TrainingDiverged(epoch, getattr(err, "term", "total")) from err
            for name, g in grads.items():
                lr = config.prop_lr if name.startswith("prop.") else config.lr
                velocity[name] = config.momentum * velocity[name] - lr * g
                if not moved and np.any(velocity[name]):
                    moved = True
                values[name] = values[name] + velocity[name]
            step += 1
            if step > tail_start:
                for name in values:
                    averaged[name] += values[name]
                averaged_steps += 1
        store_now = snapshot()
        try:
            _, breakdown = net.total_loss(store_now, full, config.weights)
        except ArithmeticError as err:
            raise TrainingDiverged(epoch, getattr(err, "term", "total")) from err
        log.append(breakdown)
    if averaged_steps > 0 and moved:
        # tail-averaged iterate: same SGD path, steadier endpoint
        values = {name: acc / averaged_steps for name, acc in averaged.items()}
    return snapshot(), log


def train_reference_without(m: Modality, dataset: Dataset, net_config: NetworkConfig,
                            config: TrainConfig, init_seed: int
                            ) -> tuple[ParameterStore, list[LossBreakdown]]:
    """Train the deletion reference: modality m masked absent in every sample."""
    return train(dataset.mask_out(m), net_config, config, init_seed)


def write_loss_log(log: list[LossBreakdown], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_LOG_COLUMNS)
        for epoch, breakdown in enumerate(log):
            row = breakdown.as_row()
            writer.writerow([epoch] + [repr(row[c]) for c in LOSS_LOG_COLUMNS[1:]])


def smoothed_total(log: list[LossBreakdown], window: int = 5) -> list[float]:
    totals = [b.total for b in log]
    out = []
    for i in range(len(totals)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(totals[lo:i + 1])))
    return out


class MultimodalNet(BaseEstimator):
    """sklearn-style wrapper: fit on a Dataset, predict task outputs.

    Learned state lands in trailing-underscore attributes (`store_`,
    `loss_log_`); constructor arguments are stored untouched so get_params /
    set_params / clone work as usual.
    """

    def __init__(self, net_config: NetworkConfig | None = None,
                 train_config: TrainConfig | None = None, init_seed: int = 1):
        self.net_config = net_config
        self.train_config = train_config
        self.init_seed = init_seed

    def _configs(self) -> tuple[NetworkConfig, TrainConfig]:
        return (self.net_config or NetworkConfig(),
                self.train_config or TrainConfig())

    def fit(self, X: Dataset, y=None) -> "MultimodalNet":
        net_config, train_config = self._configs()
        self.store_, self.loss_log_ = train(X, net_config, train_config, self.init_seed)
        self.backbone_ = Backbone(net_config)
        return self

    def predict(self, X: Dataset | Batch) -> np.ndarray:
        self._check_fitted()
        batch = X.batch() if isinstance(X, Dataset) else X
        validate_batch_dims(batch, self._configs()[0])
        return self.backbone_.predict(self.store_, batch)

    def loss_breakdown(self, X: Dataset | Batch) -> LossBreakdown:
        self._check_fitted()
        batch = X.batch() if isinstance(X, Dataset) else X
        return self.backbone_.total_loss(self.store_, batch, self._configs()[1].weights)[1]

    def _check_fitted(self) -> None:
        if not hasattr(self, "store_"):
            raise RuntimeError("estimator is not fitted; call fit() first")
