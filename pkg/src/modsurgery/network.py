"""Desk-scale multimodal backbone: decomposition, generation, fusion, task head.

Every sub-network is a one-hidden-layer tanh map. The full training loss is

    total = task + alpha * re + beta * pe + gamma * con

with re/pe/con summed over modalities and, per modality, averaged only over
samples where that modality is observed (zero-padding never trains anything).
Gradients are exact reverse-mode over all parameters, property embeddings
included.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tensor, concat_cols, constant, leaf, logsumexp_rows
from .params import MODALITIES, Modality, ParameterStore, TensorEntry


class NumericError(ArithmeticError):
    """A loss term evaluated to a non-finite value."""

    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite value in loss term {term!r}: {value}")
        self.term = term


@dataclass(frozen=True)
class NetworkConfig:
    d_l: int = 8
    d_a: int = 32
    d_v: int = 8
    d_p: int = 8
    de_hidden: int = 16
    gen_hidden: int = 16
    bt_hidden: int = 12
    fuse_hidden: int = 64
    head_hidden: int = 12
    fused_dim: int = 16
    task: str = "regression"  # or "classification"
    n_classes: int = 2

    def __post_init__(self) -> None:
        for name in ("d_l", "d_a", "d_v", "d_p", "de_hidden", "gen_hidden",
                     "bt_hidden", "fuse_hidden", "head_hidden", "fused_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task kind {self.task!r}")

    def dim(self, m: Modality) -> int:
        return {"L": self.d_l, "A": self.d_a, "V": self.d_v}[m.value]

    @property
    def n_out(self) -> int:
        return 1 if self.task == "regression" else self.n_classes

    def to_dict(self) -> dict:
        return {
            "d_l": self.d_l, "d_a": self.d_a, "d_v": self.d_v, "d_p": self.d_p,
            "de_hidden": self.de_hidden, "gen_hidden": self.gen_hidden,
            "bt_hidden": self.bt_hidden, "fuse_hidden": self.fuse_hidden,
            "head_hidden": self.head_hidden, "fused_dim": self.fused_dim,
            "task": self.task, "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def desk_config() -> NetworkConfig:
    return NetworkConfig()


def tiny_config() -> NetworkConfig:
    """Small enough (< 2,000 parameters) for exhaustive finite-difference checks."""
    return NetworkConfig(d_l=6, d_a=4, d_v=5, d_p=3, de_hidden=4, gen_hidden=4,
                         bt_hidden=4, fuse_hidden=4, head_hidden=4, fused_dim=5)


def paper_dims_config() -> NetworkConfig:
    return NetworkConfig(d_l=768, d_a=74, d_v=512, d_p=128, de_hidden=64,
                         gen_hidden=64, bt_hidden=64, fuse_hidden=128,
                         head_hidden=64, fused_dim=64)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 0.1
    tau: float = 0.1
    margin_eps: float = 0.01

    def __post_init__(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.tau <= 0:
            raise ValueError("temperature tau must be positive")
        if self.margin_eps < 0:
            raise ValueError("margin_eps must be non-negative")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma,
                "tau": self.tau, "margin_eps": self.margin_eps}


@dataclass
class LossBreakdown:
    task: float
    re: float
    or_: float
    inv: float
    app: float
    re_decomp: float
    pe: float
    con: float
    total: float
    weights: LossWeights = field(default_factory=LossWeights)

    def as_row(self) -> dict[str, float]:
        return {"task": self.task, "re": self.re, "or": self.or_, "inv": self.inv,
                "app": self.app, "pe": self.pe, "con": self.con, "total": self.total}


@dataclass
class Batch:
    """Zero-padded modality features, presence masks, and labels."""

    x: dict[Modality, np.ndarray]
    present: dict[Modality, np.ndarray]
    y: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.y)
        for m in MODALITIES:
            if self.x[m].shape[0] != n or self.present[m].shape[0] != n:
                raise ValueError(f"batch arrays disagree on sample count for {m.value}")

    @property
    def size(self) -> int:
        return len(self.y)

    def take(self, rows: np.ndarray) -> "Batch":
        return Batch(
            x={m: self.x[m][rows] for m in MODALITIES},
            present={m: self.present[m][rows] for m in MODALITIES},
            y=self.y[rows],
        )


# recorder signature: (weight_entry_name, input_activations (N, d_in)) -> None
Recorder = Callable[[str, np.ndarray], None]


def nce_loss(back_translated: Tensor, sample_specific: Tensor, tau: float) -> Tensor:
    """In-batch noise-contrastive loss with the matching pair as positive.

    Mean over rows of log-sum-exp(<bt_i, spec_j>/tau) - <bt_i, spec_i>/tau.
    Uniform logits give exactly ln(N).
    """
    if back_translated.shape[0] < 2:
        raise ValueError("contrastive loss needs at least two samples")
    logits = (back_translated @ sample_specific.T) / tau
    return (logsumexp_rows(logits) - logits.diag()).mean()


def _entry_specs(config: NetworkConfig) -> list[tuple[str, tuple[int, ...], frozenset[str]]]:
    specs: list[tuple[str, tuple[int, ...], frozenset[str]]] = []
    for m in MODALITIES:
        d_m = config.dim(m)
        d_rest = sum(config.dim(o) for o in MODALITIES if o is not m)
        tag = m.value
        specs += [
            (f"de.{tag}.trunk.W", (d_m, config.de_hidden), frozenset({f"decomposer:{tag}"})),
            (f"de.{tag}.trunk.b", (config.de_hidden,), frozenset({f"decomposer:{tag}"})),
            (f"de.{tag}.spec.W", (config.de_hidden, config.d_p), frozenset({f"decomposer:{tag}"})),
            (f"de.{tag}.spec.b", (config.d_p,), frozenset({f"decomposer:{tag}"})),
            (f"de.{tag}.inv.W", (config.de_hidden, config.d_p), frozenset({f"decomposer:{tag}"})),
            (f"de.{tag}.inv.b", (config.d_p,), frozenset({f"decomposer:{tag}"})),
            (f"recomb.{tag}.W", (2 * config.d_p, d_m), frozenset({f"recombiner:{tag}"})),
            (f"recomb.{tag}.b", (d_m,), frozenset({f"recombiner:{tag}"})),
            (f"gen.{tag}.hid.W", (d_rest + config.d_p, config.gen_hidden), frozenset({f"generator:{tag}"})),
            (f"gen.{tag}.hid.b", (config.gen_hidden,), frozenset({f"generator:{tag}"})),
            (f"gen.{tag}.out.W", (config.gen_hidden, d_m), frozenset({f"generator:{tag}"})),
            (f"gen.{tag}.out.b", (d_m,), frozenset({f"generator:{tag}"})),
            (f"bt.{tag}.hid.W", (config.fused_dim, config.bt_hidden), frozenset({f"backtrans:{tag}"})),
            (f"bt.{tag}.hid.b", (config.bt_hidden,), frozenset({f"backtrans:{tag}"})),
            (f"bt.{tag}.out.W", (config.bt_hidden, config.d_p), frozenset({f"backtrans:{tag}"})),
            (f"bt.{tag}.out.b", (config.d_p,), frozenset({f"backtrans:{tag}"})),
            (f"prop.{tag}", (1, config.d_p), frozenset({f"property:{tag}"})),
        ]
    d_all = config.d_l + config.d_a + config.d_v
    specs += [
        ("fuse.hid.W", (d_all, config.fuse_hidden), frozenset({"fusion"})),
        ("fuse.hid.b", (config.fuse_hidden,), frozenset({"fusion"})),
        ("fuse.out.W", (config.fuse_hidden, config.fused_dim), frozenset({"fusion"})),
        ("fuse.out.b", (config.fused_dim,), frozenset({"fusion"})),
        ("head.hid.W", (config.fused_dim, config.head_hidden), frozenset({"task_head"})),
        ("head.hid.b", (config.head_hidden,), frozenset({"task_head"})),
        ("head.out.W", (config.head_hidden, config.n_out), frozenset({"task_head"})),
        ("head.out.b", (config.n_out,), frozenset({"task_head"})),
    ]
    return specs


def init_params(config: NetworkConfig, seed: int) -> ParameterStore:
    """Deterministic initialization: W ~ N(0, 1/fan_in), biases zero, P ~ N(0, 0.1^2)."""
    rng = np.random.default_rng(seed)
    entries = []
    for name, shape, tags in _entry_specs(config):
        if name.startswith("prop."):
            values = rng.normal(0.0, 0.1, size=shape)
        elif name.endswith(".b"):
            values = np.zeros(shape)
        else:
            fan_in = shape[0]
            values = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
        entries.append(TensorEntry(name, values, tags))
    return ParameterStore(entries)


def matrix_weight_names(config: NetworkConfig) -> list[str]:
    """Entry names used as the W in a dense x @ W map (activation stats apply)."""
    return [name for name, shape, _ in _entry_specs(config)
            if name.endswith(".W") and len(shape) == 2]


class Backbone:
    """Forward equations and losses for a fixed configuration.

    All methods are pure in (store, batch); the optional recorder receives the
    input activations of every dense weight matrix for the proxy statistics.
    """

    def __init__(self, config: NetworkConfig):
        self.config = config

    # -- parameter plumbing -------------------------------------------------

    def leaves(self, store: ParameterStore) -> dict[str, Tensor]:
        expected = {name for name, _, _ in _entry_specs(self.config)}
        actual = {e.name for e in store}
        if expected != actual:
            missing = sorted(expected - actual)
            extra = sorted(actual - expected)
            raise ValueError(f"store does not match config: missing={missing} extra={extra}")
        return {e.name: leaf(e.values) for e in store}

    def _linear(self, x: Tensor, params: dict[str, Tensor], prefix: str,
                recorder: Recorder | None) -> Tensor:
        w = params[prefix + ".W"]
        if recorder is not None:
            recorder(prefix + ".W", x.data)
        return x @ w + params[prefix + ".b"]

    # -- sub-network forwards ------------------------------------------------

    def decompose(self, params: dict[str, Tensor], m: Modality, x: Tensor,
                  recorder: Recorder | None = None) -> tuple[Tensor, Tensor]:
        """Two-headed decomposition into (sample-specific, sample-invariant)."""
        h = self._linear(x, params, f"de.{m.value}.trunk", recorder).tanh()
        spec = self._linear(h, params, f"de.{m.value}.spec", recorder)
        inv = self._linear(h, params, f"de.{m.value}.inv", recorder)
        return spec, inv

    def generate(self, params: dict[str, Tensor], m: Modality,
                 others: dict[Modality, Tensor], n: int,
                 recorder: Recorder | None = None) -> Tensor:
        """Reconstruct modality m from the other (zero-padded) modalities and its
        property embedding."""
        parts = [others[o] for o in MODALITIES if o is not m]
        parts.append(params[f"prop.{m.value}"].expand_rows(n))
        u = concat_cols(parts)
        h = self._linear(u, params, f"gen.{m.value}.hid", recorder).tanh()
        return self._linear(h, params, f"gen.{m.value}.out", recorder)

    def fuse(self, params: dict[str, Tensor], xs: dict[Modality, Tensor],
             recorder: Recorder | None = None) -> Tensor:
        z = concat_cols([xs[m] for m in MODALITIES])
        h = self._linear(z, params, "fuse.hid", recorder).tanh()
        return self._linear(h, params, "fuse.out", recorder)

    def back_translate(self, params: dict[str, Tensor], m: Modality, z: Tensor,
                       recorder: Recorder | None = None) -> Tensor:
        h = self._linear(z, params, f"bt.{m.value}.hid", recorder).tanh()
        return self._linear(h, params, f"bt.{m.value}.out", recorder)

    def predict_from(self, params: dict[str, Tensor], z: Tensor,
                     recorder: Recorder | None = None) -> Tensor:
        h = self._linear(z, params, "head.hid", recorder).tanh()
        return self._linear(h, params, "head.out", recorder)

    # -- whole-batch forward ---------------------------------------------------

    def _masked_inputs(self, batch: Batch) -> tuple[dict[Modality, Tensor], dict[Modality, np.ndarray]]:
        """Features multiplied by the presence mask, so absent slots are exactly zero."""
        xs: dict[Modality, Tensor] = {}
        masks: dict[Modality, np.ndarray] = {}
        for m in MODALITIES:
            mask = batch.present[m].astype(np.float64).reshape(-1, 1)
            xs[m] = constant(batch.x[m]) * constant(mask)
            masks[m] = mask
        return xs, masks

    def fused_embedding(self, params: dict[str, Tensor], batch: Batch,
                        recorder: Recorder | None = None) -> Tensor:
        """Joint embedding; absent modalities are replaced by their reconstructions."""
        xs, masks = self._masked_inputs(batch)
        n = batch.size
        fusion_in: dict[Modality, Tensor] = {}
        for m in MODALITIES:
            xhat = self.generate(params, m, xs, n, recorder)
            mask = constant(masks[m])
            fusion_in[m] = xs[m] * mask + xhat * (constant(1.0) - mask)
        return self.fuse(params, fusion_in, recorder)

    def predict(self, store: ParameterStore, batch: Batch) -> np.ndarray:
        """Task output: predictions (regression) or class ids (classification)."""
        params = self.leaves(store)
        out = self.predict_from(params, self.fused_embedding(params, batch)).data
        if self.config.task == "regression":
            return out[:, 0].copy()
        return out.argmax(axis=1)

    def fused_matrix(self, store: ParameterStore, batch: Batch) -> np.ndarray:
        params = self.leaves(store)
        return self.fused_embedding(params, batch).data.copy()

    # -- losses -----------------------------------------------------------------

    def reconstruction_loss(self, params: dict[str, Tensor], m: Modality, batch: Batch,
                            recorder: Recorder | None = None) -> Tensor | None:
        """Mean squared reconstruction error of modality m over samples where m is
        observed; None when no sample observes m."""
        obs = np.flatnonzero(batch.present[m])
        if obs.size == 0:
            return None
        xs, _ = self._masked_inputs(batch)
        xhat = self.generate(params, m, xs, batch.size, recorder)
        diff = xhat.take_rows(obs) - constant(batch.x[m][obs])
        return diff.square().sum(axis=1).mean()

    def total_loss(self, store: ParameterStore, batch: Batch, weights: LossWeights,
                   recorder: Recorder | None = None,
                   params: dict[str, Tensor] | None = None) -> tuple[Tensor, LossBreakdown]:
        """Assemble the full objective; raises NumericError naming a non-finite term."""
        if batch.size == 0:
            raise ValueError("total loss needs a nonempty batch")
        if params is None:
            params = self.leaves(store)
        xs, masks = self._masked_inputs(batch)
        n = batch.size

        xhats = {m: self.generate(params, m, xs, n, recorder) for m in MODALITIES}
        fusion_in = {
            m: xs[m] * constant(masks[m]) + xhats[m] * (constant(1.0) - constant(masks[m]))
            for m in MODALITIES
        }
        z = self.fuse(params, fusion_in, recorder)
        out = self.predict_from(params, z, recorder)

        if self.config.task == "regression":
            resid = out - constant(batch.y.reshape(-1, 1))
            task = resid.square().sum(axis=1).mean()
        else:
            labels = batch.y.astype(int)
            onehot = np.zeros((n, self.config.n_classes))
            onehot[np.arange(n), labels] = 1.0
            picked = (out * constant(onehot)).sum(axis=1)
            task = (logsumexp_rows(out) - picked).mean()

        zero = constant(0.0)
        re_total, or_total, inv_total, app_total, redec_total, con_total = (
            zero, zero, zero, zero, zero, zero)
        for m in MODALITIES:
            obs = np.flatnonzero(batch.present[m])
            if obs.size == 0:
                continue
            x_true = constant(batch.x[m][obs])

            diff = xhats[m].take_rows(obs) - x_true
            re_total = re_total + diff.square().sum(axis=1).mean()

            spec, inv = self.decompose(params, m, xs[m].take_rows(obs), recorder)
            or_total = or_total + (spec * inv).sum(axis=1).mean()
            inv_mean = inv.mean(axis=0)
            inv_total = inv_total + (inv - inv_mean).square().sum(axis=1).mean()
            prop = params[f"prop.{m.value}"]
            gap = (prop - inv_mean).square().sum() - constant(weights.margin_eps)
            app_total = app_total + gap.relu()
            recomb_in = concat_cols([spec, inv])
            rec = self._linear(recomb_in, params, f"recomb.{m.value}", recorder)
            redec_total = redec_total + (rec - x_true).square().sum(axis=1).mean()

            xt = self.back_translate(params, m, z.take_rows(obs), recorder)
            if obs.size >= 2:
                con_total = con_total + nce_loss(xt, spec, weights.tau)

        pe = or_total + inv_total + redec_total + app_total
        total = task + re_total * weights.alpha + pe * weights.beta + con_total * weights.gamma

        breakdown = LossBreakdown(
            task=task.item(), re=re_total.item(), or_=or_total.item(),
            inv=inv_total.item(), app=app_total.item(), re_decomp=redec_total.item(),
            pe=pe.item(), con=con_total.item(), total=total.item(), weights=weights,
        )
        for term, value in (("task", breakdown.task), ("re", breakdown.re),
                            ("or", breakdown.or_), ("inv", breakdown.inv),
                            ("app", breakdown.app), ("re_decomp", breakdown.re_decomp),
                            ("con", breakdown.con), ("total", breakdown.total)):
            if not np.isfinite(value):
                raise NumericError(term, value)
        return total, breakdown

    def loss_value(self, store: ParameterStore, batch: Batch, weights: LossWeights) -> float:
        return self.total_loss(store, batch, weights)[1].total

    def block_loss(self, store: ParameterStore, batch: Batch, weights: LossWeights,
                   block_size: int = 128) -> float:
        """Training loss as the mean over fixed consecutive blocks.

        The contrastive and invariance terms couple samples within a batch, so
        the trained objective is the expectation over training-sized batches;
        evaluating on one giant batch would measure a different function. The
        partition is fixed, so the value is deterministic.
        """
        n = batch.size
        if n <= block_size:
            return self.loss_value(store, batch, weights)
        totals = []
        for start in range(0, n - block_size + 1, block_size):
            rows = np.arange(start, start + block_size)
            totals.append(self.loss_value(store, batch.take(rows), weights))
        return float(np.mean(totals))

    def gradient(self, store: ParameterStore, batch: Batch, weights: LossWeights
                 ) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
        """Exact gradient of the total loss for every parameter entry."""
        params = self.leaves(store)
        total, breakdown = self.total_loss(store, batch, weights, params=params)
        total.backward()
        grads = {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                 for name, t in params.items()}
        return breakdown, grads

    def gradient_vector(self, store: ParameterStore, batch: Batch,
                        weights: LossWeights) -> np.ndarray:
        _, grads = self.gradient(store, batch, weights)
        return np.concatenate([grads[e.name].reshape(-1) for e in store])

    # -- per-sample reconstruction gradient (saliency input) --------------------

    def generator_forward_arrays(self, store: ParameterStore, m: Modality, batch: Batch
                                 ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Plain-numpy generator forward on the m-observed rows.

        Returns (inputs u, hidden h, residual, observed-row indices); the pieces
        from which per-sample reconstruction gradients follow in closed form.
        """
        obs = np.flatnonzero(batch.present[m])
        tag = m.value
        parts = []
        for o in MODALITIES:
            if o is m:
                continue
            mask = batch.present[o].astype(np.float64).reshape(-1, 1)
            parts.append((batch.x[o] * mask)[obs])
        prop = store.values(f"prop.{tag}")
        parts.append(np.broadcast_to(prop, (obs.size, prop.shape[1])))
        u = np.concatenate(parts, axis=1) if obs.size else np.zeros((0, 0))
        if obs.size == 0:
            return u, np.zeros((0, 0)), np.zeros((0, 0)), obs
        h = np.tanh(u @ store.values(f"gen.{tag}.hid.W") + store.values(f"gen.{tag}.hid.b"))
        xhat = h @ store.values(f"gen.{tag}.out.W") + store.values(f"gen.{tag}.out.b")
        residual = xhat - batch.x[m][obs]
        return u, h, residual, obs

    def recon_sample_gradient(self, params: dict[str, Tensor], m: Modality,
                              batch: Batch, row: int) -> dict[str, np.ndarray] | None:
        """Gradient of the single-sample reconstruction loss ||xhat_i - x_i||^2.

        Returns None when modality m is absent for that sample. Grads are reset
        on the touched leaves before each call, so params can be reused.
        """
        if not batch.present[m][row]:
            return None
        single = batch.take(np.array([row]))
        xs, _ = self._masked_inputs(single)
        xhat = self.generate(params, m, xs, 1)
        loss = (xhat - constant(single.x[m])).square().sum()
        for t in params.values():
            t.grad = None
        loss.backward()
        return {name: t.grad for name, t in params.items() if t.grad is not None}
