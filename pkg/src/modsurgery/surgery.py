"""Modality-targeted weight surgery: stats, proxy, saliency, selection, apply.

The importance proxy for a dense-matrix coordinate is

    L_q = 0.5 * w_q^2 / (1 - chi_q),   chi_q = min(x_q^2 / S, chi_max)

where S is the per-row squared-activation sum on the calibration batch and
chi_max = 0.99 guards the denominator. Coordinates outside dense matrices
(biases, property embeddings) and rows with no activation evidence use chi = 0,
so L_q falls back to 0.5 * w_q^2.

Candidates need saliency >= eta_s and proxy <= eta_l; the k = floor(r * |W|)
smallest proxies win, ties broken by ascending global index so a plan is
reproducible bit-for-bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .network import Backbone, Batch, LossWeights, NetworkConfig, matrix_weight_names
from .params import GlobalIndex, Modality, ParameterStore

CHI_MAX_DEFAULT = 0.99


@dataclass
class ActivationStats:
    """Per-matrix mean squared input activations from one calibration pass."""

    x_sq: dict[str, np.ndarray]  # weight name -> per-input mean of x_j^2
    row_sum: dict[str, float]    # weight name -> mean of sum_j x_j^2 (the S value)
    degenerate: frozenset[str]   # matrices whose rows carry no activation evidence
    batch_size: int


@dataclass
class ImportanceProxy:
    chi: np.ndarray      # flat, aligned with the store's canonical order
    values: np.ndarray   # flat L_q >= 0
    chi_max: float


@dataclass
class SaliencyMap:
    values: np.ndarray   # flat s_q >= 0
    modality: Modality
    batch_size: int      # number of calibration samples that observed the modality


@dataclass
class CandidateSet:
    eligible: np.ndarray   # flat indices with s >= eta_s and L <= eta_l (ascending)
    selected: np.ndarray   # top-k of eligible by (L_q, global index), ascending L_q
    eta_s: float
    eta_l: float
    budget_fraction: float
    k: int


@dataclass
class SurgeryPlan:
    modality: Modality
    indices: list[GlobalIndex]       # ascending global order
    mode: str                        # "zero" | "noise"
    sigma: float
    seed: int
    epsilon: float
    delta: float
    budget_fraction: float
    total_params: int
    sensitivity: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in ("zero", "noise"):
            raise ValueError(f"unknown surgery mode {self.mode!r}")
        if len(self.indices) > int(self.budget_fraction * self.total_params):
            raise ValueError("plan exceeds its own candidate budget")

    def to_json_dict(self) -> dict:
        return {
            "modality": self.modality.value,
            "indices": [[gi.entry_name, gi.offset] for gi in self.indices],
            "mode": self.mode,
            "sigma": self.sigma,
            "seed": self.seed,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "budget_fraction": self.budget_fraction,
            "total_params": self.total_params,
            "sensitivity": self.sensitivity,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SurgeryPlan":
        return cls(
            modality=Modality.parse(d["modality"]),
            indices=[GlobalIndex(name, int(off)) for name, off in d["indices"]],
            mode=d["mode"], sigma=float(d["sigma"]), seed=int(d["seed"]),
            epsilon=float(d["epsilon"]), delta=float(d["delta"]),
            budget_fraction=float(d["budget_fraction"]),
            total_params=int(d["total_params"]),
            sensitivity=float(d.get("sensitivity", 0.0)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SurgeryPlan":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def collect_activation_stats(net: Backbone, store: ParameterStore,
                             calib: Batch) -> ActivationStats:
    """Accumulate per-matrix input activations over one full forward pass."""
    if calib.size == 0:
        raise ValueError("activation statistics need a nonempty calibration batch")
    sums: dict[str, np.ndarray] = {}
    rows: dict[str, int] = {}

    def recorder(name: str, x: np.ndarray) -> None:
        sq = (x ** 2).sum(axis=0)
        sums[name] = sums[name] + sq if name in sums else sq
        rows[name] = rows.get(name, 0) + x.shape[0]

    # weights do not alter the forward graph, only the loss mixture
    net.total_loss(store, calib, LossWeights(), recorder=recorder)
    x_sq: dict[str, np.ndarray] = {}
    row_sum: dict[str, float] = {}
    degenerate = set()
    for name in matrix_weight_names(net.config):
        if name not in sums or rows[name] == 0:
            degenerate.add(name)
            continue
        mean_sq = sums[name] / rows[name]
        total = float(mean_sq.sum())
        x_sq[name] = mean_sq
        row_sum[name] = total
        if total == 0.0:
            degenerate.add(name)
    return ActivationStats(x_sq=x_sq, row_sum=row_sum,
                           degenerate=frozenset(degenerate), batch_size=calib.size)


def compute_proxy(stats: ActivationStats, store: ParameterStore,
                  chi_max: float = CHI_MAX_DEFAULT) -> ImportanceProxy:
    """Per-coordinate clipped activation ratio and loss-increase proxy."""
    if not 0 < chi_max < 1:
        raise ValueError("chi_max must be in (0, 1)")
    chi_parts = []
    for entry in store:
        values = entry.values
        name = entry.name
        if (values.ndim == 2 and name in stats.x_sq and name not in stats.degenerate):
            per_input = np.minimum(stats.x_sq[name] / stats.row_sum[name], chi_max)
            chi_entry = np.repeat(per_input[:, None], values.shape[1], axis=1)
        else:
            chi_entry = np.zeros(values.shape)
        chi_parts.append(chi_entry.reshape(-1))
    chi = np.concatenate(chi_parts) if chi_parts else np.zeros(0)
    w = store.to_vector()
    proxy = 0.5 * w ** 2 / (1.0 - chi)
    return ImportanceProxy(chi=chi, values=proxy, chi_max=chi_max)


def compute_saliency(net: Backbone, store: ParameterStore, calib: Batch,
                     modality: Modality) -> SaliencyMap:
    """Mean absolute per-sample gradient of the target reconstruction loss.

    The single-sample loss only touches the target generator and its property
    embedding, so the per-sample gradients have a closed form in the batched
    forward quantities; everything else is exactly zero. The per-sample
    autodiff route (`compute_saliency_autodiff`) is kept as a cross-check.
    """
    u, h, residual, obs = net.generator_forward_arrays(store, modality, calib)
    if obs.size == 0:
        raise ValueError(
            f"saliency undefined: no calibration sample observes modality {modality.value}")
    n = obs.size
    tag = modality.value
    w2 = store.values(f"gen.{tag}.out.W")
    sech_sq = 1.0 - h * h
    # d(loss_i)/d(out.W[j, o]) = 2 h_j r_o ; /d(out.b[o]) = 2 r_o
    abs_r = np.abs(residual)
    s_out_w = 2.0 * (np.abs(h).T @ abs_r) / n
    s_out_b = 2.0 * abs_r.mean(axis=0)
    # backprop scalar per hidden unit: c_j = 2 <out.W[j, :], r>
    c = 2.0 * (residual @ w2.T) * sech_sq
    abs_c = np.abs(c)
    s_hid_w = (np.abs(u).T @ abs_c) / n
    s_hid_b = abs_c.mean(axis=0)
    # property rows sit at the tail of the generator input
    d_p = store.values(f"prop.{tag}").shape[1]
    w1_prop = store.values(f"gen.{tag}.hid.W")[-d_p:, :]
    s_prop = np.abs(c @ w1_prop.T).mean(axis=0).reshape(1, -1)

    per_entry = {
        f"gen.{tag}.hid.W": s_hid_w,
        f"gen.{tag}.hid.b": s_hid_b,
        f"gen.{tag}.out.W": s_out_w,
        f"gen.{tag}.out.b": s_out_b,
        f"prop.{tag}": s_prop,
    }
    flat = np.concatenate([
        per_entry[e.name].reshape(-1) if e.name in per_entry else np.zeros(e.size)
        for e in store
    ])
    return SaliencyMap(values=flat, modality=modality, batch_size=int(n))


def compute_saliency_autodiff(net: Backbone, store: ParameterStore, calib: Batch,
                              modality: Modality) -> SaliencyMap:
    """Per-sample reverse-mode route; slow, used to validate compute_saliency."""
    observed = np.flatnonzero(calib.present[modality])
    if observed.size == 0:
        raise ValueError(
            f"saliency undefined: no calibration sample observes modality {modality.value}")
    params = net.leaves(store)
    acc = {e.name: np.zeros(e.shape) for e in store}
    for row in observed:
        grads = net.recon_sample_gradient(params, modality, calib, int(row))
        for name, g in grads.items():
            acc[name] += np.abs(g)
    flat = np.concatenate([(acc[e.name] / observed.size).reshape(-1) for e in store])
    return SaliencyMap(values=flat, modality=modality, batch_size=int(observed.size))


def select_candidates(proxy: ImportanceProxy, saliency: SaliencyMap, eta_s: float,
                      eta_l: float, budget_fraction: float,
                      total_params: int) -> CandidateSet:
    """Threshold on both scores, then keep the k smallest proxies."""
    if eta_s < 0 or eta_l < 0:
        raise ValueError("thresholds must be non-negative")
    if not 0 < budget_fraction <= 1:
        raise ValueError("budget fraction must be in (0, 1]")
    eligible = np.flatnonzero((saliency.values >= eta_s) & (proxy.values <= eta_l))
    k = int(np.floor(budget_fraction * total_params))
    # ascending (L_q, global index); lexsort's last key is primary
    order = np.lexsort((eligible, proxy.values[eligible]))
    selected = eligible[order][:k]
    return CandidateSet(eligible=eligible, selected=selected, eta_s=eta_s,
                        eta_l=eta_l, budget_fraction=budget_fraction, k=k)


def build_plan(store: ParameterStore, candidates: CandidateSet, modality: Modality,
               mode: str, sigma: float, seed: int, epsilon: float, delta: float,
               sensitivity: float) -> SurgeryPlan:
    flats = np.sort(candidates.selected)
    return SurgeryPlan(
        modality=modality,
        indices=[store.index_of(int(i)) for i in flats],
        mode=mode, sigma=float(sigma), seed=seed, epsilon=epsilon, delta=delta,
        budget_fraction=candidates.budget_fraction, total_params=store.total_size,
        sensitivity=float(sensitivity),
    )


def noise_stream(plan: SurgeryPlan) -> np.ndarray:
    """The seeded Gaussian draws applied in ascending-global-index order."""
    rng = np.random.default_rng(plan.seed)
    return rng.normal(0.0, plan.sigma, size=len(plan.indices))


def apply_surgery(store: ParameterStore, plan: SurgeryPlan) -> ParameterStore:
    """Zero or noise the planned coordinates; everything else is bit-identical."""
    if plan.total_params != store.total_size:
        raise ValueError("plan was built for a store of a different size")
    if plan.mode == "zero":
        updates = [(gi, 0.0) for gi in plan.indices]
    else:
        draws = noise_stream(plan)
        updates = [(gi, store.get(gi) + float(d)) for gi, d in zip(plan.indices, draws)]
    return store.apply_updates(updates)


def decide_mode(epsilon: float, override: str | None = None) -> str:
    """Budget-to-modification rule: zero when epsilon <= 1, noise otherwise.

    `override` forces a mode regardless of budget.
    """
    if override is not None:
        if override not in ("zero", "noise"):
            raise ValueError(f"unknown mode override {override!r}")
        return override
    return "zero" if epsilon <= 1.0 else "noise"


class ModalityDeleter(BaseEstimator, TransformerMixin):
    """fit/transform wrapper around the surgery pipeline.

    fit() consumes the trained backbone plus a calibration batch and freezes a
    SurgeryPlan; transform() applies it to a parameter store. Privacy
    calibration is injected via `sigma_fn(sensitivity, epsilon, delta)` so the
    accountant stays in its own module.
    """

    def __init__(self, modality: str = "A", eta_s: float = 0.1, eta_l: float = 0.05,
                 budget_fraction: float = 0.03, chi_max: float = CHI_MAX_DEFAULT,
                 epsilon: float = 0.5, delta: float = 1e-5, noise_seed: int = 0,
                 mode_override: str | None = None, sensitivity_method: str = "selected-weight-norm"):
        self.modality = modality
        self.eta_s = eta_s
        self.eta_l = eta_l
        self.budget_fraction = budget_fraction
        self.chi_max = chi_max
        self.epsilon = epsilon
        self.delta = delta
        self.noise_seed = noise_seed
        self.mode_override = mode_override
        self.sensitivity_method = sensitivity_method

    def fit(self, X: tuple[NetworkConfig, ParameterStore], calib: Batch = None,
            sigma_fn=None) -> "ModalityDeleter":
        from .privacy import bound_sensitivity, calibrate_sigma

        if calib is None:
            raise ValueError("fit needs the calibration batch")
        net_config, store = X
        net = Backbone(net_config)
        target = Modality.parse(self.modality)
        self.stats_ = collect_activation_stats(net, store, calib)
        self.proxy_ = compute_proxy(self.stats_, store, self.chi_max)
        self.saliency_ = compute_saliency(net, store, calib, target)
        self.candidates_ = select_candidates(self.proxy_, self.saliency_, self.eta_s,
                                             self.eta_l, self.budget_fraction,
                                             store.total_size)
        mode = decide_mode(self.epsilon, self.mode_override)
        draft = build_plan(store, self.candidates_, target, mode, sigma=0.0,
                           seed=self.noise_seed, epsilon=self.epsilon,
                           delta=self.delta, sensitivity=0.0)
        bound = bound_sensitivity(draft, store, method=self.sensitivity_method,
                                  net=net, calib=calib)
        sigma = (sigma_fn or calibrate_sigma)(bound.delta, self.epsilon, self.delta)
        self.sensitivity_ = bound
        self.plan_ = build_plan(store, self.candidates_, target, mode, sigma=sigma,
                                seed=self.noise_seed, epsilon=self.epsilon,
                                delta=self.delta, sensitivity=bound.delta)
        return self

    def transform(self, store: ParameterStore) -> ParameterStore:
        if not hasattr(self, "plan_"):
            raise RuntimeError("deleter is not fitted; call fit() first")
        return apply_surgery(store, self.plan_)
