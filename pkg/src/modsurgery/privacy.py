"""Gaussian-mechanism calibration and zero-concentrated-DP accounting.

Closed forms implemented here:

    sigma(Delta, eps, delta) = Delta * sqrt(2 ln(1.25 / delta)) / eps
    rho(Delta, sigma)        = Delta^2 / (2 sigma^2)     (composes additively)
    eps(rho, delta)          = rho + 2 sqrt(rho ln(1 / delta))

plus an empirical tail check of the privacy-loss random variable: under a mean
shift of norm Delta the log-likelihood ratio is N(Delta^2/(2 sigma^2),
Delta^2/sigma^2), so Pr(ratio > eps) = Phibar(eps sigma/Delta - Delta/(2 sigma)).
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm

from .network import Backbone, Batch
from .params import MODALITIES, ParameterStore, digest


@dataclass(frozen=True)
class PrivacyBudget:
    epsilon: float
    delta: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.epsilon) and self.epsilon > 0):
            raise ValueError("epsilon must be positive and finite")
        if not (math.isfinite(self.delta) and 0 < self.delta < 1):
            raise ValueError("delta must be in (0, 1)")


@dataclass(frozen=True)
class SensitivityBound:
    delta: float
    method: str  # "selected-weight-norm" | "lipschitz-scaled"
    inputs_digest: str

    def __post_init__(self) -> None:
        if self.delta < 0:
            raise ValueError("sensitivity must be non-negative")


@dataclass
class ZcdpLedger:
    """Additive zCDP accounting across deletion events."""

    events: list[dict] = field(default_factory=list)

    @property
    def cumulative_rho(self) -> float:
        return float(sum(e["rho"] for e in self.events))

    def compose(self, rho: float, description: str) -> "ZcdpLedger":
        if rho < 0:
            raise ValueError("rho must be non-negative")
        self.events.append({"rho": float(rho), "description": description,
                            "timestamp": time.time()})
        return self

    def epsilon_at(self, delta: float) -> float:
        return to_eps_delta(self.cumulative_rho, delta)

    def snapshot(self, delta: float) -> dict:
        """Timestamp-free view suitable for embedding in a certificate."""
        return {
            "events": [{"rho": e["rho"], "description": e["description"]}
                       for e in self.events],
            "cumulative_rho": self.cumulative_rho,
            "converted_epsilon": self.epsilon_at(delta) if self.events else 0.0,
            "conversion_delta": delta,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({"events": self.events}, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ZcdpLedger":
        return cls(events=json.loads(Path(path).read_text())["events"])


@dataclass(frozen=True)
class LipschitzEstimate:
    l_hat: float        # max per-sample gradient norm of the (clamped) task loss
    b_act: float        # max per-sample parameter-Jacobian norm of the output
    b_ell_prime: float  # bound on the scalar loss derivative after clamping
    batch_id: str
    batch_size: int


@dataclass(frozen=True)
class TailCheckReport:
    trials: int
    empirical_tail: float
    analytic_tail: float
    budget_threshold: float   # delta + 3 binomial SE
    agreement_limit: float    # 3 SE around the analytic tail
    passed_budget: bool
    passed_agreement: bool

    @property
    def passed(self) -> bool:
        return self.passed_budget and self.passed_agreement


def calibrate_sigma(delta_sens: float, epsilon: float, delta: float) -> float:
    """Gaussian noise scale for the given l2-sensitivity and budget."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not 0 < delta < 1.25:
        raise ValueError("delta must be in (0, 1.25) for a positive log")
    if delta_sens < 0:
        raise ValueError("sensitivity must be non-negative")
    return delta_sens * math.sqrt(2.0 * math.log(1.25 / delta)) / epsilon


def gaussian_rho(delta_sens: float, sigma: float) -> float:
    """zCDP parameter of the Gaussian mechanism."""
    if delta_sens < 0:
        raise ValueError("sensitivity must be non-negative")
    if delta_sens == 0:
        return 0.0
    if sigma <= 0:
        raise ValueError("sigma must be positive when sensitivity is nonzero")
    return delta_sens ** 2 / (2.0 * sigma ** 2)


def to_eps_delta(rho: float, delta: float) -> float:
    """Standard zCDP -> (eps, delta) conversion."""
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if not 0 < delta < 1:
        raise ValueError("delta must be in (0, 1)")
    return rho + 2.0 * math.sqrt(rho * math.log(1.0 / delta))


def batch_fingerprint(batch: Batch) -> str:
    h = hashlib.sha256()
    for m in MODALITIES:
        h.update(batch.x[m].astype("<f8").tobytes())
        h.update(batch.present[m].astype(np.uint8).tobytes())
    h.update(batch.y.astype("<f8").tobytes())
    return h.hexdigest()


def estimate_lipschitz(net: Backbone, store: ParameterStore, calib: Batch) -> LipschitzEstimate:
    """Gradient-norm bound on the task-loss Lipschitz constant.

    Regression residuals are clamped to [-1, 1] inside this estimator only, so
    the scalar loss derivative is bounded by 1 (the loss here is the halved
    squared error; classification uses the cross-entropy derivative bound
    sqrt(2)). The estimate satisfies l_hat <= b_act * b_ell_prime by
    construction.
    """
    if calib.size == 0:
        raise ValueError("Lipschitz estimation needs a nonempty batch")
    from .autodiff import constant

    params = net.leaves(store)
    l_hat = 0.0
    b_act = 0.0
    if net.config.task == "regression":
        b_ell_prime = 1.0
    else:
        b_ell_prime = math.sqrt(2.0)
    for i in range(calib.size):
        single = calib.take(np.array([i]))
        for t in params.values():
            t.grad = None
        z = net.fused_embedding(params, single)
        out = net.predict_from(params, z)
        if net.config.task == "regression":
            resid = float(out.data[0, 0] - single.y[0])
            scale = float(np.clip(resid, -1.0, 1.0))
            out.sum().backward()
            jac_sq = sum(float((t.grad ** 2).sum()) for t in params.values()
                         if t.grad is not None)
            jac_norm = math.sqrt(jac_sq)
            b_act = max(b_act, jac_norm)
            l_hat = max(l_hat, abs(scale) * jac_norm)
        else:
            logits = out.data[0]
            probs = np.exp(logits - logits.max())
            probs /= probs.sum()
            seed = probs.copy()
            seed[int(single.y[0])] -= 1.0
            (out * constant(seed.reshape(1, -1))).sum().backward()
            grad_sq = sum(float((t.grad ** 2).sum()) for t in params.values()
                          if t.grad is not None)
            grad_norm = math.sqrt(grad_sq)
            seed_norm = float(np.linalg.norm(seed))
            if seed_norm > 0:
                b_act = max(b_act, grad_norm / seed_norm)
            l_hat = max(l_hat, grad_norm)
    return LipschitzEstimate(l_hat=l_hat, b_act=b_act, b_ell_prime=b_ell_prime,
                             batch_id=batch_fingerprint(calib), batch_size=calib.size)


def bound_sensitivity(plan, pre_store: ParameterStore, method: str = "selected-weight-norm",
                      net: Backbone | None = None, calib: Batch | None = None,
                      lipschitz: LipschitzEstimate | None = None) -> SensitivityBound:
    """l2-sensitivity of the surgery displacement.

    selected-weight-norm: the norm of the pre-surgery values at the selected
    coordinates — exact for the zero-mode displacement. lipschitz-scaled: the
    same displacement scaled into loss space by the estimated Lipschitz
    constant.
    """
    selected = np.array([pre_store.get(gi) for gi in plan.indices])
    base = float(np.linalg.norm(selected)) if selected.size else 0.0
    h = hashlib.sha256()
    h.update(digest(pre_store).encode())
    for gi in plan.indices:
        h.update(f"{gi.entry_name}:{gi.offset};".encode())
    if method == "selected-weight-norm":
        value = base
    elif method == "lipschitz-scaled":
        if lipschitz is None:
            if net is None or calib is None:
                raise ValueError("lipschitz-scaled needs a Lipschitz estimate or (net, calib)")
            lipschitz = estimate_lipschitz(net, pre_store, calib)
        value = lipschitz.l_hat * base
        h.update(lipschitz.batch_id.encode())
    else:
        raise ValueError(f"unknown sensitivity method {method!r}")
    return SensitivityBound(delta=value, method=method, inputs_digest=h.hexdigest())


def analytic_tail(delta_sens: float, sigma: float, epsilon: float) -> float:
    """Pr(|log-likelihood ratio| > epsilon) under the Gaussian mechanism."""
    if delta_sens == 0:
        return 0.0
    a = epsilon * sigma / delta_sens
    b = delta_sens / (2.0 * sigma)
    return float(norm.sf(a - b) + norm.sf(a + b))


def plrv_tail_check(delta_sens: float, sigma: float, budget: PrivacyBudget,
                    trials: int = 1_000_000, seed: int = 2024) -> TailCheckReport:
    """Monte-Carlo exceedance of the privacy-loss variable vs. the budget."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if delta_sens == 0:
        return TailCheckReport(trials=trials, empirical_tail=0.0, analytic_tail=0.0,
                               budget_threshold=budget.delta, agreement_limit=0.0,
                               passed_budget=True, passed_agreement=True)
    if sigma <= 0:
        raise ValueError("sigma must be positive when sensitivity is nonzero")
    rng = np.random.default_rng(seed)
    mean = delta_sens ** 2 / (2.0 * sigma ** 2)
    std = delta_sens / sigma
    draws = rng.normal(mean, std, size=trials)
    empirical = float(np.mean(np.abs(draws) > budget.epsilon))
    analytic = analytic_tail(delta_sens, sigma, budget.epsilon)
    budget_se = math.sqrt(budget.delta * (1 - budget.delta) / trials)
    agree_se = math.sqrt(max(analytic * (1 - analytic), 1.0 / trials) / trials)
    threshold = budget.delta + 3.0 * budget_se
    limit = 3.0 * agree_se
    return TailCheckReport(
        trials=trials, empirical_tail=empirical, analytic_tail=analytic,
        budget_threshold=threshold, agreement_limit=limit,
        passed_budget=empirical <= threshold,
        passed_agreement=abs(empirical - analytic) <= limit,
    )
