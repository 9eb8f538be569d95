"""Deletion certificates: issue, canonicalize, verify.

A certificate binds one surgery event to the pre/post parameter digests, the
modified indices, the noise seed and scale, and the privacy budget, plus the
named diagnostic checks an auditor should run. The canonical body is key-sorted
compact JSON with the issue timestamp excluded and the self-digest field
blanked; `body_sha256` is the SHA-256 of those bytes, so any single-field edit
is detectable without recomputing anything else.

Verification never needs the deleted modality's data: stores and the
certificate are enough.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import privacy
from .params import ParameterStore, digest
from .surgery import SurgeryPlan, apply_surgery, noise_stream

SCHEMA_VERSION = 1

CHECKS_STRUCTURAL = ("post-digest", "zero-coordinates", "budget-arithmetic", "index-budget",
                     "body-digest")
CHECKS_WITH_PRE = ("pre-digest", "untouched-coordinates", "noise-stream")

_REL_TOL = 1e-12  # float recomputation tolerance for budget arithmetic


class CertificateFormatError(ValueError):
    """The document is not a well-formed certificate (distinct from FAIL)."""


@dataclass(frozen=True)
class CheckResult:
    name: str
    status: str  # PASS | FAIL | SKIP
    detail: str = ""


@dataclass
class VerdictReport:
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.status != "FAIL" for c in self.checks)

    @property
    def verdict(self) -> str:
        return "PASS" if self.passed else "FAIL"

    def failed_names(self) -> list[str]:
        return [c.name for c in self.checks if c.status == "FAIL"]

    def lines(self) -> list[str]:
        out = [f"CHECK {c.name} {c.status}" + (f" {c.detail}" if c.detail else "")
               for c in self.checks]
        out.append(f"VERDICT {self.verdict}")
        return out


def canonical_body_bytes(cert: dict) -> bytes:
    body = {k: v for k, v in cert.items() if k != "issued_at"}
    body["body_sha256"] = ""
    return json.dumps(body, sort_keys=True, separators=(",", ":")).encode()


def _seed_commitment(seed: int, salt: bytes) -> str:
    return hashlib.sha256(str(seed).encode() + b"|" + salt).hexdigest()


def issue(plan: SurgeryPlan, pre_store: ParameterStore, post_store: ParameterStore,
          ledger: privacy.ZcdpLedger, test_suite_spec: list[dict],
          commit_seed: bool = False, commitment_salt: bytes = b"") -> dict:
    """Build the certificate for one surgery event.

    Re-applies the plan to the pre-surgery store and refuses to certify when the
    claimed post-surgery digest does not match the recomputation.
    """
    recomputed = digest(apply_surgery(pre_store, plan))
    post_digest = digest(post_store)
    if recomputed != post_digest:
        raise ValueError("digest mismatch: post store is not apply_surgery(pre store, plan)")
    expected_sigma = privacy.calibrate_sigma(plan.sensitivity, plan.epsilon, plan.delta)
    if not math.isclose(plan.sigma, expected_sigma, rel_tol=_REL_TOL, abs_tol=0.0):
        raise ValueError("plan sigma is not the calibrated value for (Delta, eps, delta)")

    plan_dict = plan.to_json_dict()
    annotations = []
    if plan.mode == "zero":
        annotations.append("deterministic mode — additive-noise guarantee inapplicable")
    cert: dict = {
        "schema_version": SCHEMA_VERSION,
        "deleted_modality": plan.modality.value,
        "mode": plan.mode,
        "sigma": plan.sigma,
        "epsilon_mod": plan.epsilon,
        "delta_mod": plan.delta,
        "sensitivity": plan.sensitivity,
        "plan": plan_dict,
        "ledger": ledger.snapshot(plan.delta),
        "pre_surgery_digest": digest(pre_store),
        "post_surgery_digest": post_digest,
        "test_suite_spec": test_suite_spec,
        "annotations": annotations,
    }
    if commit_seed:
        cert["seed_commitment"] = _seed_commitment(plan.seed, commitment_salt)
        cert["plan"] = dict(plan_dict, seed=None)
        cert["annotations"] = annotations + ["noise seed withheld: commitment only"]
    else:
        cert["noise_seed"] = plan.seed
    cert["body_sha256"] = hashlib.sha256(canonical_body_bytes(cert)).hexdigest()
    cert["issued_at"] = time.time()
    return cert


def save_certificate(cert: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cert, sort_keys=True, indent=2) + "\n")


def load_certificate(path: str | Path) -> dict:
    try:
        cert = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise CertificateFormatError(f"not valid JSON: {err}") from err
    validate_shape(cert)
    return cert


_REQUIRED_FIELDS = ("schema_version", "deleted_modality", "mode", "sigma", "epsilon_mod",
                    "delta_mod", "sensitivity", "plan", "ledger", "pre_surgery_digest",
                    "post_surgery_digest", "test_suite_spec", "body_sha256")


def validate_shape(cert: dict) -> None:
    if not isinstance(cert, dict):
        raise CertificateFormatError("certificate must be a JSON object")
    missing = [f for f in _REQUIRED_FIELDS if f not in cert]
    if missing:
        raise CertificateFormatError(f"missing fields: {missing}")
    for key in ("pre_surgery_digest", "post_surgery_digest"):
        value = cert[key]
        if not (isinstance(value, str) and len(value) == 64
                and all(c in "0123456789abcdef" for c in value)):
            raise CertificateFormatError(f"{key} must be 64 lowercase hex chars")
    if cert["mode"] not in ("zero", "noise"):
        raise CertificateFormatError(f"unknown mode {cert['mode']!r}")
    if "noise_seed" not in cert and "seed_commitment" not in cert:
        raise CertificateFormatError("certificate carries neither a seed nor a commitment")


def _isclose(a: float, b: float) -> bool:
    return math.isclose(a, b, rel_tol=_REL_TOL, abs_tol=1e-300)


def verify(cert: dict, post_store: ParameterStore,
           pre_store: ParameterStore | None = None) -> VerdictReport:
    """Run every applicable check; PASS only if none fail."""
    validate_shape(cert)
    checks: list[CheckResult] = []

    # (self-integrity) any single-field edit breaks this digest
    expected_body = hashlib.sha256(canonical_body_bytes(cert)).hexdigest()
    checks.append(_result("body-digest", cert["body_sha256"] == expected_body,
                          "canonical body was altered"))

    # (a) released parameters match
    checks.append(_result("post-digest", digest(post_store) == cert["post_surgery_digest"],
                          "post-surgery store digest mismatch"))

    plan_dict = cert["plan"]
    indices = [(str(name), int(off)) for name, off in plan_dict["indices"]]

    # (b) zero mode: listed coordinates read exactly 0.0
    if cert["mode"] == "zero":
        bad = _nonzero_listed(post_store, indices)
        checks.append(_result("zero-coordinates", not bad,
                              f"listed coordinates not zero: {bad[:3]}"))
    else:
        checks.append(CheckResult("zero-coordinates", "SKIP", "noise mode"))

    # (c) budget arithmetic recomputes
    ok, detail = _budget_arithmetic(cert)
    checks.append(_result("budget-arithmetic", ok, detail))

    # (d) index count within the recorded budget
    budget = int(math.floor(plan_dict["budget_fraction"] * plan_dict["total_params"]))
    checks.append(_result("index-budget", len(indices) <= budget,
                          f"{len(indices)} indices exceed budget {budget}"))

    if pre_store is None:
        checks.extend(CheckResult(name, "SKIP", "pre-surgery store not provided")
                      for name in CHECKS_WITH_PRE)
        return VerdictReport(checks)

    # (e) pre-surgery digest matches
    checks.append(_result("pre-digest", digest(pre_store) == cert["pre_surgery_digest"],
                          "pre-surgery store digest mismatch"))

    # (f) untouched coordinates bit-equal
    ok, detail = _untouched_equal(pre_store, post_store, indices)
    checks.append(_result("untouched-coordinates", ok, detail))

    # (g) noise mode: the difference reproduces the seeded stream
    if cert["mode"] == "noise":
        if cert.get("noise_seed") is None:
            checks.append(CheckResult("noise-stream", "SKIP", "seed committed, not disclosed"))
        else:
            ok, detail = _noise_stream_matches(cert, pre_store, post_store, indices)
            checks.append(_result("noise-stream", ok, detail))
    else:
        checks.append(CheckResult("noise-stream", "SKIP", "zero mode"))
    return VerdictReport(checks)


def _result(name: str, ok: bool, fail_detail: str) -> CheckResult:
    return CheckResult(name, "PASS" if ok else "FAIL", "" if ok else fail_detail)


def _nonzero_listed(store: ParameterStore, indices: list[tuple[str, int]]) -> list[tuple[str, int]]:
    bad = []
    for name, off in indices:
        try:
            value = store.values(name).reshape(-1)[off]
        except Exception:
            bad.append((name, off))
            continue
        if value != 0.0:
            bad.append((name, off))
    return bad


def _budget_arithmetic(cert: dict) -> tuple[bool, str]:
    try:
        expected_sigma = privacy.calibrate_sigma(cert["sensitivity"], cert["epsilon_mod"],
                                                 cert["delta_mod"])
    except ValueError as err:
        return False, f"sigma not recomputable: {err}"
    if not _isclose(cert["sigma"], expected_sigma):
        return False, f"sigma {cert['sigma']} != calibrated {expected_sigma}"
    plan = cert["plan"]
    for key in ("sigma", "epsilon", "delta", "sensitivity"):
        top = {"sigma": "sigma", "epsilon": "epsilon_mod", "delta": "delta_mod",
               "sensitivity": "sensitivity"}[key]
        if not _isclose(float(plan[key]), float(cert[top])):
            return False, f"plan.{key} disagrees with certificate {top}"
    ledger = cert["ledger"]
    total = sum(float(e["rho"]) for e in ledger["events"])
    if not _isclose(total, float(ledger["cumulative_rho"])):
        return False, "ledger rho values do not sum to the recorded cumulative rho"
    if ledger["events"]:
        expected_eps = privacy.to_eps_delta(float(ledger["cumulative_rho"]),
                                            float(ledger["conversion_delta"]))
        if not _isclose(expected_eps, float(ledger["converted_epsilon"])):
            return False, "ledger (rho, delta) -> epsilon conversion mismatch"
    return True, ""


def _untouched_equal(pre: ParameterStore, post: ParameterStore,
                     indices: list[tuple[str, int]]) -> tuple[bool, str]:
    if [e.name for e in pre] != [e.name for e in post]:
        return False, "entry layout differs between stores"
    touched: dict[str, set[int]] = {}
    for name, off in indices:
        touched.setdefault(name, set()).add(off)
    for entry in pre:
        a = entry.values.reshape(-1)
        b = post.values(entry.name).reshape(-1)
        if a.shape != b.shape:
            return False, f"entry {entry.name!r} changed shape"
        diff = np.flatnonzero(a.view(np.uint64) != b.view(np.uint64))
        extra = set(diff.tolist()) - touched.get(entry.name, set())
        if extra:
            return False, f"unlisted coordinate changed: ({entry.name!r}, {sorted(extra)[:3]})"
    return True, ""


def _noise_stream_matches(cert: dict, pre: ParameterStore, post: ParameterStore,
                          indices: list[tuple[str, int]]) -> tuple[bool, str]:
    plan = SurgeryPlan.from_json_dict(dict(cert["plan"], seed=cert["noise_seed"]))
    stream = noise_stream(plan)
    for (name, off), draw in zip(indices, stream):
        before = pre.values(name).reshape(-1)[off]
        after = post.values(name).reshape(-1)[off]
        if after != before + draw:
            return False, f"({name!r}, {off}) does not carry its seeded draw"
    return True, ""
