"""End-to-end orchestration shared by the CLI and the acceptance suite.

A pipeline config is one JSON document with a section per module. All random
behavior flows from the explicit seeds; replaying a config reproduces every
artifact digest (timestamps live outside canonical bodies).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import certificate as certmod
from . import diagnostics as diag
from . import privacy
from .data import Dataset, SynthSpec, load_dataset, save_dataset, split_dataset, synth_dataset
from .network import Backbone, LossWeights, NetworkConfig
from .params import Modality, ParameterStore, digest, load_store, save_store
from .surgery import (
    SurgeryPlan,
    apply_surgery,
    build_plan,
    collect_activation_stats,
    compute_proxy,
    compute_saliency,
    decide_mode,
    select_candidates,
)
from .training import TrainConfig, train, train_reference_without, write_loss_log

PROFILES = ("desk", "paper-dims")


@dataclass
class PipelineConfig:
    network: NetworkConfig
    synth: SynthSpec
    train: TrainConfig
    split_train: int
    split_calib: int
    split_test: int
    split_seed: int
    target_modality: str = "A"
    eta_s: float = 0.1
    eta_l: float = 0.05
    budget_fraction: float = 0.03
    chi_max: float = 0.99
    calib_batch_size: int = 5000
    oracle_candidate_cap: int = 2000
    epsilon: float = 0.5
    delta: float = 1e-5
    mode_override: str | None = None
    sensitivity_method: str = "selected-weight-norm"
    data_seed: int = 7
    init_seed: int = 101
    noise_seed: int = 2023
    output_dir: str = "out"

    def __post_init__(self) -> None:
        for name in ("data_seed", "init_seed", "noise_seed", "split_seed"):
            if getattr(self, name) is None:
                raise ValueError(f"seed {name!r} is mandatory; no entropy fallback")
        if self.split_train + self.split_calib + self.split_test > self.synth.num_samples:
            raise ValueError("split sizes exceed the synthetic corpus size")
        if self.calib_batch_size > self.split_calib:
            raise ValueError("calibration batch cannot exceed the calibration split")
        Modality.parse(self.target_modality)

    def to_dict(self) -> dict:
        return {
            "network": self.network.to_dict(),
            "synth": self.synth.to_dict(),
            "train": self.train.to_dict(),
            "split": {"train": self.split_train, "calib": self.split_calib,
                      "test": self.split_test, "seed": self.split_seed},
            "surgery": {"target_modality": self.target_modality, "eta_s": self.eta_s,
                        "eta_l": self.eta_l, "budget_fraction": self.budget_fraction,
                        "chi_max": self.chi_max, "calib_batch_size": self.calib_batch_size,
                        "oracle_candidate_cap": self.oracle_candidate_cap,
                        "mode_override": self.mode_override},
            "privacy": {"epsilon": self.epsilon, "delta": self.delta,
                        "sensitivity_method": self.sensitivity_method},
            "seeds": {"data": self.data_seed, "init": self.init_seed,
                      "noise": self.noise_seed},
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        split = d["split"]
        surgery = d.get("surgery", {})
        priv = d.get("privacy", {})
        seeds = d["seeds"]
        for key in ("data", "init", "noise"):
            if key not in seeds:
                raise ValueError(f"seeds.{key} is mandatory; no entropy fallback")
        synth = SynthSpec.from_dict(dict(d["synth"], seed=seeds["data"]))
        return cls(
            network=NetworkConfig.from_dict(d["network"]),
            synth=synth,
            train=TrainConfig.from_dict(d["train"]),
            split_train=split["train"], split_calib=split["calib"],
            split_test=split["test"], split_seed=split["seed"],
            target_modality=surgery.get("target_modality", "A"),
            eta_s=surgery.get("eta_s", 0.1), eta_l=surgery.get("eta_l", 0.05),
            budget_fraction=surgery.get("budget_fraction", 0.03),
            chi_max=surgery.get("chi_max", 0.99),
            calib_batch_size=surgery.get("calib_batch_size", 5000),
            oracle_candidate_cap=surgery.get("oracle_candidate_cap", 2000),
            mode_override=surgery.get("mode_override"),
            epsilon=priv.get("epsilon", 0.5), delta=priv.get("delta", 1e-5),
            sensitivity_method=priv.get("sensitivity_method", "selected-weight-norm"),
            data_seed=seeds["data"], init_seed=seeds["init"], noise_seed=seeds["noise"],
            output_dir=d.get("output_dir", "out"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def desk_profile(**overrides) -> PipelineConfig:
    """Standard synthetic config: full pipeline in minutes on one core."""
    base = dict(
        network=NetworkConfig(),
        synth=SynthSpec(num_samples=7816, missing_rate=0.25, seed=7,
                        feature_scale=1.05, private_noise=0.081),
        train=TrainConfig(),
        split_train=1792, split_calib=5000, split_test=1024, split_seed=13,
    )
    base.update(overrides)
    return PipelineConfig(**base)


def paper_dims_profile(**overrides) -> PipelineConfig:
    """Published feature dimensions; heavy, config-surface only."""
    base = dict(
        network=NetworkConfig(d_l=768, d_a=74, d_v=512, d_p=128, de_hidden=64,
                              gen_hidden=64, bt_hidden=64, fuse_hidden=128,
                              head_hidden=64, fused_dim=64),
        synth=SynthSpec(num_samples=7816, missing_rate=0.25, seed=7,
                        feature_scale=1.05, private_noise=0.081),
        train=TrainConfig(),
        split_train=1792, split_calib=5000, split_test=1024, split_seed=13,
    )
    base.update(overrides)
    return PipelineConfig(**base)


def profile(name: str, **overrides) -> PipelineConfig:
    if name == "desk":
        return desk_profile(**overrides)
    if name == "paper-dims":
        return paper_dims_profile(**overrides)
    raise ValueError(f"unknown profile {name!r}; expected one of {PROFILES}")


# -- artifact paths -----------------------------------------------------------

def paths(outdir: str | Path) -> dict[str, Path]:
    out = Path(outdir)
    return {
        "config": out / "config.json",
        "dataset": out / "data.mbds",
        "model": out / "model.mbdp",
        "loss_log": out / "loss_log.csv",
        "reference": out / "reference.mbdp",
        "reference_log": out / "reference_loss_log.csv",
        "plan": out / "plan.json",
        "post": out / "post.mbdp",
        "ledger": out / "ledger.json",
        "certificate": out / "deletion.mdc.json",
        "diagnostics": out / "diagnostics.json",
        "oracle_csv": out / "oracle.csv",
        "loss_curves": out / "report_loss_curves.csv",
        "tradeoff": out / "report_tradeoff.csv",
        "report_summary": out / "report_summary.json",
    }


@dataclass
class SplitData:
    train: Dataset
    calib: Dataset
    test: Dataset


def make_splits(config: PipelineConfig, dataset: Dataset) -> SplitData:
    train_set, calib_set, test_set = split_dataset(
        dataset, config.split_train, config.split_calib, config.split_test,
        config.split_seed)
    return SplitData(train=train_set, calib=calib_set, test=test_set)


def stage_synth(config: PipelineConfig, outdir: str | Path) -> Path:
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(paths(out)["config"])
    dataset = synth_dataset(config.synth, config.network)
    save_dataset(dataset, paths(out)["dataset"])
    return paths(out)["dataset"]


def load_splits(config: PipelineConfig, outdir: str | Path) -> SplitData:
    dataset = load_dataset(paths(outdir)["dataset"])
    return make_splits(config, dataset)


def stage_train(config: PipelineConfig, outdir: str | Path) -> Path:
    p = paths(outdir)
    splits = load_splits(config, outdir)
    store, log = train(splits.train, config.network, config.train, config.init_seed)
    save_store(store, p["model"])
    write_loss_log(log, p["loss_log"])
    return p["model"]

def stage_train_reference(config: PipelineConfig, outdir: str | Path) -> Path:
    p = paths(outdir)
    splits = load_splits(config, outdir)
    store, log = train_reference_without(
        Modality.parse(config.target_modality), splits.train, config.network,
        config.train, config.init_seed)
    save_store(store, p["reference"])
    write_loss_log(log, p["reference_log"])
    return p["reference"]


def default_test_suite_spec(config: PipelineConfig) -> list[dict]:
    return [
        {"name": "candidate-budget", "budget_fraction": config.budget_fraction},
        {"name": "recon-delta", "modality": config.target_modality,
         "direction": "increase"},
        {"name": "probe-leakage", "modality": config.target_modality,
         "direction": "decrease", "probe_seed": 99},
        {"name": "task-damage", "max_relative_increase": 0.20},
        {"name": "proxy-oracle", "min_spearman": 0.75, "max_over_delete": 0.05,
         "gamma": 0.1},
        {"name": "privacy-tail", "trials": 100000},
    ]


@dataclass
class SurgeryArtifacts:
    plan: SurgeryPlan
    pre_store: ParameterStore
    post_store: ParameterStore
    cert: dict
    ledger: privacy.ZcdpLedger
    empty_selection: bool


def run_surgery(config: PipelineConfig, store: ParameterStore, splits: SplitData,
                ledger: privacy.ZcdpLedger | None = None) -> SurgeryArtifacts:
    net = Backbone(config.network)
    calib = splits.calib.batch().take(np.arange(config.calib_batch_size))
    target = Modality.parse(config.target_modality)
    stats = collect_activation_stats(net, store, calib)
    proxy = compute_proxy(stats, store, config.chi_max)
    saliency = compute_saliency(net, store, calib, target)
    candidates = select_candidates(proxy, saliency, config.eta_s, config.eta_l,
                                   config.budget_fraction, store.total_size)
    mode = decide_mode(config.epsilon, config.mode_override)
    draft = build_plan(store, candidates, target, mode, sigma=0.0,
                       seed=config.noise_seed, epsilon=config.epsilon,
                       delta=config.delta, sensitivity=0.0)
    bound = privacy.bound_sensitivity(draft, store, method=config.sensitivity_method,
                                      net=net, calib=calib)
    sigma = privacy.calibrate_sigma(bound.delta, config.epsilon, config.delta)
    plan = build_plan(store, candidates, target, mode, sigma=sigma,
                      seed=config.noise_seed, epsilon=config.epsilon,
                      delta=config.delta, sensitivity=bound.delta)
    post = apply_surgery(store, plan)
    ledger = ledger if ledger is not None else privacy.ZcdpLedger()
    rho = privacy.gaussian_rho(bound.delta, sigma) if sigma > 0 else 0.0
    ledger.compose(rho, f"delete modality {target.value} "
                        f"(mode={mode}, n={len(plan.indices)})")
    cert = certmod.issue(plan, store, post, ledger, default_test_suite_spec(config))
    return SurgeryArtifacts(plan=plan, pre_store=store, post_store=post, cert=cert,
                            ledger=ledger, empty_selection=len(plan.indices) == 0)


def stage_surgery(config: PipelineConfig, outdir: str | Path) -> SurgeryArtifacts:
    p = paths(outdir)
    splits = load_splits(config, outdir)
    store = load_store(p["model"])
    ledger = privacy.ZcdpLedger.load(p["ledger"]) if p["ledger"].exists() else None
    artifacts = run_surgery(config, store, splits, ledger)
    artifacts.plan.save(p["plan"])
    save_store(artifacts.post_store, p["post"])
    artifacts.ledger.save(p["ledger"])
    certmod.save_certificate(artifacts.cert, p["certificate"])
    return artifacts


def oracle_loss_fn(net: Backbone, batch, weights: LossWeights, block_size: int):
    def fn(store: ParameterStore) -> float:
        return net.block_loss(store, batch, weights, block_size)
    return fn


def run_diagnostics(config: PipelineConfig, outdir: str | Path,
                    tail_trials: int = 100_000) -> dict:
    """Execute the certificate's test-suite spec; returns the summary payload."""
    p = paths(outdir)
    cert = certmod.load_certificate(p["certificate"])
    splits = load_splits(config, outdir)
    pre_store = load_store(p["model"])
    post_store = load_store(p["post"])
    plan = SurgeryPlan.from_json_dict(
        dict(cert["plan"], seed=cert.get("noise_seed", 0) or 0))
    net = Backbone(config.network)
    target = Modality.parse(config.target_modality)
    weights = config.train.weights
    test_batch = splits.test.batch()
    calib = splits.calib.batch().take(np.arange(config.calib_batch_size))

    checks: dict[str, bool] = {}
    details: dict = {}

    selected_flats = sorted(pre_store.flat_of(gi) for gi in plan.indices)

    for spec_entry in cert["test_suite_spec"]:
        name = spec_entry["name"]
        if name == "candidate-budget":
            budget = int(np.floor(spec_entry["budget_fraction"] * pre_store.total_size))
            checks[name] = len(plan.indices) <= budget
            details[name] = {"selected": len(plan.indices), "budget": budget}
        elif name == "recon-delta":
            pre_loss = net.reconstruction_loss(net.leaves(pre_store), target, test_batch)
            post_loss = net.reconstruction_loss(net.leaves(post_store), target, test_batch)
            delta_vs_pre = post_loss.item() - pre_loss.item()
            detail = {"pre": pre_loss.item(), "post": post_loss.item(),
                      "delta_vs_pre": delta_vs_pre,
                      "full_scale_reference_ceiling": diag.REFERENCE_FULL_SCALE["recon_delta_ceiling"]}
            if p["reference"].exists():
                reference = load_store(p["reference"])
                detail["delta_vs_reference"] = diag.recon_delta_check(
                    net, post_store, reference, test_batch, target)
            checks[name] = delta_vs_pre > 0
            details[name] = detail
        elif name == "probe-leakage":
            result = _probe(config, net, pre_store, post_store, splits,
                            seed=spec_entry.get("probe_seed", 99))
            checks[name] = result.accuracy_post < result.accuracy_pre
            details[name] = {"pre": result.accuracy_pre, "post": result.accuracy_post,
                             "chance": result.chance}
        elif name == "task-damage":
            pre_task = net.total_loss(pre_store, test_batch, weights)[1].task
            post_task = net.total_loss(post_store, test_batch, weights)[1].task
            rel = (post_task - pre_task) / pre_task if pre_task > 0 else 0.0
            checks[name] = rel <= spec_entry["max_relative_increase"]
            details[name] = {"pre": pre_task, "post": post_task, "relative_increase": rel}
        elif name == "proxy-oracle":
            if not selected_flats:
                checks[name] = True
                details[name] = {"note": "empty selection; nothing to compare"}
                continue
            proxy = compute_proxy(collect_activation_stats(net, pre_store, calib),
                                  pre_store, config.chi_max)
            loss_fn = oracle_loss_fn(net, splits.train.batch(), weights,
                                     config.train.batch_size)
            report = diag.loo_oracle(loss_fn, pre_store, selected_flats,
                                     proxy.values, proxy.chi,
                                     gamma=spec_entry.get("gamma", 0.1))
            ok = (report.spearman_rho >= spec_entry["min_spearman"]
                  and report.over_delete_rate <= spec_entry["max_over_delete"])
            checks[name] = bool(ok)
            details[name] = report.summary()
            details[name]["full_scale_reference"] = {
                "spearman": diag.REFERENCE_FULL_SCALE["spearman"],
                "over_delete": diag.REFERENCE_FULL_SCALE["over_delete_rate_at_0.1"],
                "max_rel_error": diag.REFERENCE_FULL_SCALE["max_rel_error_range"],
            }
            _write_oracle_csv(report, p["oracle_csv"])
        elif name == "privacy-tail":
            budget = privacy.PrivacyBudget(config.epsilon, config.delta)
            sigma = cert["sigma"]
            if cert["sensitivity"] == 0:
                checks[name] = True
                details[name] = {"note": "zero sensitivity; tail identically zero"}
                continue
            report = privacy.plrv_tail_check(cert["sensitivity"], sigma, budget,
                                             trials=spec_entry.get("trials", tail_trials))
            checks[name] = report.passed
            details[name] = {"empirical": report.empirical_tail,
                             "analytic": report.analytic_tail,
                             "threshold": report.budget_threshold}
        else:
            checks[name] = False
            details[name] = {"error": f"unknown check {name!r}"}
    diag.save_summary(checks, details, p["diagnostics"])
    return {"checks": checks, "details": details}


def _probe(config: PipelineConfig, net: Backbone, pre_store: ParameterStore,
           post_store: ParameterStore, splits: SplitData, seed: int) -> diag.ProbeResult:
    target = Modality.parse(config.target_modality)
    others_present = np.zeros(splits.test.size, dtype=bool)
    for m in (m for m in splits.test.present if m is not target):
        others_present |= splits.test.present[m]
    probe_set = splits.test.take(np.flatnonzero(others_present))
    masked = probe_set.mask_out(target).batch()
    labels = diag.probe_labels(probe_set.true_x[target], seed=seed)
    z_pre = net.fused_matrix(pre_store, masked)
    z_post = net.fused_matrix(post_store, masked)
    return diag.probe_attack(z_pre, z_post, labels, seed=seed)


def _write_oracle_csv(report: diag.OracleReport, path: Path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["flat_index", "proxy", "true_increment", "remainder",
                         "relative_error"])
        for i, flat in enumerate(report.candidates):
            writer.writerow([flat, repr(float(report.proxy_values[i])),
                             repr(float(report.true_increments[i])),
                             repr(float(report.remainders[i])),
                             repr(float(report.relative_errors[i]))])


SWEEP_AXES = ("epsilon", "r", "eta_s", "calib_size")


def run_sweep(config: PipelineConfig, outdir: str | Path, axis: str,
              values: list[float]) -> list[dict]:
    """One-factor-at-a-time sweep around the default operating point."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    if not values:
        raise ValueError("sweep needs at least one value")
    p = paths(outdir)
    splits = load_splits(config, outdir)
    store = load_store(p["model"])
    net = Backbone(config.network)
    weights = config.train.weights
    target = Modality.parse(config.target_modality)
    test_batch = splits.test.batch()
    rows = []
    for value in values:
        row: dict = {"axis": axis, "value": value}
        try:
            cfg = _override_axis(config, axis, value)
            artifacts = run_surgery(cfg, store, splits)
            pre, post = artifacts.pre_store, artifacts.post_store
            row["task_loss_pre"] = net.total_loss(pre, test_batch, weights)[1].task
            row["task_loss_post"] = net.total_loss(post, test_batch, weights)[1].task
            row["recon_pre"] = net.reconstruction_loss(net.leaves(pre), target, test_batch).item()
            row["recon_post"] = net.reconstruction_loss(net.leaves(post), target, test_batch).item()
            row["recon_delta"] = row["recon_post"] - row["recon_pre"]
            probe = _probe(cfg, net, pre, post, splits, seed=99)
            row["probe_acc_pre"] = probe.accuracy_pre
            row["probe_acc_post"] = probe.accuracy_post
            row["epsilon_reported"] = artifacts.ledger.epsilon_at(cfg.delta)
            row["sigma"] = artifacts.plan.sigma
            row["n_selected"] = len(artifacts.plan.indices)
            row["error"] = ""
        except Exception as err:  # sweep keeps going, error recorded per row
            row["error"] = f"{type(err).__name__}: {err}"
        rows.append(row)
    return rows


def _override_axis(config: PipelineConfig, axis: str, value: float) -> PipelineConfig:
    import dataclasses

    if axis == "epsilon":
        return dataclasses.replace(config, epsilon=float(value))
    if axis == "r":
        return dataclasses.replace(config, budget_fraction=float(value))
    if axis == "eta_s":
        return dataclasses.replace(config, eta_s=float(value))
    if axis == "calib_size":
        size = int(value)
        if size > config.split_calib:
            raise ValueError(f"calib_size {size} exceeds the calibration split")
        return dataclasses.replace(config, calib_batch_size=size)
    raise AssertionError(axis)


def stage_report(config: PipelineConfig, outdir: str | Path) -> dict:
    """Regenerate figure-backing CSVs from stored artifacts; no recomputation."""
    p = paths(outdir)
    summary: dict = {"artifacts": {}}
    if p["loss_log"].exists():
        p["loss_curves"].write_text(p["loss_log"].read_text())
        summary["artifacts"]["loss_curves"] = str(p["loss_curves"])
    sweep_files = sorted(Path(outdir).glob("sweep_*.csv"))
    tradeoff_rows = []
    for sweep_file in sweep_files:
        lines = sweep_file.read_text().strip().splitlines()
        header = lines[0].split(",")
        for line in lines[1:]:
            record = dict(zip(header, line.split(",")))
            if record.get("axis") == "epsilon" and not record.get("error"):
                tradeoff_rows.append((record["value"], record["task_loss_post"],
                                      record["probe_acc_post"]))
    if tradeoff_rows:
        body = "epsilon,task_loss_post,probe_acc_post\n" + "\n".join(
            ",".join(r) for r in tradeoff_rows) + "\n"
        p["tradeoff"].write_text(body)
        summary["artifacts"]["tradeoff"] = str(p["tradeoff"])
    for key in ("model", "post", "dataset", "certificate", "diagnostics"):
        path = p[key]
        if path.exists():
            summary["artifacts"][key] = str(path)
    if p["certificate"].exists():
        cert = certmod.load_certificate(p["certificate"])
        summary["certificate"] = {"deleted_modality": cert["deleted_modality"],
                                  "mode": cert["mode"],
                                  "post_surgery_digest": cert["post_surgery_digest"]}
    if p["diagnostics"].exists():
        summary["diagnostics"] = json.loads(p["diagnostics"].read_text())["checks"]
    p["report_summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
