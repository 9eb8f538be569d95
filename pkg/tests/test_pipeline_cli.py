from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from modsurgery import pipeline
from modsurgery.cli import main
from modsurgery.data import SynthSpec
from modsurgery.network import LossWeights, NetworkConfig
from modsurgery.params import digest, load_store
from modsurgery.training import TrainConfig


def fast_config(outdir: str, **overrides) -> pipeline.PipelineConfig:
    base = dict(
        network=NetworkConfig(d_l=8, d_a=5, d_v=6, d_p=3, de_hidden=4, gen_hidden=6,
                              bt_hidden=4, fuse_hidden=6, head_hidden=4, fused_dim=5),
        synth=SynthSpec(num_samples=640, latent_dim=3, seed=7, feature_scale=0.8,
                        private_noise=0.06, label_noise=0.25, missing_rate=0.25),
        train=TrainConfig(epochs=6, batch_size=64, lr=2e-3, seed=1, average_tail=0.3,
                          weights=LossWeights(alpha=2.2, beta=0.005, gamma=0.05, tau=0.2)),
        split_train=320, split_calib=192, split_test=128, split_seed=13,
        calib_batch_size=192, eta_s=0.0, eta_l=1.0,
        output_dir=outdir,
    )
    base.update(overrides)
    return pipeline.PipelineConfig(**base)


@pytest.fixture(scope="module")
def ran(tmp_path_factory):
    outdir = tmp_path_factory.mktemp("run")
    config = fast_config(str(outdir))
    pipeline.stage_synth(config, outdir)
    pipeline.stage_train(config, outdir)
    artifacts = pipeline.stage_surgery(config, outdir)
    return config, outdir, artifacts


def test_profiles_resolve():
    desk = pipeline.profile("desk")
    paper = pipeline.profile("paper-dims")
    assert desk.network.d_l == 32
    assert (paper.network.d_l, paper.network.d_a, paper.network.d_v) == (768, 74, 512)
    assert paper.network.d_p == 128
    with pytest.raises(ValueError):
        pipeline.profile("nope")


def test_config_round_trip(tmp_path):
    config = fast_config(str(tmp_path))
    path = tmp_path / "config.json"
    config.save(path)
    back = pipeline.PipelineConfig.load(path)
    assert back.to_dict() == config.to_dict()


def test_config_requires_seeds(tmp_path):
    config = fast_config(str(tmp_path))
    d = config.to_dict()
    del d["seeds"]["noise"]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(d))
    with pytest.raises(ValueError, match="mandatory"):
        pipeline.PipelineConfig.load(path)


def test_pipeline_artifacts_exist(ran):
    _, outdir, artifacts = ran
    p = pipeline.paths(outdir)
    for key in ("dataset", "model", "loss_log", "plan", "post", "ledger", "certificate"):
        assert p[key].exists(), key
    assert (Path(str(p["dataset"]) + ".sha256")).exists()
    assert artifacts.plan.mode == "zero"  # epsilon 0.5 <= 1


def test_surgery_plan_respects_budget(ran):
    config, outdir, artifacts = ran
    store = load_store(pipeline.paths(outdir)["model"])
    k = int(np.floor(config.budget_fraction * store.total_size))
    assert len(artifacts.plan.indices) <= k


def test_certificate_verifies_via_cli(ran):
    _, outdir, _ = ran
    p = pipeline.paths(outdir)
    code = main(["verify", str(p["certificate"]), str(p["post"]),
                 "--pre-store", str(p["model"])])
    assert code == 0


def test_cli_verify_fails_on_tampered_store(ran, tmp_path, capsys):
    _, outdir, _ = ran
    p = pipeline.paths(outdir)
    post = load_store(p["post"])
    tampered = post.apply_updates([(post.index_of(0), 42.0)])
    from modsurgery.params import save_store

    bad = tmp_path / "tampered.mbdp"
    save_store(tampered, bad)
    code = main(["verify", str(p["certificate"]), str(bad)])
    assert code == 1
    out = capsys.readouterr().out
    assert "CHECK post-digest FAIL" in out


def test_cli_usage_errors_exit_2(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "missing.json")]) == 2
    assert "usage error:" in capsys.readouterr().err
    # malformed config
    bad = tmp_path / "bad.json"
    bad.write_text("{]")
    assert main(["train", "--config", str(bad)]) == 2
    # missing inputs for train
    cfg = tmp_path / "ok.json"
    fast_config(str(tmp_path / "empty")).save(cfg)
    assert main(["train", "--config", str(cfg)]) == 2


def test_cli_full_pipeline_and_replay_determinism(tmp_path):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    cfg_path = tmp_path / "config.json"
    fast_config(str(out_a)).save(cfg_path)

    for args in (["synth"], ["train"], ["surgery"]):
        assert main(args + ["--config", str(cfg_path)]) == 0
    # replay into a different directory
    for args in (["synth"], ["train"], ["surgery"]):
        assert main(args + ["--config", str(cfg_path), "--out", str(out_b)]) == 0

    pa, pb = pipeline.paths(out_a), pipeline.paths(out_b)
    for key in ("dataset", "model", "post"):
        assert pa[key].read_bytes() == pb[key].read_bytes(), key
    assert pa["loss_log"].read_bytes() == pb["loss_log"].read_bytes()
    # certificates agree on the canonical body (timestamp excluded)
    from modsurgery.certificate import canonical_body_bytes, load_certificate

    cert_a = load_certificate(pa["certificate"])
    cert_b = load_certificate(pb["certificate"])
    assert canonical_body_bytes(cert_a) == canonical_body_bytes(cert_b)


def test_diagnose_runs_certificate_spec(ran, capsys):
    config, outdir, _ = ran
    cfg_path = Path(outdir) / "diag_config.json"
    config.save(cfg_path)
    code = main(["diagnose", "--config", str(cfg_path)])
    out = capsys.readouterr().out
    assert "CHECK candidate-budget" in out
    assert (pipeline.paths(outdir)["diagnostics"]).exists()
    payload = json.loads(pipeline.paths(outdir)["diagnostics"].read_text())
    assert "checks" in payload and "details" in payload
    assert code in (0, 1)  # plumbing scale makes no quality promise


def test_sweep_writes_csv_and_continues_on_error(ran):
    config, outdir, _ = ran
    cfg_path = Path(outdir) / "sweep_config.json"
    config.save(cfg_path)
    code = main(["sweep", "--config", str(cfg_path), "--axis", "epsilon",
                 "--values", "0.5,2.0"])
    assert code == 0
    csv_path = Path(outdir) / "sweep_epsilon.csv"
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0].startswith("axis,value,")
    assert len(lines) == 3
    # oversized calib request is recorded per-row, sweep continues
    code = main(["sweep", "--config", str(cfg_path), "--axis", "calib_size",
                 "--values", "64,999999"])
    assert code == 0
    rows = (Path(outdir) / "sweep_calib_size.csv").read_text().strip().splitlines()
    assert "ValueError" in rows[2]


def test_single_value_sweep_matches_direct_run(ran):
    config, outdir, artifacts = ran
    rows = pipeline.run_sweep(config, outdir, "epsilon", [config.epsilon])
    assert rows[0]["error"] == ""
    assert rows[0]["n_selected"] == len(artifacts.plan.indices)
    assert rows[0]["sigma"] == pytest.approx(artifacts.plan.sigma, rel=1e-12)


def test_report_regenerates_csvs(ran, capsys):
    config, outdir, _ = ran
    cfg_path = Path(outdir) / "report_config.json"
    config.save(cfg_path)
    main(["sweep", "--config", str(cfg_path), "--axis", "epsilon", "--values", "0.5,2.0"])
    code = main(["report", "--config", str(cfg_path)])
    assert code == 0
    p = pipeline.paths(outdir)
    assert p["loss_curves"].exists()
    assert p["tradeoff"].exists()
    summary = json.loads(p["report_summary"].read_text())
    assert "certificate" in summary


def test_train_reference_stage(ran):
    config, outdir, _ = ran
    path = pipeline.stage_train_reference(config, outdir)
    assert path.exists()
    ref = load_store(path)
    model = load_store(pipeline.paths(outdir)["model"])
    assert digest(ref) != digest(model)
