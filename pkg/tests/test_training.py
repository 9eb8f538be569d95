from __future__ import annotations

import numpy as np
import pytest

from modsurgery.data import (
    Dataset,
    SynthSpec,
    fully_observed,
    load_dataset,
    save_dataset,
    split_dataset,
    synth_dataset,
    validate_batch_dims,
)
from modsurgery.network import Backbone, LossWeights, tiny_config
from modsurgery.params import MODALITIES, Modality, digest
from modsurgery.training import (
    LOSS_LOG_COLUMNS,
    MultimodalNet,
    TrainConfig,
    smoothed_total,
    train,
    train_reference_without,
    write_loss_log,
)

CONFIG = tiny_config()


def small_spec(**overrides) -> SynthSpec:
    base = dict(num_samples=120, latent_dim=3, seed=5, feature_scale=1.0,
                private_noise=0.1, missing_rate=0.2)
    base.update(overrides)
    return SynthSpec(**base)


def test_synth_no_missing_when_rate_zero():
    ds = synth_dataset(small_spec(missing_rate=0.0), CONFIG)
    for m in MODALITIES:
        assert ds.present[m].all()


def test_synth_fixed_pattern_zero_pads_absent():
    ds = synth_dataset(small_spec(missing_rate=0.0, fixed_pattern=("L",)), CONFIG)
    batch = ds.batch()
    assert batch.present[Modality.L].all()
    for m in (Modality.A, Modality.V):
        assert not batch.present[m].any()
        assert np.all(batch.x[m] == 0.0)


def test_synth_deterministic_given_seed():
    a = synth_dataset(small_spec(), CONFIG)
    b = synth_dataset(small_spec(), CONFIG)
    for m in MODALITIES:
        assert np.array_equal(a.true_x[m], b.true_x[m])
        assert np.array_equal(a.present[m], b.present[m])
    assert np.array_equal(a.y, b.y)


def test_synth_every_sample_observes_something():
    ds = synth_dataset(small_spec(missing_rate=0.6, num_samples=300), CONFIG)
    observed = sum(ds.present[m].astype(int) for m in MODALITIES)
    assert observed.min() >= 1


def test_synth_rejects_bad_spec():
    with pytest.raises(ValueError):
        SynthSpec(missing_rate=1.0)
    with pytest.raises(ValueError):
        SynthSpec(fixed_pattern=())
    with pytest.raises(ValueError):
        SynthSpec(fixed_pattern=("X",))


def test_dataset_round_trip(tmp_path):
    ds = synth_dataset(small_spec(), CONFIG)
    path = tmp_path / "data.mbds"
    save_dataset(ds, path)
    back = load_dataset(path)
    for m in MODALITIES:
        assert np.array_equal(back.true_x[m], ds.true_x[m])
        assert np.array_equal(back.present[m], ds.present[m])
    assert np.array_equal(back.y, ds.y)


def test_split_disjoint_and_sized():
    ds = synth_dataset(small_spec(), CONFIG)
    tr, cal, te = split_dataset(ds, 60, 30, 30, seed=2)
    assert (tr.size, cal.size, te.size) == (60, 30, 30)
    with pytest.raises(ValueError):
        split_dataset(ds, 100, 30, 30, seed=2)


def test_validate_batch_dims_rejects_mismatch():
    ds = synth_dataset(small_spec(), CONFIG)
    batch = ds.batch()
    batch.x[Modality.A] = batch.x[Modality.A][:, :2]
    with pytest.raises(ValueError):
        validate_batch_dims(batch, CONFIG)


def _train_config(**overrides) -> TrainConfig:
    base = dict(epochs=3, batch_size=16, lr=1e-2, seed=1,
                weights=LossWeights(alpha=1.0, beta=0.005, gamma=0.05, tau=0.2))
    base.update(overrides)
    return TrainConfig(**base)


def test_zero_learning_rate_keeps_init(tiny_dataset):
    store, _ = train(tiny_dataset, CONFIG, _train_config(lr=0.0, prop_lr=0.0), init_seed=3)
    from modsurgery.network import init_params

    assert digest(store) == digest(init_params(CONFIG, 3))


@pytest.fixture(scope="module")
def tiny_dataset() -> Dataset:
    return synth_dataset(small_spec(), CONFIG)


def test_training_reduces_loss_and_beats_zero_fill():
    spec = small_spec(num_samples=700, missing_rate=0.0)
    ds = synth_dataset(spec, CONFIG)
    tr, _, te = split_dataset(ds, 500, 100, 100, seed=4)
    store, log = train(tr, CONFIG, _train_config(epochs=50), init_seed=3)
    assert log[-1].total < log[0].total
    # reconstruction of A from {L, V} beats predicting the zero vector
    net = Backbone(CONFIG)
    test_batch = te.batch()
    recon = net.reconstruction_loss(net.leaves(store), Modality.A, test_batch).item()
    zero_fill = float(np.mean(np.sum(test_batch.x[Modality.A] ** 2, axis=1)))
    assert recon < zero_fill
    # smoothed total decreases end vs start
    smooth = smoothed_total(log)
    assert smooth[-1] < smooth[0]


def test_training_deterministic_given_seeds(tiny_dataset):
    a, _ = train(tiny_dataset, CONFIG, _train_config(), init_seed=3)
    b, _ = train(tiny_dataset, CONFIG, _train_config(), init_seed=3)
    assert digest(a) == digest(b)
    c, _ = train(tiny_dataset, CONFIG, _train_config(seed=2), init_seed=3)
    assert digest(c) != digest(a)


def test_reference_without_equals_train_on_masked_copy(tiny_dataset):
    ref, _ = train_reference_without(Modality.A, tiny_dataset, CONFIG,
                                     _train_config(), init_seed=3)
    direct, _ = train(tiny_dataset.mask_out(Modality.A), CONFIG, _train_config(), init_seed=3)
    assert digest(ref) == digest(direct)


def test_loss_log_csv_columns(tiny_dataset, tmp_path):
    _, log = train(tiny_dataset, CONFIG, _train_config(epochs=2), init_seed=3)
    path = tmp_path / "loss.csv"
    write_loss_log(log, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == ",".join(LOSS_LOG_COLUMNS)
    assert len(lines) == len(log) + 1


def test_estimator_fit_predict_and_params(tiny_dataset):
    est = MultimodalNet(net_config=CONFIG, train_config=_train_config(), init_seed=3)
    got = est.get_params()
    assert got["init_seed"] == 3
    est.fit(tiny_dataset)
    preds = est.predict(tiny_dataset)
    assert preds.shape == (tiny_dataset.size,)
    clone_params = MultimodalNet(**got)
    assert clone_params.get_params()["net_config"] == CONFIG
    with pytest.raises(RuntimeError):
        MultimodalNet(net_config=CONFIG).predict(tiny_dataset)


def test_fully_observed_helper(tiny_dataset):
    full = fully_observed(tiny_dataset)
    for m in MODALITIES:
        assert full.present[m].all()
    assert np.array_equal(full.y, tiny_dataset.y)
