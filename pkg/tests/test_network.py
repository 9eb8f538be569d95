from __future__ import annotations

import numpy as np
import pytest

from modsurgery.autodiff import Tensor
from modsurgery.network import (
    Backbone,
    Batch,
    LossWeights,
    NetworkConfig,
    NumericError,
    init_params,
    nce_loss,
    tiny_config,
)
from modsurgery.params import MODALITIES, Modality, ParameterStore, TensorEntry


def make_batch(config: NetworkConfig, n: int, seed: int, present=None) -> Batch:
    rng = np.random.default_rng(seed)
    if present is None:
        present = {m: np.ones(n, dtype=bool) for m in MODALITIES}
    x = {}
    for m in MODALITIES:
        feats = rng.normal(size=(n, config.dim(m)))
        feats[~present[m]] = 0.0
        x[m] = feats
    y = rng.normal(size=n)
    if config.task == "classification":
        y = rng.integers(0, config.n_classes, size=n).astype(np.float64)
    return Batch(x=x, present={m: present[m].copy() for m in MODALITIES}, y=y)


def with_zeroed(store: ParameterStore, prefixes: tuple[str, ...]) -> ParameterStore:
    entries = []
    for e in store:
        if e.name.startswith(prefixes):
            entries.append(TensorEntry(e.name, np.zeros(e.shape), e.role_tags))
        else:
            entries.append(e)
    return ParameterStore(entries)


@pytest.fixture(scope="module")
def tiny():
    config = tiny_config()
    return config, Backbone(config), init_params(config, seed=11)


def test_tiny_config_is_small_enough(tiny):
    _, _, store = tiny
    assert store.total_size <= 2000


def test_decompose_zero_heads_give_zero_output(tiny):
    config, net, store = tiny
    zeroed = with_zeroed(store, ("de.A.spec", "de.A.inv"))
    params = net.leaves(zeroed)
    x = Tensor(np.random.default_rng(0).normal(size=(3, config.d_a)))
    spec, inv = net.decompose(params, Modality.A, x)
    assert np.all(spec.data == 0.0)
    assert np.all(inv.data == 0.0)


def test_decompose_deterministic_and_batch_equivalent(tiny):
    config, net, store = tiny
    params = net.leaves(store)
    x = np.random.default_rng(1).normal(size=(4, config.d_l))
    a1, b1 = net.decompose(params, Modality.L, Tensor(x))
    a2, b2 = net.decompose(params, Modality.L, Tensor(x))
    assert np.array_equal(a1.data, a2.data) and np.array_equal(b1.data, b2.data)
    # batch of N equals N single calls stacked
    singles = [net.decompose(params, Modality.L, Tensor(x[i:i + 1]))[0].data for i in range(4)]
    np.testing.assert_allclose(a1.data, np.vstack(singles), rtol=0, atol=1e-14)


def test_generate_zero_final_layer_gives_zero_and_re_equals_mean_norm(tiny):
    config, net, store = tiny
    zeroed = with_zeroed(store, ("gen.V.out",))
    batch = make_batch(config, 5, seed=2)
    params = net.leaves(zeroed)
    loss = net.reconstruction_loss(params, Modality.V, batch)
    expected = np.mean(np.sum(batch.x[Modality.V] ** 2, axis=1))
    assert loss.item() == pytest.approx(expected, rel=1e-12)


def test_generate_output_dim_contract(tiny):
    config, net, store = tiny
    params = net.leaves(store)
    for present in (
        {Modality.L: True, Modality.A: True, Modality.V: True},
        {Modality.L: True, Modality.A: False, Modality.V: False},
    ):
        masks = {m: np.full(3, present[m]) for m in MODALITIES}
        batch = make_batch(config, 3, seed=3, present=masks)
        xs = {m: Tensor(batch.x[m]) for m in MODALITIES}
        for m in MODALITIES:
            out = net.generate(params, m, xs, 3)
            assert out.shape == (3, config.dim(m))


def test_fuse_is_permutation_sensitive():
    config = NetworkConfig(d_l=4, d_a=4, d_v=4, d_p=3, de_hidden=4, gen_hidden=4,
                           bt_hidden=4, fuse_hidden=4, head_hidden=4, fused_dim=4)
    net = Backbone(config)
    params = net.leaves(init_params(config, seed=4))
    rng = np.random.default_rng(5)
    xs = {m: Tensor(rng.normal(size=(2, 4))) for m in MODALITIES}
    swapped = {Modality.L: xs[Modality.L], Modality.A: xs[Modality.V], Modality.V: xs[Modality.A]}
    z1 = net.fuse(params, xs).data
    z2 = net.fuse(params, swapped).data
    assert not np.allclose(z1, z2)


def test_predict_zero_embedding_zero_bias_head_gives_zero(tiny):
    config, net, store = tiny
    params = net.leaves(store)  # biases are zero-initialized
    z = Tensor(np.zeros((2, config.fused_dim)))
    out = net.predict_from(params, z)
    assert np.all(out.data == 0.0)


def test_one_dimensional_unit_weight_network_matches_hand_value():
    config = NetworkConfig(d_l=1, d_a=1, d_v=1, d_p=1, de_hidden=1, gen_hidden=1,
                           bt_hidden=1, fuse_hidden=1, head_hidden=1, fused_dim=1)
    net = Backbone(config)
    store = init_params(config, seed=0)
    ones = ParameterStore([
        TensorEntry(e.name, np.zeros(e.shape) if e.name.endswith(".b") else np.ones(e.shape),
                    e.role_tags)
        for e in store
    ])
    batch = Batch(
        x={m: np.array([[v]]) for m, v in zip(MODALITIES, (0.3, 0.5, 0.2))},
        present={m: np.ones(1, dtype=bool) for m in MODALITIES},
        y=np.array([0.0]),
    )
    got = net.predict(ones, batch)[0]
    want = np.tanh(np.tanh(0.3 + 0.5 + 0.2))
    assert got == pytest.approx(want, rel=1e-12)


def test_task_loss_zero_when_predictions_equal_labels(tiny):
    config, net, store = tiny
    batch = make_batch(config, 4, seed=6)
    batch.y = net.predict(store, batch)
    _, breakdown = net.total_loss(store, batch, LossWeights())
    assert breakdown.task == pytest.approx(0.0, abs=1e-14)


def test_task_loss_uniform_two_class_softmax_is_ln2():
    config = NetworkConfig(d_l=4, d_a=3, d_v=3, d_p=2, de_hidden=3, gen_hidden=3,
                           bt_hidden=3, fuse_hidden=3, head_hidden=3, fused_dim=3,
                           task="classification", n_classes=2)
    net = Backbone(config)
    store = with_zeroed(init_params(config, seed=7), ("head.out",))
    batch = make_batch(config, 5, seed=8)
    _, breakdown = net.total_loss(store, batch, LossWeights())
    assert breakdown.task == pytest.approx(np.log(2), rel=1e-12)


def test_task_loss_matches_scalar_recomputation(tiny):
    config, net, store = tiny
    batch = make_batch(config, 6, seed=9)
    _, breakdown = net.total_loss(store, batch, LossWeights())
    preds = net.predict(store, batch)
    expected = float(np.mean([(preds[i] - batch.y[i]) ** 2 for i in range(6)]))
    assert breakdown.task == pytest.approx(expected, rel=1e-12)


def test_reconstruction_loss_matches_brute_force(tiny):
    config, net, store = tiny
    batch = make_batch(config, 5, seed=10)
    params = net.leaves(store)
    loss = net.reconstruction_loss(params, Modality.A, batch).item()
    xs = {m: Tensor(batch.x[m]) for m in MODALITIES}
    xhat = net.generate(params, Modality.A, xs, 5).data
    brute = np.mean([np.sum((xhat[i] - batch.x[Modality.A][i]) ** 2) for i in range(5)])
    assert loss == pytest.approx(brute, rel=1e-12)


def test_reconstruction_loss_gated_on_observed_samples(tiny):
    config, net, store = tiny
    present = {
        Modality.L: np.array([True, True, True, True]),
        Modality.A: np.array([True, False, True, False]),
        Modality.V: np.array([True, True, True, True]),
    }
    batch = make_batch(config, 4, seed=11, present=present)
    params = net.leaves(store)
    loss = net.reconstruction_loss(params, Modality.A, batch).item()
    xs_masked = {m: Tensor(batch.x[m] * present[m].astype(float).reshape(-1, 1))
                 for m in MODALITIES}
    xhat = net.generate(params, Modality.A, xs_masked, 4).data
    brute = np.mean([np.sum((xhat[i] - batch.x[Modality.A][i]) ** 2) for i in (0, 2)])
    assert loss == pytest.approx(brute, rel=1e-12)


def test_nce_uniform_logits_give_ln_n():
    n, d = 5, 8
    bt = np.zeros((n, d))
    bt[:, :n] = np.eye(n)
    spec = np.zeros((n, d))
    spec[:, n:] = 1.0  # orthogonal to every bt row, equal norms
    loss = nce_loss(Tensor(bt), Tensor(spec), tau=0.1)
    assert loss.item() == pytest.approx(np.log(n), rel=1e-12)


def test_nce_matches_hand_rolled_softmax():
    rng = np.random.default_rng(12)
    bt, spec, tau = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), 0.37
    got = nce_loss(Tensor(bt), Tensor(spec), tau).item()
    expected = 0.0
    for i in range(3):
        logits = np.array([bt[i] @ spec[j] / tau for j in range(3)])
        probs = np.exp(logits - logits.max())
        probs /= probs.sum()
        expected += -np.log(probs[i])
    assert got == pytest.approx(expected / 3, rel=1e-12)


def test_nce_rejects_single_sample():
    with pytest.raises(ValueError):
        nce_loss(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))), 0.1)


def test_property_terms_boundary_cases(tiny):
    config, net, store = tiny
    # identical invariant heads for every sample -> inv == 0: feed identical inputs
    batch = make_batch(config, 4, seed=13)
    for m in MODALITIES:
        batch.x[m] = np.tile(batch.x[m][:1], (4, 1))
    _, breakdown = net.total_loss(store, batch, LossWeights())
    assert breakdown.inv == pytest.approx(0.0, abs=1e-18)
    # generous margin -> hinge inactive -> app == 0
    _, relaxed = net.total_loss(store, batch, LossWeights(margin_eps=1e6))
    assert relaxed.app == 0.0


def test_orthogonality_term_zero_when_heads_orthogonal(tiny):
    config, net, store = tiny
    # zero the sample-specific head: <0, mu> == 0 for every sample
    zeroed = with_zeroed(store, ("de.L.spec", "de.A.spec", "de.V.spec"))
    batch = make_batch(config, 4, seed=14)
    _, breakdown = net.total_loss(zeroed, batch, LossWeights())
    assert breakdown.or_ == pytest.approx(0.0, abs=1e-18)


def test_loss_term_signs_and_identity(tiny):
    config, net, store = tiny
    batch = make_batch(config, 6, seed=15)
    weights = LossWeights(alpha=0.7, beta=0.3, gamma=0.2)
    _, b = net.total_loss(store, batch, weights)
    assert b.re >= 0 and b.inv >= 0 and b.app >= 0 and b.con >= 0 and b.re_decomp >= 0
    assert b.pe == pytest.approx(b.or_ + b.inv + b.re_decomp + b.app, rel=1e-12)
    assert b.total == pytest.approx(
        b.task + weights.alpha * b.re + weights.beta * b.pe + weights.gamma * b.con, rel=1e-12)


def test_zero_weights_reduce_total_to_task_and_gate_gradients(tiny):
    config, net, store = tiny
    batch = make_batch(config, 4, seed=16)
    weights = LossWeights(alpha=0.0, beta=0.0, gamma=0.0)
    _, breakdown = net.total_loss(store, batch, weights)
    assert breakdown.total == pytest.approx(breakdown.task, rel=1e-12)
    # with a fully observed batch the task path touches only fusion and head
    _, grads = net.gradient(store, batch, weights)
    for name, g in grads.items():
        if name.startswith(("fuse.", "head.")):
            assert np.abs(g).max() > 0
        else:
            assert np.abs(g).max() == 0.0


def test_doubling_alpha_doubles_re_contribution(tiny):
    config, net, store = tiny
    batch = make_batch(config, 4, seed=17)
    _, b1 = net.total_loss(store, batch, LossWeights(alpha=1.0, beta=0.0, gamma=0.0))
    _, b2 = net.total_loss(store, batch, LossWeights(alpha=2.0, beta=0.0, gamma=0.0))
    assert b2.total - b2.task == pytest.approx(2 * (b1.total - b1.task), rel=1e-12)
    assert b1.re == pytest.approx(b2.re, rel=1e-12)


def test_zero_padding_consistency_mask_gating(tiny):
    config, net, store = tiny
    present = {
        Modality.L: np.array([True, True, True]),
        Modality.A: np.array([True, False, True]),
        Modality.V: np.array([True, True, False]),
    }
    batch = make_batch(config, 3, seed=18, present=present)
    weights = LossWeights()
    _, zero_padded = net.total_loss(store, batch, weights)
    # absent slots filled with arbitrary junk must not change any term
    junk = Batch(
        x={m: batch.x[m].copy() for m in MODALITIES},
        present={m: batch.present[m].copy() for m in MODALITIES},
        y=batch.y.copy(),
    )
    rng = np.random.default_rng(19)
    for m in MODALITIES:
        absent = ~present[m]
        junk.x[m][absent] = rng.normal(size=(absent.sum(), config.dim(m))) * 100
    _, junked = net.total_loss(store, junk, weights)
    assert junked.total == pytest.approx(zero_padded.total, rel=1e-14)
    assert junked.re == pytest.approx(zero_padded.re, rel=1e-14)
    assert junked.pe == pytest.approx(zero_padded.pe, rel=1e-14)
    assert junked.con == pytest.approx(zero_padded.con, rel=1e-14)


def test_batch_invariance_of_task_and_re(tiny):
    config, net, store = tiny
    batch = make_batch(config, 5, seed=20)
    weights = LossWeights()
    _, whole = net.total_loss(store, batch, weights)
    singles = [net.total_loss(store, batch.take(np.array([i])), weights)[1] for i in range(5)]
    assert whole.task == pytest.approx(np.mean([s.task for s in singles]), rel=1e-12)
    assert whole.re == pytest.approx(np.mean([s.re for s in singles]), rel=1e-12)


def test_total_loss_rejects_empty_batch(tiny):
    config, net, store = tiny
    empty = Batch(x={m: np.zeros((0, config.dim(m))) for m in MODALITIES},
                  present={m: np.zeros(0, dtype=bool) for m in MODALITIES},
                  y=np.zeros(0))
    with pytest.raises(ValueError):
        net.total_loss(store, empty, LossWeights())


def test_numeric_error_names_offending_term(tiny):
    config, net, store = tiny
    batch = make_batch(config, 3, seed=21)
    huge = ParameterStore([
        TensorEntry(e.name, np.full(e.shape, 1e200) if e.name == "head.out.W" else e.values,
                    e.role_tags)
        for e in store
    ])
    with np.errstate(over="ignore", invalid="ignore"):
        with pytest.raises(NumericError) as err:
            net.total_loss(huge, batch, LossWeights())
    assert err.value.term in {"task", "total"}


def _fd_gradient(net, store, batch, weights, step=1e-5):
    vec = store.to_vector()
    grad = np.zeros_like(vec)
    for i in range(len(vec)):
        gi = store.index_of(i)
        orig = vec[i]
        hi = net.loss_value(store.apply_updates([(gi, orig + step)]), batch, weights)
        lo = net.loss_value(store.apply_updates([(gi, orig - step)]), batch, weights)
        grad[i] = (hi - lo) / (2 * step)
    return grad


@pytest.mark.slow
def test_full_gradient_matches_central_differences(tiny):
    config, net, store = tiny
    present = {
        Modality.L: np.array([True, True, True, True]),
        Modality.A: np.array([True, True, False, True]),
        Modality.V: np.array([True, False, True, True]),
    }
    batch = make_batch(config, 4, seed=22, present=present)
    weights = LossWeights(alpha=0.8, beta=0.4, gamma=0.3, tau=0.2, margin_eps=0.01)
    analytic = net.gradient_vector(store, batch, weights)
    numeric = _fd_gradient(net, store, batch, weights)
    err = np.abs(analytic - numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    assert float((err / scale).max()) < 1e-5
