from __future__ import annotations

import hashlib

import numpy as np
import pytest

from modsurgery.params import (
    FORMAT_VERSION,
    GlobalIndex,
    Modality,
    ParameterStore,
    StoreError,
    TensorEntry,
    canonical_deserialize,
    canonical_serialize,
    digest,
    load_store,
    save_store,
)


def _random_store(rng: np.random.Generator, n_entries: int = 4) -> ParameterStore:
    entries = []
    for i in range(n_entries):
        shape = tuple(int(d) for d in rng.integers(1, 5, size=rng.integers(1, 3)))
        entries.append(TensorEntry(f"t{i}", rng.normal(size=shape)))
    return ParameterStore(entries)


def test_modality_ordering_and_parse():
    assert Modality.L < Modality.A < Modality.V
    assert Modality.parse("A") is Modality.A
    with pytest.raises(ValueError):
        Modality.parse("x")


def test_empty_store_serialization_is_deterministic():
    store = ParameterStore([])
    first = canonical_serialize(store)
    second = canonical_serialize(store)
    assert first == second
    assert first.startswith(b"MBDP")
    # header only: magic + version + count
    assert len(first) == 4 + 4 + 4


def test_single_zero_value_encodes_eight_zero_bytes():
    store = ParameterStore([TensorEntry("w", np.array([0.0]))])
    data = canonical_serialize(store)
    assert data.endswith(b"\x00" * 8)


def test_one_ulp_change_changes_bytes_and_digest():
    rng = np.random.default_rng(0)
    store = _random_store(rng)
    base = canonical_serialize(store)
    idx = GlobalIndex(store.entries[1].name, 0)
    old = store.get(idx)
    bumped = store.apply_updates([(idx, np.nextafter(old, np.inf))])
    assert canonical_serialize(bumped) != base
    assert digest(bumped) != digest(store)


def test_sha256_primitive_matches_published_empty_string_vector():
    expected = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    assert hashlib.sha256(b"").hexdigest() == expected


def test_entry_order_is_part_of_canonical_form():
    a = TensorEntry("a", np.array([1.0, 2.0]))
    b = TensorEntry("b", np.array([3.0]))
    assert digest(ParameterStore([a, b])) != digest(ParameterStore([b, a]))


def test_digest_stable_for_equal_stores():
    rng = np.random.default_rng(1)
    values = rng.normal(size=(3, 2))
    s1 = ParameterStore([TensorEntry("w", values.copy())])
    s2 = ParameterStore([TensorEntry("w", values.copy())])
    assert digest(s1) == digest(s2)


def test_round_trip_is_bit_exact():
    rng = np.random.default_rng(2)
    for _ in range(20):
        store = _random_store(rng, n_entries=int(rng.integers(0, 5)))
        back = canonical_deserialize(canonical_serialize(store))
        assert back.value_equal(store)
        assert back.format_version == FORMAT_VERSION


def test_flat_index_examples_and_round_trip():
    store = ParameterStore([
        TensorEntry("first", np.arange(3.0)),
        TensorEntry("second", np.arange(2.0) + 10),
    ])
    assert store.index_of(0) == GlobalIndex("first", 0)
    assert store.index_of(4) == GlobalIndex("second", 1)
    for i in range(len(store)):
        assert store.flat_of(store.index_of(i)) == i
    with pytest.raises(StoreError):
        store.index_of(5)
    with pytest.raises(StoreError):
        store.index_of(-1)


def test_flat_round_trip_on_random_store():
    rng = np.random.default_rng(3)
    store = _random_store(rng, 6)
    for i in range(store.total_size):
        gi = store.index_of(i)
        assert store.flat_of(gi) == i
        assert store.get(gi) == store.to_vector()[i]


def test_apply_updates_empty_is_identity():
    store = _random_store(np.random.default_rng(4))
    assert digest(store.apply_updates([])) == digest(store)


def test_apply_updates_zero_one_coordinate():
    store = _random_store(np.random.default_rng(5))
    idx = store.index_of(3)
    out = store.apply_updates([(idx, 0.0)])
    assert out.get(idx) == 0.0
    before = store.to_vector()
    after = out.to_vector()
    flat = store.flat_of(idx)
    mask = np.ones(len(before), dtype=bool)
    mask[flat] = False
    # all other coordinates bit-identical
    assert np.array_equal(before[mask].view(np.uint64), after[mask].view(np.uint64))
    # input store unmodified
    assert store.get(idx) == before[flat]


def test_apply_updates_touches_exactly_listed_coordinates():
    rng = np.random.default_rng(6)
    store = _random_store(rng, 5)
    n = store.total_size
    picks = rng.choice(n, size=min(100, n), replace=False)
    updates = [(store.index_of(int(i)), float(rng.normal())) for i in picks]
    out = store.apply_updates(updates)
    after = out.to_vector()
    before = store.to_vector()
    for (gi, value), flat in zip(updates, picks):
        assert after[int(flat)] == value
    untouched = np.setdiff1d(np.arange(n), picks)
    assert np.array_equal(before[untouched].view(np.uint64), after[untouched].view(np.uint64))


def test_apply_updates_rejects_duplicates_and_bad_offsets():
    store = _random_store(np.random.default_rng(7))
    idx = store.index_of(0)
    with pytest.raises(StoreError):
        store.apply_updates([(idx, 1.0), (idx, 2.0)])
    with pytest.raises(StoreError):
        store.apply_updates([(GlobalIndex(store.entries[0].name, 10_000), 1.0)])


def test_store_rejects_nan_inf_and_duplicate_names():
    with pytest.raises(StoreError):
        TensorEntry("bad", np.array([np.nan]))
    with pytest.raises(StoreError):
        TensorEntry("bad", np.array([np.inf]))
    entry = TensorEntry("dup", np.array([1.0]))
    with pytest.raises(StoreError):
        ParameterStore([entry, TensorEntry("dup", np.array([2.0]))])


def test_save_load_round_trip(tmp_path):
    store = _random_store(np.random.default_rng(8))
    path = tmp_path / "model.mbdp"
    hexdigest = save_store(store, path)
    assert hexdigest == digest(store)
    sidecar = (tmp_path / "model.mbdp.sha256").read_text().strip()
    assert sidecar == hexdigest
    assert load_store(path).value_equal(store)


def test_deserialize_rejects_garbage():
    with pytest.raises(StoreError):
        canonical_deserialize(b"NOPE" + b"\x00" * 16)
