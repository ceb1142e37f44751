import math
import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rewindlab import models as M
from rewindlab.prune import (PruneMask, apply_mask, apply_mask_, compression_from_sparsity, compression_of,
                             iterative_sparsity, load_mask, prune_structured, prune_unstructured,
                             save_mask, sparsity_from_compression, sparsity_of)
from rewindlab.verify import oracle_structured, oracle_unstructured, random_network


def test_global_example():
    m = prune_unstructured({"w": np.array([0.5, -0.1, 0.3, -0.9])}, 0.5)
    assert m.masks["w"].tolist() == [True, False, False, True]


def test_two_tensor_example():
    m = prune_unstructured({"a": np.array([1.0, 2.0]), "b": np.array([0.1, 3.0])}, 0.25)
    assert m.masks["a"].tolist() == [True, True] and m.masks["b"].tolist() == [False, True]


def test_ties_break_by_global_position():
    m = prune_unstructured({"a": np.array([1.0, 0.5]), "b": np.array([0.5, 0.5])}, 0.5)
    assert m.masks["a"].tolist() == [True, False] and m.masks["b"].tolist() == [False, True]


def test_per_layer_scope():
    w = {"a": np.array([1.0, 2.0, 3.0, 4.0]), "b": np.array([10.0, 20.0])}
    m = prune_unstructured(w, 0.5, scope="per-layer")
    assert m.masks["a"].tolist() == [False, False, True, True]
    assert m.masks["b"].tolist() == [False, True]


def test_resnet20_at_9_35x_leaves_about_29000():
    spec = M.model_spec("resnet20")
    rng = np.random.default_rng(0)
    w = {p.name: rng.standard_normal(p.shape).astype(np.float32) for p in spec.params if p.prunable}
    m = prune_unstructured(w, sparsity_from_compression(9.35))
    assert m.kernel_count == 270896
    assert abs(m.nonzero_count - 29000) / 29000 < 0.005
    assert compression_of(m).value == pytest.approx(9.35, abs=0.01)


def test_structured_examples():
    m = prune_structured({"w": np.array([[1.0, -1.0], [0.1, 0.2]])}, 0.5)
    assert m.masks["w"].tolist() == [[True, True], [False, False]]
    chans = np.stack([np.full((3, 3, 2), v) for v in (0.4, 0.1, 0.3, 0.2)])
    m = prune_structured({"c": chans}, 0.5)
    assert m.masks["c"].reshape(4, -1).all(axis=1).tolist() == [True, False, True, False]
    assert prune_structured({"c": chans}, 0.0) == PruneMask.dense({"c": chans})


def test_structured_rejects_empty_structures():
    with pytest.raises(ValueError):
        prune_structured({"w": np.zeros((3, 0))}, 0.5)


def test_empty_layer_warns_not_errors():
    with pytest.warns(RuntimeWarning, match="every weight of 'small'"):
        m = prune_unstructured({"small": np.array([0.01, 0.02]), "big": np.arange(1.0, 9.0)}, 0.2)
    assert not m.masks["small"].any()


def test_apply_mask_examples(rng):
    w = {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal(4), "bias": np.ones(2)}
    ones = PruneMask.dense({"a": w["a"], "b": w["b"]})
    out = apply_mask(w, ones)
    assert all(np.array_equal(out[k], w[k]) for k in w)
    zero_a = PruneMask({"a": np.zeros((2, 3), bool), "b": np.ones(4, bool)})
    out = apply_mask(w, zero_a)
    assert np.all(out["a"] == 0) and not np.any(np.signbit(out["a"]))
    assert np.array_equal(out["b"], w["b"]) and np.array_equal(out["bias"], w["bias"])
    apply_mask_(w, zero_a)
    assert np.all(w["a"] == 0)


def test_accounting_examples():
    assert compression_from_sparsity(0.893) == pytest.approx(9.35, abs=0.01)
    assert math.floor(10954160 / 100) == 109541
    dense = PruneMask.dense({"w": np.zeros(5)})
    assert sparsity_of(dense) == 0.0 and compression_of(dense).value == 1.0
    with pytest.raises(ValueError, match="undefined"):
        compression_of(PruneMask({"w": np.zeros(3, bool)}))


def test_iterative_sparsity_examples():
    assert iterative_sparsity(0.3, 1) == pytest.approx(0.3)
    assert iterative_sparsity(0.3, 2) == pytest.approx(0.51)
    assert iterative_sparsity(0.2, 10) == pytest.approx(0.8926, abs=1e-4)


@pytest.mark.parametrize("s", [-0.1, 1.0, 1.5])
def test_sparsity_range(s):
    with pytest.raises(ValueError):
        prune_unstructured({"w": np.ones(4)}, s)


def test_existing_mask_is_respected_and_grows(rng):
    w = {"a": rng.standard_normal(50), "b": rng.standard_normal((5, 10))}
    m1 = prune_unstructured(w, 0.3)
    w2 = {k: rng.standard_normal(v.shape) for k, v in w.items()}  # weights moved on
    m2 = prune_unstructured(w2, 0.51, existing=m1)
    assert m2.issubset(m1)
    assert m2.nonzero_count == 100 - math.floor(0.51 * 100)


def test_exempt_tensor_keeps_mask(rng):
    w = {"first": rng.standard_normal(20) * 1e-3, "rest": rng.standard_normal(80)}
    m = prune_unstructured(w, 0.5, exempt=["first"])
    assert m.masks["first"].all() and m.nonzero_count == 50


def test_mask_file_round_trip(tmp_path, rng):
    w = {"conv": rng.standard_normal((4, 3, 3, 2)), "fc": rng.standard_normal((10, 7))}
    m = prune_unstructured(w, 0.37)
    save_mask(tmp_path / "m.rwlm", m)
    back = load_mask(tmp_path / "m.rwlm")
    assert back == m and back.target_sparsity == 0.37 and back.digest() == m.digest()
    raw = (tmp_path / "m.rwlm").read_bytes()
    assert raw[:4] == b"RWLM" and raw[4] == 1
    assert struct.unpack_from("<dI", raw, 5) == (0.37, 2)


def test_truncated_mask_reports_offset(tmp_path, rng):
    m = prune_unstructured({"w": rng.standard_normal(100)}, 0.5)
    save_mask(tmp_path / "m.rwlm", m)
    p = tmp_path / "m.rwlm"
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(ValueError, match="truncated at byte"):
        load_mask(p)


@pytest.mark.parametrize("seed", range(10))
def test_matches_oracles(seed):
    rng = np.random.default_rng(seed)
    w = random_network(rng, 2000)
    s = float(rng.uniform(0, 0.95))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        got_u = prune_unstructured(w, s)
        got_s = prune_structured(w, s)
    want_u, want_s = oracle_unstructured(w, s), oracle_structured(w, s)
    assert all(np.array_equal(got_u.masks[k], want_u[k]) for k in w)
    assert all(np.array_equal(got_s.masks[k], want_s[k]) for k in w)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, st.integers(1, 200), elements=st.floats(-10, 10, width=32)),
       st.floats(0, 0.99))
def test_exact_count_property(w, s):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        m = prune_unstructured({"w": w}, s)
    assert m.kernel_count - m.nonzero_count == math.floor(s * w.size + 1e-9)
    kept, dropped = np.abs(w[m.masks["w"]]), np.abs(w[~m.masks["w"]])
    if kept.size and dropped.size:
        assert dropped.max() <= kept.min()
