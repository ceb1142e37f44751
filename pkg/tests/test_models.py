import numpy as np
import pytest

from rewindlab import engine as E
from rewindlab import models as M


@pytest.mark.parametrize("name,counts", [
    ("resnet20", (272282, 270896)),
    ("resnet56", (855578, 851504)),
    ("resnet110", (1730522, 1722416)),
    ("wrn16-8", (10961370, 10954160)),
])
def test_reference_param_counts(name, counts):
    r = M.count_params(M.model_spec(name))
    assert (r.trainable_count, r.kernel_count) == counts


def test_dense_layer_count():
    spec = M.mlp_spec(4, (), 3)
    r = M.count_params(spec)
    assert (r.trainable_count, r.kernel_count) == (15, 12)


def test_mlp_784_100_10():
    r = M.count_params(M.mlp_spec(784, (100,), 10))
    assert (r.trainable_count, r.kernel_count) == (79510, 79400)


def test_desk_cnn_size():
    r = M.count_params(M.model_spec("cnn-small"))
    assert 30_000 <= r.kernel_count <= 50_000


def test_unknown_model_lists_zoo():
    with pytest.raises(ValueError, match="resnet20.*cnn-small"):
        M.build("vgg16")


def test_reference_models_need_cifar_classes():
    with pytest.raises(ValueError):
        M.build("resnet20", num_classes=7)
    assert M.build("resnet20", num_classes=100).params["fc"].shape == (100, 64)


@pytest.mark.parametrize("name", ["resnet20", "cnn-small", "mlp-small"])
def test_zero_batch_forward_is_finite(name):
    m = M.build(name)
    for training in (False, True):
        out = M.logits(m.copy(), np.zeros((2, 32, 32, 3), np.float32), training=training)
        assert out.shape == (2, 10) and np.all(np.isfinite(out))


@pytest.mark.slow
def test_wrn_zero_batch_forward_is_finite():
    out = M.logits(M.build("wrn16-8"), np.zeros((1, 32, 32, 3), np.float32))
    assert np.all(np.isfinite(out))


def test_init_is_seeded_and_he_uniform():
    a, b, c = M.build("cnn-small", seed=1), M.build("cnn-small", seed=1), M.build("cnn-small", seed=2)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not np.array_equal(a.params["conv0"], c.params["conv0"])
    spec = a.spec
    for p in spec.params:
        w = a.params[p.name]
        if p.init == "he_uniform":
            assert np.abs(w).max() <= np.sqrt(6 / p.fan_in)
        elif p.name.endswith("gamma"):
            assert np.all(w == 1)
        else:
            assert np.all(w == 0)


def test_kernel_layout_leading_axis_is_output():
    spec = M.model_spec("cnn-small")
    assert spec.param("conv0").shape == (16, 3, 3, 3)
    assert spec.param("fc").shape == (10, 64)
    assert set(spec.prunable_names) == {"conv0", "conv1", "conv2", "conv3", "fc"}


def test_input_shape_checked():
    with pytest.raises(E.ShapeError, match="expected input"):
        M.logits(M.build("cnn-small"), np.zeros((1, 16, 16, 3), np.float32))


def test_state_round_trip_includes_bn_stats():
    m = M.build("cnn-small")
    m.bn_state["bn0.moving_mean"][:] = 3.0
    st = m.state()
    other = M.build("cnn-small", seed=9)
    other.load_state(st)
    assert all(np.array_equal(other.state()[k], st[k]) for k in st)


def test_resnet_shortcut_is_projection_without_bn():
    names = {p.name for p in M.model_spec("resnet20").params}
    shortcuts = sorted(n for n in names if "shortcut" in n)
    assert shortcuts and not any(n.endswith(("gamma", "beta")) for n in shortcuts)
