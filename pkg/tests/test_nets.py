import struct

import numpy as np
import pytest

from gatedmeta import nets
from gatedmeta.nets import Batch, Conv, Dense, GlobalAvgPool, GatedBackbone, MaxPool, ReLU, ShapeError
from oracles import gradient_relative_error


def _cnn_batch(rng, n=6, c=3, size=8, classes=10):
    return Batch(rng.normal(size=(n, c, size, size)), rng.integers(0, classes, size=n))


def test_param_partition_theta_then_phi():
    net = nets.small_cnn(gated=True)
    assert net.theta_range.stop == net.n_theta == net.phi_range.start
    assert net.n_params == net.n_theta + net.n_phi
    # conv1 3->8, conv2 8->16, dense 16->10 and one gate of 16 hidden units on conv2
    assert net.n_theta == (8 * 27 + 8) + (16 * 72 + 16) + (16 * 10 + 10)
    assert net.n_phi == 16 * 8 + 16 + 16 * 17
    assert nets.mlp(gated=False).n_phi == 0


def test_gate_group_layout_one_group_per_output_unit():
    net = nets.small_cnn(gated=True)
    lay = net.gate_group_layout()
    assert len(lay.groups) == 16
    assert all(b - a == 17 for a, b in lay.groups)
    assert lay.groups[-1][1] == net.n_params


def test_describe_round_trip():
    net = nets.small_cnn(gated=True, grad_mode="ste")
    layers, opts = nets.parse_architecture(net.describe())
    assert [l.describe() for l in layers] == [l.describe() for l in net.layers]
    assert opts["grad_mode"] == "ste"
    with pytest.raises(ValueError):
        nets.parse_architecture("dense(2,3);softmax")


def test_shape_errors():
    net = nets.small_cnn(gated=True)
    with pytest.raises(ShapeError):
        nets.forward(net, np.zeros((2, 4, 8, 8)))
    with pytest.raises(ShapeError):
        nets.forward(nets.mlp(), np.zeros((2, 10)))
    with pytest.raises(ShapeError):
        nets.forward(net, np.zeros((2, 3, 7, 7)))
    with pytest.raises(ShapeError):
        GatedBackbone(net.layers, params=np.zeros(3))
    with pytest.raises(ShapeError):
        nets.gate_mask(net, 3, np.zeros((2, 5, 4, 4)))


def test_masks_binary_and_gating_off_records_nothing():
    rng = np.random.default_rng(0)
    net = nets.small_cnn(gated=True, seed=1)
    x = rng.normal(size=(5, 3, 8, 8))
    _, masks, _ = nets.forward(net, x)
    assert list(masks) == [3]
    assert set(np.unique(masks[3])) <= {0.0, 1.0}
    _, masks, _ = nets.forward(net, x, gating=False)
    assert masks == {}


def test_zero_logit_opens_gate():
    net = nets.small_cnn(gated=True)
    net.params[net.phi_range] = 0.0
    _, masks, _ = nets.forward(net, np.ones((2, 3, 8, 8)))
    assert np.all(masks[3] == 1.0)


def test_closed_gates_zero_the_layer_output():
    net = nets.small_cnn(gated=True, seed=2)
    w2 = net.view(net.gate_slots[3][2])
    w2[:, :-1] = 0.0
    w2[:, -1] = -1.0
    rng = np.random.default_rng(0)
    logits, masks, _ = nets.forward(net, rng.normal(size=(3, 3, 8, 8)))
    assert np.all(masks[3] == 0)
    dense_b = net.view(net.theta_slots[6][1])
    np.testing.assert_allclose(logits, np.broadcast_to(dense_b, logits.shape))


@pytest.mark.parametrize("mode", ["gumbel", "ste"])
def test_gated_cnn_gradient_matches_finite_differences(mode):
    rng = np.random.default_rng(4)
    net = nets.small_cnn(gated=True, grad_mode=mode, seed=4)
    assert gradient_relative_error(net, _cnn_batch(rng), gating=True, surrogate=True) < 1e-4


def test_ungated_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    assert gradient_relative_error(nets.small_cnn(gated=False, seed=5), _cnn_batch(rng), False, False) < 1e-4
    mlp = nets.mlp(n_in=12, hidden=7, n_classes=4, seed=5)
    b = Batch(rng.normal(size=(9, 12)), rng.integers(0, 4, size=9))
    assert gradient_relative_error(mlp, b, False, False) < 1e-4


def test_gated_mlp_gradient():
    rng = np.random.default_rng(6)
    mlp = nets.mlp(n_in=12, hidden=7, n_classes=4, gated=True, seed=6)
    b = Batch(rng.normal(size=(9, 12)), rng.integers(0, 4, size=9))
    assert gradient_relative_error(mlp, b, True, True) < 1e-4


def test_ste_passes_gradient_unchanged():
    rng = np.random.default_rng(7)
    net = nets.small_cnn(gated=True, grad_mode="ste", seed=7)
    trace = {}
    nets.loss_and_grad(net, _cnn_batch(rng), trace=trace)
    np.testing.assert_array_equal(trace[3]["dz"], trace[3]["dmask"])
    net.grad_mode = "gumbel"
    trace = {}
    nets.loss_and_grad(net, _cnn_batch(rng), trace=trace)
    assert not np.array_equal(trace[3]["dz"], trace[3]["dmask"])


def test_gumbel_noise_needs_rng_and_is_seeded():
    net = nets.small_cnn(gated=True, gumbel_noise=True, seed=8)
    x = np.random.default_rng(0).normal(size=(20, 3, 8, 8))
    a = nets.forward(net, x, rng=np.random.default_rng(1))[1][3]
    b = nets.forward(net, x, rng=np.random.default_rng(1))[1][3]
    np.testing.assert_array_equal(a, b)
    assert np.array_equal(nets.forward(net, x)[1][3], nets.forward(net, x)[1][3])


def test_channel_indices():
    net = nets.small_cnn(gated=True)
    feed = net.channel_feed_indices(3, 2)
    w, b = net.theta_slots[3]
    assert feed.size == 8 * 9 + 1 and feed[-1] == b.start + 2
    read = net.channel_read_indices(3, 2)
    dense_w = net.view(net.theta_slots[6][0])
    assert read.size == dense_w.shape[0]
    flat = np.zeros(net.n_params)
    flat[read] = 1.0
    assert np.all(net.view(net.theta_slots[6][0], flat)[:, 2] == 1.0)
    assert net.theta_weight_indices().size == 8 * 27 + 16 * 72 + 160


def test_label_range_checked():
    net = nets.mlp(n_in=3, hidden=2, n_classes=2)
    with pytest.raises(ValueError):
        nets.loss_and_grad(net, Batch(np.zeros((1, 3)), np.array([2])))


def test_cross_entropy_uniform_logits():
    loss, d = nets.cross_entropy(np.zeros((4, 5)), np.array([0, 1, 2, 3]))
    assert loss == pytest.approx(np.log(5))
    np.testing.assert_allclose(d.sum(axis=1), 0.0, atol=1e-15)


# ---- checkpoints -----------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    net = nets.small_cnn(gated=True, grad_mode="ste", seed=3)
    p = tmp_path / "m.mgtr"
    nets.save_checkpoint(p, net)
    raw = p.read_bytes()
    assert raw[:4] == b"MGTR"
    version, count, dlen = struct.unpack_from("<IQI", raw, 4)
    assert (version, count) == (1, net.n_params)
    assert raw[20:20 + dlen].decode() == net.describe()
    back = nets.load_checkpoint(p)
    assert np.array_equal(back.params, net.params)
    assert back.describe() == net.describe()
    x = np.random.default_rng(0).normal(size=(2, 3, 8, 8))
    assert np.array_equal(nets.forward(back, x)[0], nets.forward(net, x)[0])


def test_checkpoint_errors(tmp_path):
    net = nets.mlp(n_in=4, hidden=3, n_classes=2)
    p = tmp_path / "m.mgtr"
    nets.save_checkpoint(p, net)
    raw = p.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="offset 0"):
        nets.load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="offset"):
        nets.load_checkpoint(tmp_path / "short")
    (tmp_path / "hdr").write_bytes(raw[:10])
    with pytest.raises(ValueError, match="offset 4"):
        nets.load_checkpoint(tmp_path / "hdr")


def test_custom_architecture():
    layers = [Conv(1, 2, gated=True), ReLU(), MaxPool(), Conv(2, 3), ReLU(), GlobalAvgPool(), Dense(3, 2)]
    net = GatedBackbone(layers, gate_hidden=4, seed=0)
    out, masks, _ = nets.forward(net, np.ones((2, 1, 4, 4)))
    assert out.shape == (2, 2) and masks[0].shape == (2, 2)
