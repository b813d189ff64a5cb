"""Engine-level tests: forward semantics against loop references, gradients
against finite differences, serialization, recalibration, and shape errors."""

import numpy as np
import pytest

from foldkit.errors import ModelFormatError, ShapeError, ValidationError
from foldkit.nn import (InputLossSpec, Network, bn_recalibrate, cross_entropy,
                        forward, forward_trace, input_gradient,
                        input_loss_and_gradient, load_network,
                        network_from_bytes, network_to_bytes, run_tape,
                        save_network, softmax)
from foldkit.nn.blocks import (AvgPool, BatchNorm, Conv2D, Dense, Flatten,
                               ReLU, ResidualBlock, get_block, iter_blocks,
                               output_shapes)
from foldkit.nn.engine import backward

from oracles import central_fd, loop_forward, random_network, two_pass_variance

ARCHS = ("mlp_bn", "mlp", "conv_bn", "residual")


def _batch_for(net, rng, n=16):
    return rng.normal(size=(n,) + net.input_shape)


@pytest.mark.parametrize("arch", ARCHS)
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_forward_matches_loop_reference(arch, seed):
    rng = np.random.default_rng((seed, 77))
    net = random_network(arch, rng)
    x = _batch_for(net, rng)
    got = forward(net, x)
    want = loop_forward(net, x, bn_mode="running")
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("arch", ["mlp_bn", "conv_bn", "residual"])
def test_batch_mode_bn_matches_loop_reference(arch, rng):
    net = random_network(arch, rng)
    x = _batch_for(net, rng)
    got, _ = run_tape(net, x, bn_mode="batch")
    want = loop_forward(net, x, bn_mode="batch")
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-10)


def test_trace_site_stats_are_population_moments(rng):
    net = random_network("conv_bn", rng)
    x = _batch_for(net, rng, n=8)
    _, stats = forward_trace(net, x, keep_raw=True)
    for site, s in stats.items():
        mean, var = two_pass_variance(s.raw)
        np.testing.assert_allclose(s.mean, mean, atol=1e-12)
        np.testing.assert_allclose(s.var, var, atol=1e-12)


def test_trace_unknown_site_raises(rng):
    net = random_network("mlp", rng)
    with pytest.raises(ValidationError):
        forward_trace(net, _batch_for(net, rng), sites=["nonexistent"])


def test_param_grads_match_finite_differences(rng):
    net = random_network("mlp_bn", rng, dim=5, width=6, class_count=3)
    x = rng.normal(size=(7, 5))
    y = rng.integers(0, 3, size=7)

    logits, tape = run_tape(net, x, bn_mode="batch")
    _, dlogits = cross_entropy(logits, y)
    _, grads = backward(tape, dlogits, want_param_grads=True)

    names = {"Dense": ("weight", "bias"), "BatchNorm": ("gamma", "beta")}
    for path, block in iter_blocks(net):
        for name in names.get(type(block).__name__, ()):
            def loss_at(val, path=path, name=name):
                probe = net.copy()
                setattr(get_block(probe, path), name, val)
                lg, _ = run_tape(probe, x, bn_mode="batch")
                return cross_entropy(lg, y)[0]

            fd = central_fd(loss_at, getattr(block, name).copy(), h=1e-6)
            got = grads[path][name]
            denom = max(float(np.abs(fd).max()), 1e-8)
            assert np.abs(got - fd).max() / denom < 1e-6, (path, name)


def test_conv_param_grads_match_finite_differences(rng):
    net = random_network("conv_bn", rng, dim=9, width=3, class_count=2)
    x = rng.normal(size=(4,) + net.input_shape)
    y = rng.integers(0, 2, size=4)
    logits, tape = run_tape(net, x, bn_mode="batch")
    _, dlogits = cross_entropy(logits, y)
    _, grads = backward(tape, dlogits, want_param_grads=True)
    conv_path = (0,)

    def loss_at(w):
        probe = net.copy()
        get_block(probe, conv_path).weight = w
        lg, _ = run_tape(probe, x, bn_mode="batch")
        return cross_entropy(lg, y)[0]

    fd = central_fd(loss_at, get_block(net, conv_path).weight.copy(), h=1e-6)
    got = grads[conv_path]["weight"]
    assert np.abs(got - fd).max() / max(float(np.abs(fd).max()), 1e-8) < 1e-6


@pytest.mark.parametrize("arch", ARCHS)
def test_input_gradient_matches_finite_differences(arch, rng):
    net = random_network(arch, rng, dim=9 if arch == "conv_bn" else 6,
                         width=4, class_count=3)
    x = rng.normal(size=(3,) + net.input_shape)
    spec = InputLossSpec(targets=np.array([0, 1, 2]), ce_weight=1.0,
                         bn_weight=0.5 if arch != "mlp" else 0.0,
                         l2_weight=1e-3, tv_weight=1e-3)
    got = input_gradient(net, x, spec)

    def loss_at(val):
        return input_loss_and_gradient(net, val, spec)[0]

    fd = central_fd(loss_at, x.copy(), h=1e-6)
    rel = np.abs(got - fd).max() / max(float(np.abs(fd).max()), 1e-10)
    assert rel < 1e-6


def test_input_loss_parts_and_validation(rng):
    net = random_network("mlp_bn", rng, dim=4, width=4, class_count=2)
    x = rng.normal(size=(4, 4))
    total, parts, _ = input_loss_and_gradient(
        net, x, InputLossSpec(targets=np.array([0, 1, 0, 1]), ce_weight=1.0,
                              bn_weight=2.0, l2_weight=3.0, tv_weight=4.0))
    reassembled = parts["ce"] + 2.0 * parts["bn"] + 3.0 * parts["l2"] + 4.0 * parts["tv"]
    assert abs(total - reassembled) < 1e-12
    assert abs(parts["l2"] - float((x ** 2).sum())) < 1e-12
    with pytest.raises(ValidationError):
        input_loss_and_gradient(net, x, InputLossSpec(targets=None, ce_weight=1.0))
    bn_free = random_network("mlp", rng, dim=4, width=4, class_count=2)
    with pytest.raises(ValidationError):
        input_loss_and_gradient(bn_free, x, InputLossSpec(
            targets=np.array([0, 1, 0, 1]), bn_weight=1.0))


def test_softmax_rows_sum_to_one(rng):
    z = rng.normal(size=(5, 7)) * 50
    p = softmax(z)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert (p >= 0).all()


def test_input_shape_errors(rng):
    net = random_network("mlp", rng, dim=6)
    with pytest.raises(ShapeError):
        forward(net, rng.normal(size=(4, 7)))
    with pytest.raises(ShapeError):
        forward(net, rng.normal(size=(4, 2, 3)))


def test_network_validation_errors():
    with pytest.raises(ValidationError):
        Network(blocks=[], input_shape=(4,), class_count=2)
    with pytest.raises(ValidationError):
        # output width 3 does not match the declared class count
        Network(blocks=[Dense(weight=np.eye(3), bias=np.zeros(3))],
                input_shape=(3,), class_count=2)
    with pytest.raises(ShapeError):
        Network(blocks=[Dense(weight=np.zeros((3, 4)), bias=np.zeros(3)),
                        Dense(weight=np.zeros((2, 5)), bias=np.zeros(2))],
                input_shape=(4,), class_count=2)
    with pytest.raises(ShapeError):
        Network(blocks=[ResidualBlock(
            main=[Dense(weight=np.zeros((3, 4)), bias=np.zeros(3))],
            shortcut=[])], input_shape=(4,), class_count=3)


def test_residual_identity_addition(rng):
    inner = Dense(weight=np.eye(4) * 0.5, bias=np.zeros(4))
    net = Network(blocks=[ResidualBlock(main=[inner], shortcut=[])],
                  input_shape=(4,), class_count=4)
    x = rng.normal(size=(3, 4))
    np.testing.assert_allclose(forward(net, x), 1.5 * x, atol=1e-12)


def test_output_shapes_cover_branch_blocks(rng):
    net = random_network("residual", rng, dim=6, width=5, class_count=3)
    shapes = output_shapes(net)
    assert shapes["3.main.0"] == (5,)
    assert shapes["3"] == (5,)


# ---------------------------------------------------------------------------
# serialization

@pytest.mark.parametrize("arch", ARCHS)
def test_serialize_roundtrip_and_fixed_point(arch, rng, tmp_path):
    net = random_network(arch, rng)
    data = network_to_bytes(net)
    loaded = network_from_bytes(data)
    # quantization to float32 happens once; after that the bytes are a fixed point
    assert network_to_bytes(loaded) == data
    x = _batch_for(net, rng, n=4).astype(np.float32).astype(np.float64)
    np.testing.assert_allclose(forward(loaded, x), forward(net, x),
                               rtol=1e-5, atol=1e-5)
    path = tmp_path / "model.fnet"
    save_network(loaded, path)
    again = load_network(path)
    assert network_to_bytes(again) == data
    assert not list(tmp_path.glob(".fnet-*")), "temp files must not survive"


def test_serialize_structure_preserved(rng):
    net = random_network("residual", rng)
    loaded = network_from_bytes(network_to_bytes(net))
    kinds = [type(b).__name__ for b in loaded.blocks]
    assert kinds == [type(b).__name__ for b in net.blocks]
    assert loaded.input_shape == net.input_shape
    assert loaded.class_count == net.class_count
    res = loaded.blocks[3]
    assert isinstance(res, ResidualBlock) and len(res.main) == 5


def test_deserialize_rejects_garbage(rng):
    net = random_network("mlp_bn", rng, dim=4, width=4, class_count=2)
    data = network_to_bytes(net)
    with pytest.raises(ModelFormatError):
        network_from_bytes(b"not json\n" + data)
    with pytest.raises(ModelFormatError):
        network_from_bytes(data[: len(data) // 2])  # truncated blob
    with pytest.raises(ModelFormatError):
        network_from_bytes(b'{"magic":"WRONG","format_version":1,"blocks":[]}\n')
    with pytest.raises(ModelFormatError):
        network_from_bytes(b"no newline at all")


# ---------------------------------------------------------------------------
# recalibration

def test_recalibrate_matches_batch_mode_on_same_batch(rng):
    net = random_network("mlp_bn", rng)
    x = _batch_for(net, rng, n=32)
    recal = bn_recalibrate(net, [x])
    batch_logits, _ = run_tape(net, x, bn_mode="batch")
    np.testing.assert_allclose(forward(recal, x), batch_logits, atol=1e-9)


def test_recalibrate_pools_over_batches(rng):
    net = random_network("conv_bn", rng, width=4)
    batches = [_batch_for(net, rng, n=8) for _ in range(3)]
    recal = bn_recalibrate(net, batches)
    # first BN input stream is produced by parameters untouched upstream,
    # so its pooled moments are directly checkable
    pooled = []
    for b in batches:
        _, tape = run_tape(net, b, bn_mode="batch")
        z = tape[0].out
        pooled.append(np.moveaxis(z, 1, -1).reshape(-1, z.shape[1]))
    pooled = np.concatenate(pooled, axis=0)
    bn = recal.blocks[1]
    np.testing.assert_allclose(bn.running_mean, pooled.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(bn.running_var, pooled.var(axis=0), atol=1e-12)


def test_recalibrate_needs_batches(rng):
    net = random_network("mlp_bn", rng)
    with pytest.raises(ValidationError):
        bn_recalibrate(net, [])


def test_recalibrate_leaves_original_untouched(rng):
    net = random_network("mlp_bn", rng)
    before = net.blocks[1].running_mean.copy()
    bn_recalibrate(net, [_batch_for(net, rng)])
    np.testing.assert_array_equal(net.blocks[1].running_mean, before)
