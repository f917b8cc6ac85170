"""Integer executor vs the frozen simulated path, plus overflow checks."""

import numpy as np
import pytest

from conftest import minmax_calibrate
from quantkit import tensor as T
from quantkit.datasets import build_branchy_net, build_convnet, build_mlp, build_separable_net
from quantkit.errors import AccumulatorOverflowError, ContractError
from quantkit.graph import Graph, QuantConfig, attach_quantizers, forward_sim_quant, freeze
from quantkit.intexec import _conv_acc, _depthwise_acc, _linear_acc, run_int_graph
from quantkit.quantizer import Scheme


def _frozen(graph, x, cfg=None):
    attach_quantizers(graph, cfg or QuantConfig())
    minmax_calibrate(graph, x)
    return freeze(graph)


def test_requires_frozen_graph():
    g = build_mlp([2, 4, 2], seed=0)
    with pytest.raises(ContractError):
        run_int_graph(g, np.zeros((1, 2)))


def test_mlp_matches_simulated_path_exactly():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        g = build_mlp([3, 8, 8, 4], seed=seed)
        x = rng.normal(size=(16, 3))
        _frozen(g, x)
        assert np.array_equal(run_int_graph(g, x), forward_sim_quant(g, x))


def test_convnet_matches_simulated_path_exactly():
    for seed in range(3):
        rng = np.random.default_rng(seed)
        g = build_convnet((1, 8, 8), channels=(4, 6), classes=3, seed=seed)
        x = rng.normal(size=(4, 1, 8, 8))
        _frozen(g, x)
        assert np.array_equal(run_int_graph(g, x), forward_sim_quant(g, x))


def test_separable_net_matches_simulated_path_exactly():
    rng = np.random.default_rng(7)
    g = build_separable_net((2, 8, 8), width=6, classes=4, seed=7)
    x = rng.normal(size=(4, 2, 8, 8))
    _frozen(g, x)
    assert np.array_equal(run_int_graph(g, x), forward_sim_quant(g, x))


def test_branchy_net_untied_matches_exactly():
    rng = np.random.default_rng(8)
    g = build_branchy_net(seed=8, tied_add=False)
    x = rng.normal(size=(4, 2, 8, 8))
    _frozen(g, x)
    assert np.array_equal(run_int_graph(g, x), forward_sim_quant(g, x))


def test_branchy_net_tied_matches_exactly():
    rng = np.random.default_rng(9)
    g = build_branchy_net(seed=9, tied_add=True)
    x = rng.normal(size=(4, 2, 8, 8))
    _frozen(g, x)
    assert np.array_equal(run_int_graph(g, x), forward_sim_quant(g, x))


def test_asymmetric_weights_exercise_full_expansion():
    # nonzero weight zero-points activate every term of the accumulation
    rng = np.random.default_rng(10)
    g = build_mlp([3, 6, 3], seed=10)
    x = rng.normal(size=(8, 3))
    _frozen(g, x, QuantConfig(weight_scheme=Scheme.ASYMMETRIC, weight_bits=6, act_bits=6))
    assert np.array_equal(run_int_graph(g, x), forward_sim_quant(g, x))


def test_per_channel_weights_match_exactly():
    rng = np.random.default_rng(11)
    g = build_convnet((1, 8, 8), channels=(3, 4), classes=2, seed=11)
    x = rng.normal(size=(3, 1, 8, 8))
    _frozen(g, x, QuantConfig(weight_per_channel=True))
    assert np.array_equal(run_int_graph(g, x), forward_sim_quant(g, x))


def test_storage_is_int32_within_grid_bounds():
    rng = np.random.default_rng(12)
    g = build_mlp([3, 6, 3], seed=12)
    x = rng.normal(size=(8, 3))
    _frozen(g, x)
    _, env = run_int_graph(g, x, capture=True)
    for edge, q in env.items():
        assert q.dtype == np.int32
        spec = g.act_slots[g.edge_slot[edge]].spec
        lo, hi = spec.int_bounds()
        assert q.min() >= lo and q.max() <= hi


def test_linear_acc_matches_relative_product():
    rng = np.random.default_rng(13)
    for _ in range(10):
        qx = rng.integers(0, 256, (4, 6))
        qw = rng.integers(0, 256, (3, 6)).astype(np.int64)
        zx, zw = int(rng.integers(0, 256)), rng.integers(0, 256, 3)
        b = rng.integers(-1000, 1000, 3)
        acc = _linear_acc(qx.astype(np.int32), zx, qw, zw, b, "t")
        want = (qx - zx) @ (qw - zw[:, None]).T + b
        assert np.array_equal(acc, want)


def test_conv_acc_matches_relative_convolution():
    rng = np.random.default_rng(14)
    qx = rng.integers(0, 16, (2, 3, 6, 6))
    qw = rng.integers(0, 16, (4, 3, 3, 3)).astype(np.int64)
    zx, zw = 7, np.full(4, 3)
    b = rng.integers(-50, 50, 4)
    acc = _conv_acc(qx.astype(np.int32), zx, qw, zw, b, 1, 1, "t")
    want = T.conv2d_fp((qx - zx).astype(np.float64), (qw - 3).astype(np.float64), 1, 1)
    want = want + b[None, :, None, None]
    assert np.array_equal(acc, want.astype(np.int64))


def test_depthwise_acc_matches_relative_convolution():
    rng = np.random.default_rng(15)
    qx = rng.integers(0, 16, (2, 3, 6, 6))
    qw = rng.integers(0, 16, (3, 1, 3, 3)).astype(np.int64)
    b = rng.integers(-50, 50, 3)
    acc = _depthwise_acc(qx.astype(np.int32), 7, qw, np.full(3, 3), b, 1, 0, "t")
    want = T.depthwise_conv2d_fp((qx - 7).astype(np.float64), (qw - 3).astype(np.float64), 1, 0)
    want = want + b[None, :, None, None]
    assert np.array_equal(acc, want.astype(np.int64))


def test_fused_relu_output_storage_sits_above_zero_point():
    rng = np.random.default_rng(16)
    g = build_mlp([3, 8, 3], seed=16)
    x = rng.normal(size=(16, 3))
    _frozen(g, x)
    _, env = run_int_graph(g, x, capture=True)
    spec = g.act_slots[g.edge_slot["act1.out"]].spec
    assert env["act1.out"].min() >= int(spec.zero_point[0])


def test_huge_bias_overflows_int32_accumulator():
    g = Graph(input_shape=(2,))
    g.add_linear("fc", np.full((2, 2), 1e-6), bias=np.array([5.0, 5.0]))
    attach_quantizers(g, QuantConfig())
    minmax_calibrate(g, np.array([[0.5, 1.0], [-1.0, 0.25]]))
    freeze(g)
    # the bias lands on the accumulator grid s_w * s_x ~ 1e-11
    assert g.bias_int["fc"].max() > 2**31
    with pytest.raises(AccumulatorOverflowError):
        run_int_graph(g, np.array([[0.5, 1.0]]))
