"""Learned rounding: soft-weight machinery and layerwise optimization."""

import itertools

import numpy as np

from conftest import minmax_calibrate
from quantkit.adaround import (
    AdaRoundConfig,
    GAMMA,
    ZETA,
    adaround_graph,
    adaround_layer,
    h_of_v,
    qubo_objective,
    rounding_reg,
    _init_v,
)
from quantkit.datasets import build_mlp
from quantkit.graph import QuantConfig, attach_quantizers, forward_fp, forward_sim_quant
from quantkit.quantizer import fake_quant_fp
from quantkit.ranges import RangeMethod, fit_spec


def test_rectified_sigmoid_saturates_and_centers():
    assert abs(h_of_v(0.0) - 0.5) < 1e-15  # sigmoid 0.5 stretched lands back on 0.5
    assert h_of_v(50.0) == 1.0
    assert h_of_v(-50.0) == 0.0
    v = np.linspace(-6, 6, 200)
    h = h_of_v(v)
    assert np.all(np.diff(h) >= 0) and h.min() == 0.0 and h.max() == 1.0


def test_rounding_reg_zero_iff_binary():
    assert rounding_reg(np.array([40.0, -40.0, 35.0]), beta=2.0) == 0.0
    assert rounding_reg(np.zeros(7), beta=4.0) == 7.0  # h = 0.5 contributes 1 each
    # h = 0.75: per-element 1 - |0.5|^2
    q = (0.75 - GAMMA) / (ZETA - GAMMA)
    v = np.log(q / (1 - q))
    assert abs(rounding_reg(np.array([v]), beta=2.0) - 0.75) < 1e-9


def test_qubo_objective_hand_values():
    assert abs(qubo_objective(np.array([[0.1]]), np.array([[2.0]])) - 0.04) < 1e-15
    rng = np.random.default_rng(0)
    dw = rng.normal(size=(3, 4))
    x = rng.normal(size=(10, 4))
    want = float(np.mean((x @ dw.T) ** 2))
    assert abs(qubo_objective(dw, x) - want) < 1e-15


def test_init_v_reproduces_float_weights():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(4, 5))
    spec = fit_spec(w, "symmetric-signed", 4, RangeMethod.MINMAX)
    s = spec.scale[0]
    base = np.floor(w / s)
    v = _init_v(w, s, base)
    assert np.max(np.abs((base + h_of_v(v)) * s - w)) < 1e-9


def _rounding_problem(seed, shape=(2, 3), n=16, bits=3):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=shape)
    x = rng.normal(size=(n, shape[1]))
    spec = fit_spec(w, "symmetric-signed", bits, RangeMethod.MINMAX)
    return w, x, spec


def _exhaustive_best(w, x, spec):
    """Brute-force the best up/down mask under the reconstruction MSE."""
    s = spec.scale[0]
    n, p = spec.relative_bounds()
    base = np.floor(w / s)
    target = x @ w.T
    best = np.inf
    for mask in itertools.product((0.0, 1.0), repeat=w.size):
        wq = s * np.clip(base + np.array(mask).reshape(w.shape), n[0], p[0])
        mse = float(np.mean((x @ wq.T - target) ** 2))
        best = min(best, mse)
    return best


def test_learned_rounding_matches_exhaustive_on_tiny_layer():
    from quantkit.graph import Graph

    for seed in range(3):
        w, x, spec = _rounding_problem(seed)
        g = Graph(input_shape=(3,))
        g.add_linear("fc", w.copy())
        layer = g.layer("fc")
        cfg = AdaRoundConfig(iterations=1200, batch_size=16, seed=seed)
        rec = adaround_layer(g, layer, spec, x, x, cfg, np.random.default_rng(seed))
        best = _exhaustive_best(w, x, spec)
        got = min(rec["learned_mse"], rec["nearest_mse"])
        assert got <= best * 1.05 + 1e-12


def test_learned_rounding_beats_nearest_and_lands_on_grid():
    from quantkit.graph import Graph

    w, x, spec = _rounding_problem(7, shape=(4, 6), n=64, bits=3)
    g = Graph(input_shape=(6,))
    g.add_linear("fc", w.copy())
    rec = adaround_layer(g, g.layer("fc"), spec, x, x,
                         AdaRoundConfig(iterations=1500, seed=7), np.random.default_rng(7))
    assert not rec["fallback"]
    assert rec["learned_mse"] < rec["nearest_mse"]
    assert rec["flipped_weights"] > 0
    assert rec["binary_fraction"] > 0.99
    # the rewritten weight is made of exact grid points
    wq = g.layer("fc").params["weight"]
    assert np.max(np.abs(fake_quant_fp(wq, spec) - wq)) < 1e-12


def test_correlated_inputs_reward_coordinated_rounding():
    # both weights sit 0.36 above a grid step; on near-identical inputs the
    # two round-down errors add, so flipping one weight up wins
    from quantkit.graph import Graph
    from quantkit.quantizer import QuantizerSpec

    rng = np.random.default_rng(3)
    w = np.array([[0.34, 0.59]])
    x1 = rng.normal(size=(32, 1))
    x = np.hstack([x1, x1 + 0.01 * rng.normal(size=(32, 1))])
    spec = QuantizerSpec("symmetric-signed", 4, 0.25, 0.0)
    g = Graph(input_shape=(2,))
    g.add_linear("fc", w.copy())
    rec = adaround_layer(g, g.layer("fc"), spec, x, x,
                         AdaRoundConfig(iterations=600, seed=3), np.random.default_rng(3))
    assert rec["learned_mse"] < rec["nearest_mse"]
    assert rec["flipped_weights"] == 1

    # brute force over the 4 masks: nearest is mask (0,0) and not optimal
    base = np.floor(w / 0.25)
    target = x @ w.T
    mses = []
    for mask in itertools.product((0.0, 1.0), repeat=2):
        wq = 0.25 * (base + np.array(mask).reshape(1, 2))
        mses.append(float(np.mean((x @ wq.T - target) ** 2)))
    assert abs(rec["nearest_mse"] - mses[0]) < 1e-12
    assert min(mses) < mses[0]
    assert rec["learned_mse"] <= min(mses) * 1.05


def test_chosen_weight_never_worse_than_nearest():
    from quantkit.graph import Graph

    for seed in range(5):
        w, x, spec = _rounding_problem(seed + 20, shape=(3, 4), n=24, bits=3)
        g = Graph(input_shape=(4,))
        g.add_linear("fc", w.copy())
        target = x @ w.T
        rec = adaround_layer(g, g.layer("fc"), spec, x, x,
                             AdaRoundConfig(iterations=150, seed=seed), np.random.default_rng(seed))
        wq = g.layer("fc").params["weight"]
        got = float(np.mean((x @ wq.T - target) ** 2))
        assert got <= rec["nearest_mse"] + 1e-15


def test_adaround_graph_visits_fitted_layers_in_order():
    g = build_mlp([3, 8, 8, 4], seed=30)
    ref = g.copy()
    attach_quantizers(g, QuantConfig(weight_bits=3))
    rng = np.random.default_rng(30)
    calib = rng.normal(size=(32, 3))
    minmax_calibrate(g, calib)
    g.weight_slots["fc3"].enabled = False

    records = adaround_graph(g, ref, calib, AdaRoundConfig(iterations=200, seed=30))
    assert [r["layer"] for r in records] == ["fc1", "fc2"]
    assert np.array_equal(g.layer("fc3").params["weight"], ref.layer("fc3").params["weight"])


def test_adaround_graph_improves_end_to_end_output():
    g = build_mlp([2, 10, 10, 2], seed=31)
    ref = g.copy()
    attach_quantizers(g, QuantConfig(weight_bits=3))
    rng = np.random.default_rng(31)
    calib = rng.normal(size=(48, 2))
    minmax_calibrate(g, calib)
    weight_sids = {n + ".w" for n in g.weight_slots}

    y_fp = forward_fp(ref, calib)
    y_nearest = forward_sim_quant(g, calib, active=weight_sids)
    adaround_graph(g, ref, calib, AdaRoundConfig(iterations=800, seed=31))
    y_learned = forward_sim_quant(g, calib, active=weight_sids)
    assert np.mean((y_learned - y_fp) ** 2) < np.mean((y_nearest - y_fp) ** 2)
