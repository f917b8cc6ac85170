"""Adaptive weight rounding.

Rounding each weight to its nearest grid point is not the rounding that best
preserves the layer's output. This module learns, per weight, whether to
round down or up: a continuous variable V parameterizes a rectified sigmoid
h(V) in [0, 1] added to floor(W/s), and is trained to minimize the layer's
output reconstruction error plus a regularizer that anneals h toward a hard
0/1 decision.

Layers are optimized one at a time in topological order. The reconstruction
is asymmetric: the target comes from the float reference network on float
inputs, while the candidate sees the quantized activations produced by the
already-quantized preceding layers.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import NumericalError
from .graph import Graph, Layer, LayerKind, forward_fp, forward_sim_quant, layer_forward
from .quantizer import QuantizerSpec, fake_quant_fp

ZETA = 1.1
GAMMA = -0.1


@dataclass
class AdaRoundConfig:
    iterations: int = 2000
    batch_size: int = 32
    lr: float = 1e-2
    reg_lambda: float = 0.1
    beta_start: float = 20.0
    beta_end: float = 2.0
    warmup: float = 0.2  # fraction of iterations with the regularizer off
    seed: int = 0


def rectified_sigmoid(v: T.Node) -> T.Node:
    """h(V) = clip(sigmoid(V) * (zeta - gamma) + gamma, 0, 1)."""
    return T.clip(T.shift(T.scale(T.sigmoid(v), ZETA - GAMMA), GAMMA), 0.0, 1.0)


def h_of_v(v: np.ndarray) -> np.ndarray:
    """Plain-array rectified sigmoid, for inspection outside the autograd path."""
    return np.clip(1.0 / (1.0 + np.exp(-np.asarray(v, dtype=np.float64))) * (ZETA - GAMMA) + GAMMA, 0.0, 1.0)


def rounding_reg(v: np.ndarray, beta: float) -> float:
    """Sum of 1 - |2h(V) - 1|^beta; zero exactly when every h is binary."""
    h = h_of_v(v)
    return float(np.sum(1.0 - np.abs(2.0 * h - 1.0) ** beta))


def qubo_objective(delta_w: np.ndarray, x_samples: np.ndarray) -> float:
    """Mean squared output perturbation a weight error causes on sample inputs.

    Rounding choice quality for a linear layer reduces to this quadratic in
    the up/down perturbation, which makes it the reference objective for
    comparing rounding masks against exhaustive search.
    """
    delta_w = np.asarray(delta_w, dtype=np.float64)
    y = np.asarray(x_samples, dtype=np.float64) @ delta_w.reshape(delta_w.shape[0], -1).T
    return float(np.mean(y * y))


def _init_v(w: np.ndarray, s_view: np.ndarray, base: np.ndarray) -> np.ndarray:
    # start h at the fractional remainder so the soft weights equal the floats
    frac = w / s_view - base
    q = np.clip((frac - GAMMA) / (ZETA - GAMMA), 1e-4, 1.0 - 1e-4)
    return np.log(q / (1.0 - q))


def _beta_at(step: int, cfg: AdaRoundConfig) -> float | None:
    warm = cfg.warmup * cfg.iterations
    if step < warm:
        return None
    span = max(cfg.iterations - warm, 1.0)
    return cfg.beta_start + (cfg.beta_end - cfg.beta_start) * (step - warm) / span


def _apply(layer: Layer, x: T.Node, w: T.Node, bias: np.ndarray, act, clip) -> T.Node:
    if layer.kind is LayerKind.LINEAR:
        y = T.matmul(x, T.transpose2d(w))
    elif layer.kind is LayerKind.CONV2D:
        y = T.conv2d(x, w, layer.attrs["stride"], layer.attrs["padding"])
    else:
        y = T.depthwise_conv2d(x, w, layer.attrs["stride"], layer.attrs["padding"])
    if bias is not None:
        y = T.add_bias(y, T.leaf(bias), axis=1)
    if act is LayerKind.RELU:
        y = T.relu(y)
    elif act is LayerKind.RELU6:
        y = T.relu6(y, clip)
    return y


def _views(spec: QuantizerSpec, ndim: int):
    s, _ = spec.broadcast(ndim)
    n, p = spec.relative_bounds()
    if spec.per_channel:
        shape = [1] * ndim
        shape[spec.axis] = spec.n_channels
        n, p = n.reshape(shape), p.reshape(shape)
    else:
        n, p = n[0], p[0]
    return s, n, p


def _recon_mse(layer: Layer, x: np.ndarray, w: np.ndarray, act, clip, target: np.ndarray) -> float:
    y = layer_forward(layer, [x], weight=w)
    if act is LayerKind.RELU:
        y = np.maximum(y, 0.0)
    elif act is LayerKind.RELU6:
        y = np.clip(y, 0.0, clip if np.ndim(clip) == 0 else clip.reshape((1, -1) + (1,) * (y.ndim - 2)))
    d = y - target
    return float(np.mean(d * d))


def adaround_layer(
    graph: Graph,
    layer: Layer,
    spec: QuantizerSpec,
    x_q: np.ndarray,
    x_fp: np.ndarray,
    cfg: AdaRoundConfig,
    rng: np.random.Generator,
) -> dict:
    """Optimize one layer's rounding; rewrites its weight to grid values.

    The rewritten weight consists of exact grid points, so the ordinary
    nearest-rounding weight quantizer reproduces the learned integers from
    then on. Falls back to nearest rounding if the learned rounding ends up
    worse on the full calibration pool, which can happen on very short runs.
    """
    w = layer.params["weight"]
    bias = layer.params.get("bias")
    fused = graph.fused_activation(layer)
    act = fused.kind if fused is not None else None
    clip = fused.params["clip"] if fused is not None and fused.kind is LayerKind.RELU6 else None
    clip_arr = None
    if act is LayerKind.RELU6:
        clip_arr = float(clip[0]) if clip.shape[0] == 1 else clip

    target = layer_forward(layer, [x_fp])
    if act is LayerKind.RELU:
        target = np.maximum(target, 0.0)
    elif act is LayerKind.RELU6:
        target = np.clip(target, 0.0, clip if clip.shape[0] == 1 else clip.reshape((1, -1) + (1,) * (target.ndim - 2)))

    s_view, n_view, p_view = _views(spec, w.ndim)
    base = np.floor(w / s_view)
    v = _init_v(w, s_view, base)
    base_leaf = T.leaf(base)

    w_nearest = fake_quant_fp(w, spec)
    nearest_mse = _recon_mse(layer, x_q, w_nearest, act, clip_arr, target)

    state = T.AdamState([v])
    n_samples = x_q.shape[0]
    first_loss = None
    for step in range(cfg.iterations):
        # pools at or below the batch size run full-batch and noise-free
        if n_samples <= cfg.batch_size:
            idx = np.arange(n_samples)
        else:
            idx = rng.integers(0, n_samples, size=cfg.batch_size)
        v_leaf = T.leaf(v)
        h = rectified_sigmoid(v_leaf)
        w_soft = T.clip(T.add(base_leaf, h), n_view, p_view)
        if spec.per_channel:
            w_soft = T.scale_channels(w_soft, T.leaf(spec.scale), axis=spec.axis)
        else:
            w_soft = T.scale(w_soft, float(spec.scale[0]))
        y = _apply(layer, T.leaf(x_q[idx]), w_soft, bias, act, clip_arr)
        loss = T.mse_loss(y, target[idx])
        beta = _beta_at(step, cfg)
        if beta is not None:
            # sum of 1 - |2h - 1|^beta, pulling h toward 0 or 1 as beta anneals
            gate = T.power(T.absolute(T.shift(T.scale(h, 2.0), -1.0)), beta)
            reg = T.shift(T.reduce_sum(T.neg(gate)), float(gate.data.size))
            loss = T.add(loss, T.scale(reg, cfg.reg_lambda))
        if not np.all(np.isfinite(loss.data)):
            raise NumericalError("adaround loss diverged on layer %r" % layer.name)
        if first_loss is None:
            first_loss = loss.data.item()
        T.backward(loss)
        v = T.adam_step([v], [v_leaf.grad], state, cfg.lr)[0]

    h_final = h_of_v(v)
    hard = (h_final >= 0.5).astype(np.float64)
    w_soft = s_view * np.clip(base + h_final, n_view, p_view)
    w_hard = s_view * np.clip(base + hard, n_view, p_view)
    learned_mse = _recon_mse(layer, x_q, w_hard, act, clip_arr, target)

    fallback = learned_mse > nearest_mse
    chosen = w_nearest if fallback else w_hard
    flipped = int(np.sum(np.rint(chosen / s_view) != np.rint(w_nearest / s_view)))
    layer.params["weight"] = chosen
    binary = np.minimum(h_final, 1.0 - h_final) <= 1e-2
    return {
        "layer": layer.name,
        "nearest_mse": nearest_mse,
        "learned_mse": learned_mse,
        "fallback": bool(fallback),
        "flipped_weights": flipped,
        "first_loss": first_loss,
        "final_loss": _recon_mse(layer, x_q, w_soft, act, clip_arr, target),
        "final_reg": rounding_reg(v, cfg.beta_end),
        "binary_fraction": float(np.mean(binary)),
    }


def adaround_graph(graph: Graph, ref_graph: Graph, calib: np.ndarray, cfg: AdaRoundConfig | None = None) -> list:
    """Run adaptive rounding over every weight-quantized layer in order."""
    cfg = cfg or AdaRoundConfig()
    rng = np.random.default_rng(cfg.seed)
    weight_sids = {name + ".w" for name in graph.weight_slots}
    _, env_fp = forward_fp(ref_graph, calib, capture=True)
    records = []
    for layer in graph.linear_layers():
        slot = graph.weight_slots.get(layer.name)
        if slot is None or slot.spec is None or not slot.enabled:
            continue
        _, env_q = forward_sim_quant(graph, calib, active=weight_sids, capture=True)
        records.append(
            adaround_layer(graph, layer, slot.spec, env_q[layer.inputs[0]], env_fp[layer.inputs[0]], cfg, rng)
        )
    return records
