"""Graph rewrites that prepare a float network for quantization.

All transforms are function-preserving on the float path (exactly, or up to
a documented approximation) and operate in place. Each returns a record of
what it changed so pipeline reports can show their work.
"""

import math

import numpy as np

from .errors import ConfigurationError, ContractError, UnsupportedPatternError
from .graph import Graph, Layer, LayerKind, LINEAR_FAMILY, forward_fp, forward_sim_quant
from .quantizer import fake_quant_fp

_ACTS = {LayerKind.RELU, LayerKind.RELU6}


# ---------------------------------------------------------------------------
# batch-norm folding
# ---------------------------------------------------------------------------


def fold_bn(graph: Graph) -> list:
    """Fold every batch-norm into the preceding linear-family layer.

    The producer keeps its output edge name rewritten to the BN's, so the rest
    of the graph is untouched. Gamma and beta are kept as annotations on the
    producer; the data-free range and bias methods need them after the BN
    layer itself is gone. Raises UnsupportedPatternError when a BN does not
    directly follow a linear-family layer it can fold into.
    """
    if graph.act_slots or graph.weight_slots:
        raise ContractError("fold batch-norm before attaching quantizers")
    records = []
    for bn in [l for l in graph.layers if l.kind is LayerKind.BATCHNORM]:
        src_edge = bn.inputs[0]
        producer_name = graph.producer(src_edge)
        if producer_name is None:
            raise UnsupportedPatternError("batch-norm %r reads the graph input" % bn.name)
        producer = graph.layer(producer_name)
        if producer.kind not in LINEAR_FAMILY:
            raise UnsupportedPatternError(
                "batch-norm %r follows %r (%s), not a foldable layer" % (bn.name, producer.name, producer.kind.value)
            )
        if len(graph.consumers(src_edge)) != 1:
            raise UnsupportedPatternError("batch-norm %r shares its input edge with other consumers" % bn.name)
        gamma, beta = bn.params["gamma"], bn.params["beta"]
        mean, var = bn.params["mean"], bn.params["var"]
        denom = np.sqrt(var + bn.attrs["eps"])
        k_out = producer.params["weight"].shape[0]
        if gamma.shape[0] != k_out:
            raise UnsupportedPatternError("batch-norm %r width does not match %r" % (bn.name, producer.name))
        factor = gamma / denom
        producer.params["weight"] = producer.params["weight"] * factor.reshape((-1,) + (1,) * (producer.params["weight"].ndim - 1))
        old_bias = producer.params.get("bias", np.zeros(k_out))
        producer.params["bias"] = beta + (old_bias - mean) * factor
        graph.bn_meta[producer.name] = {"gamma": gamma.copy(), "beta": beta.copy()}
        # splice the BN out: producer takes over its output edge
        del graph._producer[producer.output]
        producer.output = bn.output
        graph._producer[bn.output] = producer.name
        graph.layers.remove(bn)
        del graph._by_name[bn.name]
        records.append({"folded": bn.name, "into": producer.name})
    return records


# ---------------------------------------------------------------------------
# cross-layer equalization
# ---------------------------------------------------------------------------


def _out_channel_range(layer: Layer) -> np.ndarray:
    w = layer.params["weight"]
    return np.abs(w).max(axis=tuple(range(1, w.ndim)))


def _in_channel_range(layer: Layer) -> np.ndarray:
    w = layer.params["weight"]
    if layer.kind is LayerKind.DEPTHWISE_CONV2D:
        return np.abs(w).max(axis=(1, 2, 3))
    return np.abs(w).max(axis=(0,) + tuple(range(2, w.ndim)))


def _scale_out_channels(layer: Layer, s: np.ndarray):
    w = layer.params["weight"]
    layer.params["weight"] = w / s.reshape((-1,) + (1,) * (w.ndim - 1))
    if "bias" in layer.params:
        layer.params["bias"] = layer.params["bias"] / s


def _scale_in_channels(layer: Layer, s: np.ndarray):
    w = layer.params["weight"]
    if layer.kind is LayerKind.DEPTHWISE_CONV2D:
        layer.params["weight"] = w * s.reshape((-1,) + (1,) * (w.ndim - 1))
    else:
        layer.params["weight"] = w * s.reshape((1, -1) + (1,) * (w.ndim - 2))


def _sole_consumer(graph: Graph, edge: str):
    cons = graph.consumers(edge)
    if len(cons) != 1:
        return None
    return graph.layer(cons[0])


def equalization_pairs(graph: Graph) -> list:
    """Consecutive linear-family pairs, optionally separated by ReLU/ReLU6.

    The activation between must be positive-homogeneous for the rescale to
    preserve function, which holds for ReLU always and for ReLU6 with its
    clip rescaled per channel.
    """
    pairs = []
    for layer in graph.linear_layers():
        nxt = _sole_consumer(graph, layer.output)
        act = None
        if nxt is not None and nxt.kind in _ACTS:
            act = nxt
            nxt = _sole_consumer(graph, act.output)
        if nxt is None or nxt.kind not in LINEAR_FAMILY:
            continue
        k1 = layer.params["weight"].shape[0]
        if _in_channel_range(nxt).shape[0] != k1:
            continue
        pairs.append((layer, act, nxt))
    return pairs


def cle(graph: Graph, max_sweeps: int = 20, tol: float = 1e-4) -> dict:
    """Cross-layer equalization over all eligible pairs.

    Each pair's channels are rescaled so both layers see the same per-channel
    weight range: s_i = sqrt(r1_i * r2_i) / r2_i. Sweeps repeat until every
    scale is within `tol` of 1 or the sweep budget runs out. Dead channels
    (zero range on either side) keep scale 1. ReLU6 clips between a pair are
    divided per channel, which turns a scalar clip into a vector one.
    """
    if graph.has_batchnorm():
        raise ContractError("fold batch-norm before equalization")
    pairs = equalization_pairs(graph)
    sweeps = 0
    converged = not pairs
    clip_rescaled = []
    cum = [np.ones(p[0].params["weight"].shape[0]) for p in pairs]
    for sweep in range(max_sweeps):
        sweeps = sweep + 1
        worst = 0.0
        for i, (first, act, second) in enumerate(pairs):
            r1 = _out_channel_range(first)
            r2 = _in_channel_range(second)
            live = (r1 > 0) & (r2 > 0)
            s = np.ones_like(r1)
            s[live] = np.sqrt(r1[live] * r2[live]) / r2[live]
            _scale_out_channels(first, s)
            _scale_in_channels(second, s)
            cum[i] = cum[i] * s
            if act is not None and act.kind is LayerKind.RELU6:
                act.params["clip"] = np.broadcast_to(act.params["clip"], s.shape) / s
                if act.name not in clip_rescaled:
                    clip_rescaled.append(act.name)
            worst = max(worst, float(np.abs(s - 1.0).max()))
        if worst < tol:
            converged = True
            break
    pair_stats = [
        {"first": a.name, "second": c.name, "scale_min": float(s.min()), "scale_max": float(s.max())}
        for (a, _, c), s in zip(pairs, cum)
    ]
    return {
        "pairs": [(a.name, c.name) for a, _, c in pairs],
        "pair_stats": pair_stats,
        "sweeps": sweeps if pairs else 0,
        "converged": converged,
        "clip_rescaled": clip_rescaled,
    }


# ---------------------------------------------------------------------------
# high-bias absorption
# ---------------------------------------------------------------------------


def absorb_high_bias(graph: Graph, calib: np.ndarray | None = None) -> list:
    """Shift positive bias headroom from one layer into the next.

    For a layer -> ReLU -> layer chain, any amount c_i that the pre-activation
    provably stays above can move across the ReLU: the first bias drops by c,
    the second absorbs W @ c. With calibration data c is the observed
    per-channel pre-activation minimum (exact on that data); without it, BN
    annotations give the data-free estimate c = max(0, beta - 3*gamma).
    Pairs whose second layer pads are skipped, since padded zeros would not
    receive the compensating shift.
    """
    if calib is None and not graph.bn_meta:
        raise ConfigurationError("high-bias absorption needs calibration data or BN statistics")
    records = []
    env = None
    if calib is not None:
        _, env = forward_fp(graph, calib, capture=True)
    for first, act, second in equalization_pairs(graph):
        if act is None or act.kind is not LayerKind.RELU:
            continue
        if second.kind is not LayerKind.LINEAR and second.attrs.get("padding", 0) != 0:
            records.append({"pair": (first.name, second.name), "skipped": "padding"})
            continue
        if env is not None:
            pre = env[first.output]
            axes = tuple(i for i in range(pre.ndim) if i != 1)
            c = np.maximum(0.0, pre.min(axis=axes))
        elif first.name in graph.bn_meta:
            meta = graph.bn_meta[first.name]
            c = np.maximum(0.0, meta["beta"] - 3.0 * meta["gamma"])
        else:
            records.append({"pair": (first.name, second.name), "skipped": "no statistics"})
            continue
        if not np.any(c > 0):
            records.append({"pair": (first.name, second.name), "absorbed": 0.0})
            continue
        if "bias" not in first.params:
            first.params["bias"] = np.zeros(first.params["weight"].shape[0])
        first.params["bias"] = first.params["bias"] - c
        w2 = second.params["weight"]
        if second.kind is LayerKind.LINEAR:
            shift = w2 @ c
        elif second.kind is LayerKind.DEPTHWISE_CONV2D:
            shift = c * w2.sum(axis=(1, 2, 3))
        else:
            shift = np.einsum("kcij,c->k", w2, c)
        if "bias" not in second.params:
            second.params["bias"] = np.zeros(w2.shape[0])
        second.params["bias"] = second.params["bias"] + shift
        records.append({"pair": (first.name, second.name), "absorbed": float(c.sum()), "c": c.tolist()})
    return records


# ---------------------------------------------------------------------------
# quantization bias correction
# ---------------------------------------------------------------------------


def _channel_mean(v: np.ndarray) -> np.ndarray:
    axes = tuple(i for i in range(v.ndim) if i != 1)
    return v.mean(axis=axes)


def bias_correct_empirical(graph: Graph, ref_graph: Graph, calib: np.ndarray) -> list:
    """Remove the expected output shift introduced by weight quantization.

    Layers are visited in topological order. For each, the mean pre-activation
    on the weight-quantized graph (with every earlier layer already corrected)
    is compared to the float reference; the difference moves into the bias.
    The reference graph carries the pre-quantization weights, which matters
    when adaptive rounding has already rewritten this graph's weights.
    """
    weight_sids = {name + ".w" for name in graph.weight_slots}
    _, env_fp = forward_fp(ref_graph, calib, capture=True)
    records = []
    for layer in graph.linear_layers():
        if graph.weight_slots.get(layer.name) is None or graph.weight_slots[layer.name].spec is None:
            continue
        _, env_q = forward_sim_quant(graph, calib, active=weight_sids, capture=True)
        shift = _channel_mean(env_q[layer.output]) - _channel_mean(env_fp[layer.output])
        if "bias" not in layer.params:
            layer.params["bias"] = np.zeros(layer.params["weight"].shape[0])
        layer.params["bias"] = layer.params["bias"] - shift
        records.append({
            "layer": layer.name,
            "mean_shift": float(np.abs(shift).mean()),
            "max_shift": float(np.abs(shift).max()),
        })
    return records


def _norm_pdf(t: np.ndarray) -> np.ndarray:
    return np.exp(-0.5 * t * t) / math.sqrt(2.0 * math.pi)


def _norm_cdf(t: np.ndarray) -> np.ndarray:
    return np.array([0.5 * (1.0 + math.erf(v / math.sqrt(2.0))) for v in np.asarray(t, dtype=np.float64).ravel()]).reshape(np.shape(t))


def expected_relu_of_normal(mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    """E[max(X, 0)] for X ~ N(mean, std^2), elementwise with broadcasting."""
    scalar = np.ndim(mean) == 0 and np.ndim(std) == 0
    mean, std = np.broadcast_arrays(
        np.asarray(mean, dtype=np.float64), np.asarray(std, dtype=np.float64)
    )
    mean = np.atleast_1d(mean)
    std = np.atleast_1d(std)
    out = np.maximum(mean, 0.0)
    pos = std > 0
    if np.any(pos):
        t = -mean[pos] / std[pos]
        out = out.copy()
        out[pos] = std[pos] * _norm_pdf(t) + mean[pos] * (1.0 - _norm_cdf(t))
    return float(out[0]) if scalar else out


def _bn_relu_input_mean(graph: Graph, layer: Layer) -> np.ndarray | None:
    """Expected per-channel input of `layer` from a BN-annotated ReLU upstream.

    Walks back through flatten and average pooling, which keep per-channel
    means intact. Max pooling does not, so the walk stops there.
    """
    edge = layer.inputs[0]
    crossed_flatten = False
    while True:
        producer_name = graph.producer(edge)
        if producer_name is None:
            return None
        producer = graph.layer(producer_name)
        if producer.kind is LayerKind.FLATTEN:
            crossed_flatten = True
        elif producer.kind is not LayerKind.AVGPOOL2D:
            break
        edge = producer.inputs[0]
    if producer.kind not in _ACTS:
        return None
    source_name = graph.producer(producer.inputs[0])
    if source_name is None or source_name not in graph.bn_meta:
        return None
    meta = graph.bn_meta[source_name]
    mean = expected_relu_of_normal(meta["beta"], np.abs(meta["gamma"]))
    if producer.kind is LayerKind.RELU6:
        mean = np.minimum(mean, np.broadcast_to(producer.params["clip"], mean.shape))
    if crossed_flatten:
        # flattened NCHW keeps channel-major order; repeat each channel mean
        # over its spatial positions to match the linear layer's input width
        in_features = layer.params["weight"].shape[1]
        if in_features % mean.size != 0:
            return None
        mean = np.repeat(mean, in_features // mean.size)
    return mean


def bias_correct_analytic(graph: Graph, ref_graph: Graph) -> list:
    """Data-free bias correction from BN statistics.

    The input to a layer that follows a BN-annotated ReLU is modeled as a
    clipped normal per channel; its closed-form mean times the weight
    quantization error gives the expected output shift, which is subtracted
    from the bias. Layers without such provenance are skipped and recorded.
    """
    records = []
    for layer in graph.linear_layers():
        slot = graph.weight_slots.get(layer.name)
        if slot is None or slot.spec is None:
            continue
        ex = _bn_relu_input_mean(graph, layer)
        if ex is None:
            records.append({"layer": layer.name, "skipped": "no BN statistics upstream"})
            continue
        w_ref = ref_graph.layer(layer.name).params["weight"]
        dw = fake_quant_fp(layer.params["weight"], slot.spec) - w_ref
        if layer.kind is LayerKind.LINEAR:
            shift = dw @ ex
        elif layer.kind is LayerKind.DEPTHWISE_CONV2D:
            shift = ex * dw.sum(axis=(1, 2, 3))
        else:
            shift = np.einsum("kcij,c->k", dw, ex)
        if "bias" not in layer.params:
            layer.params["bias"] = np.zeros(layer.params["weight"].shape[0])
        layer.params["bias"] = layer.params["bias"] - shift
        records.append({
            "layer": layer.name,
            "mean_shift": float(np.abs(shift).mean()),
            "max_shift": float(np.abs(shift).max()),
        })
    return records
