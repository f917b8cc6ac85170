"""Integer-only reference executor for frozen graphs.

Activations travel between layers as int32 storage integers. Matrix and
convolution accumulation runs in int64 so intermediate sums can be checked
against the int32 accumulator the format assumes: the bias is loaded first,
then products accumulate in index order, and any partial sum leaving int32
raises AccumulatorOverflowError naming the layer.

Asymmetric grids are handled with the four-term expansion of
sum((q_w - z_w) * (q_x - z_x)): the data-dependent terms are computed at run
time and the two constant terms are folded into the bias once per layer.
Requantization between grids dequantizes to float64 and requantizes with the
same arithmetic the simulated path uses, which is what makes the two paths
agree bit for bit.
"""

import numpy as np

from . import tensor as T
from .errors import AccumulatorOverflowError, ContractError
from .graph import Graph, Layer, LayerKind, LINEAR_FAMILY, requant_real
from .quantizer import QuantizerSpec, quantize_int

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1


def _check_acc(terms: np.ndarray, bias: np.ndarray, expansion: np.ndarray, layer: str):
    """Walk the canonical accumulation order and flag int32 overflow.

    terms holds the per-index products (q_w - z_w) * (q_x - z_x) along the
    last axis; bias broadcasts against the leading axes. Also verifies the
    folded-expansion total equals the canonical sum.
    """
    psum = bias[..., None] + np.cumsum(terms, axis=-1)
    if psum.max(initial=bias.max()) > INT32_MAX or psum.min(initial=bias.min()) < INT32_MIN:
        raise AccumulatorOverflowError("accumulator overflow in layer %r" % layer)
    total = psum[..., -1] if terms.shape[-1] else np.broadcast_to(bias, psum.shape[:-1])
    assert np.array_equal(total, expansion), "expansion disagrees with canonical accumulation"


def _storage(q: np.ndarray) -> np.ndarray:
    if q.max(initial=0) > INT32_MAX or q.min(initial=0) < INT32_MIN:
        raise AccumulatorOverflowError("value does not fit int32 storage")
    return q.astype(np.int32)


def _weight_ints(layer: Layer, spec: QuantizerSpec):
    qw = quantize_int(layer.params["weight"], spec).astype(np.int64)
    _, zw = spec.broadcast(qw.ndim)
    return qw, np.asarray(zw)


def _linear_acc(qx, zx, qw, zw, b_int, name):
    """Accumulate a linear layer: qx (N,D) storage ints, qw (K,D)."""
    qx = qx.astype(np.int64)
    t1 = qx @ qw.T
    sx = qx.sum(axis=1)
    zw_row = zw.reshape(-1) if zw.ndim else zw.reshape(1)
    zw_k = np.broadcast_to(zw_row, (qw.shape[0],)).astype(np.int64)
    static = b_int - int(zx) * qw.sum(axis=1) + qw.shape[1] * zw_k * int(zx)
    acc = t1 - zw_k[None, :] * sx[:, None] + static[None, :]
    kx = qx - int(zx)
    for k in range(qw.shape[0]):
        _check_acc((qw[k] - zw_k[k])[None, :] * kx, np.full(qx.shape[0], b_int[k]), acc[:, k], name)
    return acc


def _conv_cols(qx, zx, kh, kw, stride, padding):
    """Padded integer windows flattened to (N, Hout, Wout, C*kh*kw)."""
    if padding:
        qx = np.pad(qx, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=int(zx))
    win = np.lib.stride_tricks.sliding_window_view(qx, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, Hout, Wout, kh, kw) -> (N, Hout, Wout, C, kh, kw)
    win = win.transpose(0, 2, 3, 1, 4, 5)
    n, ho, wo = win.shape[:3]
    return win.reshape(n, ho, wo, -1).astype(np.int64)


def _conv_acc(qx, zx, qw, zw, b_int, stride, padding, name):
    """Accumulate a conv layer: qx (N,C,H,W) storage ints, qw (K,C,kh,kw)."""
    k_out = qw.shape[0]
    cols = _conv_cols(qx, zx, qw.shape[2], qw.shape[3], stride, padding)
    qwm = qw.reshape(k_out, -1)
    d = qwm.shape[1]
    zw_k = np.broadcast_to(zw.reshape(-1) if zw.ndim else zw.reshape(1), (k_out,)).astype(np.int64)
    t1 = cols @ qwm.T  # (N, Hout, Wout, K)
    sx = cols.sum(axis=-1)
    static = b_int - int(zx) * qwm.sum(axis=1) + d * zw_k * int(zx)
    acc = t1 - zw_k * sx[..., None] + static
    kcols = cols - int(zx)
    for k in range(k_out):
        _check_acc((qwm[k] - zw_k[k]) * kcols, np.full(cols.shape[:3], b_int[k]), acc[..., k], name)
    return np.moveaxis(acc, -1, 1)


def _depthwise_acc(qx, zx, qw, zw, b_int, stride, padding, name):
    """Accumulate a depthwise conv: qx (N,C,H,W), qw (C,1,kh,kw)."""
    c = qw.shape[0]
    kh, kw = qw.shape[2], qw.shape[3]
    if padding:
        qx = np.pad(qx, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=int(zx))
    win = np.lib.stride_tricks.sliding_window_view(qx, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win.reshape(win.shape[:4] + (-1,)).astype(np.int64)  # (N, C, Ho, Wo, kh*kw)
    qwm = qw.reshape(c, -1)
    d = qwm.shape[1]
    zw_c = np.broadcast_to(zw.reshape(-1) if zw.ndim else zw.reshape(1), (c,)).astype(np.int64)
    t1 = np.einsum("nchwd,cd->nchw", win, qwm)
    sx = win.sum(axis=-1)
    static = b_int - int(zx) * qwm.sum(axis=1) + d * zw_c * int(zx)
    acc = t1 - zw_c[None, :, None, None] * sx + static[None, :, None, None]
    kwin = win - int(zx)
    for ch in range(c):
        _check_acc(
            (qwm[ch] - zw_c[ch]) * kwin[:, ch],
            np.full((win.shape[0],) + win.shape[2:4], b_int[ch]),
            acc[:, ch],
            name,
        )
    return acc


def _dequant_edge(q: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    s, z = spec.broadcast(q.ndim)
    return s * (q.astype(np.float64) - z)


def run_int_graph(graph: Graph, x, capture: bool = False):
    """Execute a frozen graph on the integer path; returns float64 output.

    The returned output is the dequantized value of the output edge, so it
    compares directly (and, by design, bit-exactly) against the simulated
    path on the same frozen graph.
    """
    if not graph.frozen:
        raise ContractError("integer execution requires a frozen graph")

    def espec(edge):
        sid = graph.edge_slot.get(edge)
        if sid is None:
            raise ContractError("edge %r carries no quantizer" % edge)
        return graph.act_slots[sid].spec

    env = {}
    in_spec = espec(graph.input_name)
    env[graph.input_name] = _storage(quantize_int(np.asarray(x, dtype=np.float64), in_spec))

    skip = set()
    for layer in graph.layers:
        if layer.name in skip:
            continue
        ins = [env[e] for e in layer.inputs]
        if layer.kind in LINEAR_FAMILY:
            x_spec = espec(layer.inputs[0])
            zx = x_spec.zero_point[0]
            wspec = graph.weight_slots[layer.name].spec
            qw, zw = _weight_ints(layer, wspec)
            b_int = graph.bias_int[layer.name]
            if layer.kind is LayerKind.LINEAR:
                acc = _linear_acc(ins[0], zx, qw, zw, b_int, layer.name)
            elif layer.kind is LayerKind.CONV2D:
                acc = _conv_acc(ins[0], zx, qw, zw, b_int, layer.attrs["stride"], layer.attrs["padding"], layer.name)
            else:
                acc = _depthwise_acc(
                    ins[0], zx, qw, zw, b_int, layer.attrs["stride"], layer.attrs["padding"], layer.name
                )
            c = wspec.scale * x_spec.scale[0]
            cview = c.reshape((1, c.shape[0]) + (1,) * (acc.ndim - 2)) if c.shape[0] > 1 else c[0]
            v = acc.astype(np.float64) * cview
            fused = graph.fused_activation(layer)
            if fused is not None:
                skip.add(fused.name)
                out_edge, act, clip = fused.output, fused.kind, fused.params.get("clip")
            else:
                out_edge, act, clip = layer.output, None, None
            out_spec = espec(out_edge)
            k = requant_real(v, out_spec, act, clip)
            env[out_edge] = _storage(k.astype(np.int64) + int(out_spec.zero_point[0]))
        elif layer.kind in (LayerKind.RELU, LayerKind.RELU6):
            in_sp = espec(layer.inputs[0])
            out_spec = espec(layer.output)
            v = _dequant_edge(ins[0], in_sp)
            k = requant_real(v, out_spec, layer.kind, layer.params.get("clip"))
            env[layer.output] = _storage(k.astype(np.int64) + int(out_spec.zero_point[0]))
        elif layer.kind is LayerKind.ADD:
            out_spec = espec(layer.output)
            specs = [espec(e) for e in layer.inputs]
            if layer.attrs.get("tied"):
                z = int(out_spec.zero_point[0])
                lo, hi = out_spec.int_bounds()
                total = ins[0].astype(np.int64) + ins[1].astype(np.int64) - z
                env[layer.output] = _storage(np.clip(total, lo, hi))
            else:
                v = _dequant_edge(ins[0], specs[0]) + _dequant_edge(ins[1], specs[1])
                k = requant_real(v, out_spec)
                env[layer.output] = _storage(k.astype(np.int64) + int(out_spec.zero_point[0]))
        elif layer.kind is LayerKind.CONCAT:
            out_spec = espec(layer.output)
            z_out = int(out_spec.zero_point[0])
            parts = []
            for e, q in zip(layer.inputs, ins):
                k = requant_real(_dequant_edge(q, espec(e)), out_spec)
                parts.append(k.astype(np.int64) + z_out)
            env[layer.output] = _storage(np.concatenate(parts, axis=layer.attrs["axis"]))
        elif layer.kind is LayerKind.AVGPOOL2D:
            spec = espec(layer.inputs[0])
            z = int(spec.zero_point[0])
            n, p = spec.relative_bounds()
            kern, stride = layer.attrs["kernel"], layer.attrs["stride"]
            k = ins[0].astype(np.int64) - z
            win = np.lib.stride_tricks.sliding_window_view(k, (kern, kern), axis=(2, 3))[:, :, ::stride, ::stride]
            s = win.sum(axis=(4, 5))
            if s.max(initial=0) > INT32_MAX or s.min(initial=0) < INT32_MIN:
                raise AccumulatorOverflowError("accumulator overflow in layer %r" % layer.name)
            kq = np.clip(np.rint(s.astype(np.float64) / (kern * kern)), n[0], p[0])
            env[layer.output] = _storage(kq.astype(np.int64) + z)
        elif layer.kind is LayerKind.MAXPOOL2D:
            kern, stride = layer.attrs["kernel"], layer.attrs["stride"]
            win = np.lib.stride_tricks.sliding_window_view(ins[0], (kern, kern), axis=(2, 3))[:, :, ::stride, ::stride]
            env[layer.output] = np.ascontiguousarray(win.max(axis=(4, 5)))
        elif layer.kind is LayerKind.FLATTEN:
            env[layer.output] = ins[0].reshape(ins[0].shape[0], -1)
        else:
            raise ContractError("layer kind %r cannot run on the integer path" % (layer.kind,))
    out = _dequant_edge(env[graph.output], espec(graph.output))
    return (out, env) if capture else out
