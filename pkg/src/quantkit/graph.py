"""Small sequential-plus-branches network IR and its execution engines.

A Graph is a topologically ordered list of layers connected by named edges.
Layers hold their parameters directly as float64 arrays. Three execution
modes share the same layer kernels:

  forward_fp         float path, quantizers ignored
  forward_sim_quant  simulated quantization: fake-quantize weights and the
                     activation edges that carry a quantizer slot
  (frozen graphs)    an exact-arithmetic variant of the simulated path that
                     the integer executor reproduces bit for bit

Quantizer placement lives here too because it is graph-structural: which
edges get a quantizer, which are fused away, and which alias another edge's
grid.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, ShapeError
from .quantizer import QuantizerSpec, Scheme, fake_quant_fp, quantize_int


class LayerKind(str, Enum):
    LINEAR = "linear"
    CONV2D = "conv2d"
    DEPTHWISE_CONV2D = "depthwise_conv2d"
    BATCHNORM = "batchnorm"
    RELU = "relu"
    RELU6 = "relu6"
    ADD = "add"
    CONCAT = "concat"
    AVGPOOL2D = "avgpool2d"
    MAXPOOL2D = "maxpool2d"
    FLATTEN = "flatten"


LINEAR_FAMILY = {LayerKind.LINEAR, LayerKind.CONV2D, LayerKind.DEPTHWISE_CONV2D}
_ACTIVATIONS = {LayerKind.RELU, LayerKind.RELU6}
_PASSTHROUGH = {LayerKind.MAXPOOL2D, LayerKind.FLATTEN, LayerKind.AVGPOOL2D}


@dataclass
class Layer:
    name: str
    kind: LayerKind
    inputs: list
    output: str
    params: dict = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)


@dataclass
class QuantSlot:
    """One quantizer site: class configuration plus, once fitted, the grid."""

    scheme: Scheme
    bitwidth: int
    per_channel: bool = False
    axis: int | None = None
    spec: QuantizerSpec | None = None
    enabled: bool = True

    def copy(self) -> "QuantSlot":
        return QuantSlot(
            self.scheme,
            self.bitwidth,
            self.per_channel,
            self.axis,
            self.spec.copy() if self.spec is not None else None,
            self.enabled,
        )


@dataclass
class QuantConfig:
    """Placement-time quantizer classes for weights and activations."""

    weight_scheme: Scheme = Scheme.SYMMETRIC_SIGNED
    weight_bits: int = 8
    weight_per_channel: bool = False
    act_scheme: Scheme = Scheme.ASYMMETRIC
    act_bits: int = 8
    # slot id -> bitwidth, for keeping sensitive spots at higher precision
    bit_overrides: dict = field(default_factory=dict)


class Graph:
    def __init__(self, input_shape=None, input_name: str = "in"):
        self.input_name = input_name
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.layers: list[Layer] = []
        self.output = input_name
        self._by_name: dict[str, Layer] = {}
        self._producer: dict[str, str] = {}
        self.weight_slots: dict[str, QuantSlot] = {}
        self.act_slots: dict[str, QuantSlot] = {}
        self.edge_slot: dict[str, str] = {}
        self.bias_int: dict[str, np.ndarray] = {}
        self.bn_meta: dict[str, dict] = {}
        self.metadata: dict = {}
        self.frozen = False

    # -- construction -------------------------------------------------------

    def layer(self, name: str) -> Layer:
        return self._by_name[name]

    def edges(self) -> list:
        seen = [self.input_name]
        seen.extend(l.output for l in self.layers)
        return seen

    def consumers(self, edge: str) -> list:
        return [l.name for l in self.layers if edge in l.inputs]

    def producer(self, edge: str) -> str | None:
        return self._producer.get(edge)

    def add_layer(self, layer: Layer):
        if layer.name in self._by_name:
            raise ContractError("duplicate layer name %r" % layer.name)
        known = set(self.edges())
        for e in layer.inputs:
            if e not in known:
                raise ContractError("layer %r consumes unknown edge %r" % (layer.name, e))
        if layer.output in known:
            raise ContractError("edge %r already produced" % layer.output)
        _validate_layer(layer)
        self.layers.append(layer)
        self._by_name[layer.name] = layer
        self._producer[layer.output] = layer.name
        self.output = layer.output
        return self

    def _auto_in(self, src):
        return [self.output] if src is None else [src]

    def add_linear(self, name, weight, bias=None, src=None):
        params = {"weight": np.asarray(weight, dtype=np.float64)}
        if bias is not None:
            params["bias"] = np.asarray(bias, dtype=np.float64)
        return self.add_layer(Layer(name, LayerKind.LINEAR, self._auto_in(src), name + ".out", params))

    def add_conv2d(self, name, weight, bias=None, stride=1, padding=0, src=None):
        params = {"weight": np.asarray(weight, dtype=np.float64)}
        if bias is not None:
            params["bias"] = np.asarray(bias, dtype=np.float64)
        attrs = {"stride": int(stride), "padding": int(padding)}
        return self.add_layer(Layer(name, LayerKind.CONV2D, self._auto_in(src), name + ".out", params, attrs))

    def add_depthwise_conv2d(self, name, weight, bias=None, stride=1, padding=0, src=None):
        params = {"weight": np.asarray(weight, dtype=np.float64)}
        if bias is not None:
            params["bias"] = np.asarray(bias, dtype=np.float64)
        attrs = {"stride": int(stride), "padding": int(padding)}
        return self.add_layer(
            Layer(name, LayerKind.DEPTHWISE_CONV2D, self._auto_in(src), name + ".out", params, attrs)
        )

    def add_batchnorm(self, name, gamma, beta, mean, var, eps=1e-5, src=None):
        params = {
            "gamma": np.asarray(gamma, dtype=np.float64),
            "beta": np.asarray(beta, dtype=np.float64),
            "mean": np.asarray(mean, dtype=np.float64),
            "var": np.asarray(var, dtype=np.float64),
        }
        return self.add_layer(
            Layer(name, LayerKind.BATCHNORM, self._auto_in(src), name + ".out", params, {"eps": float(eps)})
        )

    def add_relu(self, name, src=None):
        return self.add_layer(Layer(name, LayerKind.RELU, self._auto_in(src), name + ".out"))

    def add_relu6(self, name, clip=6.0, src=None):
        clip_arr = np.atleast_1d(np.asarray(clip, dtype=np.float64))
        return self.add_layer(
            Layer(name, LayerKind.RELU6, self._auto_in(src), name + ".out", {"clip": clip_arr})
        )

    def add_add(self, name, lhs, rhs, tied=False):
        return self.add_layer(Layer(name, LayerKind.ADD, [lhs, rhs], name + ".out", {}, {"tied": bool(tied)}))

    def add_concat(self, name, srcs, axis=1):
        return self.add_layer(Layer(name, LayerKind.CONCAT, list(srcs), name + ".out", {}, {"axis": int(axis)}))

    def add_avgpool2d(self, name, kernel, stride=None, src=None):
        attrs = {"kernel": int(kernel), "stride": int(stride if stride is not None else kernel)}
        return self.add_layer(Layer(name, LayerKind.AVGPOOL2D, self._auto_in(src), name + ".out", {}, attrs))

    def add_maxpool2d(self, name, kernel, stride=None, src=None):
        attrs = {"kernel": int(kernel), "stride": int(stride if stride is not None else kernel)}
        return self.add_layer(Layer(name, LayerKind.MAXPOOL2D, self._auto_in(src), name + ".out", {}, attrs))

    def add_flatten(self, name, src=None):
        return self.add_layer(Layer(name, LayerKind.FLATTEN, self._auto_in(src), name + ".out"))

    # -- queries -------------------------------------------------------------

    def linear_layers(self) -> list:
        return [l for l in self.layers if l.kind in LINEAR_FAMILY]

    def has_batchnorm(self) -> bool:
        return any(l.kind is LayerKind.BATCHNORM for l in self.layers)

    def fused_activation(self, layer: Layer):
        """The ReLU/ReLU6 that absorbs this layer's output edge, if any."""
        cons = self.consumers(layer.output)
        if len(cons) == 1 and self._by_name[cons[0]].kind in _ACTIVATIONS:
            if layer.output not in self.edge_slot:
                return self._by_name[cons[0]]
        return None

    def slot_ids(self) -> list:
        """Every quantizer site: weight slots then activation slots."""
        ids = [name + ".w" for name in self.weight_slots]
        ids.extend(self.act_slots)
        return ids

    def validate(self, batch: int = 1):
        """Shape-check by running zeros through the float path."""
        if self.input_shape is None:
            raise ContractError("validate() needs input_shape")
        forward_fp(self, np.zeros((batch,) + self.input_shape))

    def copy(self) -> "Graph":
        g = Graph(self.input_shape, self.input_name)
        for l in self.layers:
            g.add_layer(
                Layer(
                    l.name,
                    l.kind,
                    list(l.inputs),
                    l.output,
                    {k: v.copy() for k, v in l.params.items()},
                    dict(l.attrs),
                )
            )
        g.output = self.output
        g.weight_slots = {k: s.copy() for k, s in self.weight_slots.items()}
        g.act_slots = {k: s.copy() for k, s in self.act_slots.items()}
        g.edge_slot = dict(self.edge_slot)
        g.bias_int = {k: v.copy() for k, v in self.bias_int.items()}
        g.bn_meta = {k: {kk: np.array(vv) for kk, vv in d.items()} for k, d in self.bn_meta.items()}
        g.metadata = dict(self.metadata)
        g.frozen = self.frozen
        return g


def _validate_layer(layer: Layer):
    k = layer.kind
    p = layer.params
    if k is LayerKind.LINEAR:
        if p["weight"].ndim != 2:
            raise ShapeError("linear weight must be 2-d, got %r" % (p["weight"].shape,))
        if "bias" in p and p["bias"].shape != (p["weight"].shape[0],):
            raise ShapeError("linear bias must match output rows")
    elif k is LayerKind.CONV2D:
        if p["weight"].ndim != 4:
            raise ShapeError("conv weight must be 4-d")
        if "bias" in p and p["bias"].shape != (p["weight"].shape[0],):
            raise ShapeError("conv bias must match output channels")
    elif k is LayerKind.DEPTHWISE_CONV2D:
        if p["weight"].ndim != 4 or p["weight"].shape[1] != 1:
            raise ShapeError("depthwise weight must have shape (C,1,kh,kw)")
        if "bias" in p and p["bias"].shape != (p["weight"].shape[0],):
            raise ShapeError("depthwise bias must match channels")
    elif k is LayerKind.BATCHNORM:
        shapes = {p[n].shape for n in ("gamma", "beta", "mean", "var")}
        if len(shapes) != 1 or p["gamma"].ndim != 1:
            raise ShapeError("batchnorm parameters must be equal-length 1-d arrays")
        if np.any(p["var"] < 0):
            raise ContractError("batchnorm variance must be non-negative")
        if layer.attrs["eps"] <= 0:
            raise ContractError("batchnorm eps must be positive")
    elif k is LayerKind.RELU6:
        if np.any(p["clip"] <= 0):
            raise ContractError("relu6 clip must be positive")
    elif k in (LayerKind.ADD, LayerKind.CONCAT):
        if len(layer.inputs) < 2:
            raise ContractError("%s needs at least two inputs" % k.value)


# ---------------------------------------------------------------------------
# layer kernels on plain arrays
# ---------------------------------------------------------------------------


def _bias_view(b: np.ndarray, ndim: int) -> np.ndarray:
    shape = [1] * ndim
    shape[1] = b.shape[0]
    return b.reshape(shape)


def _clip_view(clip: np.ndarray, ndim: int):
    if clip.shape[0] == 1:
        return float(clip[0])
    return _bias_view(clip, ndim)


def layer_forward(layer: Layer, inputs: list, weight=None) -> np.ndarray:
    """One layer on plain float arrays. `weight` overrides the stored weight."""
    k = layer.kind
    p = layer.params
    a = layer.attrs
    x = inputs[0]
    if k is LayerKind.LINEAR:
        w = p["weight"] if weight is None else weight
        y = T.matmul_fp(x, w.T)
        return y + p["bias"][None, :] if "bias" in p else y
    if k is LayerKind.CONV2D:
        w = p["weight"] if weight is None else weight
        y = T.conv2d_fp(x, w, a["stride"], a["padding"])
        return y + _bias_view(p["bias"], 4) if "bias" in p else y
    if k is LayerKind.DEPTHWISE_CONV2D:
        w = p["weight"] if weight is None else weight
        y = T.depthwise_conv2d_fp(x, w, a["stride"], a["padding"])
        return y + _bias_view(p["bias"], 4) if "bias" in p else y
    if k is LayerKind.BATCHNORM:
        denom = np.sqrt(p["var"] + a["eps"])
        g = _bias_view(p["gamma"] / denom, x.ndim)
        b = _bias_view(p["beta"] - p["mean"] * p["gamma"] / denom, x.ndim)
        return g * x + b
    if k is LayerKind.RELU:
        return np.maximum(x, 0.0)
    if k is LayerKind.RELU6:
        return np.clip(x, 0.0, _clip_view(p["clip"], x.ndim))
    if k is LayerKind.ADD:
        if inputs[0].shape != inputs[1].shape:
            raise ShapeError("add operands differ: %r vs %r" % (inputs[0].shape, inputs[1].shape))
        return inputs[0] + inputs[1]
    if k is LayerKind.CONCAT:
        return np.concatenate(inputs, axis=a["axis"])
    if k is LayerKind.AVGPOOL2D:
        return T.avgpool2d_fp(x, a["kernel"], a["stride"])
    if k is LayerKind.MAXPOOL2D:
        return T.maxpool2d_fp(x, a["kernel"], a["stride"])
    if k is LayerKind.FLATTEN:
        return x.reshape(x.shape[0], -1)
    raise ContractError("unknown layer kind %r" % (k,))


def forward_fp(graph: Graph, x, capture: bool = False):
    """Float forward pass; quantizer slots are ignored entirely."""
    env = {graph.input_name: np.asarray(x, dtype=np.float64)}
    for layer in graph.layers:
        env[layer.output] = layer_forward(layer, [env[e] for e in layer.inputs])
    out = env[graph.output]
    return (out, env) if capture else out


# ---------------------------------------------------------------------------
# quantizer placement
# ---------------------------------------------------------------------------


def attach_quantizers(graph: Graph, cfg: QuantConfig):
    """Allocate weight and activation quantizer slots per the fusion policy.

    Rules: every linear-family weight gets a slot; the model input gets a
    slot; a linear-family (or BN) output feeding exactly one ReLU/ReLU6 is
    fused, so only the post-activation edge is quantized; max-pool, avg-pool
    and flatten reuse their input's grid; a tied add shares one grid across
    operands and output; untied adds and concats get a fresh output grid.
    """
    if graph.has_batchnorm() and not cfg.weight_per_channel:
        raise ConfigurationError("fold batch-norm before per-tensor weight quantization")
    graph.weight_slots = {}
    graph.act_slots = {}
    graph.edge_slot = {}

    for layer in graph.linear_layers():
        graph.weight_slots[layer.name] = QuantSlot(
            cfg.weight_scheme, cfg.weight_bits, cfg.weight_per_channel, 0 if cfg.weight_per_channel else None
        )

    def new_slot(sid: str) -> str:
        graph.act_slots[sid] = QuantSlot(cfg.act_scheme, cfg.act_bits)
        return sid

    graph.edge_slot[graph.input_name] = new_slot("in")
    for layer in graph.layers:
        out = layer.output
        if layer.kind in LINEAR_FAMILY or layer.kind is LayerKind.BATCHNORM:
            cons = graph.consumers(out)
            if len(cons) == 1 and graph.layer(cons[0]).kind in _ACTIVATIONS:
                continue  # fused into the following activation
            if layer.kind in LINEAR_FAMILY and len(cons) == 1 and graph.layer(cons[0]).kind is LayerKind.BATCHNORM:
                continue  # batch-norm will fold or absorb into this layer eventually
            graph.edge_slot[out] = new_slot(layer.name + ".out")
        elif layer.kind in _ACTIVATIONS:
            graph.edge_slot[out] = new_slot(layer.name + ".out")
        elif layer.kind in _PASSTHROUGH:
            graph.edge_slot[out] = graph.edge_slot[layer.inputs[0]]
        elif layer.kind is LayerKind.ADD:
            if layer.attrs.get("tied"):
                sid = new_slot(layer.name + ".shared")
                for e in layer.inputs:
                    graph.edge_slot[e] = sid
                graph.edge_slot[out] = sid
            else:
                graph.edge_slot[out] = new_slot(layer.name + ".out")
        elif layer.kind is LayerKind.CONCAT:
            graph.edge_slot[out] = new_slot(layer.name + ".out")

    # drop slots a tied add orphaned
    live = set(graph.edge_slot.values())
    graph.act_slots = {sid: s for sid, s in graph.act_slots.items() if sid in live}

    for sid, bits in cfg.bit_overrides.items():
        if sid.endswith(".w") and sid[:-2] in graph.weight_slots:
            graph.weight_slots[sid[:-2]].bitwidth = int(bits)
        elif sid in graph.act_slots:
            graph.act_slots[sid].bitwidth = int(bits)
        else:
            raise ConfigurationError("bit override names unknown slot %r" % sid)
    return graph


def _slot_active(slot: QuantSlot, sid: str, active) -> bool:
    if not slot.enabled or (active is not None and sid not in active):
        return False
    if slot.spec is None:
        raise ContractError("quantizer slot %r selected but not fitted" % sid)
    return True


# ---------------------------------------------------------------------------
# simulated-quantization forward
# ---------------------------------------------------------------------------


def forward_sim_quant(graph: Graph, x, active=None, capture: bool = False):
    """Fake-quantized forward pass.

    `active` optionally restricts which slot ids quantize (None means all
    enabled slots); disabled or unselected slots pass values through, so an
    all-bypassed run is bit-identical to forward_fp. Frozen graphs run the
    exact-arithmetic path instead and do not accept a filter.
    """
    if graph.frozen:
        if active is not None:
            raise ContractError("frozen graphs run fully quantized")
        return _forward_frozen(graph, x, capture)
    env = {}

    def put(edge, v):
        sid = graph.edge_slot.get(edge)
        if sid is not None and _slot_active(graph.act_slots[sid], sid, active):
            v = fake_quant_fp(v, graph.act_slots[sid].spec)
        env[edge] = v

    put(graph.input_name, np.asarray(x, dtype=np.float64))
    for layer in graph.layers:
        w = None
        if layer.kind in LINEAR_FAMILY:
            slot = graph.weight_slots.get(layer.name)
            if slot is not None and _slot_active(slot, layer.name + ".w", active):
                w = fake_quant_fp(layer.params["weight"], slot.spec)
        put(layer.output, layer_forward(layer, [env[e] for e in layer.inputs], weight=w))
    out = env[graph.output]
    return (out, env) if capture else out


# ---------------------------------------------------------------------------
# freezing and the exact-arithmetic path
# ---------------------------------------------------------------------------


def _edge_spec(graph: Graph, edge: str) -> QuantizerSpec:
    sid = graph.edge_slot.get(edge)
    if sid is None:
        raise ContractError("edge %r carries no quantizer" % edge)
    spec = graph.act_slots[sid].spec
    if spec is None:
        raise ContractError("quantizer slot %r is not fitted" % sid)
    return spec


def accumulator_scale(graph: Graph, layer: Layer) -> np.ndarray:
    """Per-output-channel accumulator scale s_w * s_x for a linear-family layer."""
    wspec = graph.weight_slots[layer.name].spec
    xspec = _edge_spec(graph, layer.inputs[0])
    return wspec.scale * xspec.scale[0]


def freeze(graph: Graph):
    """Pin biases to the integer accumulator grid and mark the graph frozen.

    After freezing, the simulated path switches to exact grid arithmetic and
    matches the integer executor bit for bit. Requires batch-norm folded and
    every slot fitted and enabled.
    """
    if graph.frozen:
        return graph
    if graph.has_batchnorm():
        raise ContractError("fold batch-norm before freezing")
    if not graph.weight_slots and not graph.act_slots:
        raise ContractError("attach quantizers before freezing")
    for name, slot in graph.weight_slots.items():
        if slot.spec is None or not slot.enabled:
            raise ContractError("weight slot %r must be fitted and enabled to freeze" % name)
    for sid, slot in graph.act_slots.items():
        if slot.spec is None or not slot.enabled:
            raise ContractError("activation slot %r must be fitted and enabled to freeze" % sid)
    for layer in graph.linear_layers():
        c = accumulator_scale(graph, layer)
        if "bias" in layer.params:
            graph.bias_int[layer.name] = np.rint(layer.params["bias"] / c).astype(np.int64)
        else:
            graph.bias_int[layer.name] = np.zeros(layer.params["weight"].shape[0], dtype=np.int64)
    graph.frozen = True
    return graph


def requant_real(v: np.ndarray, spec: QuantizerSpec, act: LayerKind | None = None, clip=None) -> np.ndarray:
    """Activation then quantization of a real-valued pre-activation.

    Returns relative integers (storage int minus zero-point). Shared by the
    frozen simulated path and the integer executor so the two agree bit for
    bit by construction.
    """
    if act is LayerKind.RELU:
        v = np.maximum(v, 0.0)
    elif act is LayerKind.RELU6:
        v = np.clip(v, 0.0, _clip_view(np.atleast_1d(clip), v.ndim))
    s, z = spec.broadcast(v.ndim)
    n, p = spec.relative_bounds()
    n, p = n[0], p[0]
    return np.clip(np.rint(v / s), n, p)


def relative_weights(graph: Graph, layer: Layer) -> np.ndarray:
    """Integer weights offset by their zero-point, as exact float64 values."""
    spec = graph.weight_slots[layer.name].spec
    q = quantize_int(layer.params["weight"], spec)
    _, z = spec.broadcast(q.ndim)
    return q.astype(np.float64) - z


def _forward_frozen(graph: Graph, x, capture: bool = False):
    """Exact grid-value forward pass for frozen graphs.

    Every quantized edge carries values of the form s * k with k the integer
    relative to the zero-point; k is recovered exactly by rounding. Linear
    ops run on the integers in float64 (exact well below 2^53), so the only
    roundings are the ones the integer executor also performs: the per-layer
    accumulator rescale and each requantize.
    """
    env = {}
    getspec = lambda e: _edge_spec(graph, e)

    in_spec = getspec(graph.input_name)
    k_in = requant_real(np.asarray(x, dtype=np.float64), in_spec)
    env[graph.input_name] = in_spec.scale[0] * k_in

    skip = set()
    for layer in graph.layers:
        if layer.name in skip:
            continue
        ins = [env[e] for e in layer.inputs]
        if layer.kind in LINEAR_FAMILY:
            x_spec = getspec(layer.inputs[0])
            s_x = x_spec.scale[0]
            kx = np.rint(ins[0] / s_x)
            kw = relative_weights(graph, layer)
            if layer.kind is LayerKind.LINEAR:
                acc = kx @ kw.T
            elif layer.kind is LayerKind.CONV2D:
                acc = T.conv2d_fp(kx, kw, layer.attrs["stride"], layer.attrs["padding"])
            else:
                acc = T.depthwise_conv2d_fp(kx, kw, layer.attrs["stride"], layer.attrs["padding"])
            c = accumulator_scale(graph, layer)
            acc = acc + _bias_view(graph.bias_int[layer.name].astype(np.float64), acc.ndim)
            v = acc * (_bias_view(c, acc.ndim) if c.shape[0] > 1 else c[0])
            fused = graph.fused_activation(layer)
            if fused is not None:
                skip.add(fused.name)
                out_edge = fused.output
                act, clip = fused.kind, fused.params.get("clip")
            else:
                out_edge = layer.output
                act, clip = None, None
            out_spec = getspec(out_edge)
            k = requant_real(v, out_spec, act, clip)
            env[out_edge] = out_spec.scale[0] * k
        elif layer.kind in _ACTIVATIONS:
            in_sp = getspec(layer.inputs[0])
            out_spec = getspec(layer.output)
            k = requant_real(ins[0], out_spec, layer.kind, layer.params.get("clip"))
            env[layer.output] = out_spec.scale[0] * k
        elif layer.kind is LayerKind.AVGPOOL2D:
            spec = getspec(layer.inputs[0])
            s = spec.scale[0]
            k = np.rint(ins[0] / s)
            kern, stride = layer.attrs["kernel"], layer.attrs["stride"]
            win, _, _ = T._im2col(k, kern, kern, stride, 0)
            n, p = spec.relative_bounds()
            kq = np.clip(np.rint(win.sum(axis=(4, 5)) / (kern * kern)), n[0], p[0])
            env[layer.output] = s * kq
        elif layer.kind is LayerKind.MAXPOOL2D:
            env[layer.output] = T.maxpool2d_fp(ins[0], layer.attrs["kernel"], layer.attrs["stride"])
        elif layer.kind is LayerKind.FLATTEN:
            env[layer.output] = ins[0].reshape(ins[0].shape[0], -1)
        elif layer.kind is LayerKind.ADD:
            out_spec = getspec(layer.output)
            v = ins[0] + ins[1]
            k = requant_real(v, out_spec)
            env[layer.output] = out_spec.scale[0] * k
        elif layer.kind is LayerKind.CONCAT:
            out_spec = getspec(layer.output)
            v = np.concatenate(ins, axis=layer.attrs["axis"])
            k = requant_real(v, out_spec)
            env[layer.output] = out_spec.scale[0] * k
        else:
            raise ContractError("layer kind %r cannot run frozen" % (layer.kind,))
    out = env[graph.output]
    return (out, env) if capture else out
