"""Quantization-aware training.

Fine-tunes weights, biases, and the quantizer grids themselves through the
straight-through estimator. Scales train in the log domain; asymmetric
zero-points train as real values rounded on each forward. Batch-norm is
handled one of two ways: folded statically before training (required for
per-tensor weights), or kept as float layers during training and absorbed
into the per-channel weight scales afterwards.

Training is deterministic for a given seed: data order, the train/val
split, and every update follow one seeded generator. The best validation
epoch is checkpointed and restored at the end.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, NumericalError
from .graph import Graph, LayerKind, LINEAR_FAMILY
from .quantizer import LearnableQuantizer, QuantizerSpec, Scheme, quantize_int


@dataclass
class QATConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"  # or "sgd"
    # None picks the optimizer's convention: equal lr for adam, 1e-2x for sgd
    quant_lr_factor: float | None = None
    learn_ranges: bool = True
    learn_zero_point: bool = True
    val_fraction: float = 0.2
    loss: str = "xent"  # or "mse"
    seed: int = 0


def _resolve_quant_lr(cfg: QATConfig) -> float:
    if cfg.quant_lr_factor is not None:
        return cfg.lr * cfg.quant_lr_factor
    return cfg.lr * (1e-2 if cfg.optimizer == "sgd" else 1.0)


class _Trainable:
    """Parameter store plus forward builder for one training run."""

    def __init__(self, graph: Graph, cfg: QATConfig, quantize: bool):
        self.graph = graph
        self.quantize = quantize
        self.params = {}
        self.consts = {}
        for layer in graph.layers:
            for pname, arr in layer.params.items():
                key = (layer.name, pname)
                if layer.kind is LayerKind.BATCHNORM:
                    if pname in ("gamma", "beta"):
                        self.params[key] = arr.copy()
                    else:
                        self.consts[key] = arr
                elif layer.kind in LINEAR_FAMILY:
                    self.params[key] = arr.copy()
                else:
                    self.consts[key] = arr  # relu6 clips stay fixed
        self.wq = {}
        self.aq = {}
        if quantize:
            for name, slot in graph.weight_slots.items():
                if not slot.enabled:
                    continue
                if slot.spec is None:
                    raise ContractError("weight slot %r needs a fitted range before training" % name)
                self.wq[name] = LearnableQuantizer(slot.spec, learn_zero_point=False)
            for sid, slot in graph.act_slots.items():
                if not slot.enabled:
                    continue
                if slot.spec is None:
                    raise ContractError("activation slot %r needs a fitted range before training" % sid)
                learn_z = cfg.learn_zero_point and slot.spec.scheme is Scheme.ASYMMETRIC
                self.aq[sid] = LearnableQuantizer(slot.spec, learn_zero_point=learn_z)

    def model_keys(self):
        return sorted(self.params)

    def quant_arrays(self):
        out = []
        for name in sorted(self.wq):
            out.append(("w", name, "log_scale"))
        for sid in sorted(self.aq):
            out.append(("a", sid, "log_scale"))
            if self.aq[sid].learn_zero_point:
                out.append(("a", sid, "zero_point"))
        return out

    def get_quant(self, ref):
        kind, name, field = ref
        lq = self.wq[name] if kind == "w" else self.aq[name]
        return getattr(lq, field)

    def set_quant(self, ref, arr):
        kind, name, field = ref
        lq = self.wq[name] if kind == "w" else self.aq[name]
        setattr(lq, field, T.leaf(arr, name=field))

    def forward(self, x: np.ndarray) -> T.Node:
        graph = self.graph
        leaves = {k: T.leaf(v) for k, v in self.params.items()}
        env = {}

        def put(edge, node):
            sid = graph.edge_slot.get(edge)
            if sid is not None and sid in self.aq and graph.act_slots[sid].enabled:
                node = self.aq[sid](node)
            env[edge] = node

        def const(layer, pname):
            return T.leaf(self.consts[(layer.name, pname)])

        put(graph.input_name, T.leaf(x))
        for layer in graph.layers:
            ins = [env[e] for e in layer.inputs]
            k = layer.kind
            if k in LINEAR_FAMILY:
                w = leaves[(layer.name, "weight")]
                if layer.name in self.wq and graph.weight_slots[layer.name].enabled:
                    w = self.wq[layer.name](w)
                if k is LayerKind.LINEAR:
                    y = T.matmul(ins[0], T.transpose2d(w))
                elif k is LayerKind.CONV2D:
                    y = T.conv2d(ins[0], w, layer.attrs["stride"], layer.attrs["padding"])
                else:
                    y = T.depthwise_conv2d(ins[0], w, layer.attrs["stride"], layer.attrs["padding"])
                if (layer.name, "bias") in leaves:
                    y = T.add_bias(y, leaves[(layer.name, "bias")], axis=1)
            elif k is LayerKind.BATCHNORM:
                inv = 1.0 / np.sqrt(self.consts[(layer.name, "var")] + layer.attrs["eps"])
                factor = T.mul(leaves[(layer.name, "gamma")], T.leaf(inv))
                y = T.scale_channels(ins[0], factor, axis=1)
                shift = T.sub(leaves[(layer.name, "beta")], T.mul(const(layer, "mean"), factor))
                y = T.add_bias(y, shift, axis=1)
            elif k is LayerKind.RELU:
                y = T.relu(ins[0])
            elif k is LayerKind.RELU6:
                y = T.relu6(ins[0], self.consts[(layer.name, "clip")])
            elif k is LayerKind.ADD:
                y = T.add(ins[0], ins[1])
            elif k is LayerKind.CONCAT:
                y = T.concat(ins, axis=layer.attrs["axis"])
            elif k is LayerKind.AVGPOOL2D:
                y = T.avgpool2d(ins[0], layer.attrs["kernel"], layer.attrs["stride"])
            elif k is LayerKind.MAXPOOL2D:
                y = T.maxpool2d(ins[0], layer.attrs["kernel"], layer.attrs["stride"])
            elif k is LayerKind.FLATTEN:
                y = T.flatten(ins[0])
            else:
                raise ContractError("layer kind %r not trainable" % (k,))
            put(layer.output, y)
        self._leaves = leaves
        return env[graph.output]

    def writeback(self):
        """Push trained parameters and grids back into the graph."""
        for (lname, pname), arr in self.params.items():
            self.graph.layer(lname).params[pname] = arr.copy()
        for name, lq in self.wq.items():
            self.graph.weight_slots[name].spec = lq.current_spec()
        for sid, lq in self.aq.items():
            self.graph.act_slots[sid].spec = lq.current_spec()


def _mean_scale(quantizers: dict) -> float:
    if not quantizers:
        return 0.0
    return float(np.mean([np.exp(lq.log_scale.data).mean() for lq in quantizers.values()]))


def _metric(pred: np.ndarray, labels: np.ndarray, loss_kind: str) -> float:
    if loss_kind == "xent":
        return float(np.mean(pred.argmax(axis=1) == labels))
    d = pred - labels
    return -float(np.mean(d * d))


def _loss_node(out: T.Node, batch_labels, loss_kind: str) -> T.Node:
    if loss_kind == "xent":
        return T.softmax_cross_entropy(out, batch_labels)
    return T.mse_loss(out, batch_labels)


def train(graph: Graph, inputs: np.ndarray, labels: np.ndarray, cfg: QATConfig, quantize: bool = True) -> dict:
    """Train (quantization-aware by default) and write results into the graph.

    Returns a report with the per-epoch history and the restored best epoch.
    With quantize=False this is plain float training, used to produce the
    float baselines the quantization pipelines start from.
    """
    if cfg.optimizer not in ("adam", "sgd"):
        raise ConfigurationError("unknown optimizer %r" % cfg.optimizer)
    if cfg.loss not in ("xent", "mse"):
        raise ConfigurationError("unknown loss %r" % cfg.loss)
    if quantize and graph.has_batchnorm():
        if any(not s.per_channel for s in graph.weight_slots.values()):
            raise ConfigurationError("fold batch-norm before per-tensor training")
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels)
    n = inputs.shape[0]
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    n_val = int(round(cfg.val_fraction * n))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if n_val == 0:
        val_idx = train_idx
    if train_idx.size == 0:
        raise ConfigurationError("no training samples left after the validation split")

    trainable = _Trainable(graph, cfg, quantize)
    model_keys = trainable.model_keys()
    quant_refs = trainable.quant_arrays() if cfg.learn_ranges else []
    quant_lr = _resolve_quant_lr(cfg)

    model_state = T.AdamState([trainable.params[k] for k in model_keys])
    quant_state = T.AdamState([trainable.get_quant(r).data for r in quant_refs])

    def evaluate(idx) -> float:
        out = trainable.forward(inputs[idx])
        return _metric(out.data, labels[idx], cfg.loss)

    best = (-np.inf, -1, None)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        epoch_loss = 0.0
        batches = 0
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            out = trainable.forward(inputs[idx])
            loss = _loss_node(out, labels[idx], cfg.loss)
            if not np.all(np.isfinite(loss.data)):
                raise NumericalError("training loss became non-finite at epoch %d" % epoch)
            T.backward(loss)
            epoch_loss += loss.data.item()
            batches += 1

            mparams = [trainable.params[k] for k in model_keys]
            mgrads = [trainable._leaves[k].grad for k in model_keys]
            qparams = [trainable.get_quant(r).data for r in quant_refs]
            qgrads = [trainable.get_quant(r).grad for r in quant_refs]
            if cfg.optimizer == "adam":
                new_m = T.adam_step(mparams, mgrads, model_state, cfg.lr)
                new_q = T.adam_step(qparams, qgrads, quant_state, quant_lr)
            else:
                new_m = [p if g is None else p - cfg.lr * g for p, g in zip(mparams, mgrads)]
                new_q = [p if g is None else p - quant_lr * g for p, g in zip(qparams, qgrads)]
            for k, arr in zip(model_keys, new_m):
                trainable.params[k] = arr
            for r, arr in zip(quant_refs, new_q):
                trainable.set_quant(r, arr)

        val = evaluate(val_idx)
        history.append(
            {
                "epoch": epoch,
                "train_loss": epoch_loss / max(batches, 1),
                "val_metric": val,
                "mean_weight_scale": _mean_scale(trainable.wq),
                "mean_act_scale": _mean_scale(trainable.aq),
            }
        )
        if val > best[0]:
            snapshot = (
                {k: trainable.params[k].copy() for k in model_keys},
                {r: trainable.get_quant(r).data.copy() for r in quant_refs},
            )
            best = (val, epoch, snapshot)

    if best[2] is not None:
        msnap, qsnap = best[2]
        for k, arr in msnap.items():
            trainable.params[k] = arr
        for r, arr in qsnap.items():
            trainable.set_quant(r, arr)
    trainable.writeback()
    return {"history": history, "best_epoch": best[1], "best_val": best[0]}


def absorb_bn_into_channel_scales(graph: Graph) -> list:
    """Fold kept batch-norm layers into per-channel weight quantizer scales.

    The affine BN transform commutes with a per-channel rescale of the
    producing layer, so folding it into the weights while multiplying the
    weight scale by |gamma|/sqrt(var+eps) leaves the trained integer weights
    unchanged up to sign. Channels with negative gamma flip sign; on the
    signed grid the single most-negative integer cannot flip exactly, so such
    channels are flagged in the returned records.
    """
    records = []
    for bn in [l for l in graph.layers if l.kind is LayerKind.BATCHNORM]:
        producer_name = graph.producer(bn.inputs[0])
        producer = graph.layer(producer_name) if producer_name else None
        if producer is None or producer.kind not in LINEAR_FAMILY:
            raise ContractError("batch-norm %r does not follow a foldable layer" % bn.name)
        slot = graph.weight_slots.get(producer.name)
        if slot is None or slot.spec is None or not slot.per_channel:
            raise ConfigurationError("absorbing batch-norm needs fitted per-channel weight grids")
        if slot.spec.scheme not in (Scheme.SYMMETRIC_SIGNED, Scheme.POWER_OF_TWO):
            raise ConfigurationError("absorbing batch-norm needs a symmetric signed weight scheme")
        gamma, beta = bn.params["gamma"], bn.params["beta"]
        mean, var = bn.params["mean"], bn.params["var"]
        denom = np.sqrt(var + bn.attrs["eps"])
        factor = gamma / denom
        w = producer.params["weight"]
        producer.params["weight"] = w * factor.reshape((-1,) + (1,) * (w.ndim - 1))
        old_bias = producer.params.get("bias", np.zeros(w.shape[0]))
        producer.params["bias"] = beta + (old_bias - mean) * factor
        old_spec = slot.spec
        slot.spec = QuantizerSpec(
            old_spec.scheme, old_spec.bitwidth, old_spec.scale * np.abs(factor), old_spec.zero_point, old_spec.axis
        )
        flipped = np.where(factor < 0)[0]
        # the lone unrepresentable integer after a sign flip: -2^(b-1) -> 2^(b-1)
        lo, _ = slot.spec.int_bounds()
        at_edge = 0
        if flipped.size:
            q = quantize_int(w, old_spec)
            at_edge = int(np.sum(q[flipped] == lo))
        graph.bn_meta[producer.name] = {"gamma": gamma.copy(), "beta": beta.copy()}
        del graph._producer[producer.output]
        producer.output = bn.output
        graph._producer[bn.output] = producer.name
        graph.layers.remove(bn)
        del graph._by_name[bn.name]
        records.append(
            {"absorbed": bn.name, "into": producer.name, "sign_flips": int(flipped.size), "clamped_flips": at_edge}
        )
    return records
