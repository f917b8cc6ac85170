"""End-to-end workflows behind the CLI: quantize, train, diagnose, evaluate.

Each command takes a fully merged PipelineConfig, does its file I/O through
the model/calibration containers, and returns a JSON-serializable report.
The quantization commands record every stage, in execution order, with the
output error measured right after each stage ran, so a report documents
exactly which transforms fired and what each one changed.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .adaround import AdaRoundConfig, adaround_graph
from .errors import ConfigurationError
from .graph import Graph, LayerKind, QuantConfig, attach_quantizers, forward_fp, forward_sim_quant, freeze
from .intexec import run_int_graph
from .modelio import CalibrationSet, load_calibration, load_model, save_model
from .qat import QATConfig, absorb_bn_into_channel_scales, train
from .quantizer import Scheme
from .ranges import RangeMethod, fit_range, fit_spec, range_bn, range_cross_entropy, spec_from_range
from .transforms import absorb_high_bias, bias_correct_analytic, bias_correct_empirical, cle, fold_bn


@dataclass
class PipelineConfig:
    model: str = ""
    calib: str | None = None
    data: str | None = None
    out: str | None = None
    seed: int = 0
    engine: str = "sim"  # sim | int | fp
    wbits: int = 8
    abits: int = 8
    weight_scheme: str = Scheme.SYMMETRIC_SIGNED.value
    act_scheme: str = Scheme.ASYMMETRIC.value
    per_channel: bool = False
    cle: bool = True
    adaround: bool | None = None  # None: run whenever calibration data is given
    adaround_iters: int = 2000
    bias_corr: str = "auto"  # empirical | analytic | off | auto
    act_range: str = "mse"  # minmax | mse | bn | xent-last
    weight_range: str = "mse"  # minmax | mse
    bit_overrides: dict = field(default_factory=dict)
    # training
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    quant_lr_factor: float | None = None
    learn_ranges: bool = True
    val_fraction: float = 0.2
    qat_bn: str = "fold"  # fold | keep
    loss: str = "xent"


_CONFIG_KEYS = {f.name for f in dataclasses.fields(PipelineConfig)}


def build_config(file_path: str | None = None, **flags) -> PipelineConfig:
    """Merge settings: defaults, overridden by flags, overridden by the file."""
    merged = {}
    for key, value in flags.items():
        if value is None:
            continue
        if key not in _CONFIG_KEYS:
            raise ConfigurationError("unknown option %r" % key)
        merged[key] = value
    if file_path:
        try:
            with open(file_path) as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError("cannot read config file %r: %s" % (file_path, e))
        if not isinstance(data, dict):
            raise ConfigurationError("config file must hold a JSON object")
        for key in data:
            if key not in _CONFIG_KEYS:
                raise ConfigurationError("unknown config key %r" % key)
        merged.update(data)
    cfg = PipelineConfig(**merged)
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: PipelineConfig):
    if cfg.engine not in ("sim", "int", "fp"):
        raise ConfigurationError("engine must be 'sim', 'int' or 'fp'")
    if cfg.bias_corr not in ("empirical", "analytic", "off", "auto"):
        raise ConfigurationError("bias_corr must be empirical, analytic, off or auto")
    if cfg.act_range not in ("minmax", "mse", "bn", "xent-last"):
        raise ConfigurationError("act_range must be minmax, mse, bn or xent-last")
    if cfg.weight_range not in ("minmax", "mse"):
        raise ConfigurationError("weight_range must be minmax or mse")
    if cfg.qat_bn not in ("fold", "keep"):
        raise ConfigurationError("qat_bn must be fold or keep")
    try:
        Scheme(cfg.weight_scheme)
        Scheme(cfg.act_scheme)
    except ValueError as e:
        raise ConfigurationError(str(e))
    if not 2 <= cfg.wbits <= 16 or not 2 <= cfg.abits <= 16:
        raise ConfigurationError("bitwidths must be in [2, 16]")


def _quant_config(cfg: PipelineConfig) -> QuantConfig:
    return QuantConfig(
        weight_scheme=Scheme(cfg.weight_scheme),
        weight_bits=cfg.wbits,
        weight_per_channel=cfg.per_channel,
        act_scheme=Scheme(cfg.act_scheme),
        act_bits=cfg.abits,
        bit_overrides=dict(cfg.bit_overrides),
    )


def _load_samples(path: str | None) -> CalibrationSet | None:
    return load_calibration(path) if path else None


# ---------------------------------------------------------------------------
# range fitting
# ---------------------------------------------------------------------------


def fit_weight_ranges(graph: Graph, method: str) -> list:
    records = []
    for layer in graph.linear_layers():
        slot = graph.weight_slots.get(layer.name)
        if slot is None:
            continue
        slot.spec = fit_spec(
            layer.params["weight"],
            slot.scheme,
            slot.bitwidth,
            RangeMethod(method),
            per_channel=slot.per_channel,
            axis=slot.axis or 0,
        )
        records.append({"slot": layer.name + ".w", "method": method})
    return records


def _slot_edges(graph: Graph, sid: str) -> list:
    return [e for e, s in graph.edge_slot.items() if s == sid]


def fit_activation_ranges(graph: Graph, calib_inputs: np.ndarray, method: str) -> list:
    """Fit every activation slot from one calibration pass.

    The pass runs with weight quantizers active so the observed statistics
    include weight rounding error. Slots aliased onto several edges pool the
    values from all of them. 'xent-last' uses the cross-entropy estimator on
    the output slot and MSE elsewhere.
    """
    weight_sids = {name + ".w" for name in graph.weight_slots}
    _, env = forward_sim_quant(graph, calib_inputs, active=weight_sids, capture=True)
    out_sid = graph.edge_slot.get(graph.output)
    records = []
    for sid, slot in graph.act_slots.items():
        edges = _slot_edges(graph, sid)
        values = [env[e] for e in edges if e in env]
        if not values:
            raise ConfigurationError("no observed values for activation slot %r" % sid)
        if method == "xent-last" and sid == out_sid:
            logits = np.concatenate([v.reshape(v.shape[0], -1) for v in values], axis=0)
            lo, hi = range_cross_entropy(logits, slot.scheme, slot.bitwidth)
            used = "xent"
        else:
            pooled = np.concatenate([v.reshape(-1) for v in values])
            base = RangeMethod.MSE if method == "xent-last" else RangeMethod(method)
            lo, hi = fit_range(pooled, slot.scheme, slot.bitwidth, base)
            used = base.value
        slot.spec = spec_from_range(lo, hi, slot.scheme, slot.bitwidth)
        records.append({"slot": sid, "method": used, "range": [lo, hi]})
    return records


def _bn_slot_range(graph: Graph, sid: str):
    """Derive one activation slot's range from BN statistics, if possible."""
    for edge in _slot_edges(graph, sid):
        producer_name = graph.producer(edge)
        if producer_name is None:
            rng = graph.metadata.get("input_range")
            if rng is not None:
                return float(rng[0]), float(rng[1])
            continue
        layer = graph.layer(producer_name)
        if layer.name in graph.bn_meta:
            meta = graph.bn_meta[layer.name]
            return range_bn(meta["beta"], meta["gamma"])
        if layer.kind in (LayerKind.RELU, LayerKind.RELU6):
            src = graph.producer(layer.inputs[0])
            if src is not None and src in graph.bn_meta:
                meta = graph.bn_meta[src]
                lo, hi = range_bn(meta["beta"], meta["gamma"])
                lo = max(lo, 0.0)
                if layer.kind is LayerKind.RELU6:
                    hi = min(hi, float(np.max(layer.params["clip"])))
                return lo, hi
    return None


def fit_activation_ranges_bn(graph: Graph) -> list:
    """Data-free activation ranges from folded BN statistics."""
    records = []
    missing = []
    for sid, slot in graph.act_slots.items():
        got = _bn_slot_range(graph, sid)
        if got is None:
            missing.append(sid)
            continue
        lo, hi = got
        slot.spec = spec_from_range(lo, hi, slot.scheme, slot.bitwidth)
        records.append({"slot": sid, "method": "bn", "range": [lo, hi]})
    if missing:
        raise ConfigurationError(
            "no BN statistics to derive ranges for slots %s; provide calibration data or an input_range" % missing
        )
    return records


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


def _run(graph: Graph, x: np.ndarray, engine: str) -> np.ndarray:
    if engine == "int":
        return run_int_graph(graph, x)
    if engine == "fp":
        return forward_fp(graph, x)
    if graph.frozen or graph.act_slots or graph.weight_slots:
        return forward_sim_quant(graph, x)
    return forward_fp(graph, x)


def evaluate(graph: Graph, data: CalibrationSet, engine: str = "sim") -> dict:
    """Task metric for a model on labeled data: accuracy, or MSE if unlabeled."""
    out = _run(graph, data.inputs, engine)
    report = {"engine": engine, "samples": len(data)}
    if data.labels is not None:
        report["accuracy"] = float(np.mean(out.argmax(axis=1) == data.labels))
    else:
        report["mean_output"] = float(out.mean())
    return report


def _fp_reference(graph: Graph) -> Graph:
    ref = graph.copy()
    ref.frozen = False
    for slot in ref.weight_slots.values():
        slot.enabled = False
    for slot in ref.act_slots.values():
        slot.enabled = False
    return ref


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _resolve_bias_corr(cfg: PipelineConfig, calib, graph: Graph) -> str:
    """Learned rounding already compensates the calibrated case, so 'auto'
    only turns on the analytic correction for data-free runs with BN stats."""
    if cfg.bias_corr != "auto":
        return cfg.bias_corr
    if calib is None and graph.bn_meta:
        return "analytic"
    return "off"


class _StageLog:
    """Execution-ordered stage records, each with an output-error probe."""

    def __init__(self, graph: Graph, probe_inputs, ref_outputs):
        self.graph = graph
        self.inputs = probe_inputs
        self.ref = ref_outputs
        self.steps = []

    def add(self, step: str, result, probe: str | None = None):
        entry = {"step": step, "result": result}
        if probe is not None and self.inputs is not None:
            entry["output_mse"] = self._probe(probe)
        self.steps.append(entry)

    def _probe(self, mode: str) -> float:
        if mode == "fp":
            y = forward_fp(self.graph, self.inputs)
        elif mode == "weights":
            sids = {name + ".w" for name in self.graph.weight_slots}
            y = forward_sim_quant(self.graph, self.inputs, active=sids)
        else:
            y = forward_sim_quant(self.graph, self.inputs)
        d = y - self.ref
        return float(np.mean(d * d))


def cmd_ptq(cfg: PipelineConfig) -> dict:
    """Post-training quantization: transforms, range fitting, freeze, save."""
    graph = load_model(cfg.model)
    calib = _load_samples(cfg.calib)
    report = {"command": "ptq", "config": dataclasses.asdict(cfg)}

    probe_x = calib.inputs if calib is not None else None
    ref_y = forward_fp(graph, probe_x) if probe_x is not None else None
    log = _StageLog(graph, probe_x, ref_y)

    if graph.has_batchnorm():
        log.add("fold_bn", fold_bn(graph), probe="fp")
    if cfg.cle:
        log.add("cle", cle(graph), probe="fp")
        if calib is not None or graph.bn_meta:
            log.add("absorb_high_bias", absorb_high_bias(graph, calib.inputs if calib else None), probe="fp")
        else:
            log.add("absorb_high_bias", {"skipped": "no calibration data and no BN statistics"})
    ref_graph = graph.copy()

    attach_quantizers(graph, _quant_config(cfg))
    log.add("fit_weights", fit_weight_ranges(graph, cfg.weight_range), probe="weights")

    run_adaround = cfg.adaround if cfg.adaround is not None else calib is not None
    if run_adaround:
        if calib is None:
            raise ConfigurationError("adaround needs calibration data")
        ar_cfg = AdaRoundConfig(iterations=cfg.adaround_iters, seed=cfg.seed)
        log.add("adaround", adaround_graph(graph, ref_graph, calib.inputs, ar_cfg), probe="weights")
    else:
        log.add("adaround", {"skipped": "disabled" if cfg.adaround is False else "no calibration data"})

    mode = _resolve_bias_corr(cfg, calib, graph)
    if mode == "empirical":
        if calib is None:
            raise ConfigurationError("empirical bias correction needs calibration data")
        log.add("bias_corr", bias_correct_empirical(graph, ref_graph, calib.inputs), probe="weights")
    elif mode == "analytic":
        log.add("bias_corr", bias_correct_analytic(graph, ref_graph), probe="weights")
    else:
        log.add("bias_corr", {"skipped": "mode off"})
    report["bias_corr_mode"] = mode

    if cfg.act_range == "bn" or calib is None:
        if cfg.act_range not in ("bn", "mse", "minmax"):
            raise ConfigurationError("act_range %r needs calibration data" % cfg.act_range)
        log.add("fit_activations", fit_activation_ranges_bn(graph))
    else:
        log.add("fit_activations", fit_activation_ranges(graph, calib.inputs, cfg.act_range), probe="all")

    freeze(graph)
    report["steps"] = log.steps
    out_path = cfg.out or _default_out(cfg.model, "quant")
    save_model(graph, out_path)
    report["out"] = out_path

    data = _load_samples(cfg.data)
    if data is not None and data.labels is not None:
        report["fp_eval"] = evaluate(ref_graph, data, "fp")
        report["quant_eval"] = evaluate(graph, data, cfg.engine if cfg.engine != "fp" else "sim")
    return report


def cmd_qat(cfg: PipelineConfig) -> dict:
    """Quantization-aware training starting from PTQ range initialization."""
    graph = load_model(cfg.model)
    data = _load_samples(cfg.data)
    if data is None or data.labels is None:
        raise ConfigurationError("qat needs labeled training data (--data)")
    calib = _load_samples(cfg.calib)
    calib_inputs = calib.inputs if calib is not None else data.inputs[: min(len(data), 256)]
    report = {"command": "qat", "config": dataclasses.asdict(cfg)}
    log = _StageLog(graph, None, None)

    keep_bn = cfg.qat_bn == "keep" and graph.has_batchnorm()
    if keep_bn and not cfg.per_channel:
        raise ConfigurationError("keeping batch-norm through training requires per-channel weights")
    if graph.has_batchnorm() and not keep_bn:
        log.add("fold_bn", fold_bn(graph))
    if cfg.cle:
        if graph.has_batchnorm():
            log.add("cle", {"skipped": "batch-norm kept"})
        else:
            log.add("cle", cle(graph))
    ref_graph = graph.copy()

    attach_quantizers(graph, _quant_config(cfg))
    log.add("fit_weights", fit_weight_ranges(graph, cfg.weight_range))
    log.add("fit_activations", fit_activation_ranges(graph, calib_inputs, cfg.act_range))

    qat_cfg = QATConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        optimizer=cfg.optimizer,
        quant_lr_factor=cfg.quant_lr_factor,
        learn_ranges=cfg.learn_ranges,
        val_fraction=cfg.val_fraction,
        loss=cfg.loss,
        seed=cfg.seed,
    )
    training = train(graph, data.inputs, data.labels, qat_cfg)
    log.add("train", {"best_epoch": training["best_epoch"], "best_val": training["best_val"]})
    report["training"] = training

    if keep_bn:
        log.add("absorb_bn", absorb_bn_into_channel_scales(graph))
    freeze(graph)
    report["steps"] = log.steps
    out_path = cfg.out or _default_out(cfg.model, "qat")
    save_model(graph, out_path)
    metrics_path = _sibling(out_path, ".metrics.jsonl")
    _write_metrics_jsonl(metrics_path, training["history"])
    report["out"] = out_path
    report["metrics"] = metrics_path
    report["fp_eval"] = evaluate(ref_graph, data, "fp")
    report["quant_eval"] = evaluate(graph, data, cfg.engine if cfg.engine != "fp" else "sim")
    return report


def cmd_eval(cfg: PipelineConfig) -> dict:
    """Evaluate a saved model on labeled data with any of the three engines."""
    graph = load_model(cfg.model)
    data = _load_samples(cfg.data)
    if data is None:
        raise ConfigurationError("eval needs --data")
    if cfg.engine == "int" and not graph.frozen:
        raise ConfigurationError("the integer engine needs a frozen model")
    report = {"command": "eval", "model": cfg.model}
    report["result"] = evaluate(graph, data, cfg.engine)
    return report


def cmd_diagnose(cfg: PipelineConfig) -> dict:
    """Locate where quantization error comes from.

    Runs the bypass-all sanity check, splits the damage between weight and
    activation quantizers, measures each quantizer slot in isolation, and
    exports per-channel weight statistics. Works on the simulated path; a
    frozen model is analyzed through an unfrozen copy.
    """
    graph = load_model(cfg.model)
    samples = _load_samples(cfg.calib) or _load_samples(cfg.data)
    if samples is None:
        raise ConfigurationError("diagnose needs --calib or --data")
    x = samples.inputs
    if not graph.weight_slots and not graph.act_slots:
        raise ConfigurationError("model has no quantizers to diagnose")
    work = graph.copy()
    work.frozen = False

    report = {"command": "diagnose", "model": cfg.model, "samples": int(x.shape[0])}
    y_fp = forward_fp(work, x)

    y_bypass = forward_sim_quant(work, x, active=set())
    sanity_delta = float(np.max(np.abs(y_bypass - y_fp)))
    report["sanity"] = {"max_abs_delta": sanity_delta, "ok": sanity_delta == 0.0}

    def mse_against_fp(active) -> float:
        y = forward_sim_quant(work, x, active=active)
        d = y - y_fp
        return float(np.mean(d * d))

    weight_sids = {name + ".w" for name in work.weight_slots}
    act_sids = set(work.act_slots)
    report["full"] = {"output_mse": mse_against_fp(None)}
    report["weights_only"] = {"output_mse": mse_against_fp(weight_sids)}
    report["activations_only"] = {"output_mse": mse_against_fp(act_sids)}

    per_slot = []
    for sid in sorted(weight_sids | act_sids):
        per_slot.append({"slot": sid, "output_mse": mse_against_fp({sid})})
    per_slot.sort(key=lambda r: r["output_mse"], reverse=True)
    report["per_slot"] = per_slot

    weight_stats = {}
    for layer in work.linear_layers():
        w = layer.params["weight"]
        flat = w.reshape(w.shape[0], -1)
        weight_stats[layer.name] = {
            "min": flat.min(axis=1).tolist(),
            "max": flat.max(axis=1).tolist(),
            "q25": np.percentile(flat, 25, axis=1).tolist(),
            "q50": np.percentile(flat, 50, axis=1).tolist(),
            "q75": np.percentile(flat, 75, axis=1).tolist(),
        }
    report["weight_channel_stats"] = weight_stats

    report["recommendations"] = _recommend(work, report, per_slot, weight_stats)
    if samples.labels is not None:
        report["fp_eval"] = evaluate(_fp_reference(work), samples)
        report["quant_eval"] = evaluate(work, samples)
    return report


def _recommend(graph: Graph, report: dict, per_slot: list, weight_stats: dict) -> list:
    recs = []
    if not per_slot:
        return recs
    total = sum(r["output_mse"] for r in per_slot) or 1.0
    worst = per_slot[0]
    if worst["output_mse"] > 0.5 * total:
        recs.append(
            "slot %s alone causes %.0f%% of the isolated quantization error; "
            "consider a higher bitwidth override for it" % (worst["slot"], 100.0 * worst["output_mse"] / total)
        )
    w_mse = report["weights_only"]["output_mse"]
    a_mse = report["activations_only"]["output_mse"]
    if w_mse > 4.0 * max(a_mse, 1e-30):
        recs.append(
            "weight rounding dominates (weights-only MSE %.3g vs activations-only %.3g); "
            "learned rounding and bias correction are the usual fixes" % (w_mse, a_mse)
        )
    elif a_mse > 4.0 * max(w_mse, 1e-30):
        recs.append(
            "activation quantization dominates (activations-only MSE %.3g vs weights-only %.3g); "
            "revisit the range-setting method or raise the dominant slot's bitwidth" % (a_mse, w_mse)
        )
    for name, stats in weight_stats.items():
        spans = np.array(stats["max"]) - np.array(stats["min"])
        spans = spans[spans > 0]
        if spans.size >= 2 and spans.max() / spans.min() > 20.0:
            slot = graph.weight_slots.get(name)
            if slot is not None and not slot.per_channel:
                recs.append(
                    "layer %s has a %.0fx spread between channel weight ranges; "
                    "enable per-channel weights or run equalization" % (name, spans.max() / spans.min())
                )
    return recs


def _default_out(model_path: str, tag: str) -> str:
    root, ext = os.path.splitext(model_path)
    return "%s.%s%s" % (root, tag, ext or ".json")


def _sibling(path: str, suffix: str) -> str:
    root, _ = os.path.splitext(path)
    return root + suffix


def _write_metrics_jsonl(path: str, history: list):
    with open(path, "w") as f:
        for row in history:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def write_report(report: dict, path: str):
    with open(path, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError("cannot serialize %r" % type(obj))
