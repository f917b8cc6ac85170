"""End-to-end command workflows: config merging, ptq, qat, eval, diagnose."""

import json
import os

import numpy as np
import pytest

from quantkit.datasets import build_mlp, split, two_moons
from quantkit.errors import ConfigurationError
from quantkit.graph import Graph, QuantConfig, attach_quantizers, forward_fp
from quantkit.modelio import CalibrationSet, load_model, save_calibration, save_model
from quantkit.pipeline import (
    PipelineConfig,
    build_config,
    cmd_diagnose,
    cmd_eval,
    cmd_ptq,
    cmd_qat,
    evaluate,
    fit_activation_ranges,
    write_report,
)
from quantkit.qat import QATConfig, train

from conftest import minmax_calibrate


@pytest.fixture(scope="module")
def assets(tmp_path_factory):
    """One pretrained moons model plus calibration and labeled data files."""
    root = tmp_path_factory.mktemp("assets")
    x, y = two_moons(400, noise=0.15, seed=0)
    xtr, ytr, xte, yte = split(x, y, holdout=0.3, seed=0)
    net = build_mlp([2, 12, 12, 2], seed=0)
    train(net, xtr, ytr, QATConfig(epochs=40, lr=5e-3, seed=0), quantize=False)
    net.metadata["input_range"] = [float(x.min()), float(x.max())]

    paths = {
        "model": str(root / "model.json"),
        "calib": str(root / "calib.json"),
        "train": str(root / "train.json"),
        "test": str(root / "test.json"),
        "root": root,
    }
    save_model(net, paths["model"])
    save_calibration(paths["calib"], xtr[:64])
    save_calibration(paths["train"], xtr, ytr)
    save_calibration(paths["test"], xte, yte)
    return paths


def _bn_model_path(tmp_path, seed=0, input_range=(-3.0, 3.0)):
    rng = np.random.default_rng(seed)
    g = Graph(input_shape=(2,))
    g.add_linear("fc1", rng.normal(size=(8, 2)) * 0.8, rng.normal(size=8) * 0.1)
    g.add_batchnorm(
        "bn1",
        rng.uniform(0.5, 1.5, 8),
        rng.normal(size=8) * 0.3,
        rng.normal(size=8) * 0.2,
        rng.uniform(0.5, 2.0, 8),
    )
    g.add_relu("act1")
    g.add_linear("head", rng.normal(size=(2, 8)) * 0.8)
    g.add_batchnorm(
        "bn_head", rng.uniform(0.5, 1.5, 2), rng.normal(size=2) * 0.3, np.zeros(2), np.ones(2)
    )
    if input_range is not None:
        g.metadata["input_range"] = list(input_range)
    path = str(tmp_path / "bn_model.json")
    save_model(g, path)
    return path


def _steps(report):
    return [s["step"] for s in report["steps"]]


def _step(report, name):
    for s in report["steps"]:
        if s["step"] == name:
            return s
    raise AssertionError("no step %r in %r" % (name, _steps(report)))


# -------------------------------------------------------------- build_config


def test_config_defaults():
    cfg = build_config()
    assert cfg.engine == "sim"
    assert cfg.wbits == 8 and cfg.abits == 8
    assert cfg.cle is True
    assert cfg.adaround is None
    assert cfg.bias_corr == "auto"
    assert cfg.act_range == "mse" and cfg.weight_range == "mse"


def test_config_flags_merge_and_none_skipped():
    cfg = build_config(wbits=4, engine=None, lr=5e-3)
    assert cfg.wbits == 4
    assert cfg.engine == "sim"
    assert cfg.lr == 5e-3


def test_config_unknown_flag_rejected():
    with pytest.raises(ConfigurationError):
        build_config(bitwidth=4)


def test_config_file_overrides_flags(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"wbits": 6, "act_range": "minmax"}))
    cfg = build_config(str(p), wbits=4, abits=5)
    assert cfg.wbits == 6
    assert cfg.abits == 5
    assert cfg.act_range == "minmax"


def test_config_file_errors(tmp_path):
    bad_key = tmp_path / "bad.json"
    bad_key.write_text(json.dumps({"no_such_option": 1}))
    with pytest.raises(ConfigurationError):
        build_config(str(bad_key))
    not_obj = tmp_path / "arr.json"
    not_obj.write_text("[1, 2]")
    with pytest.raises(ConfigurationError):
        build_config(str(not_obj))
    broken = tmp_path / "broken.json"
    broken.write_text("{nope")
    with pytest.raises(ConfigurationError):
        build_config(str(broken))
    with pytest.raises(ConfigurationError):
        build_config(str(tmp_path / "missing.json"))


@pytest.mark.parametrize(
    "flags",
    [
        {"engine": "gpu"},
        {"bias_corr": "always"},
        {"act_range": "entropy"},
        {"weight_range": "bn"},
        {"qat_bn": "drop"},
        {"weight_scheme": "ternary"},
        {"wbits": 1},
        {"abits": 17},
    ],
)
def test_config_validation_rejects(flags):
    with pytest.raises(ConfigurationError):
        build_config(**flags)


# ---------------------------------------------------------------------- ptq


def test_ptq_stage_order_and_report(assets, tmp_path):
    out = str(tmp_path / "q.json")
    cfg = PipelineConfig(
        model=assets["model"], calib=assets["calib"], data=assets["test"],
        out=out, adaround_iters=200,
    )
    report = cmd_ptq(cfg)
    assert report["command"] == "ptq"
    assert _steps(report) == [
        "cle", "absorb_high_bias", "fit_weights", "adaround", "bias_corr", "fit_activations",
    ]
    # probes measure output MSE against the float reference at each stage
    for name in ("cle", "fit_weights", "adaround", "fit_activations"):
        assert np.isfinite(_step(report, name)["output_mse"])
    assert report["bias_corr_mode"] == "off"
    assert report["out"] == out
    assert report["fp_eval"]["accuracy"] >= 0.9
    assert report["quant_eval"]["accuracy"] >= 0.8

    saved = load_model(out)
    assert saved.frozen
    assert set(saved.weight_slots) == {"fc1", "fc2", "fc3"}


def test_ptq_bn_model_folds_first(assets, tmp_path):
    model = _bn_model_path(tmp_path)
    cfg = PipelineConfig(
        model=model, calib=assets["calib"], out=str(tmp_path / "q.json"), adaround_iters=100,
    )
    report = cmd_ptq(cfg)
    assert _steps(report)[0] == "fold_bn"
    assert not load_model(report["out"]).has_batchnorm()


def test_ptq_data_free_uses_bn_ranges(assets, tmp_path):
    model = _bn_model_path(tmp_path)
    cfg = PipelineConfig(model=model, out=str(tmp_path / "q.json"))
    report = cmd_ptq(cfg)
    assert _step(report, "adaround")["result"] == {"skipped": "no calibration data"}
    assert report["bias_corr_mode"] == "analytic"
    fits = _step(report, "fit_activations")["result"]
    assert all(r["method"] == "bn" for r in fits)
    assert load_model(report["out"]).frozen


def test_ptq_data_free_without_statistics_fails(assets, tmp_path):
    model = _bn_model_path(tmp_path, input_range=None)
    with pytest.raises(ConfigurationError):
        cmd_ptq(PipelineConfig(model=model, out=str(tmp_path / "q.json")))


def test_ptq_data_free_plain_mlp_fails(assets, tmp_path):
    # no BN statistics anywhere: activation ranges cannot be derived
    net = build_mlp([2, 6, 2], seed=1)
    model = str(tmp_path / "plain.json")
    save_model(net, model)
    with pytest.raises(ConfigurationError):
        cmd_ptq(PipelineConfig(model=model, out=str(tmp_path / "q.json")))


def test_ptq_adaround_switch(assets, tmp_path):
    cfg = PipelineConfig(
        model=assets["model"], calib=assets["calib"], out=str(tmp_path / "q.json"),
        adaround=False,
    )
    report = cmd_ptq(cfg)
    assert _step(report, "adaround")["result"] == {"skipped": "disabled"}

    with pytest.raises(ConfigurationError):
        cmd_ptq(PipelineConfig(model=assets["model"], adaround=True, out=str(tmp_path / "q2.json")))


def test_ptq_explicit_bias_corr_modes(assets, tmp_path):
    cfg = PipelineConfig(
        model=assets["model"], calib=assets["calib"], out=str(tmp_path / "q.json"),
        bias_corr="empirical", adaround=False,
    )
    report = cmd_ptq(cfg)
    assert report["bias_corr_mode"] == "empirical"
    recs = _step(report, "bias_corr")["result"]
    assert {r["layer"] for r in recs} == {"fc1", "fc2", "fc3"}

    with pytest.raises(ConfigurationError):
        cmd_ptq(PipelineConfig(model=assets["model"], bias_corr="empirical", out=str(tmp_path / "q2.json")))


def test_ptq_xent_last_targets_output_slot(assets, tmp_path):
    cfg = PipelineConfig(
        model=assets["model"], calib=assets["calib"], out=str(tmp_path / "q.json"),
        act_range="xent-last", adaround=False,
    )
    report = cmd_ptq(cfg)
    fits = {r["slot"]: r["method"] for r in _step(report, "fit_activations")["result"]}
    assert fits["fc3.out"] == "xent"
    assert all(m == "mse" for s, m in fits.items() if s != "fc3.out")


def test_ptq_no_cle_flag(assets, tmp_path):
    cfg = PipelineConfig(
        model=assets["model"], calib=assets["calib"], out=str(tmp_path / "q.json"),
        cle=False, adaround=False,
    )
    report = cmd_ptq(cfg)
    assert "cle" not in _steps(report)
    assert "absorb_high_bias" not in _steps(report)


def test_ptq_default_out_path(assets, tmp_path):
    import shutil

    model = str(tmp_path / "m.json")
    shutil.copy(assets["model"], model)
    # the manifest names its blob by basename; keep that name beside the copy
    shutil.copy(assets["model"][:-5] + ".bin", str(tmp_path / "model.bin"))
    report = cmd_ptq(PipelineConfig(model=model, calib=assets["calib"], adaround=False))
    assert report["out"] == str(tmp_path / "m.quant.json")
    assert os.path.exists(report["out"])


def test_ptq_report_is_deterministic(assets, tmp_path):
    blobs = []
    for sub in ("a", "b"):
        d = tmp_path / sub
        d.mkdir()
        out = str(d / "q.json")
        report = cmd_ptq(
            PipelineConfig(
                model=assets["model"], calib=assets["calib"], data=assets["test"],
                out=out, seed=3, adaround_iters=150,
            )
        )
        rp = str(d / "report.json")
        write_report(report, rp)
        with open(rp) as f:
            parsed = json.load(f)
        # the output path is the one seed-independent field; normalize it
        parsed["out"] = parsed["config"]["out"] = "OUT"
        with open(out, "rb") as f:
            manifest = f.read()
        blobs.append((parsed, manifest))
    assert blobs[0][1] == blobs[1][1]
    assert blobs[0][0] == blobs[1][0]


# ---------------------------------------------------------------------- qat


def test_qat_requires_labeled_data(assets, tmp_path):
    with pytest.raises(ConfigurationError):
        cmd_qat(PipelineConfig(model=assets["model"], out=str(tmp_path / "q.json")))
    with pytest.raises(ConfigurationError):
        cmd_qat(
            PipelineConfig(
                model=assets["model"], data=assets["calib"], out=str(tmp_path / "q.json")
            )
        )


def test_qat_end_to_end(assets, tmp_path):
    out = str(tmp_path / "qat.json")
    cfg = PipelineConfig(
        model=assets["model"], data=assets["train"], calib=assets["calib"],
        out=out, wbits=4, abits=4, epochs=8, batch_size=16, seed=0,
    )
    report = cmd_qat(cfg)
    assert _steps(report) == ["cle", "fit_weights", "fit_activations", "train"]
    assert len(report["training"]["history"]) == 8
    assert report["quant_eval"]["accuracy"] >= 0.8

    saved = load_model(out)
    assert saved.frozen

    metrics = report["metrics"]
    assert metrics == str(tmp_path / "qat.metrics.jsonl")
    rows = [json.loads(line) for line in open(metrics)]
    assert len(rows) == 8
    assert [r["epoch"] for r in rows] == list(range(8))


def test_qat_without_calib_falls_back_to_data(assets, tmp_path):
    cfg = PipelineConfig(
        model=assets["model"], data=assets["train"], out=str(tmp_path / "q.json"),
        epochs=2,
    )
    report = cmd_qat(cfg)
    assert _step(report, "fit_activations")["result"]


def test_qat_keep_bn_requires_per_channel(assets, tmp_path):
    model = _bn_model_path(tmp_path)
    base = dict(model=model, data=assets["train"], out=str(tmp_path / "q.json"), epochs=2)
    with pytest.raises(ConfigurationError):
        cmd_qat(PipelineConfig(qat_bn="keep", **base))

    report = cmd_qat(PipelineConfig(qat_bn="keep", per_channel=True, **base))
    steps = _steps(report)
    assert "fold_bn" not in steps
    assert _step(report, "cle")["result"] == {"skipped": "batch-norm kept"}
    assert "absorb_bn" in steps
    assert not load_model(report["out"]).has_batchnorm()


def test_qat_fold_bn_path(assets, tmp_path):
    model = _bn_model_path(tmp_path)
    report = cmd_qat(
        PipelineConfig(
            model=model, data=assets["train"], out=str(tmp_path / "q.json"), epochs=2,
        )
    )
    assert _steps(report)[0] == "fold_bn"
    assert "absorb_bn" not in _steps(report)


# --------------------------------------------------------------------- eval


def test_eval_engines_agree_on_frozen_model(assets, tmp_path):
    out = str(tmp_path / "q.json")
    cmd_ptq(
        PipelineConfig(
            model=assets["model"], calib=assets["calib"], out=out, adaround_iters=100,
        )
    )
    accs = {}
    for engine in ("fp", "sim", "int"):
        report = cmd_eval(PipelineConfig(model=out, data=assets["test"], engine=engine))
        assert report["command"] == "eval"
        accs[engine] = report["result"]["accuracy"]
    # integer engine mirrors the simulated one exactly
    assert accs["int"] == accs["sim"]
    assert accs["fp"] >= 0.85


def test_eval_contract_errors(assets, tmp_path):
    with pytest.raises(ConfigurationError):
        cmd_eval(PipelineConfig(model=assets["model"]))
    # unfrozen float model cannot run on the integer engine
    with pytest.raises(ConfigurationError):
        cmd_eval(PipelineConfig(model=assets["model"], data=assets["test"], engine="int"))


def test_evaluate_unlabeled_reports_mean_output(assets):
    net = load_model(assets["model"])
    x = two_moons(40, seed=5)[0]
    report = evaluate(net, CalibrationSet(x, None), "fp")
    assert report["samples"] == 40
    assert "mean_output" in report and "accuracy" not in report


# ----------------------------------------------------------------- diagnose


@pytest.fixture()
def quantized_model(assets, tmp_path):
    out = str(tmp_path / "q.json")
    cmd_ptq(
        PipelineConfig(
            model=assets["model"], calib=assets["calib"], out=out, adaround_iters=100,
        )
    )
    return out


def test_diagnose_report_shape(quantized_model, assets):
    report = cmd_diagnose(PipelineConfig(model=quantized_model, calib=assets["calib"]))
    assert report["sanity"]["ok"] is True
    assert report["sanity"]["max_abs_delta"] == 0.0

    saved = load_model(quantized_model)
    expect = set(saved.slot_ids())
    got = [r["slot"] for r in report["per_slot"]]
    # every quantizer slot is measured in isolation exactly once
    assert set(got) == expect
    assert len(got) == len(expect)
    mses = [r["output_mse"] for r in report["per_slot"]]
    assert mses == sorted(mses, reverse=True)

    assert report["full"]["output_mse"] >= 0.0
    assert set(report["weight_channel_stats"]) == {"fc1", "fc2", "fc3"}
    for stats in report["weight_channel_stats"].values():
        assert set(stats) == {"min", "max", "q25", "q50", "q75"}
    assert "recommendations" in report


def test_diagnose_flags_planted_bad_slot(assets, tmp_path):
    net = load_model(assets["model"])
    attach_quantizers(net, QuantConfig())
    x = two_moons(64, noise=0.15, seed=0)[0]
    minmax_calibrate(net, x)
    # sabotage the second hidden activation grid: 40x too coarse
    bad = net.act_slots["act2.out"].spec
    net.act_slots["act2.out"].spec = type(bad)(
        bad.scheme, bad.bitwidth, bad.scale * 40.0, bad.zero_point, bad.axis
    )
    model = str(tmp_path / "sabotaged.json")
    save_model(net, model)

    report = cmd_diagnose(PipelineConfig(model=model, calib=assets["calib"]))
    assert report["per_slot"][0]["slot"] == "act2.out"
    assert any("act2.out" in r for r in report["recommendations"])


def test_diagnose_contract_errors(assets, tmp_path):
    with pytest.raises(ConfigurationError):
        cmd_diagnose(PipelineConfig(model=assets["model"], calib=assets["calib"]))

    net = load_model(assets["model"])
    attach_quantizers(net, QuantConfig())
    minmax_calibrate(net, two_moons(32, seed=1)[0])
    model = str(tmp_path / "q.json")
    save_model(net, model)
    with pytest.raises(ConfigurationError):
        cmd_diagnose(PipelineConfig(model=model))


def test_diagnose_labeled_samples_add_eval(quantized_model, assets):
    report = cmd_diagnose(PipelineConfig(model=quantized_model, data=assets["test"]))
    assert "fp_eval" in report and "quant_eval" in report
    assert report["fp_eval"]["accuracy"] >= report["quant_eval"]["accuracy"] - 0.15


# ------------------------------------------------------------------ reports


def test_write_report_serializes_numpy(tmp_path):
    path = str(tmp_path / "r.json")
    write_report(
        {"a": np.float64(1.5), "b": np.int64(3), "c": np.arange(3), "z": 1},
        path,
    )
    text = open(path).read()
    assert text.endswith("\n")
    data = json.loads(text)
    assert data == {"a": 1.5, "b": 3, "c": [0, 1, 2], "z": 1}
    # keys come out sorted for byte-stable reports
    assert list(data) == ["a", "b", "c", "z"]


def test_write_report_rejects_unserializable(tmp_path):
    with pytest.raises(TypeError):
        write_report({"x": object()}, str(tmp_path / "r.json"))


def test_fit_activation_ranges_requires_observations(assets):
    net = load_model(assets["model"])
    attach_quantizers(net, QuantConfig())
    for name, slot in net.weight_slots.items():
        w = net.layer(name).params["weight"]
        from quantkit.ranges import RangeMethod, fit_spec

        slot.spec = fit_spec(w, slot.scheme, slot.bitwidth, RangeMethod.MINMAX)
    # orphan an activation slot so the calibration pass never sees its edge
    net.act_slots["ghost"] = net.act_slots["fc3.out"].copy()
    x = two_moons(16, seed=2)[0]
    with pytest.raises(ConfigurationError):
        fit_activation_ranges(net, x, "mse")
