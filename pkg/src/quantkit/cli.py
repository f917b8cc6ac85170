"""Command-line entry point.

Exit codes: 0 on success, 2 for configuration or file-format problems,
3 for numerical failures such as accumulator overflow or diverged training.
"""

import argparse
import json
import sys

from .errors import ConfigurationError, ModelFormatError, NumericalError, ShapeError
from .pipeline import build_config, cmd_diagnose, cmd_eval, cmd_ptq, cmd_qat, write_report


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--model", required=True, help="model container to read")
    p.add_argument("--config", help="JSON config file; its settings override flags")
    p.add_argument("--out", help="output path for the result")
    p.add_argument("--seed", type=int)
    p.add_argument("--report", help="write the full JSON report here")


def _add_quant_flags(p: argparse.ArgumentParser):
    p.add_argument("--calib", help="calibration container")
    p.add_argument("--data", help="labeled data container for evaluation")
    p.add_argument("--wbits", type=int, help="weight bitwidth (2-16)")
    p.add_argument("--abits", type=int, help="activation bitwidth (2-16)")
    p.add_argument("--weight-scheme", dest="weight_scheme")
    p.add_argument("--act-scheme", dest="act_scheme")
    p.add_argument("--per-channel", dest="per_channel", action="store_true", default=None)
    p.add_argument("--no-cle", dest="cle", action="store_false", default=None)
    p.add_argument("--adaround", dest="adaround", action="store_true", default=None)
    p.add_argument("--no-adaround", dest="adaround", action="store_false")
    p.add_argument("--adaround-iters", dest="adaround_iters", type=int)
    p.add_argument("--bias-corr", dest="bias_corr", choices=["empirical", "analytic", "off", "auto"])
    p.add_argument("--act-range", dest="act_range", choices=["minmax", "mse", "bn", "xent-last"])
    p.add_argument("--weight-range", dest="weight_range", choices=["minmax", "mse"])
    p.add_argument("--engine", choices=["sim", "int", "fp"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quantkit", description="Fixed-point quantization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ptq", help="post-training quantization")
    _add_common(p)
    _add_quant_flags(p)

    p = sub.add_parser("qat", help="quantization-aware training")
    _add_common(p)
    _add_quant_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--optimizer", choices=["adam", "sgd"])
    p.add_argument("--quant-lr-factor", dest="quant_lr_factor", type=float)
    p.add_argument("--no-learn-ranges", dest="learn_ranges", action="store_false", default=None,
                   help="keep quantizer ranges fixed at their calibrated values")
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--qat-bn", dest="qat_bn", choices=["fold", "keep"])
    p.add_argument("--loss", choices=["xent", "mse"])

    p = sub.add_parser("diagnose", help="per-quantizer error breakdown")
    _add_common(p)
    p.add_argument("--calib", help="inputs to probe with")
    p.add_argument("--data", help="labeled data, used if no calibration set is given")

    p = sub.add_parser("eval", help="evaluate a model on labeled data")
    _add_common(p)
    p.add_argument("--data", required=True, help="labeled data container")
    p.add_argument("--engine", choices=["sim", "int", "fp"])
    return parser


_COMMANDS = {"ptq": cmd_ptq, "qat": cmd_qat, "diagnose": cmd_diagnose, "eval": cmd_eval}


def _summarize(report: dict):
    cmd = report.get("command")
    if cmd == "ptq" or cmd == "qat":
        print("wrote %s" % report["out"])
        if "quant_eval" in report:
            fp = report.get("fp_eval", {}).get("accuracy")
            q = report["quant_eval"].get("accuracy")
            if fp is not None and q is not None:
                print("accuracy: fp %.4f -> quantized %.4f" % (fp, q))
        if cmd == "qat":
            print("best validation %.4f at epoch %d" % (report["training"]["best_val"], report["training"]["best_epoch"]))
    elif cmd == "eval":
        res = report["result"]
        if "accuracy" in res:
            print("accuracy %.4f (%s engine, %d samples)" % (res["accuracy"], res["engine"], res["samples"]))
        else:
            print(json.dumps(res))
    elif cmd == "diagnose":
        print("sanity (all quantizers bypassed): max |delta| = %g" % report["sanity"]["max_abs_delta"])
        print("output MSE: full %.3g, weights only %.3g, activations only %.3g"
              % (report["full"]["output_mse"], report["weights_only"]["output_mse"],
                 report["activations_only"]["output_mse"]))
        for row in report["per_slot"][:5]:
            print("  %-24s %.3g" % (row["slot"], row["output_mse"]))
        for rec in report["recommendations"]:
            print("hint: %s" % rec)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "report")}
    try:
        cfg = build_config(args.config, **flags)
        report = _COMMANDS[args.command](cfg)
    except (ConfigurationError, ModelFormatError, ShapeError) as e:
        print("error: %s" % e, file=sys.stderr)
        return 2
    except NumericalError as e:
        print("numerical error: %s" % e, file=sys.stderr)
        return 3
    _summarize(report)
    if args.report:
        write_report(report, args.report)
    return 0


if __name__ == "__main__":
    sys.exit(main())
