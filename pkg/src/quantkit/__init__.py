"""Fixed-point quantization toolkit for small feed-forward networks.

The package simulates integer inference in float, trains through the
rounding with straight-through gradients, and can execute the final model
with genuine integer arithmetic to prove the simulation honest.
"""

from .adaround import AdaRoundConfig, adaround_graph, adaround_layer, qubo_objective, rounding_reg
from .errors import (
    AccumulatorOverflowError,
    ConfigurationError,
    ContractError,
    ModelFormatError,
    NumericalError,
    QuantkitError,
    ShapeError,
    UnsupportedPatternError,
)
from .graph import (
    Graph,
    LayerKind,
    QuantConfig,
    QuantSlot,
    attach_quantizers,
    forward_fp,
    forward_sim_quant,
    freeze,
)
from .intexec import run_int_graph
from .modelio import CalibrationSet, load_calibration, load_model, save_calibration, save_model
from .pipeline import PipelineConfig, build_config, cmd_diagnose, cmd_eval, cmd_ptq, cmd_qat, evaluate
from .qat import QATConfig, absorb_bn_into_channel_scales, train
from .quantizer import (
    LearnableQuantizer,
    QuantizerSpec,
    Scheme,
    dequantize,
    fake_quant_fp,
    quantize_int,
)
from .ranges import RangeMethod, fit_range, fit_spec, range_bn, range_cross_entropy, spec_from_range
from .transforms import absorb_high_bias, bias_correct_analytic, bias_correct_empirical, cle, fold_bn

__version__ = "0.1.0"

__all__ = [
    "AccumulatorOverflowError",
    "AdaRoundConfig",
    "CalibrationSet",
    "ConfigurationError",
    "ContractError",
    "Graph",
    "LayerKind",
    "LearnableQuantizer",
    "ModelFormatError",
    "NumericalError",
    "PipelineConfig",
    "QATConfig",
    "QuantConfig",
    "QuantSlot",
    "QuantizerSpec",
    "QuantkitError",
    "RangeMethod",
    "Scheme",
    "ShapeError",
    "UnsupportedPatternError",
    "absorb_bn_into_channel_scales",
    "absorb_high_bias",
    "adaround_graph",
    "adaround_layer",
    "qubo_objective",
    "rounding_reg",
    "attach_quantizers",
    "bias_correct_analytic",
    "bias_correct_empirical",
    "build_config",
    "cle",
    "cmd_diagnose",
    "cmd_eval",
    "cmd_ptq",
    "cmd_qat",
    "dequantize",
    "evaluate",
    "fake_quant_fp",
    "fit_range",
    "fit_spec",
    "fold_bn",
    "forward_fp",
    "forward_sim_quant",
    "freeze",
    "load_calibration",
    "load_model",
    "quantize_int",
    "range_bn",
    "range_cross_entropy",
    "run_int_graph",
    "save_calibration",
    "save_model",
    "spec_from_range",
    "train",
]
