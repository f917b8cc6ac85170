"""Range estimation: turning observed values into quantizer grids.

Four estimators are provided. Min-max is the baseline. The MSE and
cross-entropy estimators run a deterministic grid search over shrunken
candidate ranges, so two runs on the same data always pick the same grid.
The batch-norm estimator derives a range from folded BN statistics without
looking at data at all.

spec_from_range converts a (q_min, q_max) pair into concrete grid parameters
for any scheme, applying two safety rules first: the range is widened to
include zero (so padding and ReLU zeros are exactly representable), and an
all-zero range falls back to a tiny positive scale instead of dividing by
zero.
"""

from enum import Enum

import numpy as np

from .errors import ContractError
from .quantizer import QuantizerSpec, Scheme, fake_quant_fp
from .tensor import softmax_fp


class RangeMethod(str, Enum):
    MINMAX = "minmax"
    MSE = "mse"
    CROSS_ENTROPY = "xent"
    BN = "bn"


# Candidate fractions for the grid searches: 100 evenly spaced shrink factors.
_FRACTIONS = 1.0 - np.arange(100) / 120.0

_DEGENERATE_SCALE = 1e-8


def spec_from_range(q_min, q_max, scheme: Scheme, bitwidth: int, axis: int | None = None) -> QuantizerSpec:
    """Build grid parameters covering [q_min, q_max].

    Accepts scalars (per-tensor) or equal-length 1-d arrays (per-channel
    along `axis`). The realized grid limits may differ slightly from the
    request: zero is always included, asymmetric grids round the zero-point,
    and symmetric grids are anchored at zero by construction.
    """
    scheme = Scheme(scheme)
    q_min = np.atleast_1d(np.asarray(q_min, dtype=np.float64))
    q_max = np.atleast_1d(np.asarray(q_max, dtype=np.float64))
    if q_min.shape != q_max.shape or q_min.ndim != 1:
        raise ContractError("q_min and q_max must be scalars or equal-length 1-d arrays")
    if np.any(q_max < q_min):
        raise ContractError("q_max must be >= q_min")
    # zero-inclusion
    q_min = np.minimum(q_min, 0.0)
    q_max = np.maximum(q_max, 0.0)

    b = bitwidth
    levels = 2**b - 1
    if scheme is Scheme.ASYMMETRIC:
        s = (q_max - q_min) / levels
        s = np.where(s > 0, s, _DEGENERATE_SCALE)
        z = np.clip(np.rint(-q_min / s), 0, levels)
        return QuantizerSpec(scheme, b, s, z, axis)
    if scheme is Scheme.SYMMETRIC_UNSIGNED:
        s = np.where(q_max > 0, q_max / levels, _DEGENERATE_SCALE)
        return QuantizerSpec(scheme, b, s, np.zeros_like(s), axis)
    # signed symmetric grids: scale must cover both endpoints
    neg_levels = 2 ** (b - 1)
    pos_levels = 2 ** (b - 1) - 1
    s = np.maximum(-q_min / neg_levels, q_max / pos_levels)
    s = np.where(s > 0, s, _DEGENERATE_SCALE)
    if scheme is Scheme.POWER_OF_TWO:
        s = 2.0 ** np.rint(np.log2(s))
    return QuantizerSpec(scheme, b, s, np.zeros_like(s), axis)


def range_minmax(v: np.ndarray) -> tuple:
    """Observed extremes, widened through zero when the range is degenerate."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ContractError("cannot estimate a range from an empty array")
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        lo, hi = min(lo, 0.0), max(hi, 0.0)
    return lo, hi


def _mse_of_range(v, lo, hi, scheme, bitwidth) -> float:
    spec = spec_from_range(lo, hi, scheme, bitwidth)
    err = v - fake_quant_fp(v, spec)
    return float(np.mean(err * err))


def range_mse(v: np.ndarray, scheme: Scheme, bitwidth: int) -> tuple:
    """Range minimizing quantization MSE over a fixed candidate ladder.

    Symmetric schemes scan one shrink factor. The asymmetric scheme scans
    each endpoint separately with two rounds of coordinate descent. The
    ladder includes the unshrunk min-max range, so the result is never worse
    than min-max.
    """
    v = np.asarray(v, dtype=np.float64)
    scheme = Scheme(scheme)
    if scheme is Scheme.ASYMMETRIC:
        lo0 = min(float(v.min()), 0.0)
        hi0 = max(float(v.max()), 0.0)
        lo, hi = lo0, hi0
        best = _mse_of_range(v, lo, hi, scheme, bitwidth)
        for _ in range(2):
            for cand in lo0 * _FRACTIONS:
                err = _mse_of_range(v, cand, hi, scheme, bitwidth)
                if err < best:
                    best, lo = err, cand
            for cand in hi0 * _FRACTIONS:
                err = _mse_of_range(v, lo, cand, scheme, bitwidth)
                if err < best:
                    best, hi = err, cand
        return lo, hi
    if scheme is Scheme.SYMMETRIC_UNSIGNED:
        base = max(float(v.max()), 0.0)
        lo_of = lambda c: 0.0
    else:
        base = float(np.abs(v).max())
        lo_of = lambda c: -c
    best_hi = base
    best = _mse_of_range(v, lo_of(base), base, scheme, bitwidth)
    for cand in base * _FRACTIONS:
        err = _mse_of_range(v, lo_of(cand), cand, scheme, bitwidth)
        if err < best:
            best, best_hi = err, cand
    return lo_of(best_hi), best_hi


def _xent_of_range(logits, lo, hi, scheme, bitwidth) -> float:
    spec = spec_from_range(lo, hi, scheme, bitwidth)
    vq = fake_quant_fp(logits, spec)
    p = softmax_fp(logits, axis=1)
    # log softmax of the quantized logits, stabilized
    zmax = vq.max(axis=1, keepdims=True)
    logq = vq - zmax - np.log(np.exp(vq - zmax).sum(axis=1, keepdims=True))
    return float(-(p * logq).sum(axis=1).mean())


def range_cross_entropy(logits: np.ndarray, scheme: Scheme, bitwidth: int) -> tuple:
    """Range minimizing softmax cross-entropy between float and quantized logits.

    Meant for the network's final logit tensor, where preserving the order
    and margins of the large entries matters more than overall MSE. Same
    candidate ladder as range_mse.
    """
    if isinstance(logits, (list, tuple)):
        if not logits:
            raise ContractError("cross-entropy estimator needs at least one logit sample")
        logits = np.stack([np.asarray(s, dtype=np.float64).reshape(-1) for s in logits])
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 1:
        logits = logits[None, :]
    if logits.ndim != 2 or logits.size == 0:
        raise ContractError("cross-entropy estimator expects non-empty (N, C) logits")
    scheme = Scheme(scheme)
    if scheme is Scheme.ASYMMETRIC:
        lo0 = min(float(logits.min()), 0.0)
        hi0 = max(float(logits.max()), 0.0)
        lo, hi = lo0, hi0
        best = _xent_of_range(logits, lo, hi, scheme, bitwidth)
        for _ in range(2):
            for cand in lo0 * _FRACTIONS:
                err = _xent_of_range(logits, cand, hi, scheme, bitwidth)
                if err < best:
                    best, lo = err, cand
            for cand in hi0 * _FRACTIONS:
                err = _xent_of_range(logits, lo, cand, scheme, bitwidth)
                if err < best:
                    best, hi = err, cand
        return lo, hi
    if scheme is Scheme.SYMMETRIC_UNSIGNED:
        base = max(float(logits.max()), 0.0)
        lo_of = lambda c: 0.0
    else:
        base = float(np.abs(logits).max())
        lo_of = lambda c: -c
    best_hi = base
    best = _xent_of_range(logits, lo_of(base), base, scheme, bitwidth)
    for cand in base * _FRACTIONS:
        err = _xent_of_range(logits, lo_of(cand), cand, scheme, bitwidth)
        if err < best:
            best, best_hi = err, cand
    return lo_of(best_hi), best_hi


def range_bn(beta: np.ndarray, gamma: np.ndarray, alpha: float = 6.0) -> tuple:
    """Data-free activation range from folded batch-norm statistics.

    The pre-activation is approximately N(beta_k, gamma_k^2) per channel, so
    beta +/- alpha*gamma covers essentially all of it.
    """
    beta = np.asarray(beta, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != beta.shape or gamma.ndim != 1 or gamma.size == 0:
        raise ContractError("beta and gamma must be equal-length 1-d arrays")
    if alpha <= 0:
        raise ContractError("alpha must be positive")
    return float(np.min(beta - alpha * gamma)), float(np.max(beta + alpha * gamma))


def fit_range(v: np.ndarray, scheme: Scheme, bitwidth: int, method: RangeMethod) -> tuple:
    method = RangeMethod(method)
    if method is RangeMethod.MINMAX:
        return range_minmax(v)
    if method is RangeMethod.MSE:
        return range_mse(v, scheme, bitwidth)
    if method is RangeMethod.CROSS_ENTROPY:
        return range_cross_entropy(v, scheme, bitwidth)
    raise ContractError("method %r needs BN statistics, not raw values" % (method,))


def fit_spec(
    v: np.ndarray,
    scheme: Scheme,
    bitwidth: int,
    method: RangeMethod = RangeMethod.MINMAX,
    per_channel: bool = False,
    axis: int = 0,
) -> QuantizerSpec:
    """Estimate a range and build the spec, per-tensor or per-channel."""
    v = np.asarray(v, dtype=np.float64)
    if not per_channel:
        lo, hi = fit_range(v, scheme, bitwidth, method)
        return spec_from_range(lo, hi, scheme, bitwidth)
    if axis >= v.ndim:
        raise ContractError("per-channel axis %d out of bounds for shape %r" % (axis, v.shape))
    moved = np.moveaxis(v, axis, 0)
    lows, highs = [], []
    for sl in moved:
        lo, hi = fit_range(sl, scheme, bitwidth, method)
        lows.append(lo)
        highs.append(hi)
    return spec_from_range(np.array(lows), np.array(highs), scheme, bitwidth, axis=axis)


class ActivationObserver:
    """Accumulates calibration-time values seen at one activation site."""

    def __init__(self):
        self._chunks = []

    def add(self, arr: np.ndarray):
        self._chunks.append(np.asarray(arr, dtype=np.float64))

    @property
    def count(self) -> int:
        return sum(c.size for c in self._chunks)

    def collected(self) -> np.ndarray:
        if not self._chunks:
            raise ContractError("observer has no recorded values")
        return np.concatenate([c.reshape(-1) for c in self._chunks])

    def stacked(self) -> np.ndarray:
        """Rows of per-sample vectors; requires consistent trailing shape."""
        if not self._chunks:
            raise ContractError("observer has no recorded values")
        rows = [c.reshape(c.shape[0], -1) if c.ndim > 1 else c.reshape(1, -1) for c in self._chunks]
        width = rows[0].shape[1]
        if any(r.shape[1] != width for r in rows):
            raise ContractError("observed value shapes are inconsistent")
        return np.concatenate(rows, axis=0)
