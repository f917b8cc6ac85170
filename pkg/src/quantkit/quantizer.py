"""Uniform quantizer: grids, rounding, and straight-through gradients.

A QuantizerSpec pins down one quantization grid: scheme, bitwidth, scale and
zero-point, optionally per-channel along one axis. All rounding is
round-half-to-even (np.rint) so results match IEEE default rounding and stay
reproducible across platforms.

Integer grids by scheme (b = bitwidth):
  asymmetric-unsigned   stored in [0, 2^b - 1], zero-point z in the same range
  symmetric-signed      stored in [-2^(b-1), 2^(b-1) - 1], z = 0
  symmetric-unsigned    stored in [0, 2^b - 1], z = 0
  power-of-two-signed   symmetric-signed with scale constrained to 2^-k
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import ContractError


class Scheme(str, Enum):
    ASYMMETRIC = "asymmetric-unsigned"
    SYMMETRIC_SIGNED = "symmetric-signed"
    SYMMETRIC_UNSIGNED = "symmetric-unsigned"
    POWER_OF_TWO = "power-of-two-signed"


_SIGNED = {Scheme.SYMMETRIC_SIGNED, Scheme.POWER_OF_TWO}


@dataclass
class QuantizerSpec:
    """A fully determined quantization grid.

    scale and zero_point are scalars for per-tensor grids, or 1-d arrays of
    equal length for per-channel grids along `axis`. zero_point is kept as an
    integer-valued float64 array; schemes other than asymmetric force it to 0.
    """

    scheme: Scheme
    bitwidth: int
    scale: np.ndarray
    zero_point: np.ndarray
    axis: int | None = None

    def __post_init__(self):
        self.scheme = Scheme(self.scheme)
        self.bitwidth = int(self.bitwidth)
        if not 2 <= self.bitwidth <= 16:
            raise ContractError("bitwidth must be in [2, 16], got %d" % self.bitwidth)
        self.scale = np.atleast_1d(np.asarray(self.scale, dtype=np.float64)).copy()
        self.zero_point = np.atleast_1d(np.asarray(self.zero_point, dtype=np.float64)).copy()
        if self.scale.ndim != 1 or self.zero_point.shape != self.scale.shape:
            raise ContractError("scale and zero_point must be 1-d and equal length")
        if not np.all(self.scale > 0) or not np.all(np.isfinite(self.scale)):
            raise ContractError("scale must be positive and finite")
        if self.per_channel and self.axis is None:
            raise ContractError("per-channel spec requires an axis")
        if not self.per_channel:
            self.axis = None
        lo, hi = self.int_bounds()
        if self.scheme is Scheme.ASYMMETRIC:
            if np.any(self.zero_point != np.rint(self.zero_point)):
                raise ContractError("zero_point must be integer-valued")
            if np.any(self.zero_point < lo) or np.any(self.zero_point > hi):
                raise ContractError("zero_point must lie in [%d, %d]" % (lo, hi))
        else:
            if np.any(self.zero_point != 0):
                raise ContractError("%s requires zero_point 0" % self.scheme.value)
        if self.scheme is Scheme.POWER_OF_TWO:
            k = np.log2(self.scale)
            if np.any(k != np.rint(k)):
                raise ContractError("power-of-two scheme requires scale = 2^-k")

    @property
    def per_channel(self) -> bool:
        return self.scale.shape[0] > 1

    @property
    def n_channels(self) -> int:
        return self.scale.shape[0]

    def int_bounds(self) -> tuple:
        """Storage-domain integer limits (lo, hi)."""
        b = self.bitwidth
        if self.scheme in _SIGNED:
            return -(2 ** (b - 1)), 2 ** (b - 1) - 1
        return 0, 2**b - 1

    def relative_bounds(self) -> tuple:
        """Integer limits relative to the zero-point: n = lo - z, p = hi - z.

        These bound round(x/s); q_min = s*n and q_max = s*p.
        """
        lo, hi = self.int_bounds()
        return lo - self.zero_point, hi - self.zero_point

    def grid_limits(self) -> tuple:
        """Representable float range (q_min, q_max) per channel group."""
        n, p = self.relative_bounds()
        return self.scale * n, self.scale * p

    def broadcast(self, ndim: int):
        """Scale and zero-point shaped for arithmetic against an ndim array."""
        if not self.per_channel:
            return self.scale[0], self.zero_point[0]
        shape = [1] * ndim
        shape[self.axis] = self.n_channels
        return self.scale.reshape(shape), self.zero_point.reshape(shape)

    def copy(self) -> "QuantizerSpec":
        return QuantizerSpec(self.scheme, self.bitwidth, self.scale.copy(), self.zero_point.copy(), self.axis)


def _check_channels(x: np.ndarray, spec: QuantizerSpec):
    if spec.per_channel:
        if spec.axis >= x.ndim or x.shape[spec.axis] != spec.n_channels:
            raise ContractError(
                "per-channel spec (%d channels on axis %d) does not fit array of shape %r"
                % (spec.n_channels, spec.axis, x.shape)
            )


def quantize_int(x: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """Map real values onto the storage integer grid (int64, clamped)."""
    x = np.asarray(x, dtype=np.float64)
    _check_channels(x, spec)
    s, z = spec.broadcast(x.ndim)
    lo, hi = spec.int_bounds()
    q = np.rint(x / s) + z
    return np.clip(q, lo, hi).astype(np.int64)


def dequantize(x_int: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """Map storage integers back to their real grid values."""
    x_int = np.asarray(x_int)
    lo, hi = spec.int_bounds()
    if np.any(x_int < lo) or np.any(x_int > hi):
        raise ContractError("integer values outside [%d, %d]" % (lo, hi))
    _check_channels(x_int, spec)
    s, z = spec.broadcast(x_int.ndim)
    return s * (x_int.astype(np.float64) - z)


def fake_quant_fp(x: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """Quantize-dequantize in one step (the simulated-quantization forward)."""
    x = np.asarray(x, dtype=np.float64)
    _check_channels(x, spec)
    s, z = spec.broadcast(x.ndim)
    lo, hi = spec.int_bounds()
    q = np.clip(np.rint(x / s) + z, lo, hi)
    return s * (q - z)


# ---------------------------------------------------------------------------
# straight-through gradients
# ---------------------------------------------------------------------------


def _group_sum(arr: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """Reduce to the spec's parameter shape: scalar sum or per-channel sums."""
    if not spec.per_channel:
        return np.atleast_1d(arr.sum())
    axes = tuple(i for i in range(arr.ndim) if i != spec.axis)
    return arr.sum(axis=axes)


def ste_grad_input(x: np.ndarray, spec: QuantizerSpec, upstream: np.ndarray) -> np.ndarray:
    """d fake_quant / dx: pass-through inside [q_min, q_max], zero outside.

    Grid endpoints count as inside.
    """
    q_min, q_max = spec.grid_limits()
    if spec.per_channel:
        shape = [1] * x.ndim
        shape[spec.axis] = spec.n_channels
        q_min = q_min.reshape(shape)
        q_max = q_max.reshape(shape)
    else:
        q_min, q_max = q_min[0], q_max[0]
    mask = (x >= q_min) & (x <= q_max)
    return upstream * mask


def ste_grad_scale(x: np.ndarray, spec: QuantizerSpec, upstream: np.ndarray) -> np.ndarray:
    """d fake_quant / ds, reduced to the scale's shape.

    Interior values contribute the rounding residual round(x/s) - x/s; values
    below the grid contribute n and above contribute p, where n and p are the
    integer limits relative to the zero-point.
    """
    s, z = spec.broadcast(x.ndim)
    n, p = spec.relative_bounds()
    if spec.per_channel:
        shape = [1] * x.ndim
        shape[spec.axis] = spec.n_channels
        n = n.reshape(shape)
        p = p.reshape(shape)
    else:
        n, p = n[0], p[0]
    r = x / s
    rounded = np.rint(r)
    local = np.where(rounded < n, n, np.where(rounded > p, p, rounded - r))
    return _group_sum(upstream * local, spec)


def ste_grad_zero_point(x: np.ndarray, spec: QuantizerSpec, upstream: np.ndarray) -> np.ndarray:
    """d fake_quant / dz, reduced to the zero-point's shape.

    Zero inside the grid (the -z in quantize and dequantize cancel); -s where
    the input clips, because only the dequantize side moves.
    """
    if spec.scheme is not Scheme.ASYMMETRIC:
        raise ContractError("zero-point gradient only defined for the asymmetric scheme")
    s, z = spec.broadcast(x.ndim)
    n, p = spec.relative_bounds()
    if spec.per_channel:
        shape = [1] * x.ndim
        shape[spec.axis] = spec.n_channels
        n = n.reshape(shape)
        p = p.reshape(shape)
    else:
        n, p = n[0], p[0]
    rounded = np.rint(x / s)
    outside = (rounded < n) | (rounded > p)
    return _group_sum(np.where(outside, -s * upstream, 0.0), spec)


# ---------------------------------------------------------------------------
# autograd integration
# ---------------------------------------------------------------------------


def fake_quant(x: T.Node, spec: QuantizerSpec) -> T.Node:
    """Fake-quantize a node with a fixed grid; straight-through input grad."""
    out = fake_quant_fp(x.data, spec)

    def bwd(g):
        return (ste_grad_input(x.data, spec, g),)

    return T.Node(out, (x,), bwd)


def spec_with_params(spec: QuantizerSpec, scale: np.ndarray, zero_point: np.ndarray) -> QuantizerSpec:
    """Rebuild a spec around externally supplied scale/zero-point values."""
    return QuantizerSpec(spec.scheme, spec.bitwidth, scale, zero_point, spec.axis)


class LearnableQuantizer:
    """Quantizer whose scale (and, for asymmetric grids, zero-point) train.

    The scale is parameterized in the log domain so gradient steps multiply
    rather than add and the scale can never cross zero. The zero-point is kept
    real-valued and rounded to the storage grid on every forward; its rounding
    is treated as identity in the backward pass.
    """

    SCALE_FLOOR = 1e-12

    def __init__(self, spec: QuantizerSpec, learn_zero_point: bool | None = None):
        self.scheme = spec.scheme
        self.bitwidth = spec.bitwidth
        self.axis = spec.axis
        self.log_scale = T.leaf(np.log(spec.scale), name="log_scale")
        if learn_zero_point is None:
            learn_zero_point = spec.scheme is Scheme.ASYMMETRIC
        if learn_zero_point and spec.scheme is not Scheme.ASYMMETRIC:
            raise ContractError("only asymmetric grids have a trainable zero-point")
        self.learn_zero_point = learn_zero_point
        self.zero_point = T.leaf(spec.zero_point, name="zero_point")

    def parameters(self) -> list:
        params = [self.log_scale]
        if self.learn_zero_point:
            params.append(self.zero_point)
        return params

    def current_spec(self) -> QuantizerSpec:
        s = np.maximum(np.exp(self.log_scale.data), self.SCALE_FLOOR)
        if self.scheme is Scheme.POWER_OF_TWO:
            # Snap to the nearest power of two; training nudges the exponent.
            s = 2.0 ** np.rint(np.log2(s))
        spec = QuantizerSpec(self.scheme, self.bitwidth, s, np.zeros_like(s), self.axis)
        if self.scheme is Scheme.ASYMMETRIC:
            lo, hi = spec.int_bounds()
            z = np.clip(np.rint(self.zero_point.data), lo, hi)
            spec = QuantizerSpec(self.scheme, self.bitwidth, s, z, self.axis)
        return spec

    def __call__(self, x: T.Node) -> T.Node:
        spec = self.current_spec()
        out = fake_quant_fp(x.data, spec)
        parents = [x, self.log_scale]
        if self.learn_zero_point:
            parents.append(self.zero_point)
        s = spec.scale

        def bwd(g):
            gx = ste_grad_input(x.data, spec, g)
            # chain through s = exp(log_s)
            gls = ste_grad_scale(x.data, spec, g) * s
            if self.learn_zero_point:
                gz = ste_grad_zero_point(x.data, spec, g)
                return gx, gls, gz
            return gx, gls

        return T.Node(out, tuple(parents), bwd)
