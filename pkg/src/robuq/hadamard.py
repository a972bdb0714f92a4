"""Normalized Sylvester-Hadamard transforms along the channel axis.

The order-n matrix is built recursively from H_1 = (1) by

    H_2n = (1/sqrt(2)) [[H_n, H_n], [H_n, -H_n]]

so every entry is +-1/sqrt(n), H is symmetric, and H^T H = I. The fast path
is the usual butterfly with the 1/sqrt(2) normalization folded into each
stage, which keeps intermediate magnitudes bounded for large dims.

Channel counts that are not powers of two use a block-diagonal transform
whose block size is the largest power-of-two divisor of the dim. Each block
is orthogonal, so norm preservation and the involution property still hold
exactly; the transform simply mixes within blocks instead of globally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)


def _largest_pow2_divisor(n: int) -> int:
    return n & (-n)


@dataclass(frozen=True)
class HadamardPlan:
    """Immutable transform descriptor: total dim and power-of-two block size."""

    dim: int
    block_size: int

    def __post_init__(self):
        if self.dim < 1:
            raise DimensionError(f"dim must be positive, got {self.dim}")
        b = self.block_size
        if b < 1 or (b & (b - 1)) != 0 or self.dim % b != 0:
            raise DimensionError(
                f"block_size {b} must be a power of two dividing dim {self.dim}"
            )

    @classmethod
    def for_dim(cls, dim: int) -> "HadamardPlan":
        """Plan for ``dim`` channels, block-decomposed when dim is not a power of two."""
        if dim < 1:
            raise DimensionError(f"dim must be positive, got {dim}")
        return cls(dim=dim, block_size=_largest_pow2_divisor(dim))


def _butterfly_inplace(buf: np.ndarray, block: int) -> None:
    # buf: (rows, dim) contiguous float array, transformed blockwise in place.
    rows, dim = buf.shape
    work = buf.reshape(rows * (dim // block), block)
    h = 1
    while h < block:
        z = work.reshape(-1, block // (2 * h), 2, h)
        top = z[:, :, 0, :]
        bot = z[:, :, 1, :]
        s = (top + bot) * _INV_SQRT2
        d = (top - bot) * _INV_SQRT2
        z[:, :, 0, :] = s
        z[:, :, 1, :] = d
        h *= 2


def fwht_inplace(x: np.ndarray, plan: HadamardPlan | None = None) -> np.ndarray:
    """In-place normalized fast transform of a contiguous float64 vector."""
    if x.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {x.shape}")
    if not x.flags.c_contiguous or x.dtype != np.float64:
        raise DimensionError("in-place transform requires a contiguous float64 vector")
    if plan is None:
        plan = HadamardPlan.for_dim(x.shape[0])
    if x.shape[0] != plan.dim:
        raise DimensionError(f"vector length {x.shape[0]} != plan dim {plan.dim}")
    _butterfly_inplace(x.reshape(1, -1), plan.block_size)
    return x


def fwht(x: np.ndarray, plan: HadamardPlan | None = None) -> np.ndarray:
    """Out-of-place normalized fast transform, O(C log C) per block.

    Equivalent to multiplying by the (block-diagonal) normalized Hadamard
    matrix; since that matrix is symmetric orthogonal, fwht is an involution.
    """
    out = np.array(x, dtype=np.float64, copy=True)
    return fwht_inplace(out, plan)


def hadamard_matrix(dim: int) -> np.ndarray:
    """Dense normalized Sylvester matrix of a power-of-two order.

    Built by explicit Kronecker recursion rather than the butterfly, so it
    can serve as an independent oracle for the fast path.
    """
    if dim < 1 or (dim & (dim - 1)) != 0:
        raise DimensionError(f"dim must be a power of two, got {dim}")
    h = np.array([[1.0]])
    k2 = np.array([[1.0, 1.0], [1.0, -1.0]]) * _INV_SQRT2
    while h.shape[0] < dim:
        h = np.kron(k2, h)
    return h


def block_hadamard_matrix(plan: HadamardPlan) -> np.ndarray:
    """Dense block-diagonal matrix realized by ``fwht`` under ``plan``."""
    hb = hadamard_matrix(plan.block_size)
    n_blocks = plan.dim // plan.block_size
    out = np.zeros((plan.dim, plan.dim))
    for i in range(n_blocks):
        s = i * plan.block_size
        out[s : s + plan.block_size, s : s + plan.block_size] = hb
    return out


def transform_tokens(x: np.ndarray, plan: HadamardPlan | None = None) -> np.ndarray:
    """Apply the transform to every row (token) of a T x C matrix: Y_t = H x_t."""
    arr = np.array(x, dtype=np.float64, copy=True)
    if arr.ndim != 2:
        raise DimensionError(f"expected a T x C matrix, got shape {arr.shape}")
    if plan is None:
        plan = HadamardPlan.for_dim(arr.shape[1])
    if arr.shape[1] != plan.dim:
        raise DimensionError(f"channel dim {arr.shape[1]} != plan dim {plan.dim}")
    _butterfly_inplace(arr, plan.block_size)
    return arr


def fold_into_weights(w: np.ndarray, plan: HadamardPlan | None = None) -> np.ndarray:
    """Fold the transform into a weight matrix along its input-feature axis.

    Returns W H, so that (W H)(H x) = W x exactly up to float rounding
    (H is symmetric and H H = I). Folding twice recovers W.
    """
    arr = np.array(w, dtype=np.float64, copy=True)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D weight matrix, got shape {arr.shape}")
    if plan is None:
        plan = HadamardPlan.for_dim(arr.shape[1])
    if arr.shape[1] != plan.dim:
        raise DimensionError(
            f"contraction dim {arr.shape[1]} != plan dim {plan.dim}"
        )
    _butterfly_inplace(arr, plan.block_size)
    return arr
