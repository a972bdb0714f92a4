"""SVD-initialized low-rank compensation and the combined quantized forward.

A layer is built from a dense weight W by transforming it (W H), capturing
the top-r singular structure in full-precision factors A = U_r S_r and
B = V_r^T, and ternarizing only the residual W H - A B. The forward then
runs the cheap ternary branch on Gauss-quantized transformed activations
while the low-rank branch consumes the unquantized transformed activations:

    W x ~ A (B (H x)) + alpha V . dequant(Q(H x))

Because H is orthogonal, the dense reconstruction error equals the residual
approximation error in the transformed domain exactly.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConvergenceError, DimensionError, FormatError, ValidationError
from .hadamard import HadamardPlan, fold_into_weights, transform_tokens
from .quant import (
    GaussCodebook,
    TernaryWeights,
    lloyd_max,
    quantize_tokens,
    ternarize,
    uniform_gauss_codebook,
)

DEFAULT_RANK = 16


@dataclass
class LowRankBranch:
    """Full-precision factors A (out x r) and B (r x in)."""

    A: np.ndarray
    B: np.ndarray

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def matrix(self) -> np.ndarray:
        return self.A @ self.B


@dataclass
class QuantLinearLayer:
    """Ternary main branch plus full-precision low-rank branch.

    ``wq`` quantizes the transformed residual; ``branch`` holds the factors
    of the transformed weight's dominant singular structure; ``codebook``
    quantizes the transformed activations per token.
    """

    wq: TernaryWeights
    branch: LowRankBranch
    codebook: GaussCodebook
    plan: HadamardPlan
    in_dim: int
    out_dim: int
    center: bool = True

    def __post_init__(self):
        if self.wq.values.shape != (self.out_dim, self.in_dim):
            raise DimensionError(
                f"ternary values shape {self.wq.values.shape} != ({self.out_dim}, {self.in_dim})"
            )
        r = self.branch.rank
        if self.branch.A.shape != (self.out_dim, r) or self.branch.B.shape != (r, self.in_dim):
            raise DimensionError("low-rank branch shapes inconsistent with layer dims")


def _subspace_rotation(q_old: np.ndarray, q_new: np.ndarray) -> float:
    # sqrt of the sum of squared sines of the principal angles.
    overlap = q_old.T @ q_new
    r = q_old.shape[1]
    return float(np.sqrt(max(0.0, r - float(np.sum(overlap * overlap)))))


def truncated_svd(
    m: np.ndarray,
    r: int,
    tol: float = 1e-10,
    max_iter: int = 1000,
    seed: int = 0,
    oversample: int = 8,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-r singular triple (U_r, S_r, V_r) by block power iteration.

    Iterates an oversampled block (r + ``oversample`` columns) through
    M M^T with QR re-orthonormalization, then extracts the leading r factors
    with a Rayleigh-Ritz step. Stops when the block subspace rotates by less
    than ``tol``, or when the captured top-r energy plateaus at per-iteration
    gains below tol * ||M||_F^2: near-tied singular values at the cut let the
    subspace wander inside an equally-optimal manifold without changing the
    approximation, and the plateau test retires exactly that case.

    U_r and V_r have orthonormal columns; S_r is nonincreasing, nonnegative.
    """
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {arr.shape}")
    rows, cols = arr.shape
    if r < 1 or r > min(rows, cols):
        raise DimensionError(f"rank {r} not in 1..min{arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("matrix contains NaN or Inf")
    if not np.any(arr):
        return np.eye(rows, r), np.zeros(r), np.eye(cols, r)

    block = min(r + max(0, oversample), rows, cols)
    total_energy = float(np.sum(arr * arr))
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(arr @ rng.standard_normal((cols, block)))
    energy = -np.inf
    converged = False
    for _ in range(max_iter):
        z, _ = np.linalg.qr(arr.T @ q)
        q_new, _ = np.linalg.qr(arr @ z)
        rot = _subspace_rotation(q, q_new)
        q = q_new
        b = q.T @ arr
        evals = np.linalg.eigvalsh(b @ b.T)
        new_energy = float(np.sum(evals[::-1][:r]))
        gain = new_energy - energy
        energy = new_energy
        if rot < tol or gain < tol * total_energy:
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"block power iteration did not converge in {max_iter} iterations",
            last_iterate=q,
        )

    b = q.T @ arr
    evals, p = np.linalg.eigh(b @ b.T)
    order = np.argsort(evals)[::-1][:r]
    s = np.sqrt(np.clip(evals[order], 0.0, None))
    p = p[:, order]
    u = q @ p
    v = b.T @ p
    floor = max(s[0], 1.0) * 1e-12
    live = s > floor
    v[:, live] = v[:, live] / s[live]
    if not live.all():
        # Rank-deficient tail: complete V with orthonormal columns.
        basis, _ = np.linalg.qr(
            np.concatenate([v[:, live], rng.standard_normal((cols, int((~live).sum())))], axis=1)
        )
        v[:, ~live] = basis[:, int(live.sum()):]
        s[~live] = 0.0
    return u, s, v


def init_layer(
    w: np.ndarray,
    r: int = DEFAULT_RANK,
    codebook: GaussCodebook | None = None,
    center: bool = True,
    seed: int = 0,
) -> QuantLinearLayer:
    """Build a quantized layer from a dense weight matrix.

    Transforms W, splits off the top-r singular structure into the
    full-precision branch, and ternarizes the residual. ``r`` is clamped to
    min(dims) with a warning so small test matrices stay usable; r = 0
    disables the branch entirely.
    """
    arr = np.asarray(w, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D weight matrix, got shape {arr.shape}")
    out_dim, in_dim = arr.shape
    plan = HadamardPlan.for_dim(in_dim)
    if codebook is None:
        codebook = uniform_gauss_codebook(4)
    max_rank = min(out_dim, in_dim)
    if r > max_rank:
        warnings.warn(f"rank {r} clamped to min(dims) = {max_rank}", stacklevel=2)
        r = max_rank

    wh = fold_into_weights(arr, plan)
    if r == 0:
        branch = LowRankBranch(A=np.zeros((out_dim, 0)), B=np.zeros((0, in_dim)))
    else:
        u, s, v = truncated_svd(wh, r, seed=seed)
        branch = LowRankBranch(A=u * s, B=v.T)
    wq = ternarize(wh - branch.matrix())
    return QuantLinearLayer(
        wq=wq, branch=branch, codebook=codebook, plan=plan,
        in_dim=in_dim, out_dim=out_dim, center=center,
    )


def forward(layer: QuantLinearLayer, x: np.ndarray) -> np.ndarray:
    """Apply the layer to a T x in_dim activation batch.

    Each token is transformed once; the low-rank branch consumes it
    unquantized while the ternary branch consumes its per-token Gauss
    dequantization.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != layer.in_dim:
        raise DimensionError(f"expected T x {layer.in_dim} input, got shape {arr.shape}")
    xh = transform_tokens(arr, layer.plan)
    deq, _, _, _ = quantize_tokens(xh, layer.codebook, center=layer.center)
    y = deq @ layer.wq.dequantize().T
    if layer.branch.rank:
        y += xh @ layer.branch.B.T @ layer.branch.A.T
    return y


def reconstruct_weight(layer: QuantLinearLayer) -> np.ndarray:
    """Effective dense weight implied by the layer: (A B + alpha V) H^T."""
    combined = layer.branch.matrix() + layer.wq.dequantize()
    return fold_into_weights(combined, layer.plan)  # H is symmetric: M H = M H^T


# ---------------------------------------------------------------------------
# Layer serialization: a directory of RBQ1 files plus a JSON sidecar
# ---------------------------------------------------------------------------

def save_layer(layer: QuantLinearLayer, dirpath) -> None:
    from .tensorio import save_matrix

    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    save_matrix(layer.wq.values.astype(np.float32), d / "wq_values.rbq")
    if layer.branch.rank:
        save_matrix(layer.branch.A, d / "A.rbq")
        save_matrix(layer.branch.B, d / "B.rbq")
    meta = {
        "alpha": float(layer.wq.alpha),
        "rank": layer.branch.rank,
        "bits": layer.codebook.bits,
        "uniform": layer.codebook.is_uniform,
        "center": layer.center,
        "block_size": layer.plan.block_size,
        "in_dim": layer.in_dim,
        "out_dim": layer.out_dim,
    }
    with open(d / "layer.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_layer(dirpath) -> QuantLinearLayer:
    from .tensorio import load_matrix

    d = Path(dirpath)
    try:
        with open(d / "layer.json") as fh:
            meta = json.load(fh)
    except FileNotFoundError as exc:
        raise FormatError(f"{d}: missing layer.json sidecar") from exc
    values = load_matrix(d / "wq_values.rbq").astype(np.int8)
    wq = TernaryWeights(values=values, alpha=float(meta["alpha"]))
    rank = int(meta["rank"])
    if rank:
        branch = LowRankBranch(
            A=load_matrix(d / "A.rbq").astype(np.float64),
            B=load_matrix(d / "B.rbq").astype(np.float64),
        )
    else:
        branch = LowRankBranch(
            A=np.zeros((int(meta["out_dim"]), 0)), B=np.zeros((0, int(meta["in_dim"])))
        )
    maker = uniform_gauss_codebook if meta["uniform"] else lloyd_max
    cb = maker(int(meta["bits"]))
    plan = HadamardPlan(dim=int(meta["in_dim"]), block_size=int(meta["block_size"]))
    return QuantLinearLayer(
        wq=wq, branch=branch, codebook=cb, plan=plan,
        in_dim=int(meta["in_dim"]), out_dim=int(meta["out_dim"]),
        center=bool(meta["center"]),
    )
