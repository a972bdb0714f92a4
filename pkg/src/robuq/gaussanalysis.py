"""Statistical checks behind Hadamard Gaussianization.

Executable forms of the second-moment identities, covariance-decay and
KL/TV bounds, an empirical normality measurement against the quantitative
CLT rate, channel-independence via normalized mutual information, and the
orthogonality argument that quantization MSE is unchanged by the transform.

Everything here is pure analysis over immutable inputs; random pair
subsampling is seeded so reports are reproducible.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from scipy.special import ndtr

from .errors import ValidationError
from .hadamard import HadamardPlan, transform_tokens

BERRY_ESSEEN_CONST = 0.56  # published constant for non-identical summands
_KS_GRID_POINTS = 1024


@dataclass
class GaussReport:
    """All statistics emitted by the analysis pipeline for one batch."""

    per_coord_var: list[float]
    sigma_t2: float
    max_offdiag_cov: float
    offdiag_bound: float
    ks_distance: float
    be_bound: float
    kl_exact: float
    kl_approx: float
    tv_bound: float
    mean_nmi: float


def _as_batch(x: np.ndarray, min_tokens: int = 2) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"expected a T x C activation matrix, got shape {arr.shape}")
    if arr.shape[0] < min_tokens:
        raise ValidationError(f"need at least {min_tokens} tokens, got {arr.shape[0]}")
    return arr


def variance_identity(
    x: np.ndarray, plan: HadamardPlan | None = None
) -> tuple[np.ndarray, float]:
    """Per-coordinate variances after the transform, and their exact target.

    The transform equalizes variances: every transformed coordinate has
    variance sigma_t^2 = mean of the per-channel pre-transform variances.
    Returns (empirical per-coordinate variances across tokens, sigma_t2).
    """
    arr = _as_batch(x)
    y = transform_tokens(arr, plan)
    per_coord = y.var(axis=0)
    sigma_t2 = float(arr.var(axis=0).mean())
    return per_coord, sigma_t2


def offdiag_cov_bound(
    x: np.ndarray,
    plan: HadamardPlan | None = None,
    max_pairs: int = 4096,
    seed: int = 0,
) -> tuple[float, float]:
    """Largest sample off-diagonal covariance vs its theoretical bound.

    Off-diagonals are signed averages of per-channel variance deviations
    delta_j = sigma_j^2 - sigma_t^2, so |Cov| <= ||delta||_2 / sqrt(C).
    All pairs are measured up to C = 128; larger dims use a seeded random
    pair subsample.
    """
    arr = _as_batch(x)
    y = transform_tokens(arr, plan)
    t, c = y.shape
    yc = y - y.mean(axis=0)
    if c <= 128:
        cov = (yc.T @ yc) / t
        off = cov[~np.eye(c, dtype=bool)]
        max_off = float(np.max(np.abs(off))) if off.size else 0.0
    else:
        rng = np.random.default_rng(seed)
        n_pairs = min(max_pairs, c * (c - 1) // 2)
        ii = rng.integers(0, c, size=n_pairs)
        jj = (ii + rng.integers(1, c, size=n_pairs)) % c  # distinct by construction
        covs = np.einsum("ti,ti->i", yc[:, ii], yc[:, jj]) / t
        max_off = float(np.max(np.abs(covs)))
    channel_var = arr.var(axis=0)
    delta = channel_var - channel_var.mean()
    bound = float(np.linalg.norm(delta) / np.sqrt(c))
    return max_off, bound


def normality(
    x: np.ndarray,
    plan: HadamardPlan | None = None,
    k_be: float = BERRY_ESSEEN_CONST,
    token: int | None = None,
) -> tuple[float, float]:
    """Kolmogorov distance of transformed coordinates to N(0, sigma_t^2),
    next to the computed Berry-Esseen bound K * M3 / (sigma_t^3 sqrt(C)).

    The empirical CDF pools all transformed coordinates (of one token row
    when ``token`` is given, else of every row — valid when tokens share
    channel statistics, as in i.i.d.-channel batches) and is compared to
    the normal CDF on a fixed 1024-point grid.
    """
    arr = _as_batch(x)
    y = transform_tokens(arr, plan)
    c = arr.shape[1]
    channel_var = arr.var(axis=0)
    sigma_t = float(np.sqrt(channel_var.mean()))
    if sigma_t == 0.0:
        raise ValidationError("all channels are constant; normality is undefined")
    centered = arr - arr.mean(axis=0)
    m3 = float(np.max(np.mean(np.abs(centered) ** 3, axis=0)))
    be_bound = k_be * m3 / (sigma_t**3 * np.sqrt(c))

    pooled = np.sort((y[token] if token is not None else y).ravel())
    grid = np.linspace(-8.0 * sigma_t, 8.0 * sigma_t, _KS_GRID_POINTS)
    ecdf = np.searchsorted(pooled, grid, side="right") / pooled.size
    ks = float(np.max(np.abs(ecdf - ndtr(grid / sigma_t))))
    return ks, float(be_bound)


def kl_tv_product_gaussian(
    sigma: np.ndarray, sigma_t2: float
) -> tuple[float, float, float]:
    """KL and TV distance of N(0, Sigma) from the product N(0, sigma_t^2 I).

    With E the off-diagonal part of Sigma (the decomposition
    Sigma = sigma_t^2 I + E with zero-diagonal E):

        KL = -1/2 ln det(I + E / sigma_t^2)
        KL ~ 1/4 ||E||_F^2 / sigma_t^4      (small ||E||)
        TV <= sqrt(KL / 2)                  (Pinsker)
    """
    mat = np.asarray(sigma, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValidationError(f"covariance must be square, got shape {mat.shape}")
    if not np.allclose(mat, mat.T, atol=1e-10):
        raise ValidationError("covariance must be symmetric")
    if np.linalg.eigvalsh(mat)[0] <= 0:
        raise ValidationError("covariance must be positive definite")
    if sigma_t2 <= 0:
        raise ValidationError("sigma_t2 must be positive")
    e = mat.copy()
    np.fill_diagonal(e, 0.0)
    sign, logdet = np.linalg.slogdet(np.eye(mat.shape[0]) + e / sigma_t2)
    if sign <= 0:
        raise ValidationError("I + E/sigma_t^2 is not positive definite")
    kl_exact = max(0.0, -0.5 * logdet)
    kl_approx = 0.25 * float(np.sum(e * e)) / sigma_t2**2
    tv_bound = float(np.sqrt(0.5 * kl_exact))
    return float(kl_exact), float(kl_approx), tv_bound


def _equal_freq_bins(col: np.ndarray, bins: int) -> np.ndarray:
    edges = np.quantile(col, np.linspace(0.0, 1.0, bins + 1)[1:-1])
    return np.searchsorted(edges, col, side="right")


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi_channels(
    x: np.ndarray,
    bins: int = 16,
    max_pairs: int = 2048,
    seed: int = 0,
) -> float:
    """Mean pairwise normalized mutual information across channels.

    Histogram MI on equal-frequency bins (avoids empty-bin artifacts),
    normalized by sqrt(H_i H_j). All pairs are enumerated when C <= 64;
    otherwise a seeded random pair sample is used.
    """
    arr = _as_batch(x)
    t, c = arr.shape
    if t < 10 * bins:
        raise ValidationError(f"need at least 10*bins={10 * bins} tokens, got {t}")
    if c < 2:
        raise ValidationError("need at least two channels")
    binned = np.stack([_equal_freq_bins(arr[:, j], bins) for j in range(c)], axis=1)
    if c <= 64:
        pairs = [(i, j) for i in range(c) for j in range(i + 1, c)]
    else:
        rng = np.random.default_rng(seed)
        target = min(max_pairs, c * (c - 1) // 2)
        seen = set()
        while len(seen) < target:
            i, j = rng.integers(0, c, size=2)
            if i != j:
                seen.add((min(i, j), max(i, j)))
        pairs = sorted(seen)
    total = 0.0
    for i, j in pairs:
        joint = np.bincount(binned[:, i] * bins + binned[:, j], minlength=bins * bins)
        hi = _entropy(np.bincount(binned[:, i], minlength=bins))
        hj = _entropy(np.bincount(binned[:, j], minlength=bins))
        hij = _entropy(joint)
        mi = max(0.0, hi + hj - hij)
        denom = np.sqrt(hi * hj)
        total += mi / denom if denom > 0 else 0.0
    return total / len(pairs)


def mse_preservation(
    x: np.ndarray,
    quantizer: Callable[[np.ndarray], np.ndarray],
    plan: HadamardPlan | None = None,
) -> tuple[float, float]:
    """Both sides of the MSE identity for any quantizer Q:

        E ||X - H^T Q(H X)||^2  ==  E ||H X - Q(H X)||^2

    The identity is orthogonality alone, so it holds for arbitrary Q, not
    just the Gauss codebooks. Returns (mse_direct, mse_transformed) as mean
    squared error per element.
    """
    arr = _as_batch(x)
    if plan is None:
        plan = HadamardPlan.for_dim(arr.shape[1])
    y = transform_tokens(arr, plan)
    qy = np.asarray(quantizer(y), dtype=np.float64)
    if qy.shape != y.shape:
        raise ValidationError(f"quantizer changed the shape: {y.shape} -> {qy.shape}")
    x_rec = transform_tokens(qy, plan)  # H symmetric: applying H again is H^T
    mse_direct = float(np.mean((arr - x_rec) ** 2))
    mse_transformed = float(np.mean((y - qy) ** 2))
    return mse_direct, mse_transformed


def build_report(
    x: np.ndarray,
    bins: int = 16,
    seed: int = 0,
    k_be: float = BERRY_ESSEEN_CONST,
    kl_coords: int = 16,
) -> tuple[GaussReport, dict]:
    """Run the full analysis suite on one activation batch.

    Returns the report plus a metadata dict (C, T, seed, bins, K_BE) for
    reproducibility. The KL/TV numbers use the sample covariance of the
    first ``kl_coords`` transformed coordinates.
    """
    arr = _as_batch(x, min_tokens=2)
    plan = HadamardPlan.for_dim(arr.shape[1])
    per_coord, sigma_t2 = variance_identity(arr, plan)
    max_off, bound = offdiag_cov_bound(arr, plan, seed=seed)
    ks, be = normality(arr, plan, k_be=k_be)
    m = min(kl_coords, arr.shape[1])
    y = transform_tokens(arr, plan)[:, :m]
    cov = np.cov(y, rowvar=False, bias=True)
    kl_exact, kl_approx, tv = kl_tv_product_gaussian(cov, sigma_t2)
    nmi = nmi_channels(arr, bins=bins, seed=seed)
    report = GaussReport(
        per_coord_var=[float(v) for v in per_coord],
        sigma_t2=sigma_t2,
        max_offdiag_cov=max_off,
        offdiag_bound=bound,
        ks_distance=ks,
        be_bound=be,
        kl_exact=kl_exact,
        kl_approx=kl_approx,
        tv_bound=tv,
        mean_nmi=nmi,
    )
    meta = {"T": arr.shape[0], "C": arr.shape[1], "seed": seed, "bins": bins, "K_BE": k_be}
    return report, meta


def report_to_json(report: GaussReport, meta: dict) -> str:
    payload = {"meta": meta, **asdict(report)}
    return json.dumps(payload, indent=2, sort_keys=True)
