"""Variance components from projection quadratic forms, and the penalties they imply.

The responses are centered by their unweighted mean and the cells are
treated as equally weighted when forming ``Q_k = ||P_k y||^2``; unequal
weights enter only through :func:`effective_sigma2` and the weight scale
applied to the penalties.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.linalg

from .errors import ConvergenceError, ValidationError
from .solver import INF, ConvergenceOpts, _fit, design_matrix
from .table import SparseTable

NUMERIC_RANK_THRESHOLD = 20_000
PROJECTION_JITTER = 1e-10
PROJECTION_OPTS = ConvergenceOpts(tol=1e-12, max_sweeps=20_000)


@dataclass
class SubspaceInfo:
    """Dimensions ``d_1..d_m, n`` and squared projection norms ``Q_1..Q_m, ||y||^2``."""

    dims: list[int]
    sq_norms: list[float]
    method: str

    @property
    def m(self) -> int:
        return len(self.dims) - 1

    @property
    def n(self) -> int:
        return self.dims[-1]


@dataclass
class VarianceComponents:
    """Estimated ``sigma_0^2..sigma_m^2`` for a known noise variance ``sigma2``.

    ``raw`` keeps the estimates before clamping at zero. ``degenerate[k]``
    marks components that the data cannot identify (an empty subspace
    increment); they are reported as zero.
    """

    sigma2: float
    sigmas: np.ndarray
    raw: np.ndarray
    clamped: np.ndarray
    degenerate: np.ndarray
    mean_squares: list[float | None] = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.sigmas) - 1

    @property
    def taus(self) -> np.ndarray:
        """``tau_k^2 = sigma_k^2 + ... + sigma_{m-1}^2`` for k = 0..m."""
        m = self.m
        return np.array([self.sigmas[k:m].sum() for k in range(m + 1)])


def effective_sigma2(table: SparseTable, sigma2: float) -> float:
    """Noise variance of an equally weighted table with the same average precision."""
    return float(sigma2 * np.mean(1.0 / table.n))


def harmonic_weight(table: SparseTable) -> float:
    return float(1.0 / np.mean(1.0 / table.n))


def _full_dim(level_counts, k) -> int:
    total = 0
    for j in range(k + 1):
        for J in combinations(range(len(level_counts)), j):
            total += math.prod(level_counts[f] - 1 for f in J)
    return total


def subspace_dim(table: SparseTable, k: int, max_cells: int = NUMERIC_RANK_THRESHOLD,
                 tol: float = 1e-10) -> int:
    """Dimension of the order-k subspace restricted to the observed cells."""
    if not 1 <= k <= table.m:
        raise ValidationError(f"order must lie in 1..{table.m}")
    if k == table.m:
        return len(table)
    if table.is_full:
        return _full_dim(table.spec.level_counts, k)
    if len(table) > max_cells:
        raise ValidationError(
            f"numeric rank needs at most {max_cells} observed cells (table has {len(table)}); "
            "supply the penalties directly or choose them by cross-validation")
    X, _ = design_matrix(table, k)
    R = scipy.linalg.qr(X, mode="r", pivoting=True)[0]
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0:
        return 0
    return int(np.sum(diag > tol * diag[0]))


def _centered(table: SparseTable) -> np.ndarray:
    return table.y - table.y.mean()


def project_onto_order(table: SparseTable, v, k: int, jitter: float = PROJECTION_JITTER,
                       opts: ConvergenceOpts | None = None) -> np.ndarray:
    """Orthogonal projection of ``v`` onto the order-k subspace, cells weighted equally.

    The projection is an order-k least-squares fit with a ridge of size
    ``jitter`` toward zero, which is undone exactly afterwards. Raises
    :class:`ConvergenceError` (carrying the partial projection) when the
    backfit does not converge.
    """
    if not 1 <= k <= table.m:
        raise ValidationError(f"order must lie in 1..{table.m}")
    v = np.asarray(v, dtype=np.float64)
    if k == table.m:
        return v.copy()
    fit = _fit(table, k, jitter, v, np.zeros(len(table)), opts or PROJECTION_OPTS,
               weights=np.ones(len(table)), canonical=False)
    proj = fit.mu * (1.0 + jitter)
    if not fit.converged:
        raise ConvergenceError(f"order-{k} projection did not converge in {fit.sweeps} sweeps",
                               value=proj)
    return proj


def projection_sq_norm(table: SparseTable, k: int, jitter: float = PROJECTION_JITTER,
                       opts: ConvergenceOpts | None = None) -> float:
    """``||P_k y||^2`` for the centered responses, cells weighted equally."""
    try:
        proj = project_onto_order(table, _centered(table), k, jitter=jitter, opts=opts)
    except ConvergenceError as exc:
        raise ConvergenceError(str(exc), value=float(np.dot(exc.value, exc.value))) from None
    return float(np.dot(proj, proj))


def subspace_info(table: SparseTable, max_cells: int = NUMERIC_RANK_THRESHOLD,
                  opts: ConvergenceOpts | None = None) -> SubspaceInfo:
    m = table.m
    dims = [subspace_dim(table, k, max_cells=max_cells) for k in range(1, m + 1)] + [len(table)]
    yc = _centered(table)
    norms = [projection_sq_norm(table, k, opts=opts) for k in range(1, m + 1)]
    norms.append(float(np.dot(yc, yc)))
    method = "closed-form" if table.is_full else "numeric-rank"
    return SubspaceInfo(dims, norms, method)


def estimate_sigmas(table: SparseTable, sigma2: float, info: SubspaceInfo | None = None) -> VarianceComponents:
    """Unbiased quadratic-form estimates of the variance components.

    ``sigma2`` is the noise variance of one equally weighted cell (pass
    :func:`effective_sigma2` for unequal weights). With ``MS_j`` the mean
    square of the projection increment from order ``j`` to ``j+1``,
    ``sigma_j^2 = MS_j - MS_{j+1}`` and ``sigma_m^2 = MS_m - sigma2``.

    The centered responses live in the complement of the constant vector,
    so the dimensions entering the mean squares are ``d_k - 1`` and
    ``n - 1``. Increments with no dimensions give a zero, flagged
    component; when the top increment is empty (always, for a saturated
    order-m model) ``sigma_m^2`` is taken as zero and ``MS_m`` as ``sigma2``,
    so ``sigma_{m-1}^2`` absorbs the unidentifiable ``sigma_m^2``.
    """
    if info is None:
        info = subspace_info(table)
    m = info.m
    eff = [0] + [d - 1 for d in info.dims]          # e_0..e_{m+1}
    Q = [0.0] + list(info.sq_norms)                  # Q_0..Q_{m+1}
    ms: list[float | None] = []
    for j in range(m + 1):
        gap = eff[j + 1] - eff[j]
        ms.append((Q[j + 1] - Q[j]) / gap if gap > 0 else None)

    raw = np.zeros(m + 1)
    degenerate = np.zeros(m + 1, dtype=bool)
    if ms[m] is None:
        degenerate[m] = True
        next_ms = sigma2
    else:
        raw[m] = ms[m] - sigma2
        next_ms = ms[m]
    for j in range(m - 1, -1, -1):
        if ms[j] is None:
            degenerate[j] = True
            continue
        raw[j] = ms[j] - next_ms
        next_ms = ms[j]
    clamped = raw < 0
    sigmas = np.where(clamped, 0.0, raw)
    return VarianceComponents(float(sigma2), sigmas, raw, clamped, degenerate, ms)


def lambdas_from_sigmas(vc: VarianceComponents, cap: float | None = None,
                        weight_scale: float = 1.0) -> list[float]:
    """Penalties ``lam_k = (sigma2 + sigma_m^2 + ... + sigma_k^2) / sigma_{k-1}^2``.

    A zero denominator gives ``INF``. ``cap`` truncates every penalty,
    infinite ones included. ``weight_scale`` converts to the scale of the
    raw cell weights (the harmonic mean weight for unequal weights).
    """
    m = vc.m
    out = []
    for k in range(1, m + 1):
        num = vc.sigma2 + float(vc.sigmas[k:].sum())
        den = float(vc.sigmas[k - 1])
        lam = INF if den <= 0 else num / den
        if cap is not None:
            lam = min(lam, float(cap))
        out.append(lam * weight_scale if not math.isinf(lam) else INF)
    return out


@dataclass
class EmpiricalLambdas:
    lambdas: list[float]
    components: VarianceComponents
    info: SubspaceInfo
    sigma2_effective: float
    weight_scale: float


def empirical_lambdas(table: SparseTable, sigma2: float, cap: float | None = None,
                      max_cells: int = NUMERIC_RANK_THRESHOLD,
                      opts: ConvergenceOpts | None = None) -> EmpiricalLambdas:
    """Estimate the variance components and turn them into penalties for ``table``."""
    info = subspace_info(table, max_cells=max_cells, opts=opts)
    s2 = effective_sigma2(table, sigma2)
    vc = estimate_sigmas(table, s2, info)
    scale = harmonic_weight(table)
    return EmpiricalLambdas(lambdas_from_sigmas(vc, cap=cap, weight_scale=scale), vc, info, s2, scale)
