"""Hierarchical penalized ANOVA fitting by block backfitting.

Order ``k`` fits the mean surface ``mu_I = sum_{|J|=k} beta^J[I_J]`` by
minimizing

    sum_I n_I (y_I - mu_I)^2 + lam_k * sum_I (mu_I - prior_I)^2

over the observed cells, where the prior is the order ``k-1`` fit. Each
block ``beta^J`` is updated in closed form from weighted margin sums
(Gauss-Seidel over blocks, lexicographic in ``J``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from . import _kernels
from .errors import ValidationError
from .table import FactorSpec, MarginIndex, SparseTable, weighted_grand_mean

INF = math.inf
"""Sentinel for an infinite penalty: the order-k fit equals the order k-1 fit."""

DEFAULT_DENSE_BUDGET = 1 << 24


def is_infinite(lam) -> bool:
    return math.isinf(lam) and lam > 0


def subsets(m: int, k: int) -> list[tuple[int, ...]]:
    """All size-``k`` factor subsets of ``range(m)`` in lexicographic order."""
    return list(combinations(range(m), k))


@dataclass
class ConvergenceOpts:
    """Stopping rule for backfitting.

    Iteration stops once a full sweep changes no fitted value by more than
    ``tol * (1 + max|y|)``, or after ``max_sweeps`` sweeps.
    """

    tol: float = 1e-8
    max_sweeps: int = 500
    dense_budget: int = DEFAULT_DENSE_BUDGET


@dataclass
class CoefficientBlock:
    """Coefficients of one margin ``J``.

    Only margin levels seen in the fitted table are stored (``keys`` are
    flat row-major indices into ``shape``); every other level has
    coefficient zero.
    """

    J: tuple[int, ...]
    shape: tuple[int, ...]
    keys: np.ndarray
    values: np.ndarray

    def lookup_flat(self, flat) -> np.ndarray:
        flat = np.asarray(flat, dtype=np.int64)
        if self.keys.size == 0:
            return np.zeros(flat.shape)
        pos = np.searchsorted(self.keys, flat)
        pos = np.minimum(pos, self.keys.size - 1)
        hit = self.keys[pos] == flat
        return np.where(hit, self.values[pos], 0.0)

    def lookup(self, codes) -> np.ndarray:
        """Coefficients at each row of ``codes`` (full m-column level ordinals)."""
        codes = np.asarray(codes, dtype=np.int64)
        if not self.J:
            return self.lookup_flat(np.zeros(codes.shape[0], dtype=np.int64))
        flat = np.ravel_multi_index(tuple(codes[:, f] for f in self.J), self.shape)
        return self.lookup_flat(flat)

    def dense(self, budget: int = DEFAULT_DENSE_BUDGET) -> np.ndarray:
        """The block as an array over the full cross product of J's levels."""
        size = math.prod(self.shape)
        if size > budget:
            raise ValidationError(
                f"block {self.J} has {size} entries, above the dense budget {budget}")
        out = np.zeros(size)
        out[self.keys] = self.values
        return out.reshape(self.shape)


@dataclass
class CoefficientSet:
    order: int
    blocks: dict[tuple[int, ...], CoefficientBlock]

    def evaluate(self, codes) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        out = np.zeros(codes.shape[0])
        for J in sorted(self.blocks):
            out += self.blocks[J].lookup(codes)
        return out


@dataclass
class OrderFit:
    """Result of one order of the hierarchy.

    ``mu`` holds the fitted values at the observed cells in the scale the
    solver saw (centered inside :func:`fit_hanova`).
    ``objective_trace[0]`` is the objective at the starting point and entry
    ``s`` the value after sweep ``s``.
    """

    order: int
    coefficients: CoefficientSet
    mu: np.ndarray
    lam: float
    sweeps: int
    converged: bool
    objective_trace: list[float] = field(default_factory=list)


class BackfitWorkspace:
    """Precomputed right-hand sides and diagonals for one order's backfit."""

    def __init__(self, table: SparseTable, k: int, lam: float, y, prior, weights=None):
        self.table = table
        self.k = k
        self.lam = float(lam)
        self.y = np.ascontiguousarray(y, dtype=np.float64)
        self.prior = np.ascontiguousarray(prior, dtype=np.float64)
        self.n = np.ascontiguousarray(table.n if weights is None else weights, dtype=np.float64)
        self.w = self.n + self.lam
        rhs = self.n * self.y + self.lam * self.prior
        self.margins: list[MarginIndex] = [table.margin_index(J) for J in subsets(table.m, k)]
        self.u = [_kernels.margin_sum(mi.inverse, rhs, mi.size) for mi in self.margins]
        self.z_diag = [_kernels.margin_sum(mi.inverse, self.w, mi.size) for mi in self.margins]
        self.beta = [np.zeros(mi.size) for mi in self.margins]
        self.mu = np.zeros(len(table))
        self.prior_mu = self.prior

    def objective(self) -> float:
        return _kernels.wpls_objective(self.y, self.n, self.mu, self.prior, self.lam)

    def recompute_mu(self) -> np.ndarray:
        mu = np.zeros(len(self.table))
        for mi, b in zip(self.margins, self.beta):
            _kernels.gather_add(mu, b, mi.inverse)
        return mu

    def coefficient_set(self) -> CoefficientSet:
        blocks = {mi.J: CoefficientBlock(mi.J, mi.shape, mi.keys, b.copy())
                  for mi, b in zip(self.margins, self.beta)}
        return CoefficientSet(self.k, blocks)


def backfit_sweep(ws: BackfitWorkspace) -> float:
    """One Gauss-Seidel pass over all blocks; returns the largest coefficient change."""
    delta = 0.0
    for mi, u, z, b in zip(ws.margins, ws.u, ws.z_diag, ws.beta):
        delta = max(delta, _kernels.block_update(mi.inverse, ws.w, u, z, b, ws.mu))
    return delta


def wpls_objective(table: SparseTable, mu, lam: float, prior, y=None) -> float:
    """Weighted data misfit plus ``lam`` times the squared distance to ``prior``."""
    if lam < 0:
        raise ValidationError("penalty must be non-negative")
    y = table.y if y is None else y
    mu = np.ascontiguousarray(mu, dtype=np.float64)
    prior = np.ascontiguousarray(prior, dtype=np.float64)
    if mu.shape != (len(table),) or prior.shape != (len(table),):
        raise ValidationError("mu and prior must have one entry per observed cell")
    if is_infinite(lam):
        return math.inf if np.any(mu != prior) else _kernels.wpls_objective(
            np.ascontiguousarray(y, dtype=np.float64), table.n, mu, prior, 0.0)
    return _kernels.wpls_objective(np.ascontiguousarray(y, dtype=np.float64), table.n, mu, prior, float(lam))


def _lift(prior_coefs: CoefficientSet, table: SparseTable, k: int) -> CoefficientSet:
    """Express an order k-1 surface with order-k blocks on the observed margins.

    Each lower block ``K`` is folded into the first ``J`` (lexicographic)
    that contains it, ``J = K + {smallest factor not in K}``.
    """
    m = table.m
    cell_vals = {J: np.zeros(len(table)) for J in subsets(m, k)}
    for K, block in prior_coefs.blocks.items():
        extra = min(f for f in range(m) if f not in K)
        J = tuple(sorted(K + (extra,)))
        cell_vals[J] += block.lookup(table.codes)
    blocks = {}
    for J, vals in cell_vals.items():
        mi = table.margin_index(J)
        b = np.zeros(mi.size)
        b[mi.inverse] = vals
        blocks[J] = CoefficientBlock(J, mi.shape, mi.keys, b)
    return CoefficientSet(k, blocks)


def _zero_set(table: SparseTable, k: int) -> CoefficientSet:
    blocks = {}
    for J in subsets(table.m, k):
        mi = table.margin_index(J)
        blocks[J] = CoefficientBlock(J, mi.shape, mi.keys, np.zeros(mi.size))
    return CoefficientSet(k, blocks)


def _represent_prior(table, k, prior, opts, prior_coefs):
    if prior_coefs is not None:
        return _lift(prior_coefs, table, k) if prior_coefs.order < k else prior_coefs
    if np.ptp(prior) == 0:
        # A constant prior is representable by any single block.
        coefs = _zero_set(table, k)
        if prior[0] != 0:
            coefs.blocks[subsets(table.m, k)[0]].values[:] = prior[0]
        return coefs
    # Limit of an infinite penalty: the unweighted projection of the prior onto S_k.
    proj = _fit(table, k, 0.0, prior, np.zeros(len(table)), opts,
                weights=np.ones(len(table)), canonical=False)
    return proj.coefficients


def sparse_design(table: SparseTable, k: int) -> scipy.sparse.csr_matrix:
    """Sparse indicator design of the order-k model (columns as in :func:`design_matrix`)."""
    rows, cols, offset = [], [], 0
    for J in subsets(table.m, k):
        mi = table.margin_index(J)
        rows.append(np.arange(len(table)))
        cols.append(mi.inverse + offset)
        offset += mi.size
    r, c = np.concatenate(rows), np.concatenate(cols)
    return scipy.sparse.csr_matrix((np.ones(r.size), (r, c)), shape=(len(table), offset))


def min_norm_coefficients(table: SparseTable, k: int, target) -> CoefficientSet | None:
    """Order-k coefficients of least Euclidean norm whose surface fits ``target`` on the cells.

    The fitted values pin the coefficients down only up to the null space of
    the design over the observed cells; that null space is exactly what
    predictions at unobserved cells read. The minimum-norm representative
    treats all factors and levels alike, so those predictions do not depend
    on the block order of the solver. Solved by LSQR started at zero (whose
    iterates stay in the row space); returns None if LSQR stalls.
    """
    X = sparse_design(table, k)
    target = np.asarray(target, dtype=np.float64)
    if not np.any(target):
        return _zero_set(table, k)
    limit = 10 * min(X.shape) + 100
    sol, istop = scipy.sparse.linalg.lsqr(X, target, atol=1e-14, btol=1e-14, iter_lim=limit)[:2]
    if istop not in (1, 2, 4, 5):
        return None
    blocks, offset = {}, 0
    for J in subsets(table.m, k):
        mi = table.margin_index(J)
        blocks[J] = CoefficientBlock(J, mi.shape, mi.keys, sol[offset:offset + mi.size].copy())
        offset += mi.size
    return CoefficientSet(k, blocks)


def _fit(table, k, lam, y, prior, opts, prior_coefs=None, weights=None,
         canonical=True) -> OrderFit:
    if not 1 <= k <= table.m:
        raise ValidationError(f"order must lie in 1..{table.m}, got {k}")
    if lam < 0 or math.isnan(lam):
        raise ValidationError("penalty must be non-negative")
    opts = opts or ConvergenceOpts()
    prior = np.ascontiguousarray(prior, dtype=np.float64)
    if prior.shape != (len(table),):
        raise ValidationError("prior must have one entry per observed cell")

    if is_infinite(lam):
        # mu^(k) = mu^(k-1): represent the prior with order-k blocks.
        coefs = min_norm_coefficients(table, k, prior) if canonical else None
        if coefs is None:
            coefs = _represent_prior(table, k, prior, opts, prior_coefs)
        mu = coefs.evaluate(table.codes)
        obj = _kernels.wpls_objective(np.ascontiguousarray(y, dtype=np.float64),
                                      np.ascontiguousarray(table.n if weights is None else weights),
                                      mu, mu, 0.0)
        return OrderFit(k, coefs, mu, INF, 0, True, [obj])

    ws = BackfitWorkspace(table, k, lam, y, prior, weights=weights)
    scale = opts.tol * (1.0 + (float(np.max(np.abs(ws.y))) if len(table) else 0.0))
    trace = [ws.objective()]
    mu_prev = ws.mu.copy()
    converged = False
    sweeps = 0
    while sweeps < opts.max_sweeps:
        backfit_sweep(ws)
        sweeps += 1
        trace.append(ws.objective())
        change = float(np.max(np.abs(ws.mu - mu_prev)))
        if change < scale:
            converged = True
            break
        np.copyto(mu_prev, ws.mu)
    coefs = ws.coefficient_set()
    mu = ws.recompute_mu()
    if canonical:
        alt = min_norm_coefficients(table, k, mu)
        if alt is not None:
            coefs = alt
            mu = coefs.evaluate(table.codes)
    return OrderFit(k, coefs, mu, float(lam), sweeps, converged, trace)


def fit_order(table: SparseTable, k: int, lam: float, prior_mu=None,
              opts: ConvergenceOpts | None = None,
              prior_coefs: CoefficientSet | None = None) -> OrderFit:
    """Solve the order-``k`` penalized problem for ``table.y`` (not centered).

    Parameters
    ----------
    table : SparseTable
    k : int
        Interaction order, ``1 <= k <= m``.
    lam : float
        Penalty; ``INF`` returns the prior surface itself.
    prior_mu : array_like, optional
        Shrinkage target at the observed cells (default zero).
    prior_coefs : CoefficientSet, optional
        Coefficients of the prior; used to represent it exactly when
        ``lam`` is infinite. Without them the prior is projected onto the
        order-k subspace.
    """
    prior = np.zeros(len(table)) if prior_mu is None else prior_mu
    return _fit(table, k, lam, table.y, prior, opts, prior_coefs=prior_coefs)


@dataclass
class HanovaFit:
    """The hierarchy of fitted surfaces for orders ``1..maxk``.

    Coefficients are stored on the centered scale; :meth:`predict` and
    :meth:`fitted` add the grand mean back.
    """

    spec: FactorSpec
    grand_mean: float
    order_fits: list[OrderFit]
    maxk: int
    lambdas: list[float]
    centered: bool = True

    def coefficients(self, order: int | None = None) -> CoefficientSet:
        return self.order_fits[self._order(order) - 1].coefficients

    def _order(self, order):
        k = self.maxk if order is None else int(order)
        if k == 0:
            return 0
        if not 1 <= k <= self.maxk:
            raise ValidationError(f"order must lie in 0..{self.maxk}, got {order}")
        return k

    def fitted(self, order: int | None = None) -> np.ndarray:
        """Fitted values at the training cells, grand mean included."""
        k = self._order(order)
        if k == 0:
            return np.full(self.order_fits[0].mu.shape, self.grand_mean)
        return self.grand_mean + self.order_fits[k - 1].mu

    def predict_codes(self, codes, order: int | None = None) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        if codes.ndim == 1:
            codes = codes.reshape(1, -1)
        if codes.shape[1] != self.spec.m:
            raise ValidationError(f"expected {self.spec.m} level ordinals per row")
        counts = np.asarray(self.spec.level_counts)
        if np.any(codes < 0) or np.any(codes >= counts[None, :]):
            raise ValidationError("level ordinal out of range")
        k = self._order(order)
        if k == 0:
            return np.full(codes.shape[0], self.grand_mean)
        return self.grand_mean + self.order_fits[k - 1].coefficients.evaluate(codes)

    def predict(self, index: Sequence[int], order: int | None = None) -> float:
        return float(self.predict_codes(np.asarray([index]), order)[0])

    def predict_labels(self, labels: Sequence[str], order: int | None = None) -> float:
        try:
            codes = self.spec.encode(labels)
        except KeyError as exc:
            raise ValidationError(f"unknown level label {exc}") from None
        return self.predict(codes, order)


def fit_hanova(table: SparseTable, lambdas: Sequence[float], maxk: int | None = None,
               opts: ConvergenceOpts | None = None) -> HanovaFit:
    """Fit orders ``1..maxk``, each shrunk toward the previous one.

    The responses are centered by the weighted grand mean before order 1.
    ``lambdas[k-1]`` is the penalty for order ``k``.
    """
    lambdas = [float(v) for v in lambdas]
    if maxk is None:
        maxk = len(lambdas)
    if not 1 <= maxk <= table.m:
        raise ValidationError(f"maxk must lie in 1..{table.m}, got {maxk}")
    if len(lambdas) != maxk:
        raise ValidationError(f"need {maxk} penalties, got {len(lambdas)}")
    if any(v < 0 or math.isnan(v) for v in lambdas):
        raise ValidationError("penalties must be non-negative")
    gm = weighted_grand_mean(table)
    yc = table.y - gm
    prior = np.zeros(len(table))
    prior_coefs = None
    fits = []
    for k in range(1, maxk + 1):
        f = _fit(table, k, lambdas[k - 1], yc, prior, opts, prior_coefs=prior_coefs)
        fits.append(f)
        prior, prior_coefs = f.mu, f.coefficients
    return HanovaFit(table.spec, gm, fits, maxk, lambdas)


def predict(fit: HanovaFit, index: Sequence[int], order: int | None = None) -> float:
    return fit.predict(index, order)


def final_blend(fit: HanovaFit, table: SparseTable, sigma2: float, sigma_m2: float) -> np.ndarray:
    """Blend the data with the full-order fit: ``(sm2 * y + s2 * mu_m) / (s2 + sm2)``."""
    if fit.maxk != table.m:
        raise ValidationError("the blend needs a fit of the full order m")
    total = sigma2 + sigma_m2
    if total <= 0:
        raise ValidationError("sigma2 + sigma_m2 must be positive")
    return (sigma_m2 / total) * table.y + (sigma2 / total) * fit.fitted(table.m)


def design_matrix(table: SparseTable, k: int) -> tuple[np.ndarray, list[tuple[tuple[int, ...], int]]]:
    """Dense 0/1 indicator design of the order-k model over the observed cells.

    Columns follow the block order (lexicographic ``J``) and, within a
    block, the observed margin levels in ordinal order. Returns the matrix
    and the ``(J, flat_level)`` label of each column.
    """
    cols, labels = [], []
    for J in subsets(table.m, k):
        mi = table.margin_index(J)
        X = np.zeros((len(table), mi.size))
        X[np.arange(len(table)), mi.inverse] = 1.0
        cols.append(X)
        labels.extend((J, int(key)) for key in mi.keys)
    return np.hstack(cols), labels
