"""Dense reference computations used to check the iterative solver.

Everything here builds explicit n-by-n objects and is meant for small
tables only.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .solver import design_matrix, is_infinite, subsets
from .table import SparseTable, weighted_grand_mean

DENSE_THRESHOLD = 5000


@dataclass
class DenseBasis:
    """Nested orthonormal bases of the order-1..m subspaces.

    ``blocks[k-1]`` holds the columns added at order ``k`` (so
    ``U_k = [blocks[0] ... blocks[k-1]]``) and ``complement`` completes the
    set to an orthogonal n-by-n matrix.
    """

    n: int
    blocks: list[np.ndarray]
    complement: np.ndarray

    @property
    def dims(self) -> list[int]:
        return list(np.cumsum([b.shape[1] for b in self.blocks]).astype(int))

    def U(self, k: int) -> np.ndarray:
        if k == 0:
            return np.zeros((self.n, 0))
        return np.hstack(self.blocks[:k])

    def full(self) -> np.ndarray:
        return np.hstack(self.blocks + [self.complement])

    def projector(self, k: int) -> np.ndarray:
        U = self.U(k)
        return U @ U.T


def _orthogonalize_into(Q: np.ndarray, q_count: int, c: np.ndarray, tol: float):
    """Two passes of Gram-Schmidt of ``c`` against ``Q[:, :q_count]``; None if dependent."""
    norm0 = np.linalg.norm(c)
    if norm0 == 0:
        return None
    v = c.copy()
    for _ in range(2):
        for j in range(q_count):
            v -= np.dot(Q[:, j], v) * Q[:, j]
    nv = np.linalg.norm(v)
    if nv <= tol * norm0:
        return None
    return v / nv


def build_basis(table: SparseTable, max_cells: int = DENSE_THRESHOLD, tol: float = 1e-10) -> DenseBasis:
    """Orthonormalize the indicator designs order by order.

    Lower orders come first, subsets ``J`` lexicographically, levels in
    ordinal order; columns that are dependent on earlier ones (relative
    residual norm below ``tol``) are dropped.
    """
    n = len(table)
    if n > max_cells:
        raise ValidationError(f"dense basis limited to {max_cells} cells, table has {n}")
    Q = np.zeros((n, n))
    count = 0
    blocks = []
    for k in range(1, table.m + 1):
        start = count
        X, _ = design_matrix(table, k)
        for c in X.T:
            if count == n:
                break
            q = _orthogonalize_into(Q, count, c, tol)
            if q is not None:
                Q[:, count] = q
                count += 1
        blocks.append(Q[:, start:count].copy())
    complement = np.zeros((n, 0))
    if count < n:
        # Complete with the orthogonal complement of the span found so far.
        U, _, _ = np.linalg.svd(Q[:, :count], full_matrices=True)
        complement = U[:, count:]
    return DenseBasis(n, blocks, complement)


def _check_inputs(table, basis, sigma2, sigmas):
    if not table.is_balanced:
        raise ValidationError("the posterior-mean oracle needs equal cell weights")
    if basis.n != len(table):
        raise ValidationError("basis does not match the table")
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if sigmas.shape != (table.m + 1,):
        raise ValidationError(f"need m+1 = {table.m + 1} variance components")
    if sigma2 + sigmas[-1] <= 0:
        raise ValidationError("sigma2 + sigma_m^2 must be positive")
    return sigmas


def _marginal_scales(sigma2, sigmas):
    """``a[j] = sigma2 + sigma_m^2 + ... + sigma_j^2`` for j = 0..m."""
    tail = np.cumsum(sigmas[::-1])[::-1]
    return sigma2 + tail


def dense_posterior_mean(table: SparseTable, basis: DenseBasis, sigma2: float, sigmas) -> np.ndarray:
    """Posterior mean of the cell means in the nested random-effects model.

    ``sigmas`` are the variances ``(sigma_0^2, ..., sigma_m^2)``. The
    responses are centered by their mean before the shrinkage and the mean is
    added back, so the result is on the data scale. Uses the expansion in
    the incremental blocks ``V_k``.
    """
    sigmas = _check_inputs(table, basis, sigma2, sigmas)
    gm = weighted_grand_mean(table)
    yc = table.y - gm
    a = _marginal_scales(sigma2, sigmas)
    am = a[-1]
    out = (sigmas[-1] / am) * yc
    for k, V in enumerate(basis.blocks, start=1):
        if V.shape[1] == 0:
            continue
        coef = sigma2 / am - sigma2 / a[k - 1]
        out += coef * (V @ (V.T @ yc))
    return gm + out


def dense_posterior_mean_resolvent(table: SparseTable, basis: DenseBasis, sigma2: float, sigmas) -> np.ndarray:
    """Same posterior mean via ``y - s2 * ((s2 + sm2) I + U Sigma U^T)^{-1} y``."""
    sigmas = _check_inputs(table, basis, sigma2, sigmas)
    gm = weighted_grand_mean(table)
    yc = table.y - gm
    m = table.m
    taus = np.array([sigmas[j:m].sum() for j in range(m)])
    cov = (sigma2 + sigmas[-1]) * np.eye(basis.n)
    for k, V in enumerate(basis.blocks, start=1):
        cov += taus[k - 1] * (V @ V.T)
    return gm + yc - sigma2 * np.linalg.solve(cov, yc)


def additive_fit_two_way(table: SparseTable) -> np.ndarray:
    """Row mean + column mean - grand mean on a complete two-way table."""
    r, c = table.spec.level_counts
    Y = np.zeros((r, c))
    Y[table.codes[:, 0], table.codes[:, 1]] = table.y
    fit = Y.mean(axis=1, keepdims=True) + Y.mean(axis=0, keepdims=True) - Y.mean()
    return fit[table.codes[:, 0], table.codes[:, 1]]


def barry_two_way(table: SparseTable, lam: float) -> np.ndarray:
    """Shrink a complete two-way table toward its additive fit.

    Returns ``y / (1 + lam) + lam * P_A y / (1 + lam)``; an infinite
    ``lam`` gives the additive fit itself.
    """
    if table.m != 2 or not table.is_full or not np.all(table.n == 1.0):
        raise ValidationError("needs a complete two-way table with unit weights")
    if lam < 0:
        raise ValidationError("penalty must be non-negative")
    pa = additive_fit_two_way(table)
    if is_infinite(lam):
        return pa
    return table.y / (1.0 + lam) + lam * pa / (1.0 + lam)


def barry_linear_system(table: SparseTable, lam: float) -> np.ndarray:
    """Solve ``(I + lam (I - P_A)) mu = y`` densely."""
    X, _ = design_matrix(table, 1)
    PA = X @ np.linalg.pinv(X)
    n = len(table)
    return np.linalg.solve(np.eye(n) + lam * (np.eye(n) - PA), table.y)


def normal_equations(table: SparseTable, k: int, lam: float, prior=None, y=None):
    """Assemble the order-k normal equations ``Z beta = u`` densely.

    ``Z[(J,L),(K,M)]`` sums ``n_I + lam`` over cells with ``I_J = L`` and
    ``I_K = M``; ``u[(J,L)]`` sums ``n_I y_I + lam prior_I``. Returns
    ``(Z, u, labels)`` with the column labels of :func:`design_matrix`.
    """
    y = table.y if y is None else np.asarray(y, dtype=np.float64)
    prior = np.zeros(len(table)) if prior is None else np.asarray(prior, dtype=np.float64)
    X, labels = design_matrix(table, k)
    w = table.n + lam
    Z = X.T @ (w[:, None] * X)
    u = X.T @ (table.n * y + lam * prior)
    return Z, u, labels


def coefficient_vector(coefs, labels) -> np.ndarray:
    """Flatten a CoefficientSet into the column order of :func:`design_matrix`."""
    out = np.empty(len(labels))
    for i, (J, flat) in enumerate(labels):
        out[i] = coefs.blocks[J].lookup_flat(np.array([flat]))[0]
    return out


def dense_order_solution(table: SparseTable, k: int, lam: float, prior=None, y=None) -> np.ndarray:
    """Fitted values of the order-k problem by a dense least-norm solve."""
    Z, u, _ = normal_equations(table, k, lam, prior, y)
    X, _ = design_matrix(table, k)
    beta = np.linalg.lstsq(Z, u, rcond=None)[0]
    return X @ beta


def bayes_risk(dims, n: int, sigma2: float, sigmas) -> float:
    """Expected per-cell squared error of the exact posterior mean.

    ``dims`` are the subspace dimensions ``d_1..d_m`` over ``n`` observed
    cells with equal weights; ``sigmas`` the variances
    ``(sigma_0^2, ..., sigma_m^2)``.
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    m = len(dims)
    sm2 = sigmas[-1]
    total = 0.0
    prev = 0
    for k in range(1, m + 1):
        gap = dims[k - 1] - prev
        prev = dims[k - 1]
        prior_var = sigmas[k - 1:m].sum() + sm2
        if gap and sigma2 + prior_var > 0:
            total += gap * sigma2 * prior_var / (sigma2 + prior_var)
    rest = n - prev
    if rest and sigma2 + sm2 > 0:
        total += rest * sigma2 * sm2 / (sigma2 + sm2)
    return total / n


__all__ = [
    "DENSE_THRESHOLD",
    "DenseBasis",
    "additive_fit_two_way",
    "barry_linear_system",
    "barry_two_way",
    "bayes_risk",
    "build_basis",
    "coefficient_vector",
    "dense_order_solution",
    "dense_posterior_mean",
    "dense_posterior_mean_resolvent",
    "normal_equations",
    "subsets",
]
