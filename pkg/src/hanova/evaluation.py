"""Simulation from the nested random-effects model, cross-validation and metrics.

The generative model for the observed cell means is

    mu = sum_k tau_{k-1} (P_k - P_{k-1}) g + sigma_m e,   y_I = mu_I + eps_I,

with ``g, e`` standard normal, ``P_k`` the orthogonal projection onto the
order-k subspace of the observed cells, ``tau_k^2 = sigma_k^2 + ... +
sigma_{m-1}^2`` and ``eps_I ~ N(0, sigma^2 / n_I)``. This has exactly the
prior covariance whose posterior mean the hierarchy of penalized fits
reproduces.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .oracle import DENSE_THRESHOLD, bayes_risk, build_basis, dense_posterior_mean
from .preprocess import UnitRecords
from .solver import INF, ConvergenceOpts, fit_hanova, subsets
from .table import FactorSpec, SparseTable, weighted_grand_mean
from .variance import (NUMERIC_RANK_THRESHOLD, VarianceComponents, effective_sigma2,
                       empirical_lambdas, harmonic_weight, lambdas_from_sigmas,
                       project_onto_order, subspace_dim)

WEIGHT_SCHEMES = ("equal", "ratio")
SAMPLERS = ("projection", "margin")
CV_MULTIPLIERS = (0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0)


def _rng(seed: int, replicate: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(replicate)]))


@dataclass(frozen=True)
class SimSpec:
    """Settings of one simulation design.

    ``sigmas`` lists standard deviations ``(sigma_0, sigma_1, ...)`` of the
    leading components followed by the noise level ``sigma``; components not
    listed are zero. With ``m`` factors at most ``m + 1`` components
    (``sigma_0 .. sigma_m``) may precede ``sigma``.
    """

    level_counts: tuple[int, ...]
    sigmas: tuple[float, ...]
    weights: str = "equal"
    weight_ratio: float = 10.0
    observation_rate: float = 1.0
    replicates: int = 200
    seed: int = 0
    sampler: str = "projection"

    def __post_init__(self):
        object.__setattr__(self, "level_counts", tuple(int(v) for v in self.level_counts))
        object.__setattr__(self, "sigmas", tuple(float(v) for v in self.sigmas))
        if not self.level_counts or min(self.level_counts) < 2:
            raise ValidationError("every factor needs at least 2 levels")
        if len(self.sigmas) < 2:
            raise ValidationError("need at least sigma_0 and the noise level sigma")
        if len(self.sigmas) - 1 > self.m + 1:
            raise ValidationError(f"at most {self.m + 1} components for {self.m} factors")
        if any(not math.isfinite(s) or s < 0 for s in self.sigmas):
            raise ValidationError("standard deviations must be finite and non-negative")
        if self.weights not in WEIGHT_SCHEMES:
            raise ValidationError(f"weight scheme must be one of {WEIGHT_SCHEMES}")
        if not self.weight_ratio >= 1:
            raise ValidationError("weight ratio must be >= 1")
        if not 0 < self.observation_rate <= 1:
            raise ValidationError("observation rate must lie in (0, 1]")
        if self.replicates < 1:
            raise ValidationError("need at least one replicate")
        if self.sampler not in SAMPLERS:
            raise ValidationError(f"sampler must be one of {SAMPLERS}")

    @property
    def m(self) -> int:
        return len(self.level_counts)

    @property
    def sigma(self) -> float:
        return self.sigmas[-1]

    @property
    def variances(self) -> np.ndarray:
        """``sigma_0^2 .. sigma_m^2`` padded with zeros."""
        out = np.zeros(self.m + 1)
        comps = np.asarray(self.sigmas[:-1])
        out[:comps.size] = comps ** 2
        return out

    @property
    def true_order(self) -> int:
        nz = np.flatnonzero(self.variances[:self.m] > 0)
        return int(nz[-1]) + 1 if nz.size else 0

    def factor_spec(self) -> FactorSpec:
        names = tuple(f"f{i + 1}" for i in range(self.m))
        return FactorSpec(names, tuple(tuple(f"l{j + 1}" for j in range(c)) for c in self.level_counts))


@dataclass
class SimInstance:
    """One simulated table with its true cell means.

    ``true_beta`` holds the draws that define ``true_mu``: with the
    projection sampler the standard-normal vectors ``g`` and ``e`` over the
    observed cells, with the margin sampler one effect array per factor
    subset ``J`` (full cross product of its levels).
    """

    table: SparseTable
    true_mu: np.ndarray
    true_beta: dict
    seed: tuple[int, int]
    spec: SimSpec


def _observed_codes(spec: SimSpec, rng: np.random.Generator) -> np.ndarray:
    total = math.prod(spec.level_counts)
    if spec.observation_rate >= 1:
        flat = np.arange(total)
    else:
        count = max(1, int(round(spec.observation_rate * total)))
        flat = np.sort(rng.choice(total, size=count, replace=False))
    return np.stack(np.unravel_index(flat, spec.level_counts), axis=1).astype(np.int64)


def _weights(spec: SimSpec, n_cells: int, rng: np.random.Generator) -> np.ndarray:
    if spec.weights == "equal" or spec.weight_ratio == 1:
        return np.ones(n_cells)
    return np.exp(rng.uniform(0.0, math.log(spec.weight_ratio), size=n_cells))


def projection_mean(table: SparseTable, g, e, taus, sigma_m: float) -> np.ndarray:
    """``sum_k (tau_{k-1} - tau_k) P_k g + sigma_m e`` with ``tau_m = 0``.

    ``taus`` are the standard deviations ``tau_0 .. tau_{m-1}``; this equals
    ``sum_k tau_{k-1} (P_k - P_{k-1}) g`` by telescoping.
    """
    m = table.m
    t = list(taus) + [0.0]
    mu = sigma_m * np.asarray(e, dtype=np.float64)
    for k in range(1, m + 1):
        c = t[k - 1] - t[k]
        if c != 0:
            mu = mu + c * project_onto_order(table, g, k)
    return mu


def simulate(spec: SimSpec, replicate: int = 0) -> SimInstance:
    """Draw one table; a pure function of ``(spec.seed, replicate)``."""
    rng = _rng(spec.seed, replicate)
    codes = _observed_codes(spec, rng)
    n = _weights(spec, codes.shape[0], rng)
    fspec = spec.factor_spec()
    var = spec.variances
    m = spec.m
    if spec.sampler == "projection":
        g = rng.standard_normal(codes.shape[0])
        e = rng.standard_normal(codes.shape[0])
        skeleton = SparseTable(fspec, codes, np.zeros(codes.shape[0]), np.ones(codes.shape[0]))
        taus = [math.sqrt(var[k:m].sum()) for k in range(m)]
        mu = projection_mean(skeleton, g, e, taus, math.sqrt(var[m]))
        beta = {"g": g, "e": e}
    else:
        mu = np.zeros(codes.shape[0])
        beta = {}
        for k in range(1, m + 1):
            if var[k - 1] == 0:
                continue
            for J in subsets(m, k):
                shape = tuple(spec.level_counts[f] for f in J)
                eff = math.sqrt(var[k - 1]) * rng.standard_normal(shape)
                beta[J] = eff
                mu += eff[tuple(codes[:, f] for f in J)]
        e = rng.standard_normal(codes.shape[0])
        beta["e"] = e
        mu += math.sqrt(var[m]) * e
    y = mu + spec.sigma * rng.standard_normal(codes.shape[0]) / np.sqrt(n)
    return SimInstance(SparseTable(fspec, codes, y, n), mu, beta, (spec.seed, int(replicate)), spec)


# --- unit-level simulation ---------------------------------------------------

@dataclass(frozen=True)
class UnitSimSpec:
    """Units nested in the cells of a :class:`SimSpec` design.

    Each observed cell receives between 1 and ``max_units`` units, each with
    ``1 .. max_reviews`` ratings; ratings are ``mu_c + alpha_i + noise``.
    """

    cells: SimSpec
    sigma_u: float = 1.0
    sigma_r: float = 2.0
    max_units: int = 5
    max_reviews: int = 20
    fixed_counts: bool = False

    def __post_init__(self):
        if self.sigma_u < 0 or self.sigma_r < 0:
            raise ValidationError("standard deviations must be non-negative")
        if self.max_units < 1 or self.max_reviews < 1:
            raise ValidationError("need at least one unit and one review")


@dataclass
class UnitInstance:
    units: UnitRecords
    true_unit_means: np.ndarray
    true_cell_means: np.ndarray


def simulate_units(spec: UnitSimSpec, replicate: int = 0) -> UnitInstance:
    """Draw units and raw ratings around simulated cell means.

    Cell means come from :func:`simulate` on ``spec.cells`` (its noise level
    is not used). With ``fixed_counts`` every cell has ``max_units`` units of
    ``max_reviews`` ratings.
    """
    inst = simulate(spec.cells, replicate)
    rng = np.random.default_rng(np.random.SeedSequence([spec.cells.seed, int(replicate), 1]))
    table = inst.table
    codes, ids, y, nrev, truth, cellmu, rev_ids, ratings = [], [], [], [], [], [], [], []
    uid = 0
    for row, mu in zip(table.codes, inst.true_mu):
        k = spec.max_units if spec.fixed_counts else int(rng.integers(1, spec.max_units + 1))
        for _ in range(k):
            nr = spec.max_reviews if spec.fixed_counts else int(rng.integers(1, spec.max_reviews + 1))
            alpha = spec.sigma_u * rng.standard_normal()
            r = mu + alpha + spec.sigma_r * rng.standard_normal(nr)
            name = f"u{uid}"
            uid += 1
            codes.append(row)
            ids.append(name)
            y.append(float(r.mean()))
            nrev.append(nr)
            truth.append(mu + alpha)
            cellmu.append(mu)
            rev_ids.extend([name] * nr)
            ratings.extend(r.tolist())
    units = UnitRecords(table.spec, np.array(codes), ids, np.array(y), np.array(nrev),
                        rev_ids, np.array(ratings))
    return UnitInstance(units, np.array(truth), np.array(cellmu))


# --- metrics -----------------------------------------------------------------

def rmse(pred, truth, weights=None) -> float:
    """Root mean squared error; weighted by ``weights`` when given."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ValidationError(f"length mismatch: {pred.size} predictions, {truth.size} truths")
    if pred.size == 0:
        raise ValidationError("no values")
    d2 = (pred - truth) ** 2
    if weights is None:
        return float(math.sqrt(np.mean(d2)))
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.shape != pred.shape:
        raise ValidationError("weights must align with the predictions")
    return float(math.sqrt(np.dot(w, d2) / w.sum()))


# --- cross-validation --------------------------------------------------------

@dataclass
class CvResult:
    """Coordinate-wise K-fold cross-validation over the penalties.

    ``losses[k-1][j]`` is the mean held-out weighted MSE of candidate
    ``grid[k-1][j]`` for order ``k`` (all other penalties at ``base``);
    ``fold_losses[k-1]`` has one column per fold.
    """

    grid: list[list[float]]
    base: list[float]
    seed: int
    folds: np.ndarray
    losses: list[np.ndarray]
    fold_losses: list[np.ndarray]
    selected: list[float]
    one_se: list[float]


def fold_assignment(n_cells: int, k: int, seed: int) -> np.ndarray:
    """Balanced random fold labels ``0..k-1`` for ``n_cells`` cells."""
    if k < 2:
        raise ValidationError("need at least 2 folds")
    if n_cells < k:
        raise ValidationError(f"{n_cells} cells cannot fill {k} folds")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5eed]))
    return rng.permutation(np.arange(n_cells) % k)


def default_grid(base: Sequence[float], multipliers=CV_MULTIPLIERS) -> list[list[float]]:
    return [[INF] if math.isinf(b) else [b * f for f in multipliers] for b in base]


def heldout_loss(table: SparseTable, train: np.ndarray, lambdas, maxk: int,
                 opts: ConvergenceOpts | None = None) -> float:
    """Weighted squared error on the cells outside ``train`` (a boolean mask)."""
    test = ~train
    fit = fit_hanova(table.subset(np.flatnonzero(train)), lambdas, maxk=maxk, opts=opts)
    pred = fit.predict_codes(table.codes[test], order=maxk)
    w = table.n[test]
    return float(np.dot(w, (table.y[test] - pred) ** 2) / w.sum())


def _pick(cands, means, ses):
    """Index of the best candidate (ties toward larger penalty) and of the one-SE choice."""
    lo = float(np.min(means))
    tol = 1e-12 * max(1.0, abs(lo))
    ties = [i for i in range(len(cands)) if means[i] <= lo + tol]
    best = max(ties, key=lambda i: (cands[i], i))
    bound = means[best] + ses[best]
    within = [i for i in range(len(cands)) if means[i] <= bound]
    return best, max(within, key=lambda i: (cands[i], i))


def cross_validate(table: SparseTable, maxk: int, grid: Sequence[Sequence[float]] | None = None,
                   folds: int | Sequence[int] = 5, seed: int = 0,
                   base_lambdas: Sequence[float] | None = None, sigma2: float | None = None,
                   cap: float | None = None, opts: ConvergenceOpts | None = None,
                   workers: int = 1) -> CvResult:
    """Choose the penalties one order at a time by K-fold cross-validation.

    Parameters
    ----------
    table : SparseTable
    maxk : int
        Order of the fitted model; losses are scored at this order.
    grid : list of lists, optional
        Candidates per order. Default: ``base_k`` times
        ``0.1, 0.2, 0.5, 1, 2, 5, 10``.
    folds : int or array_like
        Number of folds, or an explicit fold label per cell.
    base_lambdas : sequence, optional
        Values held fixed for the orders not being varied. Default: the
        empirical penalties for ``sigma2`` (required in that case).
    workers : int
        Threads for the candidate-by-fold fits; results do not depend on it.

    Notes
    -----
    Held-out cells are scored with the order-``maxk`` surface, whose
    coefficients at margins missing from the training folds are zero. With
    ``maxk = m`` each held-out cell is its own unseen margin, so every
    candidate predicts the grand mean there; a warning is issued.
    """
    if not 1 <= maxk <= table.m:
        raise ValidationError(f"maxk must lie in 1..{table.m}")
    if maxk == table.m:
        warnings.warn("at order m every held-out cell is an unobserved margin and is predicted "
                      "by the grand mean, so the losses cannot separate the candidates; "
                      "use maxk < m", stacklevel=2)
    if base_lambdas is None:
        if sigma2 is None:
            raise ValidationError("need base penalties or sigma2 to estimate them")
        base_lambdas = empirical_lambdas(table, sigma2, cap=cap).lambdas[:maxk]
    base = [float(v) for v in base_lambdas]
    if len(base) != maxk:
        raise ValidationError(f"need {maxk} base penalties")
    grid = default_grid(base) if grid is None else [[float(v) for v in g] for g in grid]
    if len(grid) != maxk or any(len(g) == 0 for g in grid):
        raise ValidationError(f"need a non-empty candidate list for each of {maxk} orders")
    if any(v < 0 or math.isnan(v) for g in grid for v in g):
        raise ValidationError("candidates must be non-negative")

    if np.isscalar(folds):
        assign = fold_assignment(len(table), int(folds), seed)
    else:
        assign = np.asarray(folds, dtype=np.int64).ravel()
        if assign.shape != (len(table),):
            raise ValidationError("need one fold label per cell")
    labels = np.unique(assign)
    if labels.size < 2:
        raise ValidationError("need at least 2 non-empty folds")
    masks = [assign != f for f in labels]
    if any(not mk.any() for mk in masks):
        raise ValidationError("a fold leaves no training cells")

    tasks = []
    for k in range(maxk):
        for j, cand in enumerate(grid[k]):
            lam = list(base)
            lam[k] = cand
            for f, mk in enumerate(masks):
                tasks.append((k, j, f, lam, mk))

    def run(task):
        _, _, _, lam, mk = task
        return heldout_loss(table, mk, lam, maxk, opts)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    fold_losses = [np.zeros((len(g), labels.size)) for g in grid]
    for (k, j, f, _, _), val in zip(tasks, results):
        fold_losses[k][j, f] = val
    losses, selected, one_se = [], [], []
    K = labels.size
    for k in range(maxk):
        fl = fold_losses[k]
        means = fl.mean(axis=1)
        ses = fl.std(axis=1, ddof=1) / math.sqrt(K)
        best, alt = _pick(grid[k], means, ses)
        losses.append(means)
        selected.append(grid[k][best])
        one_se.append(grid[k][alt])
    return CvResult(grid, base, int(seed), assign, losses, fold_losses, selected, one_se)


# --- experiments -------------------------------------------------------------

def parse_method(text: str) -> tuple[str, int | None]:
    """``"ols:2"``, ``"oracle:2"``, ``"empirical:3"`` or ``"bayes"``."""
    text = text.strip().lower()
    if text == "bayes":
        return "bayes", None
    kind, _, order = text.partition(":")
    if kind not in ("ols", "oracle", "empirical") or not order.isdigit():
        raise ValidationError(f"unknown method {text!r}")
    return kind, int(order)


def oracle_components(spec: SimSpec, table: SparseTable) -> VarianceComponents:
    var = spec.variances
    s2 = effective_sigma2(table, spec.sigma ** 2)
    zeros = np.zeros_like(var, dtype=bool)
    return VarianceComponents(s2, var.copy(), var.copy(), zeros, zeros.copy())


def posterior_mean(table: SparseTable, sigma2: float, variances, basis=None) -> np.ndarray:
    """Posterior mean of the cell means for an equally weighted table.

    Uses the dense basis when given, otherwise projections by backfitting.
    ``variances`` are ``sigma_0^2 .. sigma_m^2``; the grand mean is treated
    as known and equal to the sample mean. Noise-free data (``sigma2 = 0``)
    are their own posterior mean.
    """
    if not table.is_balanced:
        raise ValidationError("the Bayes oracle needs equal cell weights")
    if sigma2 == 0:
        return table.y.copy()
    if basis is not None:
        return dense_posterior_mean(table, basis, sigma2, variances)
    var = np.asarray(variances, dtype=np.float64)
    m = table.m
    a = sigma2 + np.cumsum(var[::-1])[::-1]
    gm = weighted_grand_mean(table)
    yc = table.y - gm
    out = (var[m] / a[m]) * yc
    prev = np.zeros_like(yc)
    for k in range(1, m + 1):
        cur = project_onto_order(table, yc, k)
        coef = sigma2 / a[m] - sigma2 / a[k - 1]
        if coef != 0:
            out += coef * (cur - prev)
        prev = cur
    return gm + out


@dataclass
class ExperimentResult:
    spec: SimSpec
    methods: list[str]
    rmse: np.ndarray                     # (replicates, methods)
    bayes_reference: float | None
    extras: dict = field(default_factory=dict)

    def mean(self, method: str) -> float:
        return float(self.rmse[:, self.methods.index(method)].mean())

    def column(self, method: str) -> np.ndarray:
        return self.rmse[:, self.methods.index(method)]

    def summary(self, quantiles=(0.05, 0.25, 0.5, 0.75, 0.95)) -> list[dict]:
        rows = []
        for j, name in enumerate(self.methods):
            col = self.rmse[:, j]
            row = {"method": name, "mean": float(col.mean()), "sd": float(col.std(ddof=1)) if col.size > 1 else 0.0}
            for q in quantiles:
                row[f"q{q:g}"] = float(np.quantile(col, q))
            rows.append(row)
        return rows

    def write_csv(self, path) -> None:
        import csv
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replicate", "method", "rmse"])
            for r in range(self.rmse.shape[0]):
                for j, name in enumerate(self.methods):
                    w.writerow([r, name, repr(float(self.rmse[r, j]))])
            if self.bayes_reference is not None:
                w.writerow(["reference", "bayes_risk", repr(self.bayes_reference)])


def bayes_reference(spec: SimSpec, table: SparseTable, max_cells: int = NUMERIC_RANK_THRESHOLD) -> float | None:
    """Square root of the exact Bayes risk per cell, when the dimensions are computable."""
    if not table.is_balanced:
        return None
    try:
        dims = [subspace_dim(table, k, max_cells=max_cells) for k in range(1, table.m + 1)]
    except ValidationError:
        return None
    s2 = spec.sigma ** 2 / float(table.n[0])
    return math.sqrt(bayes_risk(dims, len(table), s2, spec.variances))


def evaluate_methods(inst: SimInstance, methods: Sequence[str], cap: float | None = 5.0,
                     opts: ConvergenceOpts | None = None, basis=None) -> list[float]:
    """RMSE on the observed cells for every method on one simulated table."""
    table = inst.table
    spec = inst.spec
    out = []
    emp = None
    for text in methods:
        kind, order = parse_method(text)
        if order is not None and not 1 <= order <= table.m:
            raise ValidationError(f"order {order} outside 1..{table.m}")
        if kind == "ols":
            fit = fit_hanova(table, [INF] * (order - 1) + [0.0], maxk=order, opts=opts)
            pred = fit.fitted(order)
        elif kind == "oracle":
            lam = lambdas_from_sigmas(oracle_components(spec, table),
                                      weight_scale=harmonic_weight(table))[:order]
            pred = fit_hanova(table, lam, maxk=order, opts=opts).fitted(order)
        elif kind == "empirical":
            if emp is None:
                emp = empirical_lambdas(table, spec.sigma ** 2, cap=cap)
            pred = fit_hanova(table, emp.lambdas[:order], maxk=order, opts=opts).fitted(order)
        else:
            s2 = effective_sigma2(table, spec.sigma ** 2)
            pred = posterior_mean(table, s2, spec.variances, basis=basis)
        out.append(rmse(pred, inst.true_mu))
    return out


def run_experiment(spec: SimSpec, methods: Sequence[str], cap: float | None = 5.0,
                   opts: ConvergenceOpts | None = None, workers: int = 1,
                   replicates: int | None = None) -> ExperimentResult:
    """Simulate ``spec.replicates`` tables and score every method on each.

    Methods are ``"ols:j"`` (unpenalized order-j fit), ``"oracle:j"``
    (penalties from the true components), ``"empirical:j"`` (estimated
    components, penalties truncated at ``cap``) and ``"bayes"`` (exact
    posterior mean; equal weights only).
    """
    methods = [m.strip() for m in methods]
    for text in methods:
        parse_method(text)
    if "bayes" in methods and spec.weights != "equal":
        raise ValidationError("the Bayes oracle needs equal weights (weights = 'equal')")
    reps = spec.replicates if replicates is None else int(replicates)
    if reps < 1:
        raise ValidationError("need at least one replicate")

    basis = None
    if "bayes" in methods and spec.observation_rate >= 1 and math.prod(spec.level_counts) <= DENSE_THRESHOLD:
        codes = grid_codes(spec.level_counts)
        ones = np.ones(codes.shape[0])
        basis = build_basis(SparseTable(spec.factor_spec(), codes, ones, ones))

    def one(r):
        inst = simulate(spec, r)
        return evaluate_methods(inst, methods, cap=cap, opts=opts, basis=basis)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, range(reps)))
    else:
        rows = [one(r) for r in range(reps)]
    ref = bayes_reference(spec, simulate(spec, 0).table)
    return ExperimentResult(spec, methods, np.array(rows), ref)


def grid_codes(level_counts) -> np.ndarray:
    """All cells of a full layout in lexicographic order."""
    return np.array(list(product(*[range(c) for c in level_counts])), dtype=np.int64)
