"""Collapse unit-level ratings into weighted cell means, and shrink units back.

Each unit ``i`` (a restaurant, a house, ...) sits in exactly one cell ``c``
and reports the mean ``y_ci`` of ``n_i`` ratings. Under the one-way model

    rating = mu_c + alpha_i + noise,  alpha_i ~ N(0, s_u2),  noise ~ N(0, s_r2)

the unit mean has variance ``s_u2 + s_r2 / n_i`` around ``mu_c``. Cell means
are precision-weighted averages of their units, with the summed precision
as the cell weight, so the noise variance of the resulting table is 1.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParseError, ValidationError
from .table import FactorSpec, SparseTable

UNIT_COLUMN = "unit_id"
Y_COLUMN = "y"
COUNT_COLUMN = "n_reviews"
RATING_COLUMN = "rating"


@dataclass
class UnitRecords:
    """Unit means with their cells, plus optional raw ratings.

    Parameters
    ----------
    spec : FactorSpec
    codes : ndarray of int, shape (N, m)
        Cell of each unit.
    unit_ids : sequence of str
    y : ndarray, shape (N,)
        Mean rating of each unit.
    n_reviews : ndarray of int, shape (N,)
        Number of ratings behind each mean (``>= 1``).
    review_units, ratings : optional
        Raw ratings and the unit each belongs to; used to estimate the
        single-rating variance.
    """

    spec: FactorSpec
    codes: np.ndarray
    unit_ids: list
    y: np.ndarray
    n_reviews: np.ndarray
    review_units: list | None = None
    ratings: np.ndarray | None = None
    _index: dict = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64).reshape(-1, self.spec.m)
        self.unit_ids = [str(u) for u in self.unit_ids]
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        n = np.asarray(self.n_reviews)
        if n.size and not np.all(np.asarray(n, dtype=np.float64) == np.round(np.asarray(n, dtype=np.float64))):
            raise ValidationError("review counts must be integers")
        self.n_reviews = np.asarray(n, dtype=np.int64).ravel()
        N = len(self.unit_ids)
        if N == 0:
            raise ValidationError("no units")
        if not (self.codes.shape[0] == self.y.shape[0] == self.n_reviews.shape[0] == N):
            raise ValidationError("codes, unit ids, y and n_reviews must have the same length")
        if np.any(self.n_reviews < 1):
            raise ValidationError("every unit needs at least one review (n_reviews >= 1)")
        if not np.all(np.isfinite(self.y)):
            raise ValidationError("unit means must be finite")
        counts = np.asarray(self.spec.level_counts)
        if np.any(self.codes < 0) or np.any(self.codes >= counts[None, :]):
            raise ValidationError("level ordinal out of range")
        index = {}
        for i, uid in enumerate(self.unit_ids):
            if uid in index:
                j = index[uid]
                if np.array_equal(self.codes[i], self.codes[j]):
                    raise ValidationError(f"unit {uid!r} is listed twice in the same cell")
                raise ValidationError(f"unit {uid!r} appears in more than one cell")
            index[uid] = i
        self._index = index
        if (self.review_units is None) != (self.ratings is None):
            raise ValidationError("raw reviews need both unit ids and ratings")
        if self.ratings is not None:
            self.review_units = [str(u) for u in self.review_units]
            self.ratings = np.asarray(self.ratings, dtype=np.float64).ravel()
            if len(self.review_units) != self.ratings.shape[0]:
                raise ValidationError("review unit ids and ratings differ in length")
            if not np.all(np.isfinite(self.ratings)):
                raise ValidationError("ratings must be finite")
            unknown = sorted(set(self.review_units) - index.keys())
            if unknown:
                raise ValidationError(f"reviews reference unknown units: {unknown[:5]}")

    def __len__(self) -> int:
        return len(self.unit_ids)

    @property
    def has_reviews(self) -> bool:
        return self.ratings is not None

    def cell_groups(self) -> tuple[np.ndarray, np.ndarray]:
        """``(cells, inverse)``: distinct cells in lexicographic order and each unit's cell."""
        cells, inv = np.unique(self.codes, axis=0, return_inverse=True)
        return cells, inv.ravel()

    def review_index(self) -> np.ndarray:
        """Row of the owning unit for every raw rating."""
        return np.array([self._index[u] for u in self.review_units], dtype=np.int64)


@dataclass
class UnitVariances:
    """Unit-effect variance ``sigma_u2`` and single-rating variance ``sigma_r2``.

    ``source`` is ``"estimated"``, ``"supplied"`` or ``"mixed"`` (one of each).
    """

    sigma_u2: float
    sigma_r2: float
    source: str = "estimated"
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        for name in ("sigma_u2", "sigma_r2"):
            v = float(getattr(self, name))
            if not (math.isfinite(v) and v >= 0):
                raise ValidationError(f"{name} must be finite and non-negative, got {v}")
            setattr(self, name, v)


def pooled_review_variance(units: UnitRecords) -> float:
    """Pooled within-unit sample variance of the raw ratings."""
    if not units.has_reviews:
        raise ValidationError("raw reviews are needed to estimate sigma_r2; supply it instead")
    owner = units.review_index()
    N = len(units)
    cnt = np.bincount(owner, minlength=N).astype(np.float64)
    tot = np.bincount(owner, weights=units.ratings, minlength=N)
    mean = np.divide(tot, cnt, out=np.zeros(N), where=cnt > 0)
    ss = float(np.sum((units.ratings - mean[owner]) ** 2))
    dof = float(np.sum(np.maximum(cnt - 1.0, 0.0)))
    if dof <= 0:
        raise ValidationError("no unit has two or more raw reviews; supply sigma_r2 instead")
    return ss / dof


def estimate_unit_variances(units: UnitRecords, sigma_r2: float | None = None,
                            sigma_u2: float | None = None) -> UnitVariances:
    """Method-of-moments estimates of ``sigma_r2`` and ``sigma_u2``.

    ``sigma_r2`` is the pooled within-unit variance of the raw ratings.
    ``sigma_u2`` averages, over the cells holding two or more units, the
    sample variance of the unit means minus its measurement part
    ``sigma_r2 * mean(1 / n_i)``; a negative average is clamped to zero.
    Either value may be supplied instead of estimated.
    """
    notes = []
    supplied = []
    if sigma_r2 is None:
        s_r2 = pooled_review_variance(units)
    else:
        s_r2 = float(sigma_r2)
        supplied.append("sigma_r2")
    if sigma_u2 is None:
        _, inv = units.cell_groups()
        per_cell = []
        for c in range(int(inv.max()) + 1):
            members = np.flatnonzero(inv == c)
            if members.size < 2:
                continue
            spread = float(np.var(units.y[members], ddof=1))
            per_cell.append(spread - s_r2 * float(np.mean(1.0 / units.n_reviews[members])))
        if not per_cell:
            raise ValidationError("no cell holds two or more units, so sigma_u2 cannot be "
                                  "estimated; supply it explicitly")
        raw = float(np.mean(per_cell))
        if raw < 0:
            notes.append(f"sigma_u2 estimate {raw!r} clamped to 0")
        s_u2 = max(raw, 0.0)
        notes.append(f"sigma_u2 from {len(per_cell)} multi-unit cells")
    else:
        s_u2 = float(sigma_u2)
        supplied.append("sigma_u2")
    source = {0: "estimated", 1: "mixed", 2: "supplied"}[len(supplied)]
    return UnitVariances(s_u2, s_r2, source, notes)


def unit_weights(units: UnitRecords, uv: UnitVariances) -> np.ndarray:
    """Precision ``1 / (sigma_u2 + sigma_r2 / n_i)`` of every unit mean."""
    if uv.sigma_u2 == 0 and uv.sigma_r2 == 0:
        raise ValidationError("sigma_u2 = sigma_r2 = 0 gives infinite precision; "
                              "supply positive variances")
    return 1.0 / (uv.sigma_u2 + uv.sigma_r2 / units.n_reviews)


def aggregate_cells(units: UnitRecords, uv: UnitVariances) -> SparseTable:
    """Cell table of precision-weighted unit means; cell weight = summed precision."""
    w = unit_weights(units, uv)
    cells, inv = units.cell_groups()
    wsum = np.bincount(inv, weights=w, minlength=cells.shape[0])
    ysum = np.bincount(inv, weights=w * units.y, minlength=cells.shape[0])
    return SparseTable(units.spec, cells, ysum / wsum, wsum)


def unit_shrinkage(units: UnitRecords, uv: UnitVariances, cell_estimates) -> np.ndarray:
    """Shrink each unit mean toward the estimate for its cell.

    Returns ``(n_i y_i / s_r2 + c_i / s_u2) / (n_i / s_r2 + 1 / s_u2)``,
    evaluated as ``(n_i s_u2 y_i + s_r2 c_i) / (n_i s_u2 + s_r2)`` so that
    ``s_r2 = 0`` returns ``y_i`` and ``s_u2 = 0`` returns ``c_i``.

    Parameters
    ----------
    cell_estimates : array_like or fitted model
        One value per unit (aligned with ``units``), or any object with a
        ``predict_codes(codes)`` method, which is evaluated at the units' cells.
    """
    if hasattr(cell_estimates, "predict_codes"):
        c = np.asarray(cell_estimates.predict_codes(units.codes), dtype=np.float64)
    else:
        c = np.asarray(cell_estimates, dtype=np.float64).ravel()
    if c.shape != units.y.shape:
        raise ValidationError("need one cell estimate per unit")
    if not np.all(np.isfinite(c)):
        raise ValidationError("cell estimates must be finite")
    if uv.sigma_u2 == 0 and uv.sigma_r2 == 0:
        raise ValidationError("sigma_u2 = sigma_r2 = 0 leaves the shrinkage undefined")
    a = units.n_reviews * uv.sigma_u2
    return (a * units.y + uv.sigma_r2 * c) / (a + uv.sigma_r2)


# --- files -------------------------------------------------------------------

def load_units(path, reviews_path=None) -> UnitRecords:
    """Read a unit CSV (factor columns, ``unit_id``, ``y``, ``n_reviews``).

    Factor levels are taken in order of first appearance. ``reviews_path``
    optionally names a raw-review CSV with columns ``unit_id`` and ``rating``.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValidationError(f"{path}: empty file")
        header = [h.strip() for h in header]
        for col in (UNIT_COLUMN, Y_COLUMN, COUNT_COLUMN):
            if col not in header:
                raise ParseError(f"header must contain a '{col}' column", 1)
        ui, yi, ni = (header.index(c) for c in (UNIT_COLUMN, Y_COLUMN, COUNT_COLUMN))
        fcols = [i for i in range(len(header)) if i not in (ui, yi, ni)]
        if not fcols:
            raise ParseError("no factor columns in header", 1)
        names = [header[i] for i in fcols]
        seen = [dict() for _ in fcols]
        codes, ids, ys, ns = [], [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", lineno)
            try:
                yv = float(rec[yi])
            except ValueError:
                raise ParseError(f"cannot parse y value {rec[yi]!r}", lineno) from None
            try:
                nv = int(rec[ni])
            except ValueError:
                raise ParseError(f"n_reviews must be an integer, got {rec[ni]!r}", lineno) from None
            if nv < 1:
                raise ValidationError(f"{path}: line {lineno}: n_reviews must be >= 1")
            if not math.isfinite(yv):
                raise ValidationError(f"{path}: line {lineno}: y must be finite")
            codes.append([s.setdefault(rec[i], len(s)) for s, i in zip(seen, fcols)])
            ids.append(rec[ui])
            ys.append(yv)
            ns.append(nv)
    if not ids:
        raise ValidationError(f"{path}: no data rows")
    spec = FactorSpec(tuple(names), tuple(tuple(s) for s in seen))
    review_units = ratings = None
    if reviews_path is not None:
        review_units, ratings = load_reviews(reviews_path)
    return UnitRecords(spec, np.array(codes), ids, np.array(ys), np.array(ns),
                       review_units, ratings)


def load_reviews(path) -> tuple[list[str], np.ndarray]:
    """Read a raw-review CSV with columns ``unit_id`` and ``rating``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValidationError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if UNIT_COLUMN not in header or RATING_COLUMN not in header:
            raise ParseError(f"header must contain '{UNIT_COLUMN}' and '{RATING_COLUMN}'", 1)
        ui, ri = header.index(UNIT_COLUMN), header.index(RATING_COLUMN)
        ids, vals = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", lineno)
            try:
                vals.append(float(rec[ri]))
            except ValueError:
                raise ParseError(f"cannot parse rating {rec[ri]!r}", lineno) from None
            ids.append(rec[ui])
    return ids, np.array(vals, dtype=np.float64)


def save_units(units: UnitRecords, path, reviews_path=None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(units.spec.names) + [UNIT_COLUMN, Y_COLUMN, COUNT_COLUMN])
        for codes, uid, y, n in zip(units.codes, units.unit_ids, units.y, units.n_reviews):
            w.writerow(list(units.spec.decode(codes)) + [uid, repr(float(y)), int(n)])
    if reviews_path is not None:
        if not units.has_reviews:
            raise ValidationError("these units carry no raw reviews")
        with open(reviews_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([UNIT_COLUMN, RATING_COLUMN])
            for uid, r in zip(units.review_units, units.ratings):
                w.writerow([uid, repr(float(r))])


def save_variances(uv: UnitVariances, path) -> None:
    """Write the ``key = value`` sidecar (sigma_u2, sigma_r2, source)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"sigma_u2 = {uv.sigma_u2!r}\n")
        fh.write(f"sigma_r2 = {uv.sigma_r2!r}\n")
        fh.write(f"source = {uv.source}\n")


def load_variances(path) -> UnitVariances:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError("expected 'key = value'", lineno)
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
    try:
        return UnitVariances(float(values["sigma_u2"]), float(values["sigma_r2"]),
                             values.get("source", "supplied"))
    except KeyError as exc:
        raise ParseError(f"missing key {exc}") from None
    except ValueError as exc:
        raise ParseError(str(exc)) from None
