"""Sparse multi-way tables of cell means and the weighted margin-sum kernel.

A table stores only its observed cells. Each cell carries integer level
codes (one per factor), a mean response ``y`` and a positive weight ``n``.
Cells are kept in lexicographic order of their codes, so every reduction
over the table runs in a fixed order.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import _kernels
from .errors import ParseError, ValidationError

Y_COLUMN = "y"
N_COLUMN = "n"


@dataclass(frozen=True)
class FactorSpec:
    """Factor names and their ordered level labels."""

    names: tuple[str, ...]
    levels: tuple[tuple[str, ...], ...]
    _lookup: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = tuple(str(x) for x in self.names)
        levels = tuple(tuple(str(v) for v in lv) for lv in self.levels)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "levels", levels)
        if len(names) < 1:
            raise ValidationError("a table needs at least one factor")
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate factor names: {names}")
        if len(levels) != len(names):
            raise ValidationError("one level list is required per factor")
        for name, lv in zip(names, levels):
            if len(lv) < 1:
                raise ValidationError(f"factor {name!r} has no levels")
            if len(set(lv)) != len(lv):
                raise ValidationError(f"factor {name!r} has duplicate level labels")
        object.__setattr__(
            self, "_lookup", tuple({lab: i for i, lab in enumerate(lv)} for lv in levels)
        )

    @property
    def m(self) -> int:
        return len(self.names)

    @property
    def level_counts(self) -> tuple[int, ...]:
        return tuple(len(lv) for lv in self.levels)

    def encode(self, labels: Sequence[str]) -> tuple[int, ...]:
        """Map one row of level labels to ordinals; raises KeyError on an unknown label."""
        if len(labels) != self.m:
            raise ValidationError(f"expected {self.m} labels, got {len(labels)}")
        return tuple(self._lookup[f][str(lab)] for f, lab in enumerate(labels))

    def decode(self, coords: Sequence[int]) -> tuple[str, ...]:
        return tuple(self.levels[f][c] for f, c in enumerate(coords))

    def permuted(self, order: Sequence[int]) -> FactorSpec:
        return FactorSpec(tuple(self.names[f] for f in order), tuple(self.levels[f] for f in order))

    def to_dict(self) -> dict:
        return {"names": list(self.names), "levels": [list(lv) for lv in self.levels]}

    @classmethod
    def from_dict(cls, d: dict) -> FactorSpec:
        return cls(tuple(d["names"]), tuple(tuple(lv) for lv in d["levels"]))


class MarginKey(NamedTuple):
    """A margin: factor subset ``J`` (sorted positions) and its level ordinals ``L``."""

    J: tuple[int, ...]
    L: tuple[int, ...]


@dataclass(frozen=True)
class MarginIndex:
    """Observed levels of one margin and the map from cells to them.

    ``keys`` are the sorted flat (row-major) indices of the observed margin
    levels within the full cross product ``shape``; ``inverse[i]`` is the
    position in ``keys`` of cell ``i``.
    """

    J: tuple[int, ...]
    shape: tuple[int, ...]
    keys: np.ndarray
    inverse: np.ndarray

    @property
    def size(self) -> int:
        return int(self.keys.shape[0])

    def levels(self) -> np.ndarray:
        """Level ordinals of each observed margin, shape (size, |J|)."""
        if not self.J:
            return np.zeros((self.size, 0), dtype=np.int64)
        return np.stack(np.unravel_index(self.keys, self.shape), axis=1).astype(np.int64)


def _readonly(a):
    a.setflags(write=False)
    return a


class SparseTable:
    """Observed cells of a multi-way layout.

    Parameters
    ----------
    spec : FactorSpec
    codes : array_like of int, shape (N, m)
        Level ordinals of each observed cell.
    y : array_like of float, shape (N,)
        Cell means.
    n : array_like of float, shape (N,)
        Positive cell weights.

    Duplicate index rows are merged into one cell with the weighted mean and
    the summed weight. The stored cells are sorted lexicographically.
    """

    def __init__(self, spec: FactorSpec, codes, y, n):
        codes = np.asarray(codes, dtype=np.int64)
        y = np.asarray(y, dtype=np.float64).ravel()
        n = np.asarray(n, dtype=np.float64).ravel()
        if codes.ndim == 1 and spec.m == 1:
            codes = codes.reshape(-1, 1)
        if codes.ndim != 2 or codes.shape[1] != spec.m:
            raise ValidationError(f"codes must have shape (N, {spec.m})")
        if not (codes.shape[0] == y.shape[0] == n.shape[0]):
            raise ValidationError("codes, y and n must have the same length")
        if codes.shape[0] == 0:
            raise ValidationError("a table needs at least one observed cell")
        if not np.all(np.isfinite(n)) or np.any(n <= 0):
            raise ValidationError("cell weights must be finite and positive")
        if not np.all(np.isfinite(y)):
            raise ValidationError("cell means must be finite")
        counts = np.asarray(spec.level_counts)
        if np.any(codes < 0) or np.any(codes >= counts[None, :]):
            raise ValidationError("level ordinal out of range")

        uniq, inv = np.unique(codes, axis=0, return_inverse=True)
        inv = inv.ravel()
        if uniq.shape[0] != codes.shape[0]:
            wsum = np.bincount(inv, weights=n, minlength=uniq.shape[0])
            ysum = np.bincount(inv, weights=n * y, minlength=uniq.shape[0])
            y = ysum / wsum
            n = wsum
        else:
            order = np.argsort(inv, kind="stable")
            y = y[order]
            n = n[order]
        self.spec = spec
        self.codes = _readonly(np.ascontiguousarray(uniq, dtype=np.int64))
        self.y = _readonly(np.ascontiguousarray(y))
        self.n = _readonly(np.ascontiguousarray(n))
        self._margins: dict[tuple[int, ...], MarginIndex] = {}
        self._lookup: dict[tuple[int, ...], int] | None = None

    @classmethod
    def from_labels(cls, names, rows, y, n, levels=None) -> SparseTable:
        """Build a table from label rows; levels are discovered in first-appearance order."""
        rows = [tuple(str(v) for v in r) for r in rows]
        if levels is None:
            seen = [dict() for _ in names]
            for r in rows:
                for f, lab in enumerate(r):
                    seen[f].setdefault(lab, len(seen[f]))
            levels = [tuple(s) for s in seen]
        spec = FactorSpec(tuple(names), tuple(tuple(lv) for lv in levels))
        codes = np.array([spec.encode(r) for r in rows], dtype=np.int64).reshape(len(rows), spec.m)
        return cls(spec, codes, y, n)

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def __repr__(self) -> str:
        return f"SparseTable(m={self.m}, levels={self.spec.level_counts}, cells={len(self)})"

    @property
    def m(self) -> int:
        return self.spec.m

    @property
    def cells(self) -> list[tuple[tuple[int, ...], float, float]]:
        return [(tuple(int(c) for c in row), float(yy), float(nn))
                for row, yy, nn in zip(self.codes, self.y, self.n)]

    @property
    def index_lookup(self) -> dict[tuple[int, ...], int]:
        if self._lookup is None:
            self._lookup = {tuple(int(c) for c in row): i for i, row in enumerate(self.codes)}
        return self._lookup

    @property
    def is_full(self) -> bool:
        return len(self) == math.prod(self.spec.level_counts)

    @property
    def is_balanced(self) -> bool:
        """All observed cells carry the same weight (empty cells allowed)."""
        return bool(np.all(self.n == self.n[0]))

    def margin_index(self, J: Sequence[int]) -> MarginIndex:
        """Observed levels of margin ``J`` with the cell-to-margin map (cached)."""
        J = tuple(int(f) for f in J)
        mi = self._margins.get(J)
        if mi is None:
            if list(J) != sorted(set(J)) or any(f < 0 or f >= self.m for f in J):
                raise ValidationError(f"factor subset must be strictly increasing positions: {J}")
            shape = tuple(self.spec.level_counts[f] for f in J)
            if J:
                flat = np.ravel_multi_index(tuple(self.codes[:, f] for f in J), shape).astype(np.int64)
                keys, inv = np.unique(flat, return_inverse=True)
            else:
                keys = np.zeros(1, dtype=np.int64)
                inv = np.zeros(len(self), dtype=np.int64)
            mi = MarginIndex(J, shape, _readonly(keys.astype(np.int64)),
                             _readonly(np.ascontiguousarray(inv.ravel(), dtype=np.int64)))
            self._margins[J] = mi
        return mi

    def with_values(self, y=None, n=None) -> SparseTable:
        """Same cells with replaced means and/or weights."""
        return SparseTable(self.spec, self.codes,
                           self.y if y is None else y,
                           self.n if n is None else n)

    def subset(self, idx) -> SparseTable:
        """Table restricted to the cells selected by ``idx`` (mask or positions)."""
        idx = np.asarray(idx)
        return SparseTable(self.spec, self.codes[idx], self.y[idx], self.n[idx])

    def permute_factors(self, order: Sequence[int]) -> SparseTable:
        return SparseTable(self.spec.permuted(order), self.codes[:, list(order)], self.y, self.n)

    def labels(self) -> list[tuple[str, ...]]:
        return [self.spec.decode(row) for row in self.codes]


def margin_sum_array(table: SparseTable, values, J: Sequence[int], chunks: int = 1,
                     workers: int = 1) -> tuple[MarginIndex, np.ndarray]:
    """Sums of ``values`` over each observed level of margin ``J``.

    With ``chunks > 1`` the cells are split into contiguous chunks that are
    reduced separately (optionally on ``workers`` threads) and merged in
    chunk order, so the result depends only on ``chunks``.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.shape != (len(table),):
        raise ValidationError(f"expected {len(table)} values, got shape {values.shape}")
    mi = table.margin_index(J)
    if chunks <= 1:
        return mi, _kernels.margin_sum(mi.inverse, values, mi.size)
    bounds = np.linspace(0, len(table), chunks + 1).astype(int)
    parts = [(mi.inverse[a:b], values[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]

    def reduce(part):
        return _kernels.margin_sum(np.ascontiguousarray(part[0]), np.ascontiguousarray(part[1]), mi.size)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            partial = list(ex.map(reduce, parts))
    else:
        partial = [reduce(p) for p in parts]
    out = np.zeros(mi.size)
    for p in partial:
        out += p
    return mi, out


def margin_sum(table: SparseTable, values, J: Sequence[int], chunks: int = 1,
               workers: int = 1) -> dict[MarginKey, float]:
    """Map each observed margin ``(J, L)`` to the sum of ``values`` over cells with ``I_J = L``."""
    mi, sums = margin_sum_array(table, values, J, chunks=chunks, workers=workers)
    levels = mi.levels()
    return {MarginKey(mi.J, tuple(int(v) for v in lv)): float(s) for lv, s in zip(levels, sums)}


def weighted_grand_mean(table: SparseTable) -> float:
    return float(np.dot(table.n, table.y) / table.n.sum())


def _parse_float(text, line, what):
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"cannot parse {what} value {text!r}", line) from None


def load_cells(path, spec: FactorSpec | None = None) -> SparseTable:
    """Read a cell CSV: factor columns, then ``y`` and ``n``.

    Without ``spec`` the factor levels are taken in order of first
    appearance. With ``spec`` the header must name its factors and every
    label must be a known level.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValidationError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if Y_COLUMN not in header or N_COLUMN not in header:
            raise ParseError(f"header must contain '{Y_COLUMN}' and '{N_COLUMN}' columns", 1)
        yi, ni = header.index(Y_COLUMN), header.index(N_COLUMN)
        fcols = [i for i, h in enumerate(header) if i not in (yi, ni)]
        names = [header[i] for i in fcols]
        if not names:
            raise ParseError("no factor columns in header", 1)
        if spec is not None:
            if sorted(names) != sorted(spec.names):
                raise ParseError(f"factor columns {names} do not match {list(spec.names)}", 1)
            fcols = [fcols[names.index(nm)] for nm in spec.names]
            names = list(spec.names)
        rows, ys, ns = [], [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(rec)}", lineno)
            yv = _parse_float(rec[yi], lineno, "y")
            nv = _parse_float(rec[ni], lineno, "n")
            if not math.isfinite(yv):
                raise ValidationError(f"{path}: line {lineno}: y must be finite")
            if not (math.isfinite(nv) and nv > 0):
                raise ValidationError(f"{path}: line {lineno}: weight n must be positive, got {rec[ni]!r}")
            labels = tuple(rec[i] for i in fcols)
            if spec is not None:
                try:
                    spec.encode(labels)
                except KeyError as exc:
                    raise ParseError(f"unknown level label {exc}", lineno) from None
            rows.append(labels)
            ys.append(yv)
            ns.append(nv)
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    levels = None if spec is None else spec.levels
    return SparseTable.from_labels(names, rows, ys, ns, levels=levels)


def save_cells(table: SparseTable, path, y=None, n=None) -> None:
    """Write the cell CSV; ``y``/``n`` override the stored columns (e.g. fitted values)."""
    y = table.y if y is None else np.asarray(y, dtype=np.float64)
    n = table.n if n is None else np.asarray(n, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(table.spec.names) + [Y_COLUMN, N_COLUMN])
        for labels, yy, nn in zip(table.labels(), y, n):
            w.writerow(list(labels) + [repr(float(yy)), repr(float(nn))])
