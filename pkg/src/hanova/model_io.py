"""Text model files.

A model file starts with ``#``-prefixed JSON header lines (factor spec,
grand mean, penalties, maximal order) followed by a CSV body with columns
``k, J, L, value``: the order, the factor names of the margin joined by
``+``, its level labels joined by ``+`` (``+`` and ``\\`` inside labels are
backslash-escaped) and the coefficient. Zero coefficients are omitted.
Floats are written with ``repr`` so predictions round-trip exactly.
"""
from __future__ import annotations

import csv
import io
import json
import math

import numpy as np

from .errors import ParseError
from .solver import CoefficientBlock, CoefficientSet, HanovaFit, OrderFit, subsets
from .table import FactorSpec

MAGIC = "hanova-model"
VERSION = 1


def _escape(label: str) -> str:
    return label.replace("\\", "\\\\").replace("+", "\\+")


def _split(text: str) -> list[str]:
    parts, cur, i = [], [], 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            cur.append(text[i + 1])
            i += 2
            continue
        if ch == "+":
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
        i += 1
    parts.append("".join(cur))
    return parts


def _lam_text(v: float) -> str:
    return "inf" if math.isinf(v) else repr(float(v))


def dumps_model(fit: HanovaFit) -> str:
    spec = fit.spec
    header = {
        "format": MAGIC,
        "version": VERSION,
        "spec": spec.to_dict(),
        "grand_mean": repr(float(fit.grand_mean)),
        "lambdas": [_lam_text(v) for v in fit.lambdas],
        "maxk": fit.maxk,
        "sweeps": [f.sweeps for f in fit.order_fits],
        "converged": [bool(f.converged) for f in fit.order_fits],
    }
    buf = io.StringIO()
    for line in json.dumps(header, indent=1).splitlines():
        buf.write("# " + line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "J", "L", "value"])
    for f in fit.order_fits:
        for J in sorted(f.coefficients.blocks):
            blk = f.coefficients.blocks[J]
            jname = "+".join(_escape(spec.names[x]) for x in J)
            for key, val in zip(blk.keys, blk.values):
                if val == 0.0:
                    continue
                coords = np.unravel_index(int(key), blk.shape) if J else ()
                lab = "+".join(_escape(spec.levels[x][int(c)]) for x, c in zip(J, coords))
                w.writerow([f.order, jname, lab, repr(float(val))])
    return buf.getvalue()


def save_model(fit: HanovaFit, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(dumps_model(fit))


def loads_model(text: str) -> HanovaFit:
    lines = text.splitlines()
    head, body_start = [], 0
    for i, line in enumerate(lines):
        if line.startswith("#"):
            head.append(line[1:].strip())
            body_start = i + 1
        else:
            break
    try:
        header = json.loads("\n".join(head))
    except json.JSONDecodeError as exc:
        raise ParseError(f"bad model header: {exc.msg}", exc.lineno) from None
    if not isinstance(header, dict) or header.get("format") != MAGIC:
        raise ParseError("not a model file", 1)
    try:
        spec = FactorSpec.from_dict(header["spec"])
        gm = float(header["grand_mean"])
        lambdas = [float(v) for v in header["lambdas"]]
        maxk = int(header["maxk"])
        sweeps = header.get("sweeps", [0] * maxk)
        converged = header.get("converged", [True] * maxk)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"incomplete model header: {exc}", 1) from None
    if not 1 <= maxk <= spec.m or len(lambdas) != maxk:
        raise ParseError("inconsistent order/penalty count in header", 1)

    name_pos = {nm: i for i, nm in enumerate(spec.names)}
    entries: dict[int, dict[tuple, dict[int, float]]] = {k: {} for k in range(1, maxk + 1)}
    reader = csv.reader(lines[body_start:])
    first = next(reader, None)
    if first != ["k", "J", "L", "value"]:
        raise ParseError("missing coefficient header 'k,J,L,value'", body_start + 1)
    for offset, rec in enumerate(reader, start=body_start + 2):
        if not rec:
            continue
        if len(rec) != 4:
            raise ParseError(f"expected 4 fields, got {len(rec)}", offset)
        try:
            k = int(rec[0])
            val = float(rec[3])
            J = tuple(name_pos[nm] for nm in _split(rec[1]))
            labs = _split(rec[2])
            if len(labs) != len(J) or len(J) != k or list(J) != sorted(J):
                raise ValueError("margin does not match its order")
            coords = [spec._lookup[f][lab] for f, lab in zip(J, labs)]
        except (KeyError, ValueError) as exc:
            raise ParseError(f"bad coefficient row: {exc}", offset) from None
        if k not in entries:
            raise ParseError(f"order {k} outside 1..{maxk}", offset)
        shape = tuple(spec.level_counts[f] for f in J)
        flat = int(np.ravel_multi_index(coords, shape))
        if flat in entries[k].setdefault(J, {}):
            raise ParseError("duplicate coefficient", offset)
        entries[k][J][flat] = val

    fits = []
    for k in range(1, maxk + 1):
        blocks = {}
        for J in subsets(spec.m, k):
            shape = tuple(spec.level_counts[f] for f in J)
            d = entries[k].get(J, {})
            keys = np.array(sorted(d), dtype=np.int64)
            vals = np.array([d[x] for x in keys], dtype=np.float64)
            blocks[J] = CoefficientBlock(J, shape, keys, vals)
        coefs = CoefficientSet(k, blocks)
        fits.append(OrderFit(k, coefs, np.zeros(0), lambdas[k - 1],
                             int(sweeps[k - 1]), bool(converged[k - 1]), []))
    return HanovaFit(spec, gm, fits, maxk, lambdas)


def load_model(path) -> HanovaFit:
    with open(path, encoding="utf-8", newline="") as fh:
        return loads_model(fh.read())
