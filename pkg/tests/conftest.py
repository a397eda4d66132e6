import math
from itertools import product

import numpy as np
import pytest

from hanova import _kernels
from hanova.table import FactorSpec, SparseTable

KERNEL_FUNCS = ("margin_sum", "block_update", "gather_add", "wpls_objective")


def make_spec(level_counts, prefix="f"):
    names = tuple(f"{prefix}{i}" for i in range(len(level_counts)))
    return FactorSpec(names, tuple(tuple(f"v{j}" for j in range(c)) for c in level_counts))


def full_table(level_counts, y=None, n=None, rng=None):
    codes = np.array(list(product(*[range(c) for c in level_counts])), dtype=np.int64)
    N = codes.shape[0]
    if y is None:
        y = (rng or np.random.default_rng(0)).normal(size=N)
    if n is None:
        n = np.ones(N)
    return SparseTable(make_spec(level_counts), codes, y, n)


def sparse_table(level_counts, n_cells, rng, weights="unit"):
    total = math.prod(level_counts)
    flat = np.sort(rng.choice(total, size=n_cells, replace=False))
    codes = np.stack(np.unravel_index(flat, level_counts), axis=1)
    y = rng.normal(size=n_cells) * 2 + 1
    n = np.ones(n_cells) if weights == "unit" else rng.uniform(0.5, 5.0, size=n_cells)
    return SparseTable(make_spec(level_counts), codes, y, n)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=["python", "cython"])
def backend(request, monkeypatch):
    """Run a test once per kernel backend (skipping the compiled one if not built)."""
    if request.param == "cython":
        if _kernels.compiled_backend is None:
            pytest.skip("compiled kernels not built")
        mod = _kernels.compiled_backend
    else:
        mod = _kernels.python_backend
    for name in KERNEL_FUNCS:
        monkeypatch.setattr(_kernels, name, getattr(mod, name))
    return request.param
