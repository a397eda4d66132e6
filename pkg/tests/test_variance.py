import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hanova.errors import ConvergenceError, ValidationError
from hanova.oracle import build_basis
from hanova.solver import INF, ConvergenceOpts, design_matrix
from hanova.table import SparseTable
from hanova.variance import (VarianceComponents, effective_sigma2, empirical_lambdas,
                            estimate_sigmas, harmonic_weight, lambdas_from_sigmas,
                            projection_sq_norm, subspace_dim, subspace_info)

from conftest import full_table, make_spec, sparse_table


def vc_of(sigma2, sig):
    sig = np.asarray(sig, dtype=float)
    z = np.zeros(sig.size, dtype=bool)
    return VarianceComponents(sigma2, sig, sig.copy(), z, z.copy())


class TestSubspaceDim:
    def test_two_by_two(self):
        t = full_table((2, 2))
        assert subspace_dim(t, 1) == 3
        assert subspace_dim(t, 2) == 4

    def test_closed_form(self):
        t = full_table((3, 4, 2))
        assert subspace_dim(t, 1) == 1 + 2 + 3 + 1
        assert subspace_dim(t, 2) == 1 + 2 + 3 + 1 + 6 + 2 + 3

    def test_sparse_matches_dense_rank(self, rng):
        t = sparse_table((3, 3), 5, rng)
        X, _ = design_matrix(t, 1)
        assert subspace_dim(t, 1) == np.linalg.matrix_rank(X)

    def test_threshold(self, rng):
        t = sparse_table((5, 5, 5), 30, rng)
        with pytest.raises(ValidationError, match="supply"):
            subspace_dim(t, 1, max_cells=20)
        assert subspace_dim(t, 3, max_cells=20) == 30  # saturated order needs no rank

    def test_range(self):
        with pytest.raises(ValidationError):
            subspace_dim(full_table((2, 2)), 3)


class TestProjection:
    def test_one_factor_saturated(self, rng):
        t = full_table((5,), rng=rng)
        yc = t.y - t.y.mean()
        assert projection_sq_norm(t, 1) == pytest.approx(float(yc @ yc))

    def test_interaction_orthogonal_to_main_effects(self):
        t = full_table((2, 2), y=np.array([1.0, -1.0, -1.0, 1.0]))
        assert projection_sq_norm(t, 1) == pytest.approx(0.0, abs=1e-20)

    def test_sparse_matches_dense_basis(self, rng):
        t = sparse_table((4, 3), 9, rng)
        yc = t.y - t.y.mean()
        P = build_basis(t).projector(1)
        assert projection_sq_norm(t, 1) == pytest.approx(float(yc @ P @ yc), rel=1e-8)

    def test_balanced_full_matches_dense_basis(self, rng):
        t = full_table((3, 4, 2), rng=rng)
        yc = t.y - t.y.mean()
        b = build_basis(t)
        for k in (1, 2):
            assert projection_sq_norm(t, k) == pytest.approx(float(yc @ b.projector(k) @ yc), rel=1e-8)

    def test_ignores_weights(self, rng):
        t = sparse_table((4, 4), 10, rng, weights="random")
        assert projection_sq_norm(t, 1) == pytest.approx(
            projection_sq_norm(t.with_values(n=np.ones(len(t))), 1), rel=1e-12)

    def test_nonconvergence_carries_value(self, rng):
        t = sparse_table((8, 8, 8), 150, rng)
        with pytest.raises(ConvergenceError) as info:
            projection_sq_norm(t, 2, opts=ConvergenceOpts(tol=1e-14, max_sweeps=1))
        assert info.value.value > 0

    def test_monotone_and_bounded(self, rng):
        for _ in range(5):
            t = sparse_table((4, 4, 3), 30, rng)
            info = subspace_info(t)
            q = info.sq_norms
            assert all(a <= b * (1 + 1e-10) + 1e-12 for a, b in zip(q, q[1:]))
            assert all(a <= b for a, b in zip(info.dims, info.dims[1:]))


class TestEstimateSigmas:
    def test_zero_data_clamps(self):
        t = full_table((3, 3), y=np.zeros(9))
        vc = estimate_sigmas(t, 1.0)
        assert vc.sigmas.tolist() == [0.0, 0.0, 0.0]
        assert vc.raw[0] == 0.0
        assert vc.raw[1] == -1.0 and vc.clamped[1]
        assert vc.degenerate[2]

    def test_pure_main_effects_by_hand(self):
        a = np.array([1.0, -2.0, 1.0])
        b = np.array([0.5, 0.0, -0.5])
        y = (a[:, None] + b[None, :]).ravel()
        t = full_table((3, 3), y=y)
        vc = estimate_sigmas(t, 0.5)
        # Q_1 = ||y_c||^2 over d_1 - 1 = 4 directions; the order-2 increment is empty of signal
        q1 = 3 * (a @ a) + 3 * (b @ b)
        assert vc.mean_squares[0] == pytest.approx(q1 / 4)
        assert vc.mean_squares[1] == pytest.approx(0.0, abs=1e-12)
        assert vc.raw[0] == pytest.approx(q1 / 4)
        assert vc.raw[1] == pytest.approx(-0.5)
        assert vc.sigmas[0] > 0 and vc.sigmas[1] == 0 and vc.clamped[1]

    def test_empty_gap_is_flagged(self):
        # one observed level of factor 2: S_2 adds nothing beyond S_1 on these cells
        spec = make_spec((4, 3))
        t = SparseTable(spec, [[0, 0], [1, 0], [2, 0], [3, 0]], [1.0, 2.0, 0.0, 3.0], [1, 1, 1, 1])
        vc = estimate_sigmas(t, 1.0)
        assert vc.degenerate[1] and vc.degenerate[2]
        assert vc.raw[0] == pytest.approx(vc.mean_squares[0] - 1.0)

    def test_identifiable_sums_unbiased(self):
        """Mean of sigma_0^2 and of sigma_1^2 + sigma_2^2 over simulated tables."""
        rng = np.random.default_rng(99)
        t0 = full_table((6, 5), y=np.zeros(30))
        b = build_basis(t0)
        sig = np.array([2.0, 1.0, 0.5]) ** 2
        est = []
        for _ in range(400):
            mu = (math.sqrt(sig[0] + sig[1]) * b.blocks[0] @ rng.normal(size=b.blocks[0].shape[1])
                  + math.sqrt(sig[1]) * b.blocks[1] @ rng.normal(size=b.blocks[1].shape[1])
                  + math.sqrt(sig[2]) * rng.normal(size=30))
            est.append(estimate_sigmas(t0.with_values(y=mu + rng.normal(size=30)), 1.0).raw)
        est = np.array(est)
        se = est.std(axis=0, ddof=1) / math.sqrt(len(est))
        assert abs(est[:, 0].mean() - sig[0]) < 3 * se[0]
        assert abs(est[:, 1].mean() - (sig[1] + sig[2])) < 3 * se[1]


class TestLambdas:
    def test_arithmetic(self):
        assert lambdas_from_sigmas(vc_of(1.0, [4.0, 1.0, 0.0])) == [0.5, 1.0]

    def test_zero_component_gives_sentinel(self):
        lam = lambdas_from_sigmas(vc_of(1.0, [0.0, 1.0, 0.0]))
        assert lam[0] == INF

    def test_cap(self):
        lam = lambdas_from_sigmas(vc_of(1.0, [0.0, 0.01, 0.0]), cap=5)
        assert lam == [5.0, 5.0]

    def test_weight_scale(self):
        assert lambdas_from_sigmas(vc_of(1.0, [4.0, 1.0, 0.0]), weight_scale=3.0) == [1.5, 3.0]

    @given(st.floats(1e-3, 1e3), st.lists(st.floats(1e-3, 10.0), min_size=3, max_size=5),
           st.floats(1e-3, 10.0))
    def test_scale_invariance(self, c, sig, s2):
        a = lambdas_from_sigmas(vc_of(s2, sig))
        b = lambdas_from_sigmas(vc_of(c * s2, [c * v for v in sig]))
        np.testing.assert_allclose(a, b, rtol=1e-12)


class TestEffectiveSigma2:
    def test_unit_weights(self, rng):
        assert effective_sigma2(full_table((2, 3), rng=rng), 2.5) == 2.5

    def test_arithmetic(self):
        t = SparseTable(make_spec((2,)), [[0], [1]], [0.0, 0.0], [1.0, 4.0])
        assert effective_sigma2(t, 2.0) == pytest.approx(1.25)
        assert harmonic_weight(t) == pytest.approx(1.6)

    def test_resummation(self, rng):
        t = sparse_table((5, 5), 13, rng, weights="random")
        assert effective_sigma2(t, 0.7) == pytest.approx(0.7 * sum(1 / v for v in t.n) / 13, rel=1e-13)


def test_empirical_lambdas_balanced_weights_rescale(rng):
    """A table with every weight w behaves like a unit-weight table with sigma2 / w."""
    t = full_table((4, 4, 3), rng=rng)
    a = empirical_lambdas(t, 1.0)
    b = empirical_lambdas(t.with_values(n=np.full(len(t), 4.0)), 4.0)
    np.testing.assert_allclose(b.lambdas, [4.0 * v for v in a.lambdas], rtol=1e-12)
