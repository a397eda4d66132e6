import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hanova.errors import ValidationError
from hanova.oracle import (additive_fit_two_way, barry_two_way, coefficient_vector,
                           dense_order_solution, normal_equations)
from hanova.solver import (INF, design_matrix, BackfitWorkspace, ConvergenceOpts, backfit_sweep, final_blend,
                           fit_hanova, fit_order, predict, wpls_objective)
from hanova.table import SparseTable, weighted_grand_mean

from conftest import full_table, make_spec, sparse_table


def relative_residual(table, k, fit, lam, prior, y):
    Z, u, labels = normal_equations(table, k, lam, prior, y)
    beta = coefficient_vector(fit.coefficients, labels)
    r = u - Z @ beta
    return float(np.max(np.abs(r) / (1.0 + np.abs(u))))


class TestObjective:
    def test_exact_fit_is_zero(self, rng):
        t = sparse_table((3, 3), 6, rng)
        assert wpls_objective(t, t.y, 2.0, t.y) == 0.0

    def test_one_cell(self):
        t = SparseTable(make_spec((1,)), [[0]], [2.0], [3.0])
        assert wpls_objective(t, [0.0], 1.0, [1.0]) == 13.0

    def test_resummation(self, rng):
        t = sparse_table((4, 3, 5), 30, rng, weights="random")
        mu, prior = rng.normal(size=(2, len(t)))
        lam = 0.37
        expect = 0.0
        for i in range(len(t)):
            expect += t.n[i] * (t.y[i] - mu[i]) ** 2 + lam * (mu[i] - prior[i]) ** 2
        assert wpls_objective(t, mu, lam, prior) == pytest.approx(expect, rel=1e-12)

    def test_negative_penalty(self, rng):
        t = sparse_table((3, 3), 6, rng)
        with pytest.raises(ValidationError):
            wpls_objective(t, t.y, -1.0, t.y)


class TestFitOrder:
    def test_one_factor_weighted_average(self, backend):
        t = SparseTable(make_spec((2,)), [[0], [1]], [4.0, 0.0], [3.0, 1.0])
        f = fit_order(t, 1, 1.0)
        block = f.coefficients.blocks[(0,)]
        np.testing.assert_allclose(block.dense(), [3.0, 0.0], atol=1e-15)
        assert f.converged
        # one sweep reaches the solution; the second only confirms it
        assert f.sweeps <= 2
        assert f.objective_trace[1] == f.objective_trace[-1]

    def test_saturated_unpenalized_reproduces_y(self, rng, backend):
        t = sparse_table((3, 4, 2), 15, rng, weights="random")
        f = fit_order(t, 3, 0.0)
        np.testing.assert_allclose(f.mu, t.y, atol=1e-12)

    def test_two_factor_matches_dense_system(self, backend):
        rng = np.random.default_rng(7)
        t = sparse_table((3, 3), 7, rng)
        f = fit_order(t, 1, 0.7)
        np.testing.assert_allclose(f.mu, dense_order_solution(t, 1, 0.7), atol=1e-7)
        assert relative_residual(t, 1, f, 0.7, np.zeros(len(t)), t.y) < 1e-7

    def test_order_out_of_range(self, rng):
        t = sparse_table((3, 3), 5, rng)
        for k in (0, 3):
            with pytest.raises(ValidationError):
                fit_order(t, k, 1.0)
        with pytest.raises(ValidationError):
            fit_order(t, 1, -0.5)

    def test_sweep_limit_reported_not_raised(self, rng):
        t = sparse_table((6, 6, 6), 60, rng, weights="random")
        f = fit_order(t, 2, 0.1, opts=ConvergenceOpts(max_sweeps=1))
        assert f.sweeps == 1
        assert not f.converged
        assert np.all(np.isfinite(f.mu))

    def test_mu_matches_coefficients(self, rng, backend):
        t = sparse_table((5, 4, 3), 35, rng, weights="random")
        f = fit_order(t, 2, 0.9, prior_mu=rng.normal(size=len(t)))
        np.testing.assert_allclose(f.coefficients.evaluate(t.codes), f.mu, rtol=0, atol=1e-12)

    def test_dense_and_sparse_blocks_agree(self, rng):
        t = sparse_table((4, 3, 5), 20, rng)
        f = fit_order(t, 2, 0.3)
        for J, blk in f.coefficients.blocks.items():
            dense = blk.dense()
            assert dense.shape == blk.shape
            grid = np.stack(np.unravel_index(np.arange(dense.size), blk.shape), axis=1)
            codes = np.zeros((grid.shape[0], t.m), dtype=np.int64)
            codes[:, list(J)] = grid
            assert np.array_equal(blk.lookup(codes), dense.ravel())
            with pytest.raises(ValidationError):
                blk.dense(budget=dense.size - 1)


class TestSweep:
    def test_fixed_point(self, rng, backend):
        t = sparse_table((4, 4), 12, rng)
        ws = BackfitWorkspace(t, 1, 0.5, t.y, np.zeros(len(t)))
        for _ in range(500):
            if backfit_sweep(ws) < 1e-15:
                break
        beta = [b.copy() for b in ws.beta]
        assert backfit_sweep(ws) < 1e-14
        for a, b in zip(beta, ws.beta):
            np.testing.assert_allclose(a, b, atol=1e-14)

    def test_single_block_exact_in_one_sweep(self, rng):
        t = sparse_table((7,), 5, rng, weights="random")
        ws = BackfitWorkspace(t, 1, 0.8, t.y, np.zeros(len(t)))
        assert backfit_sweep(ws) > 0
        assert backfit_sweep(ws) == 0.0

    def test_monotone_over_fifty_sweeps(self, rng, backend):
        t = sparse_table((6, 5), 18, rng, weights="random")
        ws = BackfitWorkspace(t, 1, 0.25, t.y, np.zeros(len(t)))
        values = [ws.objective()]
        for _ in range(50):
            backfit_sweep(ws)
            values.append(ws.objective())
        diffs = np.diff(values)
        assert np.all(diffs <= 1e-12 * np.abs(values[:-1]))


class TestFitHanova:
    def test_all_infinite_gives_grand_mean(self, rng, backend):
        t = sparse_table((4, 3, 3), 17, rng, weights="random")
        fit = fit_hanova(t, [INF, INF, INF])
        gm = weighted_grand_mean(t)
        for k in (0, 1, 2, 3):
            np.testing.assert_allclose(fit.fitted(k), gm, atol=1e-12)
        assert fit.predict((3, 2, 2)) == pytest.approx(gm, abs=1e-12)

    def test_all_zero_saturated(self, rng):
        t = full_table((3, 2, 2), rng=rng)
        fit = fit_hanova(t, [0.0, 0.0, 0.0])
        np.testing.assert_allclose(fit.fitted(), t.y, atol=1e-10)

    def test_centering_restored(self, rng):
        t = full_table((3, 3), y=rng.normal(size=9) + 100.0)
        fit = fit_hanova(t, [1.0, 1.0])
        assert fit.grand_mean == pytest.approx(weighted_grand_mean(t))
        assert abs(fit.fitted().mean() - 100.0) < 2.0

    def test_validation(self, rng):
        t = sparse_table((3, 3), 5, rng)
        with pytest.raises(ValidationError):
            fit_hanova(t, [1.0, 1.0, 1.0])
        with pytest.raises(ValidationError):
            fit_hanova(t, [1.0], maxk=2)
        with pytest.raises(ValidationError):
            fit_hanova(t, [1.0, -1.0])
        with pytest.raises(ValidationError):
            fit_hanova(t, [1.0, 1.0]).fitted(3)

    def test_infinite_middle_order_copies_previous(self, rng):
        t = sparse_table((4, 4, 3), 30, rng)
        fit = fit_hanova(t, [0.6, INF, 0.8])
        np.testing.assert_allclose(fit.order_fits[1].mu, fit.order_fits[0].mu, rtol=0, atol=1e-12)
        assert fit.order_fits[1].sweeps == 0

    def test_infinite_without_coefficients_projects_prior(self, rng):
        t = sparse_table((4, 4), 10, rng)
        prior = rng.normal(size=len(t))
        f = fit_order(t, 1, INF, prior_mu=prior)
        g = fit_order(t.with_values(y=prior, n=np.ones(len(t))), 1, 0.0)
        np.testing.assert_allclose(f.mu, g.mu, atol=1e-7)


class TestPredict:
    def test_observed_cells_replay_exactly(self, rng, backend):
        t = sparse_table((5, 4, 3), 25, rng, weights="random")
        fit = fit_hanova(t, [0.5, 1.0, 2.0])
        for k in (1, 2, 3):
            assert np.array_equal(fit.predict_codes(t.codes, k), fit.fitted(k))
        i = 4
        assert predict(fit, tuple(t.codes[i])) == fit.fitted()[i]

    def test_heavy_cell_approaches_its_mean(self):
        spec = make_spec((3, 3))
        codes = [[0, 0], [0, 1], [1, 0], [1, 1], [2, 2]]
        y = [5.0, -1.0, 0.5, 2.0, 1.0]
        n = [1e9, 1.0, 1.0, 1.0, 1.0]
        fit = fit_hanova(SparseTable(spec, codes, y, n), [1.0, 1.0])
        assert fit.predict((0, 0)) == pytest.approx(5.0, abs=1e-6)

    def test_unobserved_margins_fall_back_to_grand_mean(self):
        spec = make_spec((3, 3))
        t = SparseTable(spec, [[0, 0], [0, 1], [1, 0], [1, 1]], [1.0, 2.0, 3.0, 5.0], [1, 1, 1, 1])
        fit = fit_hanova(t, [0.5, 0.5])
        assert fit.predict((2, 2), order=1) == pytest.approx(fit.grand_mean)
        assert fit.predict((2, 2), order=2) == pytest.approx(fit.grand_mean)
        # a cell with one observed main effect borrows it at order 1
        assert fit.predict((0, 2), order=1) != pytest.approx(fit.grand_mean)

    def test_out_of_range(self, rng):
        t = sparse_table((3, 3), 5, rng)
        fit = fit_hanova(t, [1.0, 1.0])
        with pytest.raises(ValidationError):
            fit.predict((3, 0))
        with pytest.raises(ValidationError):
            fit.predict_labels(("nope", "v0"))

    def test_factor_permutation_invariance(self, rng):
        t = sparse_table((4, 3, 5), 30, rng, weights="random")
        order = (2, 0, 1)
        tp = t.permute_factors(order)
        fa = fit_hanova(t, [0.4, 1.3, 0.9], opts=ConvergenceOpts(tol=1e-12, max_sweeps=5000))
        fb = fit_hanova(tp, [0.4, 1.3, 0.9], opts=ConvergenceOpts(tol=1e-12, max_sweeps=5000))
        grid = np.array([[a, b, c] for a in range(4) for b in range(3) for c in range(5)])
        for k in (1, 2, 3):
            np.testing.assert_allclose(fa.predict_codes(grid, k),
                                       fb.predict_codes(grid[:, list(order)], k), atol=1e-9)

    def test_minimum_norm_representation(self, rng):
        """Stored coefficients are orthogonal to the design's null space."""
        t = sparse_table((5, 4, 4), 25, rng)
        f = fit_order(t, 2, 0.7)
        X, labels = design_matrix(t, 2)
        beta = coefficient_vector(f.coefficients, labels)
        _, s, vt = np.linalg.svd(X)
        null = vt[np.sum(s > 1e-10 * s[0]):]
        assert null.shape[0] > 0
        assert np.max(np.abs(null @ beta)) < 1e-9

    def test_level_relabeling_invariance(self, rng):
        t = sparse_table((4, 5), 12, rng)
        perm = [rng.permutation(4), rng.permutation(5)]
        codes = np.stack([perm[0][t.codes[:, 0]], perm[1][t.codes[:, 1]]], axis=1)
        t2 = SparseTable(t.spec, codes, t.y, t.n)
        opts = ConvergenceOpts(tol=1e-12, max_sweeps=5000)
        fa = fit_hanova(t, [0.3, 0.7], opts=opts)
        fb = fit_hanova(t2, [0.3, 0.7], opts=opts)
        for k in (1, 2):
            np.testing.assert_allclose(fa.predict_codes(t.codes, k), fb.predict_codes(codes, k),
                                       atol=1e-9)


class TestFinalBlend:
    def setup_method(self):
        self.t = SparseTable(make_spec((1,)), [[0]], [4.0], [1.0])
        self.fit = fit_hanova(self.t, [INF])
        # the full-order surface at the single cell is the grand mean 4; use a two-cell table for arithmetic

    def test_arithmetic(self):
        t = SparseTable(make_spec((2,)), [[0], [1]], [4.0, 0.0], [1.0, 1.0])
        fit = fit_hanova(t, [INF])  # mu^(1) = grand mean = 2
        out = final_blend(fit, t, 1.0, 1.0)
        assert out[0] == pytest.approx(3.0)

    def test_limits(self, rng):
        t = full_table((3, 2), rng=rng)
        fit = fit_hanova(t, [1.0, 2.0])
        np.testing.assert_array_equal(final_blend(fit, t, 1.0, 0.0), fit.fitted())
        np.testing.assert_array_equal(final_blend(fit, t, 0.0, 1.0), t.y)
        with pytest.raises(ValidationError):
            final_blend(fit, t, 0.0, 0.0)
        with pytest.raises(ValidationError):
            final_blend(fit_hanova(t, [1.0]), t, 1.0, 1.0)


class TestStructure:
    @pytest.mark.parametrize("k", [2, 3])
    def test_nested_subspaces(self, rng, k):
        t = sparse_table((4, 4, 3), 28, rng)
        lower = fit_order(t, k - 1, 0.5).mu  # a vector in S_{k-1}
        f = fit_order(t.with_values(y=lower), k, 0.0,
                      opts=ConvergenceOpts(tol=1e-13, max_sweeps=20000))
        np.testing.assert_allclose(f.mu, lower, atol=1e-8)

    def test_barry_closed_form_for_the_order_one_step(self, rng):
        """The order-1 step shrinking toward the grand mean has its own closed form."""
        t = full_table((3, 4), rng=rng)
        yc = t.y - t.y.mean()
        for lam in (0.0, 0.5, 2.0):
            f = fit_order(t.with_values(y=yc), 1, lam)
            np.testing.assert_allclose(f.mu, additive_fit_two_way(t.with_values(y=yc)) / (1 + lam),
                                       atol=1e-10)

    def test_barry_identity_via_two_way_step(self, rng):
        t = full_table((3, 4), rng=rng)
        for lam in (0.0, 0.5, 2.0, INF):
            fit = fit_hanova(t, [0.0, lam])
            np.testing.assert_allclose(fit.fitted(2), barry_two_way(t, lam), atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 2, 3]), st.floats(0.0, 5.0))
def test_objective_monotone_property(seed, k, lam):
    rng = np.random.default_rng(seed)
    t = sparse_table((4, 3, 3), int(rng.integers(3, 30)), rng, weights="random")
    f = fit_order(t, k, lam, prior_mu=rng.normal(size=len(t)))
    tr = np.asarray(f.objective_trace)
    assert np.all(np.diff(tr) <= 1e-12 * np.abs(tr[:-1]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([1, 2]), st.floats(0.01, 5.0))
def test_normal_equation_property(seed, k, lam):
    rng = np.random.default_rng(seed)
    t = sparse_table((4, 3, 3), int(rng.integers(3, 30)), rng, weights="random")
    prior = rng.normal(size=len(t))
    f = fit_order(t, k, lam, prior_mu=prior, opts=ConvergenceOpts(tol=1e-11, max_sweeps=20000))
    assert f.converged
    assert relative_residual(t, k, f, lam, prior, t.y) < 1e-6
