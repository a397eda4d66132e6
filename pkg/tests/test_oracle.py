import numpy as np
import pytest

from hanova.errors import ValidationError
from hanova.oracle import (additive_fit_two_way, barry_linear_system, barry_two_way, bayes_risk,
                           build_basis, dense_posterior_mean, dense_posterior_mean_resolvent)
from hanova.solver import INF, final_blend, fit_hanova
from hanova.table import SparseTable
from hanova.variance import VarianceComponents, lambdas_from_sigmas, subspace_dim

from conftest import full_table, make_spec, sparse_table


class TestBasis:
    def test_one_factor_saturated(self):
        t = SparseTable(make_spec((3,)), [[0], [1], [2]], [1.0, 2.0, 4.0], [1, 1, 1])
        b = build_basis(t)
        assert b.dims == [3]
        U = b.full()
        np.testing.assert_allclose(U.T @ U, np.eye(3), atol=1e-12)

    def test_two_by_two_contrast(self):
        t = full_table((2, 2), y=np.zeros(4))
        b = build_basis(t)
        assert b.dims == [3, 4]
        v = b.blocks[1][:, 0]
        np.testing.assert_allclose(np.abs(v), 0.5, atol=1e-12)
        np.testing.assert_allclose(v * np.sign(v[0]), [0.5, -0.5, -0.5, 0.5], atol=1e-12)

    def test_sparse_projector_identities(self, rng):
        t = sparse_table((4, 3, 3), 20, rng)
        b = build_basis(t)
        U = b.full()
        assert U.shape == (20, 20)
        np.testing.assert_allclose(U.T @ U, np.eye(20), atol=1e-12)
        for k in (1, 2, 3):
            P = b.projector(k)
            np.testing.assert_allclose(P @ P, P, atol=1e-12)
            np.testing.assert_allclose(P, P.T, atol=1e-12)
            assert b.dims[k - 1] == subspace_dim(t, k)

    def test_threshold(self, rng):
        t = sparse_table((4, 4), 12, rng)
        with pytest.raises(ValidationError):
            build_basis(t, max_cells=10)


class TestPosteriorMean:
    sig = np.array([2.0, 1.0, 0.5, 0.5]) ** 2

    def test_zero_prior_shrinks_everything(self, rng):
        t = full_table((3, 3, 2), rng=rng)
        t = t.with_values(y=t.y - t.y.mean())
        out = dense_posterior_mean(t, build_basis(t), 1.0, np.zeros(4))
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_noiseless_limit(self, rng):
        t = full_table((3, 3, 2), rng=rng)
        out = dense_posterior_mean(t, build_basis(t), 1e-12, self.sig)
        np.testing.assert_allclose(out, t.y, atol=1e-9)

    def test_two_forms_agree(self, rng):
        for _ in range(5):
            t = full_table((3, 3, 2), rng=rng)
            b = build_basis(t)
            np.testing.assert_allclose(dense_posterior_mean(t, b, 1.0, self.sig),
                                       dense_posterior_mean_resolvent(t, b, 1.0, self.sig),
                                       atol=1e-10)

    def test_two_forms_agree_sparse(self, rng):
        t = sparse_table((4, 3, 3), 22, rng)
        b = build_basis(t)
        np.testing.assert_allclose(dense_posterior_mean(t, b, 0.7, self.sig),
                                   dense_posterior_mean_resolvent(t, b, 0.7, self.sig), atol=1e-10)

    def test_hierarchy_matches_posterior(self, rng):
        t = full_table((3, 3, 2), rng=rng)
        vc = VarianceComponents(1.0, self.sig, self.sig, np.zeros(4, bool), np.zeros(4, bool))
        fit = fit_hanova(t, lambdas_from_sigmas(vc))
        blend = final_blend(fit, t, 1.0, self.sig[-1])
        np.testing.assert_allclose(blend, dense_posterior_mean(t, build_basis(t), 1.0, self.sig),
                                   atol=1e-8)

    def test_rejects_bad_input(self, rng):
        t = sparse_table((3, 3), 6, rng, weights="random")
        with pytest.raises(ValidationError):
            dense_posterior_mean(t, build_basis(t), 1.0, [1.0, 1.0, 1.0])
        t = full_table((2, 2), rng=rng)
        with pytest.raises(ValidationError):
            dense_posterior_mean(t, build_basis(t), 0.0, [1.0, 1.0, 0.0])
        with pytest.raises(ValidationError):
            dense_posterior_mean(t, build_basis(t), 1.0, [1.0, 1.0])


class TestBarry:
    def test_zero_penalty(self, rng):
        t = full_table((3, 4), rng=rng)
        np.testing.assert_allclose(barry_two_way(t, 0.0), t.y, atol=1e-14)

    def test_infinite_penalty(self, rng):
        t = full_table((3, 4), rng=rng)
        np.testing.assert_array_equal(barry_two_way(t, INF), additive_fit_two_way(t))

    def test_linear_system(self, rng):
        t = full_table((3, 4), rng=rng)
        np.testing.assert_allclose(barry_two_way(t, 2.0), barry_linear_system(t, 2.0), atol=1e-12)

    def test_preconditions(self, rng):
        with pytest.raises(ValidationError):
            barry_two_way(full_table((2, 2, 2), rng=rng), 1.0)
        with pytest.raises(ValidationError):
            barry_two_way(sparse_table((3, 3), 5, rng), 1.0)
        with pytest.raises(ValidationError):
            barry_two_way(full_table((3, 3), n=np.full(9, 2.0), rng=rng), 1.0)
        with pytest.raises(ValidationError):
            barry_two_way(full_table((3, 3), rng=rng), -1.0)


def test_bayes_risk_matches_posterior_covariance(rng):
    t = sparse_table((4, 3, 3), 25, rng)
    b = build_basis(t)
    sig = np.array([3.0, 1.0, 0.3, 0.2])
    s2 = 0.8
    taus = [sig[k:3].sum() for k in range(3)]
    prior = sig[-1] * np.eye(25)
    for k, V in enumerate(b.blocks):
        prior += taus[k] * V @ V.T
    post = prior - prior @ np.linalg.solve(prior + s2 * np.eye(25), prior)
    assert bayes_risk(b.dims, 25, s2, sig) == pytest.approx(np.trace(post) / 25, rel=1e-10)
