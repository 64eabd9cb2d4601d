import json
import logging
import math

import numpy as np
import pytest

from mafbench import analysis as an
from mafbench.algorithms.training import init_params


class TestGaussianKL:
    def test_identical_groups(self, rng):
        x = rng.normal(size=(200, 4))
        assert an.gaussian_kl(x, x) == pytest.approx(0.0, abs=1e-12)

    def test_unit_shift(self):
        assert an.gaussian_kl_moments([0.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(0.5)

    def test_variance_ratio(self):
        expected = math.log(2.0) + 1.0 / 8.0 - 0.5
        assert an.gaussian_kl_moments([0.0], [[1.0]], [0.0], [[4.0]]) == pytest.approx(expected)

    def test_nonnegative_on_random_groups(self, rng):
        for _ in range(20):
            a = rng.normal(size=(50, 3)) * rng.uniform(0.2, 3)
            b = rng.normal(size=(60, 3)) + rng.normal(size=3)
            assert an.gaussian_kl(a, b) >= -1e-9

    def test_zero_variance_raises(self):
        with pytest.raises(an.AnalysisError):
            an.gaussian_kl(np.ones((10, 3)), np.zeros((10, 3)))

    def test_non_pd_covariance_raises(self):
        with pytest.raises(an.AnalysisError):
            an.gaussian_kl_moments([0, 0], np.eye(2), [0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_shrinkage_bounds(self, rng):
        with pytest.raises(an.AnalysisError):
            an.shrunk_moments(rng.normal(size=(10, 2)), 1.5)

    def test_matrix_diagonal_zero(self, rng):
        b = an.FeatureBundle()
        for m in range(3):
            b.add("semantic", m, 0, rng.normal(size=(40, 3)) + m)
        mat = an.kl_matrix(b, "semantic", 0)
        assert np.all(np.diag(mat) == 0.0) and np.all(mat[~np.eye(3, dtype=bool)] > 0)

    def test_bundle_width_mismatch(self, rng):
        b = an.FeatureBundle()
        b.add("forensic", 0, 0, rng.normal(size=(5, 3)))
        with pytest.raises(an.AnalysisError):
            b.add("forensic", 1, 0, rng.normal(size=(5, 4)))


class TestK95:
    def test_rank_one(self, rng):
        x = rng.normal(size=(100, 1)) @ rng.normal(size=(1, 6))
        assert an.pca_k95(x) == 1

    def test_eigenvalue_boundary(self):
        assert an.k95_from_eigenvalues([0.96, 0.04]) == 1
        assert an.k95_from_eigenvalues([0.95, 0.05]) == 1
        assert an.k95_from_eigenvalues([0.5, 0.5]) == 2

    def test_matches_eigvalsh(self, rng):
        x = rng.normal(size=(50, 8)) * np.linspace(0.2, 3, 8)
        ref = np.linalg.eigvalsh(np.cov(x, rowvar=False))
        assert an.pca_k95(x) == an.k95_from_eigenvalues(ref)

    def test_jacobi_against_numpy(self, rng):
        a = rng.normal(size=(12, 12))
        sym = a + a.T
        w, v = an.jacobi_eigh(sym)
        np.testing.assert_allclose(w, np.sort(np.linalg.eigvalsh(sym))[::-1], atol=1e-9)
        np.testing.assert_allclose(v @ np.diag(w) @ v.T, sym, atol=1e-9)
        assert w.sum() == pytest.approx(np.trace(sym), abs=1e-9)

    def test_duplicated_rows_do_not_change(self, rng):
        x = rng.normal(size=(200, 5)) * np.array([5, 3, 1, 0.5, 0.1])
        assert an.pca_k95(np.vstack([x, x])) == an.pca_k95(x)

    def test_constant_coordinate_does_not_change(self, rng):
        x = rng.normal(size=(200, 5)) * np.array([5, 3, 1, 0.5, 0.1])
        assert an.pca_k95(np.hstack([x, np.full((200, 1), 7.0)])) == an.pca_k95(x)

    def test_constant_features(self):
        assert an.pca_k95(np.ones((10, 3))) == 0


class TestCore:
    def test_identical_inputs(self, rng):
        a = rng.uniform(size=(30, 16))
        tops, core = an.coactivation_core({0: a, 1: a.copy(), 2: a.copy()}, 4)
        assert len(core) == 4 and tops[0] == tops[1] == core

    def test_disjoint(self):
        a = np.zeros((5, 8)); a[:, :4] = 1
        b = np.zeros((5, 8)); b[:, 4:] = 1
        assert an.coactivation_core({0: a, 1: b}, 4)[1] == []

    def test_bad_top_n(self, rng):
        with pytest.raises(an.AnalysisError):
            an.coactivation_core({0: rng.normal(size=(4, 8))}, 9)


class TestVarianceExplained:
    def test_exact_linear(self, rng):
        x = rng.normal(size=(300, 3))
        assert an.variance_explained(x @ rng.normal(size=(3, 5)) + 2.0, x) == pytest.approx(1.0)

    def test_independent(self, rng):
        assert an.variance_explained(rng.normal(size=(2000, 4)), rng.normal(size=(2000, 2))) < 0.01

    def test_half_signal(self, rng):
        x = rng.normal(size=(2000, 1))
        y = x + rng.normal(size=(2000, 1))
        assert abs(an.variance_explained(y, x) - 0.5) < 0.05

    def test_monotone_in_covariates(self, rng):
        x = rng.normal(size=(500, 4))
        y = x @ rng.normal(size=(4, 3)) + rng.normal(size=(500, 3))
        vals = [an.variance_explained(y, x[:, :k]) for k in range(1, 5)]
        assert vals == sorted(vals)

    def test_rank_deficient_warns(self, rng, caplog):
        x = rng.normal(size=(100, 1))
        with caplog.at_level(logging.WARNING, logger="mafbench.analysis"):
            r2 = an.variance_explained(2 * x, np.hstack([x, x]))
        assert r2 == pytest.approx(1.0, abs=1e-6) and "ridge" in caplog.text


class TestProjection:
    def test_line_data(self, rng):
        t = rng.normal(size=(100, 1))
        proj = an.pca_project_2d(t @ np.array([[1.0, 2.0, -1.0]]))
        assert np.abs(proj.coords[:, 1]).max() < 1e-9

    def test_row_order_invariant(self, rng):
        x = rng.normal(size=(60, 4)) * [3, 2, 1, 0.5]
        perm = rng.permutation(60)
        a, b = an.pca_project_2d(x), an.pca_project_2d(x[perm])
        np.testing.assert_allclose(a.coords[perm], b.coords, atol=1e-9)

    def test_reconstruction_error_is_tail(self, rng):
        x = rng.normal(size=(80, 5)) * [4, 3, 2, 1, 0.5]
        p = an.pca_project_2d(x)
        recon = p.coords @ p.components.T + p.mean
        err = ((x - recon) ** 2).sum() / (x.shape[0] - 1)
        assert err == pytest.approx(p.eigenvalues[2:].sum(), rel=1e-9)


@pytest.fixture(scope="module")
def report(small_world):
    params = init_params(small_world.config.perceptor_dim, [0, 1])
    return an.analyze(small_world, params)


class TestAnalyze:

    def test_shapes(self, report, small_world):
        k = small_world.config.num_modalities
        for s in an.SPACES:
            for y in (0, 1):
                assert np.asarray(report.kl[s][y]).shape == (k, k)
        assert 0 <= report.core_size <= report.top_n
        for s in an.SPACES:
            for v in report.r2[s].values():
                assert 0.0 <= v <= 1.0
            assert report.r2[s]["joint"] >= report.r2[s]["style"] - 1e-9

    def test_serialization(self, report):
        d = json.loads(report.to_json())
        assert set(d) >= {"kl", "k95", "coactivation", "r2"}
        assert report.kl_csv().splitlines()[0] == "space,label,from_modality,to_modality,kl"
        n_rows = len(report.projection_tags)
        assert len(report.projection_csv().splitlines()) == 1 + 2 * n_rows

    def test_deterministic(self, report, small_world):
        params = init_params(small_world.config.perceptor_dim, [0, 1])
        assert an.analyze(small_world, params).to_json() == report.to_json()

    def test_bad_layer(self, small_world):
        params = init_params(small_world.config.perceptor_dim, [0, 1])
        with pytest.raises(ValueError):
            an.analyze(small_world, params, layer=7)
