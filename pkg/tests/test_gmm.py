import math

import numpy as np
import pytest

from dpadapt import gmm
from dpadapt.errors import ConfigError, ShapeError
from dpadapt.rng import substream


def single_gaussian(mean, var):
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    var = np.atleast_1d(np.asarray(var, dtype=float))
    return gmm.Gmm(np.array([1.0]), mean[None, :], var[None, :])


class TestEmFit:
    def test_k1_closed_form(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(40, 3)) * np.array([1.0, 2.0, 0.5]) + 3.0
        model = gmm.em_fit(x, 1, seed=0)
        assert np.max(np.abs(model.means[0] - x.mean(axis=0))) <= 1e-10
        assert np.max(np.abs(model.variances[0] - x.var(axis=0))) <= 1e-10
        assert model.weights[0] == 1.0

    def test_two_separated_clusters_recovered(self):
        rng = np.random.default_rng(1)
        x = np.concatenate(
            [rng.normal(-10.0, 1.0, size=2000), rng.normal(10.0, 1.0, size=2000)]
        )[:, None]
        model = gmm.em_fit(x, 2, seed=1)
        means = np.sort(model.means[:, 0])
        assert abs(means[0] + 10.0) < 0.1
        assert abs(means[1] - 10.0) < 0.1
        assert np.max(np.abs(model.weights - 0.5)) < 0.05

    def test_refit_with_reached_iteration_count_identical(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(120, 2)) + np.repeat([[0.0, 0.0], [4.0, 1.0]], 60, axis=0)
        first = gmm.em_fit(x, 2, seed=3, tol=1e-8)
        again = gmm.em_fit(x, 2, seed=3, max_iter=first.n_iter, tol=1e-8)
        assert np.array_equal(first.means, again.means)
        assert np.array_equal(first.variances, again.variances)
        assert np.array_equal(first.weights, again.weights)

    def test_monotone_log_likelihood_100_inits(self):
        rng = np.random.default_rng(4)
        violations = 0
        for trial in range(100):
            x = rng.normal(size=(60, 3)) * rng.uniform(0.5, 2.0) + rng.normal(size=3)
            _, trace = gmm.em_fit(x, 3, seed=trial, max_iter=40, return_trace=True)
            diffs = np.diff(trace)
            if np.any(diffs < -1e-9):
                violations += 1
        assert violations == 0

    def test_variance_floor_enforced(self):
        x = np.zeros((10, 2))  # degenerate data: variance would be zero
        model = gmm.em_fit(x, 1, seed=0)
        assert np.all(model.variances >= gmm.VAR_FLOOR)

    def test_too_few_rows_rejected(self):
        with pytest.raises(ConfigError):
            gmm.em_fit(np.zeros((2, 2)), 3)

    def test_responsibilities_sum_to_one(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(50, 2))
        model = gmm.em_fit(x, 4, seed=5, max_iter=10)
        from dpadapt.backend import K

        comp = K.gmm_log_components(
            x, model.means, model.variances, np.log(model.weights)
        )
        resp = np.exp(comp - K.logsumexp_rows(comp)[:, None])
        assert np.max(np.abs(resp.sum(axis=1) - 1.0)) <= 1e-9


class TestLogLikelihood:
    def test_standard_normal_at_mode(self):
        model = single_gaussian([0.0], [1.0])
        got = gmm.log_likelihood(model, np.array([[0.0]]))
        assert got == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)

    def test_duplicate_component_with_split_weight(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(20, 2))
        mean, var = np.array([0.3, -0.2]), np.array([1.5, 0.7])
        one = single_gaussian(mean, var)
        split = gmm.Gmm(
            np.array([0.4, 0.6]),
            np.vstack([mean, mean]),
            np.vstack([var, var]),
        )
        assert gmm.log_likelihood(one, x) == pytest.approx(
            gmm.log_likelihood(split, x), rel=1e-12
        )

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(7)
        k, d = 3, 2
        weights = rng.dirichlet(np.ones(k))
        means = rng.normal(size=(k, d))
        variances = rng.uniform(0.5, 2.0, size=(k, d))
        model = gmm.Gmm(weights, means, variances)
        x = rng.normal(size=(10, d))
        want = 0.0
        for i in range(10):
            density = 0.0
            for c in range(k):
                comp = weights[c]
                for j in range(d):
                    comp *= math.exp(
                        -0.5 * (x[i, j] - means[c, j]) ** 2 / variances[c, j]
                    ) / math.sqrt(2 * math.pi * variances[c, j])
                density += comp
            want += math.log(density)
        want /= 10
        assert gmm.log_likelihood(model, x) == pytest.approx(want, rel=1e-10)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            gmm.log_likelihood(single_gaussian([0.0], [1.0]), np.zeros((2, 3)))


class TestSample:
    def test_point_mass_sticks_to_mean(self):
        model = single_gaussian([2.0, -1.0], [gmm.VAR_FLOOR, gmm.VAR_FLOOR])
        x, ids = gmm.sample(model, 500, substream(0, "s"))
        assert np.all(np.abs(x - model.means[0]) <= 4 * math.sqrt(gmm.VAR_FLOOR))
        assert np.all(ids == 0)

    def test_empirical_mean_matches_mixture_mean(self):
        rng = np.random.default_rng(8)
        k, d, n = 3, 2, 100_000
        weights = rng.dirichlet(np.ones(k))
        means = rng.normal(scale=3.0, size=(k, d))
        variances = rng.uniform(0.5, 2.0, size=(k, d))
        model = gmm.Gmm(weights, means, variances)
        x, _ = gmm.sample(model, n, substream(1, "s"))
        mix_mean = weights @ means
        mix_var = weights @ (variances + means**2) - mix_mean**2
        bound = 4 * np.sqrt(mix_var / n)
        assert np.all(np.abs(x.mean(axis=0) - mix_mean) <= bound)

    def test_fixed_seed_identical(self):
        model = single_gaussian([0.0], [1.0])
        a, _ = gmm.sample(model, 50, substream(9, "s"))
        b, _ = gmm.sample(model, 50, substream(9, "s"))
        assert np.array_equal(a, b)

    def test_sample_loglik_consistency(self):
        # Two independent Monte-Carlo estimates of E[log p] must agree
        # within 3 combined standard errors.
        rng = np.random.default_rng(10)
        x = rng.normal(size=(200, 2)) + np.repeat([[0, 0], [3, 1]], 100, axis=0)
        model = gmm.em_fit(x, 2, seed=11)
        n = 20_000
        sa, _ = gmm.sample(model, n, substream(12, "a"))
        sb, _ = gmm.sample(model, n, substream(12, "b"))
        la = gmm.log_density_rows(model, sa)
        lb = gmm.log_density_rows(model, sb)
        se = math.sqrt(la.var() / n + lb.var() / n)
        assert abs(la.mean() - lb.mean()) <= 3 * se


class TestClassConditional:
    def make_data(self, rng, n_per=80, n_classes=4, d=3):
        means = rng.normal(scale=4.0, size=(n_classes, d))
        x = np.vstack([rng.normal(means[c], 1.0, size=(n_per, d)) for c in range(n_classes)])
        y = np.repeat(np.arange(n_classes), n_per)
        return x, y

    def test_single_class_equals_plain_fit(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(50, 2))
        labels = np.zeros(50, dtype=int)
        cg = gmm.fit_class_conditional(x, labels, 2, seed=21)
        direct = gmm.em_fit(
            gmm._canonical_rows(x), 2, rng=substream(21, "gmm", 0)
        )
        assert np.array_equal(cg.models[0].means, direct.means)

    def test_row_permutation_invariance(self):
        rng = np.random.default_rng(14)
        x, y = self.make_data(rng)
        perm = rng.permutation(x.shape[0])
        a = gmm.fit_class_conditional(x, y, 3, seed=5)
        b = gmm.fit_class_conditional(x[perm], y[perm], 3, seed=5)
        for c in a.labels:
            assert np.array_equal(a.models[c].means, b.models[c].means)
            assert np.array_equal(a.models[c].variances, b.models[c].variances)

    def test_sampled_means_match_empirical(self):
        rng = np.random.default_rng(15)
        x, y = self.make_data(rng, n_per=200)
        cg = gmm.fit_class_conditional(x, y, 2, seed=6)
        for c in cg.labels:
            drawn, _ = gmm.sample(cg.models[c], 20_000, substream(7, "s", c))
            empirical = x[y == c].mean(axis=0)
            assert np.max(np.abs(drawn.mean(axis=0) - empirical)) < 0.15

    def test_small_class_reduces_k(self):
        rng = np.random.default_rng(16)
        x = rng.normal(size=(23, 2))
        y = np.array([0] * 20 + [1] * 3)
        cg = gmm.fit_class_conditional(x, y, 6, seed=8)
        assert cg.models[0].n_components == 6
        assert cg.models[1].n_components == 3

    def test_missing_class_rejected(self):
        with pytest.raises(ConfigError):
            gmm.fit_class_conditional(
                np.zeros((4, 2)), np.array([0, 0, 1, 1]), 1, n_classes=3
            )

    def test_labeled_sampling_balance_and_determinism(self):
        rng = np.random.default_rng(17)
        x, y = self.make_data(rng)
        cg = gmm.fit_class_conditional(x, y, 2, seed=9)
        xa, ya = gmm.sample_labeled(cg, 4000, substream(10, "draw"))
        xb, yb = gmm.sample_labeled(cg, 4000, substream(10, "draw"))
        assert np.array_equal(xa, xb)
        assert np.array_equal(ya, yb)
        counts = np.bincount(ya, minlength=4) / 4000
        assert np.max(np.abs(counts - 0.25)) < 0.05

    def test_pooled_mode(self):
        rng = np.random.default_rng(18)
        x, y = self.make_data(rng)
        cg = gmm.fit_pooled(x, 4, seed=11)
        assert cg.pooled
        drawn, labels = gmm.sample_labeled(cg, 100, substream(12, "draw"))
        assert np.all(labels == -1)
        assert drawn.shape == (100, 3)


class TestBic:
    def test_bic_prefers_true_component_count(self):
        rng = np.random.default_rng(19)
        x = np.vstack(
            [rng.normal(-4.0, 1.0, size=(300, 2)), rng.normal(4.0, 1.0, size=(300, 2))]
        )
        scores = {k: gmm.bic(gmm.em_fit(x, k, seed=k), x) for k in (1, 2, 6)}
        assert scores[2] < scores[1]
        assert scores[2] < scores[6]
