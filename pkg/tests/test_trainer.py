import numpy as np
import pytest

from phi4mrf.model import LAMBDA_MIN, CouplingSet, DimensionError, MomentAccumulator
from phi4mrf.quadrature import quadrature_oracle
from phi4mrf.sampler import SamplerConfig, sample_chains
from phi4mrf.trainer import (
    DivergenceError,
    InitSpec,
    TrainConfig,
    data_moments,
    kl_gradient,
    learning_rate_at,
    moment_residuals,
    train,
)
from phi4mrf.validation import quadrature_kl_grad, random_couplings

FAST = TrainConfig(epochs=40, chains=4, samples_per_chain=2)


@pytest.fixture(scope="module")
def v3_data():
    th = random_couplings(3, np.random.default_rng(0), 0.3)
    cfg = SamplerConfig(sweeps_burn_in=300, sweeps_between_samples=5, n_samples=1000)
    return th, np.concatenate(sample_chains(th, cfg, 4, seed=1))


class TestDataMoments:
    def test_single_config(self):
        m = data_moments([[1.0, 2.0]]).means()
        np.testing.assert_array_equal(m.pair, [2.0])
        np.testing.assert_array_equal(m.sq, [1, 4])
        np.testing.assert_array_equal(m.quart, [1, 16])

    def test_antithetic_pair_odd_moments_vanish(self, rng):
        phi = rng.normal(size=3)
        m = data_moments([phi, -phi]).means()
        np.testing.assert_array_equal(m.phi, 0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            data_moments(np.empty((0, 2)))


class TestKlGradient:
    def test_zero_at_moment_match(self, rng):
        x = rng.normal(size=(10, 3))
        g = kl_gradient(random_couplings(3, rng), data_moments(x), data_moments(x))
        assert g.max_abs() == 0.0

    def test_matches_quadrature_kl(self, rng):
        th = random_couplings(2, rng)
        data = rng.normal(0.1, 0.7, size=(40, 2))
        g = kl_gradient(th, data_moments(data), quadrature_oracle(th).moments)
        np.testing.assert_allclose(np.concatenate(list(g)), quadrature_kl_grad(th, data), atol=1e-5, rtol=0)

    def test_data_sign_flip(self, rng):
        th = random_couplings(2, rng).replace(a=np.zeros(2))
        model = quadrature_oracle(th).moments
        x = rng.normal(size=(25, 2))
        g, gf = kl_gradient(th, data_moments(x), model), kl_gradient(th, data_moments(-x), model)
        np.testing.assert_allclose(gf.a, -g.a, atol=1e-13)
        np.testing.assert_allclose(gf.w, g.w, atol=1e-13)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(DimensionError):
            kl_gradient(random_couplings(3, rng), data_moments(np.ones((2, 2))), data_moments(np.ones((2, 2))))


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0)
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(chains=0)
        with pytest.raises(ValueError):
            TrainConfig(l2_weight_decay=-1)
        with pytest.raises(ValueError):
            InitSpec(lambda_init=0)

    def test_decay_schedule(self):
        cfg = TrainConfig(learning_rate=0.1, lr_decay_epochs=10)
        assert learning_rate_at(cfg, 0) == 0.1
        assert learning_rate_at(cfg, 10) == pytest.approx(0.05)
        assert learning_rate_at(TrainConfig(learning_rate=0.1), 1000) == 0.1


class TestTrain:
    def test_history_and_lambda_floor(self, v3_data):
        _, x = v3_data
        lams = []
        res = train(x * 0.01, FAST, callback=lambda e, th, row: lams.append(th.lam.copy()))
        assert len(res.history) == FAST.epochs
        assert set(res.history[0]) == {"epoch", "resid_phi", "resid_pair", "resid_sq", "resid_quart", "acceptance"}
        assert np.all(res.theta.lam >= LAMBDA_MIN)
        assert all(np.all(np.isfinite(lam)) for lam in lams)

    def test_floor_projection_in_return_units(self):
        x = np.random.default_rng(0).normal(0, 0.01, size=(200, 2))
        cfg = TrainConfig(epochs=30, learning_rate=0.5, lr_scale_lambda=10.0, init=InitSpec(lambda_init=1e-3))
        th = train(x, cfg).theta
        assert np.all(th.lam >= LAMBDA_MIN)

    def test_deterministic(self, v3_data):
        _, x = v3_data
        a, b = train(x, FAST).theta, train(x, FAST).theta
        for f in ("w", "mu", "lam", "a"):
            np.testing.assert_array_equal(getattr(a, f), getattr(b, f))

    def test_threads_do_not_change_result(self, v3_data):
        from dataclasses import replace

        _, x = v3_data
        a = train(x, FAST).theta
        b = train(x, replace(FAST, threads=4)).theta
        np.testing.assert_array_equal(a.w, b.w)
        np.testing.assert_array_equal(a.lam, b.lam)

    def test_standardization_is_unit_covariant(self, v3_data):
        _, x = v3_data
        small = train(x * 0.01, FAST).theta
        ref = train(x, FAST).theta.rescaled(0.01)
        for f in ("w", "mu", "lam", "a"):
            np.testing.assert_allclose(getattr(small, f), getattr(ref, f), rtol=1e-10)

    def test_fresh_chains_mode(self, v3_data):
        from dataclasses import replace

        _, x = v3_data
        res = train(x, replace(FAST, persistent=False, epochs=5))
        assert len(res.history) == 5

    def test_empty_and_nonfinite_data(self):
        with pytest.raises(ValueError):
            train(np.empty((0, 2)), FAST)
        with pytest.raises(ValueError):
            train(np.array([[0.0, np.nan]]), FAST)

    def test_divergence_reports_epoch(self, v3_data):
        _, x = v3_data
        with pytest.raises(DivergenceError) as info:
            train(x, TrainConfig(epochs=50, learning_rate=1e8, standardize=False, lr_scale_lambda=1.0))
        assert info.value.epoch >= 0

    def test_symmetric_data_learns_no_bias(self, rng):
        half = rng.normal(size=(500, 2)) * [1.0, 0.7]
        x = np.concatenate([half, -half])
        traj = []
        cfg = TrainConfig(epochs=600, learning_rate=0.05, standardize=False, seed=4)
        th = train(x, cfg, callback=lambda e, t, row: traj.append(t.a.copy())).theta
        noise = np.std(np.array(traj[300:]), axis=0)
        assert np.all(np.abs(th.a) < 3 * noise)

    def test_repeated_config_pulls_mean(self):
        x = np.tile([0.8, 0.8], (10, 1))
        cfg = TrainConfig(epochs=10, learning_rate=1e-3, standardize=False, seed=1)
        thetas = []
        train(x, cfg, callback=lambda e, t, row: thetas.append(t))
        resid = [abs(0.8 - quadrature_oracle(t).moments.phi).max() for t in thetas]
        assert all(b < a for a, b in zip(resid, resid[1:]))

    def test_permutation_equivariance(self, v3_data):
        _, x = v3_data
        cfg = TrainConfig(
            epochs=3000, learning_rate=0.1, lr_decay_epochs=300, lr_scale_lambda=1.0, chains=16,
            samples_per_chain=8, standardize=False, average_last=1500, init=InitSpec(w_init_std=0), seed=2,
        )
        order = [2, 0, 1]
        a = train(x, cfg).theta.permute(order)
        b = train(x[:, order], cfg).theta
        for f in ("w", "mu", "lam", "a"):
            np.testing.assert_allclose(getattr(a, f), getattr(b, f), atol=0.1)

    def test_warm_start(self, v3_data):
        th, x = v3_data
        res = train(x, TrainConfig(epochs=1, learning_rate=1e-6, standardize=False), init_theta=th)
        np.testing.assert_allclose(res.theta.mu, th.mu, atol=1e-4)


def test_moment_residuals_keys(rng):
    x = rng.normal(size=(5, 2))
    r = moment_residuals(data_moments(x), MomentAccumulator.from_samples(x))
    assert r == {"phi": 0.0, "pair": 0.0, "sq": 0.0, "quart": 0.0}
