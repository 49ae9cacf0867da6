import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from phi4mrf.model import CouplingSet, n_pairs
from phi4mrf.scaling import coupling_means, nested_subsets, powerlaw_fit, scaling_run
from phi4mrf.trainer import TrainConfig

from .conftest import t5_panel


def uniform_theta(v, w, a):
    return CouplingSet(np.full(n_pairs(v), w), np.ones(v), np.ones(v), np.full(v, a))


class TestCouplingMeans:
    def test_constant(self):
        assert coupling_means(uniform_theta(4, 0.1, -0.2)) == pytest.approx((0.1, -0.2))

    def test_three_sites(self):
        th = CouplingSet([0.1, 0.2, 0.3], [0] * 3, [1] * 3, [0] * 3)
        assert coupling_means(th)[0] == pytest.approx(0.2)

    def test_antisymmetric_bias(self):
        assert coupling_means(CouplingSet([0.5], [0, 0], [1, 1], [0.3, -0.3]))[1] == 0.0

    def test_permutation_invariant(self, theta3):
        a = coupling_means(theta3)
        b = coupling_means(theta3.permute([1, 2, 0]))
        assert b == pytest.approx(a, rel=1e-15)

    def test_single_site(self):
        with pytest.raises(ValueError):
            coupling_means(CouplingSet([], [0], [1], [0]))


class TestPowerlawFit:
    def test_exact_law(self):
        fit = powerlaw_fit([(v, 3 * v**-0.5) for v in (16, 32, 48, 64)])
        assert abs(fit.exponent + 0.5) < 1e-12
        assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
        assert fit.prefactor == pytest.approx(3.0, rel=1e-12)
        assert fit.stderr_k < 1e-10

    def test_two_points(self):
        fit = powerlaw_fit([(16, 1.0), (32, 0.5)])
        assert fit.exponent == pytest.approx(-1.0, abs=1e-15)
        assert fit.r_squared == 1.0
        assert math.isnan(fit.stderr_k)

    def test_negative_values_keep_sign(self):
        fit = powerlaw_fit([(v, -2 * v**-0.8) for v in (4, 8, 16)])
        assert fit.sign == -1 and fit.exponent == pytest.approx(-0.8, abs=1e-12)

    @pytest.mark.parametrize("pts", [[(4, 1.0)], [(4, 1.0), (8, -1.0)], [(4, 0.0), (8, 1.0)], [(4, 1.0), (4, 2.0)]])
    def test_invalid(self, pts):
        with pytest.raises(ValueError):
            powerlaw_fit(pts)

    @given(st.floats(0.01, 100), st.floats(-2, 2))
    def test_scale_covariance(self, c, k):
        base = [(v, v**k * (1 + 0.01 * ((v * 7) % 3 - 1))) for v in (4, 8, 16, 32)]
        a = powerlaw_fit(base)
        b = powerlaw_fit([(v, c * y) for v, y in base])
        assert abs(a.exponent - b.exponent) < 1e-12

    def test_noise_coverage(self):
        rng = np.random.default_rng(0)
        vols = np.array([16, 32, 48, 64])
        hits = 0
        for _ in range(300):
            y = 2 * vols**-0.9 * np.exp(rng.normal(0, 0.01, vols.size))
            fit = powerlaw_fit(list(zip(vols, y)))
            hits += abs(fit.exponent + 0.9) < 3 * fit.stderr_k
        assert hits / 300 > 0.9


class TestNestedSubsets:
    def test_alphabetical_nested(self):
        subs = nested_subsets(["D", "B", "A", "C"], [2, 3, 4])
        assert subs == {2: ("A", "B"), 3: ("A", "B", "C"), 4: ("A", "B", "C", "D")}

    def test_random_nested_and_seeded(self):
        t = [f"T{k}" for k in range(10)]
        a = nested_subsets(t, [3, 6], "random", seed=1)
        assert set(a[3]) <= set(a[6])
        assert a == nested_subsets(t, [3, 6], "random", seed=1)
        assert a != nested_subsets(t, [3, 6], "random", seed=2)

    def test_unknown_rule(self):
        with pytest.raises(ValueError):
            nested_subsets(["A"], [1], "bogus")


class TestScalingRun:
    def test_injected_inverse_law(self):
        panel = t5_panel(20, tickers=tuple("ABCDEFGH"))
        res = scaling_run(panel, [2, 4, 8], fit_fn=lambda sub, cfg: uniform_theta(len(sub.tickers), 0.5 / len(sub.tickers), 0.1))
        assert abs(res.weights.exponent + 1.0) < 1e-9
        assert abs(res.biases.exponent) < 1e-9
        assert [r[0] for r in res.rows] == [2, 4, 8]

    def test_failure_keeps_partial_results(self):
        panel = t5_panel(20, tickers=tuple("ABCDEFGH"))

        def fit(sub, cfg):
            if len(sub.tickers) == 8:
                raise RuntimeError("boom")
            return uniform_theta(len(sub.tickers), 1.0, 1.0)

        res = scaling_run(panel, [2, 4, 8], fit_fn=fit)
        assert len(res.rows) == 2 and "V=8" in res.error
        assert res.weights is not None

    def test_random_draws_averaged(self):
        panel = t5_panel(20, tickers=tuple("ABCDEF"))
        seen = []

        def fit(sub, cfg):
            seen.append(sub.tickers)
            return uniform_theta(len(sub.tickers), 1.0, 1.0)

        scaling_run(panel, [2, 3], subset_rule="random", draws=3, seed=5, fit_fn=fit)
        assert len(seen) == 6

    def test_validation(self):
        panel = t5_panel(20, tickers=("A", "B", "C"))
        with pytest.raises(ValueError):
            scaling_run(panel, [3, 2])
        with pytest.raises(ValueError):
            scaling_run(panel, [2, 4])

    def test_real_training(self):
        panel = t5_panel(300, tickers=("A", "B", "C", "D"))
        res = scaling_run(panel, [2, 3, 4], TrainConfig(epochs=50))
        assert len(res.rows) == 3 and res.error is None
        assert all(r[1] > 0 for r in res.rows)
