import math

import numpy as np
import pytest

from diffcoder.schedule import (
    DegenerateTimestepError,
    DenoiserPrediction,
    ScheduleError,
    convert_prediction,
    forward_sample,
    loss_weight,
    make_schedule,
    v_target,
)


def sequential_noising(x0, t, sched, rng):
    """Oracle: compose the one-step kernels instead of sampling the marginal.

    x_s = sqrt(1 - beta_s) x_{s-1} + sqrt(beta_s) eps_s for s = 1..t.
    """
    x = x0.copy()
    for s in range(1, t + 1):
        beta = sched.beta(s)
        x = math.sqrt(1.0 - beta) * x + math.sqrt(beta) * rng.standard_normal(x.shape)
    return x


class TestMakeSchedule:
    def test_sigmoid_midpoint_is_half(self):
        sched = make_schedule("sigmoid", 1000, -15.0, 15.0)
        assert sched.alpha_bar[500] == pytest.approx(0.5, abs=1e-12)

    def test_sigmoid_quarter_point(self):
        # lambda at t=250 is 7.5; expected value evaluated directly
        sched = make_schedule("sigmoid", 1000, -15.0, 15.0)
        expected = 1.0 / (1.0 + math.exp(-7.5))
        assert sched.alpha_bar[250] == pytest.approx(expected, abs=1e-15)
        assert sched.alpha_bar[250] == pytest.approx(0.999447, abs=1e-6)

    def test_sigmoid_endpoints(self):
        for T in (1, 10, 1000):
            sched = make_schedule("sigmoid", T, -15.0, 15.0)
            assert sched.alpha_bar[0] == pytest.approx(1.0 / (1.0 + math.exp(-15.0)), abs=1e-15)
            assert sched.alpha_bar[T] == pytest.approx(1.0 / (1.0 + math.exp(15.0)), abs=1e-15)

    @pytest.mark.parametrize("kind", ["sigmoid", "linear", "cosine"])
    @pytest.mark.parametrize("T", [1, 2, 10, 100, 1000])
    def test_alpha_bar_strictly_decreasing(self, kind, T):
        sched = make_schedule(kind, T)
        assert np.all(np.diff(sched.alpha_bar) < 0)
        assert np.all(sched.alpha_bar[1:] > 0)
        assert np.all(sched.alpha_bar[1:] < 1)

    @pytest.mark.parametrize("kind", ["sigmoid", "linear", "cosine"])
    def test_snr_strictly_decreasing(self, kind):
        sched = make_schedule(kind, 200)
        snrs = np.array([sched.snr(t) for t in range(1, 201)])
        assert np.all(np.diff(snrs) < 0)

    def test_sigmoid_snr_matches_exp_log_snr(self):
        # SNR(t) = exp(lambda_t) for the sigmoid kind; the float64 rounding
        # of alpha_bar near 1 limits the achievable agreement to ~1e-9
        T = 1000
        sched = make_schedule("sigmoid", T, -15.0, 15.0)
        for t in range(0, T + 1, 37):
            lam = (1.0 - t / T) * 15.0 + (t / T) * (-15.0)
            assert sched.snr(t) == pytest.approx(math.exp(lam), rel=1e-8)

    def test_snr_matches_table_formula(self):
        sched = make_schedule("sigmoid", 1000, -15.0, 15.0)
        for t in range(0, 1001, 13):
            ab = sched.alpha_bar[t]
            assert sched.snr(t) == pytest.approx(ab / (1.0 - ab), rel=1e-12)

    def test_invalid_kind(self):
        with pytest.raises(ScheduleError):
            make_schedule("quadratic", 100)

    @pytest.mark.parametrize("T", [0, -1])
    def test_invalid_T(self, T):
        with pytest.raises(ScheduleError):
            make_schedule("sigmoid", T)

    def test_invalid_lambda_range(self):
        with pytest.raises(ScheduleError):
            make_schedule("sigmoid", 100, 15.0, -15.0)
        with pytest.raises(ScheduleError):
            make_schedule("sigmoid", 100, 3.0, 3.0)

    def test_table_is_immutable(self):
        sched = make_schedule("sigmoid", 10)
        with pytest.raises(ValueError):
            sched.alpha_bar[3] = 0.5


class TestForwardSample:
    def setup_method(self):
        self.sched = make_schedule("sigmoid", 1000)
        self.rng = np.random.default_rng(7)

    def test_zero_noise(self):
        x0 = self.rng.standard_normal((8, 8))
        t = 400
        out = forward_sample(x0, t, np.zeros_like(x0), self.sched)
        np.testing.assert_allclose(out, math.sqrt(self.sched.alpha_bar[t]) * x0)

    def test_zero_signal(self):
        eps = self.rng.standard_normal((8, 8))
        t = 400
        out = forward_sample(np.zeros_like(eps), t, eps, self.sched)
        np.testing.assert_allclose(out, math.sqrt(1 - self.sched.alpha_bar[t]) * eps)

    def test_shape_mismatch(self):
        with pytest.raises(ScheduleError):
            forward_sample(np.zeros((4, 4)), 10, np.zeros((4, 5)), self.sched)

    @pytest.mark.parametrize("t", [0, 1001])
    def test_t_out_of_range(self, t):
        x = np.zeros((4, 4))
        with pytest.raises(ScheduleError):
            forward_sample(x, t, x, self.sched)

    def test_marginal_moments_monte_carlo(self):
        # mean -> sqrt(ab) x0, variance -> 1 - ab, within 3 sigma of the
        # estimator's own sampling distribution
        n = 10_000
        x0 = self.rng.standard_normal((4, 4))
        for t in (50, 500, 950):
            ab = self.sched.alpha_bar[t]
            draws = np.stack([
                forward_sample(x0, t, self.rng.standard_normal(x0.shape), self.sched)
                for _ in range(n)
            ])
            mean_err = (draws.mean(axis=0) - math.sqrt(ab) * x0).mean()
            assert abs(mean_err) < 3 * math.sqrt((1 - ab) / (n * x0.size))
            var = draws.var(axis=0, ddof=1).mean()
            dof = n * x0.size
            assert abs(var - (1 - ab)) < 3 * (1 - ab) * math.sqrt(2.0 / dof)

    def test_sequential_chain_matches_marginal(self):
        # composing one-step kernels reproduces the closed-form marginal
        n = 10_000
        t = 40
        sched = make_schedule("sigmoid", 50)
        x0 = self.rng.standard_normal((3, 3))
        ab = sched.alpha_bar[t]
        seq = np.stack([sequential_noising(x0, t, sched, self.rng) for _ in range(n)])
        mean_err = (seq.mean(axis=0) - math.sqrt(ab) * x0).mean()
        assert abs(mean_err) < 3 * math.sqrt((1 - ab) / (n * x0.size))
        var = seq.var(axis=0, ddof=1).mean()
        assert abs(var - (1 - ab)) < 3 * (1 - ab) * math.sqrt(2.0 / (n * x0.size))


class TestVTargetAndConversion:
    def setup_method(self):
        self.sched = make_schedule("sigmoid", 1000)
        self.rng = np.random.default_rng(11)

    def test_clean_data_limit(self):
        # alpha_bar -> 1 gives v -> eps
        x0 = self.rng.standard_normal((6, 6))
        eps = self.rng.standard_normal((6, 6))
        v = v_target(x0, eps, 1, self.sched)
        np.testing.assert_allclose(v, eps, atol=2e-3)

    def test_pure_noise_limit(self):
        x0 = self.rng.standard_normal((6, 6))
        eps = self.rng.standard_normal((6, 6))
        v = v_target(x0, eps, 1000, self.sched)
        np.testing.assert_allclose(v, -x0, atol=2e-3)

    def test_v_identity(self):
        # sqrt(ab) v + sqrt(1-ab) x_t reconstructs eps
        for t in (1, 137, 500, 999):
            ab = self.sched.alpha_bar[t]
            x0 = self.rng.standard_normal((6, 6))
            eps = self.rng.standard_normal((6, 6))
            x_t = forward_sample(x0, t, eps, self.sched)
            v = v_target(x0, eps, t, self.sched)
            recon = math.sqrt(ab) * v + math.sqrt(1 - ab) * x_t
            np.testing.assert_allclose(recon, eps, atol=1e-6)

    def test_v_round_trip(self):
        for t in (1, 250, 500, 750, 1000):
            x0 = self.rng.standard_normal((6, 6))
            eps = self.rng.standard_normal((6, 6))
            x_t = forward_sample(x0, t, eps, self.sched)
            pred = DenoiserPrediction(v_target(x0, eps, t, self.sched), "v")
            x0_hat, eps_hat = convert_prediction(pred, x_t, t, self.sched)
            np.testing.assert_allclose(x0_hat, x0, atol=1e-6)
            np.testing.assert_allclose(eps_hat, eps, atol=1e-6)

    def test_eps_round_trip(self):
        for t in (1, 500, 999):
            x0 = self.rng.standard_normal((6, 6))
            eps = self.rng.standard_normal((6, 6))
            x_t = forward_sample(x0, t, eps, self.sched)
            x0_hat, _ = convert_prediction(DenoiserPrediction(eps, "epsilon"), x_t, t, self.sched)
            np.testing.assert_allclose(x0_hat, x0, atol=1e-6)

    def test_all_parameterizations_agree(self):
        for t in (2, 300, 700, 998):
            x0 = self.rng.standard_normal((5, 5))
            eps = self.rng.standard_normal((5, 5))
            x_t = forward_sample(x0, t, eps, self.sched)
            preds = [
                DenoiserPrediction(eps, "epsilon"),
                DenoiserPrediction(x0, "x0"),
                DenoiserPrediction(v_target(x0, eps, t, self.sched), "v"),
            ]
            results = [convert_prediction(p, x_t, t, self.sched) for p in preds]
            for x0_hat, eps_hat in results[1:]:
                np.testing.assert_allclose(x0_hat, results[0][0], atol=1e-6)
                np.testing.assert_allclose(eps_hat, results[0][1], atol=1e-6)

    def test_degenerate_eps_conversion(self):
        # with lambda_min = -25 the terminal alpha_bar is ~1.4e-11 < 1e-8
        sched = make_schedule("sigmoid", 100, -25.0, 25.0)
        x = np.zeros((4, 4))
        with pytest.raises(DegenerateTimestepError):
            convert_prediction(DenoiserPrediction(x, "epsilon"), x, 100, sched)
        with pytest.raises(DegenerateTimestepError):
            convert_prediction(DenoiserPrediction(x, "x0"), x, 1, sched)
        # v needs no division, so it stays usable at both ends
        convert_prediction(DenoiserPrediction(x, "v"), x, 100, sched)
        convert_prediction(DenoiserPrediction(x, "v"), x, 1, sched)

    def test_bad_parameterization_tag(self):
        with pytest.raises(ScheduleError):
            DenoiserPrediction(np.zeros((2, 2)), "score")


class TestLossWeight:
    def test_truncation_floor(self):
        sched = make_schedule("sigmoid", 1000)
        # find a t with SNR < 1 (t > 500) and one with SNR > 1
        assert loss_weight(sched, 700) == 1.0
        t = 300
        assert loss_weight(sched, t) == pytest.approx(sched.snr(t), rel=1e-12)
        assert sched.snr(t) > 1

    def test_boundary(self):
        # alpha_bar = 0.5 at the midpoint => SNR = 1 => weight 1
        sched = make_schedule("sigmoid", 1000)
        assert loss_weight(sched, 500) == pytest.approx(1.0, abs=1e-12)

    def test_everywhere_at_least_one(self):
        for kind in ("sigmoid", "linear", "cosine"):
            sched = make_schedule(kind, 300)
            weights = np.array([loss_weight(sched, t) for t in range(1, 301)])
            assert np.all(weights >= 1.0)
            snrs = np.array([sched.snr(t) for t in range(1, 301)])
            high = snrs >= 1
            np.testing.assert_allclose(weights[high], snrs[high], rtol=1e-12)

    def test_t_out_of_range(self):
        sched = make_schedule("sigmoid", 10)
        with pytest.raises(ScheduleError):
            loss_weight(sched, 0)
        with pytest.raises(ScheduleError):
            loss_weight(sched, 11)
