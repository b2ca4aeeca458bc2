import numpy as np
import pytest

from helioforge.data import MINUTES_PER_DAY
from helioforge.metrics import (
    EvaluationResult, delta_rmse_pct, evaluate_predictions, rmse, scale_diagnostic, training_effort,
)
from helioforge.synthetic import SiteRegime, clear_sky_envelope, generate_site


class TestRmse:
    def test_examples(self):
        assert rmse([3.0, 4.0], [3.0, 4.0]) == 0
        assert rmse([1, 2], [0, 0]) == pytest.approx(1.5811388300841898, abs=1e-15)

    def test_summation_oracle(self, rng):
        for _ in range(20):
            n = int(rng.integers(1, 500))
            p, t = rng.normal(size=n) * 100, rng.normal(size=n) * 100
            total = 0.0
            for a, b in zip(p.tolist(), t.tolist()):
                total += (a - b) ** 2
            assert abs(rmse(p, t) - (total / n) ** 0.5) <= 1e-12 * max(1.0, rmse(p, t))

    def test_rejections(self):
        with pytest.raises(ValueError):
            rmse([1, 2], [1])
        with pytest.raises(ValueError):
            rmse([], [])


class TestTrainingEffort:
    def test_exact_products(self):
        assert training_effort(12, 85_278) == 1_023_336
        assert training_effort(1, 4321) == 4321

    @pytest.mark.parametrize("epochs,size,expected,rounded", [
        (11.8, 85_278, 1_006_280.4, "1.01"),
        (9.6, 438_172, 4_206_451.2, "4.21"),
    ])
    def test_reference_products_round_to_two_decimals(self, epochs, size, expected, rounded):
        te = training_effort(epochs, size)
        assert te == pytest.approx(expected, abs=1e-6)
        assert f"{te / 1e6:.2f}" == rounded

    def test_rejections(self):
        with pytest.raises(ValueError):
            training_effort(0, 10)


class TestDelta:
    def test_examples(self):
        assert delta_rmse_pct(100.0, 100.0) == 0.0
        assert delta_rmse_pct(90.0, 100.0) == pytest.approx(-10.0)
        assert delta_rmse_pct(40.0, 100.0) == pytest.approx(-60.0)

    def test_bad_baseline(self):
        for b in (0.0, -1.0):
            with pytest.raises(ValueError):
                delta_rmse_pct(1.0, b)


class TestEvaluation:
    def test_perfect_predictor(self):
        truth = np.arange(6.0)
        res = evaluate_predictions(truth, truth, [1, 1, 1, 2, 2, 2], {1: "sunny", 2: "cloudy"})
        assert (res.rmse_overall, res.rmse_sunny, res.rmse_cloudy) == (0, 0, 0)
        assert (res.n_samples, res.n_sunny, res.n_cloudy) == (6, 3, 3)

    def test_stratification_identity(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 300))
            days = rng.integers(0, 5, size=n)
            labels = {d: ("sunny" if d % 2 else "cloudy") for d in range(5)}
            res = evaluate_predictions(rng.normal(size=n), rng.normal(size=n), days, labels)
            assert res.check_stratification()
        assert not EvaluationResult(1.0, 1.0, 3.0, 2, 1, 1).check_stratification()

    def test_unlabelled_day_named(self):
        with pytest.raises(ValueError, match="1970-01-03"):
            evaluate_predictions([1.0, 2.0], [1.0, 2.0], [1, 2], {1: "sunny"})

    def test_envelope_predictor_hits_noise_floor(self):
        regime = SiteRegime("clear", "irradiance", 1000.0, 0.0, day_count=5, image_size=8, noise_sigma=0.01)
        ds, labels = generate_site(regime)
        m = ds.times % MINUTES_PER_DAY - (MINUTES_PER_DAY // 2 - regime.day_length_minutes // 2)
        env = clear_sky_envelope(m, regime.day_length_minutes)
        pred = regime.peak_scale * env
        res = evaluate_predictions(pred, ds.values, ds.times // MINUTES_PER_DAY, {d.day: d.label for d in labels})
        # multiplicative noise: floor = sigma * peak * rms(envelope)
        floor = regime.noise_sigma * regime.peak_scale * np.sqrt(np.mean(env ** 2))
        assert abs(res.rmse_overall - floor) <= 3 * regime.noise_sigma * regime.peak_scale * 0.1
        assert res.rmse_overall <= 3 * regime.noise_sigma * regime.peak_scale
        assert res.n_cloudy == 0 and np.isnan(res.rmse_cloudy)


class TestScaleDiagnostic:
    def test_examples(self, rng):
        truth = rng.uniform(0, 10, size=50)
        half = scale_diagnostic(0.5 * truth, truth)
        assert half.best_factor == pytest.approx(2.0, rel=1e-14) and half.rmse_after < 1e-12
        assert scale_diagnostic(truth, truth).best_factor == pytest.approx(1.0, rel=1e-14)
        assert half.pearson_r == pytest.approx(1.0)

    def test_grid_search_oracle(self, rng):
        grid = np.arange(0, 5 + 1e-9, 1e-3)
        for _ in range(10):
            truth = rng.uniform(0, 100, size=200)
            pred = truth * rng.uniform(0.3, 3) + rng.normal(scale=5, size=200)
            d = scale_diagnostic(pred, truth)
            brute = min(rmse(c * pred, truth) for c in grid)
            assert d.rmse_after <= brute + 1e-12
            assert d.rmse_after <= d.rmse_before
            # the grid optimum is within half a grid step of c*
            assert abs(grid[np.argmin([rmse(c * pred, truth) for c in grid])] - d.best_factor) <= 5e-4 + 1e-12

    def test_rejections(self):
        with pytest.raises(ValueError):
            scale_diagnostic(np.zeros(5), np.arange(5.0))
        with pytest.raises(ValueError):
            scale_diagnostic(np.ones(5), np.full(5, 2.0))
