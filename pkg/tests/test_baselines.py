"""Tests for the reference forecasters."""
import numpy as np
import pytest

from baselines import (PersistenceForecaster, RidgeARXForecaster, SeasonalNaiveForecaster, default_exogenous,
                       fit_ridge_arx, persistence, predict_ridge_arx, seasonal_naive, slots_per_day, target_rows)
from config import RunConfig
from errors import ContractError, NumericError, SchemaError
from evaluation import make_model_factory
from models import PICKUPS


@pytest.fixture
def arx_panel(panel_factory):
    """Noise-free y(t) = 5 + 0.5 y(t-1) + 2 x(t)."""
    rng = np.random.default_rng(4)
    x = rng.uniform(0, 5, 200)
    y = np.empty(200)
    y[0] = 10.0
    for t in range(1, 200):
        y[t] = 5.0 + 0.5 * y[t - 1] + 2.0 * x[t]
    return panel_factory({PICKUPS: y, 'x': x})


class TestSeriesForecasts:

    def test_seasonal_naive_example(self):
        np.testing.assert_array_equal(seasonal_naive([1, 2, 3, 4], 2, 2), [3, 4])

    def test_seasonal_naive_recurses_past_one_period(self):
        np.testing.assert_array_equal(seasonal_naive([1, 2, 3], 2, 5), [2, 3, 2, 3, 2])

    def test_period_one_is_persistence(self):
        history = [4.0, 9.0, 2.0, 6.0]
        for horizon in range(5):
            np.testing.assert_array_equal(seasonal_naive(history, 1, horizon), persistence(history, horizon))

    def test_persistence(self):
        np.testing.assert_array_equal(persistence([3, 5, 7], 3), [7, 7, 7])
        assert len(persistence([3], 0)) == 0

    def test_contracts(self):
        with pytest.raises(ContractError):
            seasonal_naive([1, 2], 3, 1)
        with pytest.raises(ContractError):
            seasonal_naive([1, 2], 0, 1)
        with pytest.raises(ContractError):
            persistence([], 2)
        with pytest.raises(ContractError):
            persistence([1], -1)


class TestRidgeARX:

    def test_recovers_generating_coefficients(self, arx_panel):
        params = fit_ridge_arx(arx_panel, 1, ['x'], alpha=0.0)
        assert params.intercept == pytest.approx(5.0, abs=1e-8)
        np.testing.assert_allclose(params.lag_coefficients, [0.5], atol=1e-8)
        np.testing.assert_allclose(params.exogenous_coefficients, [2.0], atol=1e-8)

    def test_huge_penalty_shrinks_to_mean(self, arx_panel):
        params = fit_ridge_arx(arx_panel, 2, ['x'], alpha=1e12)
        assert np.abs(params.coefficients).max() < 1e-6
        assert params.intercept == pytest.approx(arx_panel.pickups[2:].mean(), rel=1e-6)

    def test_no_lags_no_exogenous_is_the_mean(self, arx_panel):
        params = fit_ridge_arx(arx_panel, 0, [], alpha=1.0)
        assert len(params.coefficients) == 0
        assert params.intercept == pytest.approx(arx_panel.pickups.mean(), rel=1e-12)

    def test_matches_normal_equations(self, panel_factory):
        rng = np.random.default_rng(9)
        panel = panel_factory({PICKUPS: rng.integers(0, 50, 120), 'a': rng.standard_normal(120),
                               'b': rng.standard_normal(120)})
        p_lags, alpha = 3, 2.5
        y = panel.pickups
        a, b = panel.frame['a'].to_numpy(), panel.frame['b'].to_numpy()
        X, target = [], []
        for t in range(p_lags, len(y)):
            X.append([1.0] + [y[t - lag] for lag in range(1, p_lags + 1)] + [a[t], b[t]])
            target.append(y[t])
        X, target = np.array(X), np.array(target)
        D = np.eye(X.shape[1]) * alpha
        D[0, 0] = 0.0
        expected = np.linalg.solve(X.T @ X + D, X.T @ target)

        params = fit_ridge_arx(panel, p_lags, ['a', 'b'], alpha)
        np.testing.assert_allclose(np.concatenate([[params.intercept], params.coefficients]), expected,
                                   rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(predict_ridge_arx(params, panel), X @ expected, rtol=1e-8)

    def test_duplicate_columns_are_singular(self, arx_panel):
        with pytest.raises(NumericError) as info:
            fit_ridge_arx(arx_panel, 1, ['x', 'x'], alpha=0.0)
        assert info.value.exit_code == 1
        fit_ridge_arx(arx_panel, 1, ['x', 'x'], alpha=0.1)

    def test_too_few_rows(self, panel_factory):
        panel = panel_factory({PICKUPS: [1.0, 2.0, 3.0]})
        with pytest.raises(ContractError):
            fit_ridge_arx(panel, 3, [], alpha=1.0)

    def test_fewest_rows_fit_with_penalty(self, panel_factory):
        panel = panel_factory({PICKUPS: [4.0, 6.0, 9.0]})
        params = fit_ridge_arx(panel, 2, [], alpha=1.0)
        assert params.coefficients.shape == (2,)
        assert predict_ridge_arx(params, panel).shape == (1,)
        with pytest.raises(NumericError):
            fit_ridge_arx(panel, 2, [], alpha=0.0)

    def test_unknown_exogenous(self, arx_panel):
        with pytest.raises(SchemaError, match='temp'):
            fit_ridge_arx(arx_panel, 1, ['temp'])

    def test_negative_alpha(self, arx_panel):
        with pytest.raises(ContractError):
            fit_ridge_arx(arx_panel, 1, ['x'], alpha=-1.0)


class TestForecasters:

    def test_persistence_forecaster_reads_previous_slot(self, panel_factory):
        panel = panel_factory({PICKUPS: [3.0, 8.0, 5.0, 9.0]})
        forecasts = PersistenceForecaster().fit(panel).forecast(panel, panel.times[1:])
        np.testing.assert_array_equal(forecasts, [3.0, 8.0, 5.0])

    def test_first_slot_has_no_history(self, panel_factory):
        panel = panel_factory({PICKUPS: [3.0, 8.0]})
        with pytest.raises(ContractError):
            PersistenceForecaster().forecast(panel, panel.times[:1])

    def test_off_grid_targets(self, panel_factory):
        panel = panel_factory({PICKUPS: [3.0, 8.0, 1.0]})
        with pytest.raises(ContractError):
            PersistenceForecaster().forecast(panel, panel.times[1:] + np.timedelta64(1, 'm'))

    def test_seasonal_forecaster_reproduces_weekly_series(self, panel_factory):
        week = 7 * 96
        rng = np.random.default_rng(2)
        pattern = rng.integers(0, 200, week).astype(float)
        panel = panel_factory({PICKUPS: np.tile(pattern, 3)}, start=np.datetime64('2014-04-07T00:00').item())
        model = SeasonalNaiveForecaster(week).fit(panel.slice(panel.grid.start, panel.times[week]))
        targets = panel.times[week:]
        np.testing.assert_array_equal(model.forecast(panel, targets), panel.pickups[week:])

    def test_seasonal_forecaster_needs_a_full_period(self, panel_factory):
        panel = panel_factory({PICKUPS: [1.0, 2.0, 3.0]})
        with pytest.raises(ContractError):
            SeasonalNaiveForecaster(2).forecast(panel, panel.times[1:])

    def test_ridge_forecaster_clips_at_zero(self, panel_factory):
        y = np.array([0.0, 10.0] * 20)
        panel = panel_factory({PICKUPS: y})
        model = RidgeARXForecaster(1, alpha=0.0).fit(panel)
        raw = predict_ridge_arx(model.params, panel, panel.times[1:])
        forecasts = model.forecast(panel, panel.times[1:])
        np.testing.assert_allclose(forecasts, np.maximum(raw, 0.0))
        assert (forecasts >= 0).all()

    def test_ridge_forecaster_before_fit(self, arx_panel):
        with pytest.raises(ContractError):
            RidgeARXForecaster(1).forecast(arx_panel, arx_panel.times[5:])

    def test_target_rows(self, panel_factory):
        panel = panel_factory({PICKUPS: [1.0, 2.0, 3.0, 4.0]})
        np.testing.assert_array_equal(target_rows(panel, panel.times[2:], 2), [2, 3])
        with pytest.raises(ContractError):
            target_rows(panel, panel.times[1:], 2)


class TestFactoryResolution:

    def test_ridge_all_uses_continuous_features(self, driver_panel):
        factory = make_model_factory(RunConfig(model='ridge_arx', ridge_exog=['all'], ridge_lags=2))
        model = factory(0).fit(driver_panel)
        assert model.exogenous == ('g1', 'z1')
        assert default_exogenous(driver_panel) == ['g1', 'z1']

    def test_ridge_skips_features_outside_panel(self, driver_panel):
        factory = make_model_factory(RunConfig(model='ridge_arx', ridge_exog=['g1', 'temp'], ridge_lags=2))
        assert factory(0).fit(driver_panel).exogenous == ('g1',)

    def test_seasonal_period_defaults_to_one_day(self, driver_panel, panel_factory):
        model = make_model_factory(RunConfig(model='seasonal_naive'))(0).fit(driver_panel)
        assert model.period == 96 == slots_per_day(driver_panel)
        half_hourly = panel_factory({PICKUPS: [1.0] * 4}, interval=30)
        assert slots_per_day(half_hourly) == 48

    def test_unknown_model(self):
        with pytest.raises(ContractError):
            make_model_factory(RunConfig(model='arima'))(0)
