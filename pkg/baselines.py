"""Reference forecasters: seasonal naive, persistence, ridge autoregression with exogenous inputs.

Every forecaster here and in evaluation.py follows the same two-call
protocol so the comparison harness treats them identically:

    model.fit(train_panel)
    model.forecast(panel, target_times) -> one-step pickup forecasts

`forecast` sees the observed history before each target time (teacher
forcing) and returns denormalized counts clipped at 0.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from errors import ContractError, NumericError, SchemaError
from logger import get_logger
from models import PICKUPS, Panel

log = get_logger('baselines')


# ============ Series forecasts ============

def persistence(history: Sequence[float], horizon: int) -> np.ndarray:
    """Repeat the last observed value `horizon` times."""
    history = np.asarray(history, dtype=np.float64)
    if len(history) == 0:
        raise ContractError("persistence needs at least one observation")
    if horizon < 0:
        raise ContractError(f"horizon must be >= 0, got {horizon}")
    return np.full(horizon, history[-1])


def seasonal_naive(history: Sequence[float], period: int, horizon: int) -> np.ndarray:
    """
    Repeat the value one period back; beyond one period, recurse on own predictions.

    Args:
        history: Observed series, oldest first
        period: Season length in slots
        horizon: Number of steps to forecast
    """
    history = np.asarray(history, dtype=np.float64)
    if period < 1:
        raise ContractError(f"period must be >= 1, got {period}")
    if len(history) < period:
        raise ContractError(f"seasonal naive needs {period} observations, got {len(history)}")
    if horizon < 0:
        raise ContractError(f"horizon must be >= 0, got {horizon}")
    extended = np.concatenate([history, np.empty(horizon)])
    n = len(history)
    for h in range(horizon):
        extended[n + h] = extended[n + h - period]
    return extended[n:]


# ============ Ridge ARX ============

@dataclass(frozen=True)
class RidgeARXParams:
    p_lags: int
    exogenous: tuple
    alpha: float
    intercept: float
    coefficients: np.ndarray  # lags 1..p, then exogenous in order

    def __post_init__(self):
        if self.alpha < 0:
            raise ContractError(f"ridge alpha must be >= 0, got {self.alpha}")
        if len(self.coefficients) != self.p_lags + len(self.exogenous):
            raise ContractError("coefficient count must equal p_lags + number of exogenous features")

    @property
    def lag_coefficients(self) -> np.ndarray:
        return self.coefficients[:self.p_lags]

    @property
    def exogenous_coefficients(self) -> np.ndarray:
        return self.coefficients[self.p_lags:]


def _design(pickups: np.ndarray, exog: np.ndarray, rows: np.ndarray, p_lags: int) -> np.ndarray:
    """[1, y(t-1) .. y(t-p), exog(t)] for each target row t."""
    columns = [np.ones(len(rows))]
    columns += [pickups[rows - lag] for lag in range(1, p_lags + 1)]
    columns += [exog[rows, j] for j in range(exog.shape[1])]
    return np.column_stack(columns)


def _exogenous_matrix(panel: Panel, exogenous: Sequence[str]) -> np.ndarray:
    absent = [name for name in exogenous if name not in panel.frame.columns]
    if absent:
        raise SchemaError(f"ridge exogenous features not in panel: {', '.join(absent)}")
    if not exogenous:
        return np.zeros((len(panel), 0))
    return panel.frame[list(exogenous)].to_numpy(dtype=np.float64)


def fit_ridge_arx(panel: Panel, p_lags: int, exogenous: Sequence[str] = (), alpha: float = 1.0) -> RidgeARXParams:
    """
    Solve (X'X + alpha*D) beta = X'y directly, D leaving the intercept unpenalized.

    Args:
        panel: Training panel (raw pickup units)
        p_lags: Number of lagged pickup values
        exogenous: Feature names read at the target time
        alpha: Ridge strength

    Raises:
        NumericError: singular system (only possible with alpha = 0)
    """
    if p_lags < 0:
        raise ContractError(f"p_lags must be >= 0, got {p_lags}")
    if alpha < 0:
        raise ContractError(f"ridge alpha must be >= 0, got {alpha}")
    exogenous = tuple(exogenous)
    pickups = panel.pickups
    exog = _exogenous_matrix(panel, exogenous)
    rows = np.arange(p_lags, len(panel))
    width = 1 + p_lags + len(exogenous)
    if len(panel) < width:
        raise ContractError(f"ridge ARX needs at least {width} training rows, got {len(panel)}")

    X = _design(pickups, exog, rows, p_lags)
    y = pickups[rows]
    penalty = np.eye(width) * alpha
    penalty[0, 0] = 0.0
    system = X.T @ X + penalty
    if np.linalg.matrix_rank(system) < width:
        raise NumericError("singular normal equations; use ridge alpha > 0", where='ridge_arx')
    try:
        beta = np.linalg.solve(system, X.T @ y)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"normal equations could not be solved ({e}); use ridge alpha > 0",
                           where='ridge_arx') from e
    log.debug(f"Ridge ARX fit: p={p_lags}, exog={list(exogenous)}, alpha={alpha}, rows={len(rows)}")
    return RidgeARXParams(p_lags=p_lags, exogenous=exogenous, alpha=float(alpha),
                          intercept=float(beta[0]), coefficients=beta[1:])


def predict_ridge_arx(params: RidgeARXParams, panel: Panel, target_times: Optional[Sequence] = None) -> np.ndarray:
    """One-step ridge forecasts at target_times from observed lags and current exogenous values.

    Without target_times every row that has p_lags rows of history is forecast.
    """
    if target_times is None:
        target_times = panel.times[params.p_lags:]
    rows = target_rows(panel, target_times, params.p_lags)
    X = _design(panel.pickups, _exogenous_matrix(panel, params.exogenous), rows, params.p_lags)
    return X[:, 1:] @ params.coefficients + params.intercept


# ============ Forecaster protocol ============

def target_rows(panel: Panel, target_times, min_history: int = 1) -> np.ndarray:
    """Row positions of target_times, each with at least `min_history` rows before it."""
    rows = panel.times.get_indexer(pd.DatetimeIndex(target_times))
    if (rows < 0).any():
        raise ContractError("target times must lie on the panel grid")
    if len(rows) and rows.min() < min_history:
        raise ContractError(f"forecast needs {min_history} rows of history before the first target")
    return rows


class Forecaster:
    """Base class for one-step pickup forecasters."""
    name = 'forecaster'

    def fit(self, train: Panel) -> 'Forecaster':
        return self

    def forecast(self, panel: Panel, target_times) -> np.ndarray:
        raise NotImplementedError


class PersistenceForecaster(Forecaster):
    name = 'persistence'

    def forecast(self, panel: Panel, target_times) -> np.ndarray:
        rows = target_rows(panel, target_times)
        return np.maximum(panel.pickups[rows - 1], 0.0)


class SeasonalNaiveForecaster(Forecaster):
    """One-step seasonal naive: the value one period before the target."""
    name = 'seasonal_naive'

    def __init__(self, period: int):
        if period < 1:
            raise ContractError(f"period must be >= 1, got {period}")
        self.period = period

    def forecast(self, panel: Panel, target_times) -> np.ndarray:
        rows = target_rows(panel, target_times, self.period)
        return np.maximum(panel.pickups[rows - self.period], 0.0)


class RidgeARXForecaster(Forecaster):
    name = 'ridge_arx'

    def __init__(self, p_lags: int, exogenous: Sequence[str] = (), alpha: float = 1.0):
        self.p_lags = p_lags
        self.exogenous = tuple(exogenous)
        self.alpha = alpha
        self.params: Optional[RidgeARXParams] = None

    def fit(self, train: Panel) -> 'RidgeARXForecaster':
        self.params = fit_ridge_arx(train, self.p_lags, self.exogenous, self.alpha)
        return self

    def forecast(self, panel: Panel, target_times) -> np.ndarray:
        if self.params is None:
            raise ContractError("ridge ARX forecaster used before fit()")
        return np.maximum(predict_ridge_arx(self.params, panel, target_times), 0.0)


def slots_per_day(panel: Panel) -> int:
    return int(24 * 60 // panel.grid.interval_minutes)


def default_exogenous(panel: Panel) -> List[str]:
    """Continuous schema features, the default ridge covariates."""
    return [spec.name for spec in panel.schema if not spec.categorical]
