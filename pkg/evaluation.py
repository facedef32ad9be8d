"""Evaluation harness: metrics, rolling cross-validation, feature studies, error breakdowns."""
import hashlib
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from datetime import datetime
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from baselines import (Forecaster, PersistenceForecaster, RidgeARXForecaster, SeasonalNaiveForecaster,
                       default_exogenous, slots_per_day, target_rows)
from config import RunConfig
from errors import ContractError, DivergenceError, NumericError, PlanningError
from logger import get_logger
from models import PICKUPS, Panel, TimeGrid, WindowBatch
from net import Network, NetworkConfig, init_params, input_specs, predict_windows, quantile_bins
from panel import Normalizer, build_windows, fit_normalizer, split_point, train_test_split
from train import LossConfig, OptimizerConfig, fit

log = get_logger('evaluation')

ModelFactory = Callable[[int], Forecaster]

# Failures that mark one fold / row as failed instead of aborting the whole study
FOLD_FAILURES = (DivergenceError, NumericError)


# ============ Metrics ============

def _pair(forecasts, actuals) -> Tuple[np.ndarray, np.ndarray]:
    forecasts = np.asarray(forecasts, dtype=np.float64).reshape(-1)
    actuals = np.asarray(actuals, dtype=np.float64).reshape(-1)
    if len(forecasts) != len(actuals):
        raise ContractError(f"{len(forecasts)} forecasts for {len(actuals)} actuals")
    if len(actuals) == 0:
        raise ContractError("metric of an empty series")
    return forecasts, actuals


def rmse(forecasts, actuals) -> float:
    """sqrt(mean((F - A)^2))"""
    forecasts, actuals = _pair(forecasts, actuals)
    return float(np.sqrt(np.mean((forecasts - actuals) ** 2)))


def smape(forecasts, actuals) -> float:
    """
    Symmetric MAPE in percent: 100/n * sum |F - A| / ((F + A) / 2).

    A term with F = A = 0 contributes 0. Values must be non-negative.
    """
    forecasts, actuals = _pair(forecasts, actuals)
    if (forecasts < 0).any() or (actuals < 0).any():
        raise ContractError("SMAPE is defined for non-negative series only")
    scale = (forecasts + actuals) / 2.0
    diff = np.abs(forecasts - actuals)
    terms = np.divide(diff, scale, out=np.zeros_like(diff), where=scale > 0)
    return float(100.0 * terms.mean())


@dataclass
class EvalReport:
    model: str
    slice: str
    rmse: float
    smape: float
    n: int
    failed: bool = False
    note: str = ''

    @classmethod
    def score(cls, model: str, key: str, forecasts, actuals, note: str = '') -> 'EvalReport':
        return cls(model=model, slice=key, rmse=rmse(forecasts, actuals),
                   smape=smape(forecasts, actuals), n=len(actuals), note=note)

    @classmethod
    def failure(cls, model: str, key: str, note: str) -> 'EvalReport':
        return cls(model=model, slice=key, rmse=math.nan, smape=math.nan, n=0, failed=True, note=note)

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def reports_frame(reports: Sequence[EvalReport]) -> pd.DataFrame:
    return pd.DataFrame([r.to_dict() for r in reports],
                        columns=['model', 'slice', 'rmse', 'smape', 'n', 'failed', 'note'])


def derive_seed(base: int, key: str) -> int:
    """Stable per-job seed from (base seed, job key)."""
    digest = hashlib.sha256(f'{base}:{key}'.encode()).digest()
    return int.from_bytes(digest[:8], 'big')


def _run_jobs(function, items: Sequence, jobs: int) -> List:
    """map() over items, on worker threads when jobs > 1; results in item order."""
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            return list(executor.map(function, items))
    return [function(item) for item in items]


# ============ Forecasters ============

def network_config(cfg: RunConfig, inputs, seed: int, bins=((), ())) -> NetworkConfig:
    edges, centers = bins
    return NetworkConfig(inputs=tuple(inputs), s=cfg.lookback, k=cfg.k, dilations=tuple(cfg.dilations),
                         feature_width=cfg.feature_width, head=cfg.head,
                         bins=cfg.bins if cfg.head == 'softmax' else 0,
                         bin_edges=tuple(edges), bin_centers=tuple(centers),
                         lam=cfg.lam, max_pool=cfg.max_pool, seed=seed)


def optimizer_config(cfg: RunConfig, seed: int) -> OptimizerConfig:
    return OptimizerConfig(learning_rate=cfg.learning_rate, iterations=cfg.iterations,
                           batch_size=cfg.batch_size, seed=seed, shuffle=cfg.shuffle, jobs=cfg.jobs)


class UberNetForecaster(Forecaster):
    """Trains a fresh network (and normalizer) on each training panel."""
    name = 'ubernet'

    def __init__(self, cfg: RunConfig, seed: int, include_pickups: bool = True):
        self.cfg = cfg
        self.seed = seed
        self.include_pickups = include_pickups
        self.net: Optional[Network] = None
        self.normalizer: Optional[Normalizer] = None
        self.history: List[float] = []

    @classmethod
    def from_network(cls, net: Network, normalizer: Normalizer, cfg: RunConfig) -> 'UberNetForecaster':
        model = cls(cfg, net.config.seed, include_pickups=PICKUPS in net.config.input_names)
        model.net, model.normalizer = net, normalizer
        return model

    def fit(self, train: Panel) -> 'UberNetForecaster':
        self.normalizer = fit_normalizer(train, (train.grid.start, train.grid.end))
        windows = build_windows(self.normalizer.apply(train), self.cfg.lookback, self.include_pickups)
        bins = quantile_bins(windows.targets, self.cfg.bins) if self.cfg.head == 'softmax' else ((), ())
        config = network_config(self.cfg, input_specs(train, self.include_pickups), self.seed, bins)
        net = init_params(config)
        self.net, self.history = fit(net, windows, optimizer_config(self.cfg, self.seed),
                                     LossConfig(lam=self.cfg.lam, l1=self.cfg.l1))
        return self

    def windows(self, panel: Panel, target_times) -> WindowBatch:
        """Normalized windows whose targets are exactly target_times, in that order."""
        if self.net is None:
            raise ContractError("network forecaster used before fit()")
        target_times = pd.DatetimeIndex(target_times)
        if len(target_times) == 0:
            raise ContractError("no target times to forecast")
        s = self.net.config.s
        batch = build_windows(self.normalizer.apply(panel), s, self.include_pickups,
                              target_start=target_times.min(),
                              target_end=target_times.max() + panel.grid.delta)
        index = batch.target_times.get_indexer(target_times)
        if (index < 0).any():
            raise ContractError(f"no full window of {s + 1} rows before "
                                f"{target_times[index < 0][0]}")
        return batch.subset(index)

    def forecast(self, panel: Panel, target_times) -> np.ndarray:
        batch = self.windows(panel, target_times)
        normalized = predict_windows(self.net, batch.inputs)
        return np.maximum(self.normalizer.invert_values(PICKUPS, normalized), 0.0)


class OracleForecaster(Forecaster):
    """Returns the actual pickups; a harness sanity check."""
    name = 'oracle'

    def forecast(self, panel: Panel, target_times) -> np.ndarray:
        return panel.pickups[target_rows(panel, target_times, 0)]


def make_model_factory(cfg: RunConfig, include_pickups: bool = True) -> ModelFactory:
    """Factory building the forecaster named by cfg.model (cfg.oracle wins) from a seed."""
    model = 'oracle' if cfg.oracle else cfg.model

    def factory(seed: int) -> Forecaster:
        if model == 'ubernet':
            return UberNetForecaster(cfg, seed, include_pickups)
        if model == 'persistence':
            return PersistenceForecaster()
        if model == 'seasonal_naive':
            return _DailySeasonalNaive(cfg.seasonal_period)
        if model == 'ridge_arx':
            return _ResolvedRidgeARX(cfg.ridge_lags, cfg.ridge_exog, cfg.ridge_alpha)
        if model == 'oracle':
            return OracleForecaster()
        raise ContractError(f"unknown model {model!r}")

    factory.model_name = model
    return factory


class _DailySeasonalNaive(SeasonalNaiveForecaster):
    """Seasonal naive whose period (0 = one day) resolves against the training grid."""

    def __init__(self, period: int):
        self.requested = period
        self.period = max(period, 1)

    def fit(self, train: Panel):
        self.period = self.requested or slots_per_day(train)
        return self


class _ResolvedRidgeARX(RidgeARXForecaster):
    """Ridge ARX whose exogenous list may say 'all' (every continuous feature)."""

    def __init__(self, p_lags: int, exogenous: Sequence[str], alpha: float):
        super().__init__(p_lags, (), alpha)
        self.requested = list(exogenous)

    def fit(self, train: Panel):
        if 'all' in self.requested:
            self.exogenous = tuple(default_exogenous(train))
        else:
            self.exogenous = tuple(name for name in self.requested if name in train.schema)
        return super().fit(train)


# ============ Fold plans and cross-validation ============

@dataclass(frozen=True)
class Fold:
    train_start: datetime
    train_end: datetime
    test_start: datetime
    test_end: datetime
    train_rows: Tuple[int, int]
    test_rows: Tuple[int, int]


@dataclass(frozen=True)
class FoldPlan:
    folds: Tuple[Fold, ...]

    def __len__(self):
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([f.__dict__ for f in self.folds])


def make_fold_plan(grid: TimeGrid, folds: int, min_train_fraction: float = 0.5) -> FoldPlan:
    """
    Expanding-window plan with `folds` equal contiguous test blocks.

    The first floor(n * min_train_fraction) slots are reserved for training;
    slots left over after equal blocks are carved join the first training set.
    """
    if folds < 2:
        raise PlanningError(f"rolling cross-validation needs at least 2 folds, got {folds}")
    if not 0 <= min_train_fraction < 1:
        raise PlanningError(f"min_train_fraction must be in [0, 1), got {min_train_fraction}")
    n = grid.n_slots
    reserve = int(math.floor(n * min_train_fraction))
    block = (n - reserve) // folds
    first_train = n - folds * block
    if block < 1 or first_train < 1:
        raise PlanningError(f"{n} slots cannot hold {folds} test blocks after reserving "
                            f"{min_train_fraction:.0%} for training")
    times = list(grid.slot_times()) + [pd.Timestamp(grid.end)]
    plan = []
    for i in range(folds):
        a = first_train + i * block
        b = a + block
        plan.append(Fold(train_start=times[0].to_pydatetime(), train_end=times[a].to_pydatetime(),
                         test_start=times[a].to_pydatetime(), test_end=times[b].to_pydatetime(),
                         train_rows=(0, a), test_rows=(a, b)))
    log.debug(f"Fold plan: {folds} folds of {block} slots after {first_train} training slots")
    return FoldPlan(tuple(plan))


@dataclass
class CVResult:
    folds: List[EvalReport]
    pooled: EvalReport
    residuals: pd.DataFrame

    @property
    def reports(self) -> List[EvalReport]:
        return self.folds + [self.pooled]

    def to_frame(self) -> pd.DataFrame:
        return reports_frame(self.reports)

    def to_dict(self) -> dict:
        return {'folds': [r.to_dict() for r in self.folds], 'pooled': self.pooled.to_dict(),
                'fold_mean_rmse': _nanmean([r.rmse for r in self.folds]),
                'fold_mean_smape': _nanmean([r.smape for r in self.folds])}


def _nanmean(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    values = values[~np.isnan(values)]
    return float(values.mean()) if len(values) else math.nan


def residual_records(panel: Panel, times, forecasts, key: str = '') -> pd.DataFrame:
    actuals = panel.pickups[target_rows(panel, times, 0)]
    return pd.DataFrame({'datetime': pd.DatetimeIndex(times), 'slice': key,
                         'region': panel.scope or 'all',
                         'actual': actuals, 'forecast': np.asarray(forecasts, dtype=np.float64),
                         'residual': actuals - np.asarray(forecasts, dtype=np.float64)})


def rolling_cv(panel: Panel, model_factory: ModelFactory, plan: FoldPlan, seed: int = 0,
               jobs: int = 1, model: Optional[str] = None) -> CVResult:
    """
    Fit a fresh model per fold and score one-step forecasts over each test block.

    Args:
        panel: Imputed raw panel whose grid the plan was made for
        model_factory: seed -> unfitted Forecaster
        plan: Fold plan
        seed: Base seed; fold i uses derive_seed(seed, 'fold<i>')
        jobs: Worker threads across folds

    Returns:
        Per-fold reports, a pooled report over all fold residuals, and the residual records
    """
    model = model or getattr(model_factory, 'model_name', 'model')
    if not plan.folds or plan.folds[-1].test_rows[1] > len(panel):
        raise PlanningError("fold plan does not fit the panel grid")
    panel = panel.with_levels()
    times = panel.times

    def run_fold(item):
        i, fold = item
        key = f'fold{i + 1}'
        train = panel.slice(fold.train_start, fold.train_end)
        history = panel.slice(panel.grid.start, fold.test_end)
        targets = times[fold.test_rows[0]:fold.test_rows[1]]
        assert train.times.max() < targets.min(), "fold trains on its test block"
        forecaster = model_factory(derive_seed(seed, key))
        try:
            forecaster.fit(train)
            forecasts = forecaster.forecast(history, targets)
        except FOLD_FAILURES as e:
            log.warning(f"{model} {key} failed: {e}")
            return EvalReport.failure(model, key, str(e)), None
        log.debug(f"{model} {key}: trained on {len(train)} slots, tested on {len(targets)}")
        return (EvalReport.score(model, key, forecasts, history.pickups[fold.test_rows[0]:]),
                residual_records(history, targets, forecasts, key))

    results = _run_jobs(run_fold, list(enumerate(plan.folds)), jobs)
    reports = [report for report, _ in results]
    frames = [frame for _, frame in results if frame is not None]
    residuals = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
        columns=['datetime', 'slice', 'region', 'actual', 'forecast', 'residual'])
    failed = [r.slice for r in reports if r.failed]
    note = f"failed folds: {', '.join(failed)}" if failed else ''
    if len(residuals):
        pooled = EvalReport.score(model, 'pooled', residuals['forecast'], residuals['actual'], note)
        pooled.failed = bool(failed)
    else:
        pooled = EvalReport.failure(model, 'pooled', note or 'no fold produced forecasts')
    log.info(f"{model} rolling CV: pooled RMSE {pooled.rmse:.4f}, SMAPE {pooled.smape:.3f}% over {pooled.n} slots")
    return CVResult(folds=reports, pooled=pooled, residuals=residuals)


def cv_plan(panel: Panel, cfg: RunConfig) -> FoldPlan:
    return make_fold_plan(panel.grid, cfg.folds, cfg.min_train_fraction)


# ============ Fixed-split studies ============

@dataclass
class HoldoutResult:
    report: EvalReport
    residuals: pd.DataFrame
    model: Forecaster


def evaluate_holdout(panel: Panel, cfg: RunConfig, include_pickups: bool = True,
                     key: str = 'test') -> HoldoutResult:
    """The standard pipeline: split, fit once, score one-step forecasts on the test split."""
    factory = make_model_factory(cfg, include_pickups)
    panel = panel.with_levels()
    split = split_point(panel, cfg.split_date, cfg.train_fraction)
    train, test = train_test_split(panel, split)
    if len(test) == 0:
        raise PlanningError(f"split {split} leaves no test slots")
    model = factory(derive_seed(cfg.seed, 'holdout'))
    model.fit(train)
    forecasts = model.forecast(panel, test.times)
    report = EvalReport.score(factory.model_name, key, forecasts, test.pickups)
    return HoldoutResult(report=report, residuals=residual_records(panel, test.times, forecasts, key), model=model)


def _holdout_row(panel: Panel, cfg: RunConfig, include_pickups: bool, key: str) -> EvalReport:
    try:
        return evaluate_holdout(panel, cfg, include_pickups, key).report
    except FOLD_FAILURES as e:
        log.warning(f"{key} failed: {e}")
        return EvalReport.failure(cfg.model, key, str(e))


def evaluate_feature_sets(panel: Panel, sets: Sequence[str], cfg: RunConfig) -> pd.DataFrame:
    """
    Retrain on each feature set (pickups always kept) and score on the fixed test split.

    Returns:
        One row per requested set: set, features, rmse, smape, n, failed, note
    """
    subsets = []
    for tag in sets:
        names = panel.schema.names if tag == 'all' else panel.schema.in_sets([tag]).names
        if not names and tag != 'all':
            raise ContractError(f"feature set {tag} holds no features in this panel")
        subsets.append((tag, names))

    def run(item):
        tag, names = item
        report = _holdout_row(panel.select(names), cfg, True, f'set {tag}')
        return {'set': tag, 'features': len(names), 'rmse': report.rmse, 'smape': report.smape,
                'n': report.n, 'failed': report.failed, 'note': report.note}

    return pd.DataFrame(_run_jobs(run, subsets, cfg.jobs),
                        columns=['set', 'features', 'rmse', 'smape', 'n', 'failed', 'note'])


def ablate_one_by_one(panel: Panel, cfg: RunConfig) -> pd.DataFrame:
    """
    Remove each input (pickup history first, then every schema feature) and retrain.

    Every row uses the same seed as the full-feature baseline. Removing `p`
    drops the pickup history from the inputs while keeping it as the target.

    Returns:
        One row per removed feature with rmse, smape, baseline_rmse and delta_rmse
    """
    features = [PICKUPS] + panel.schema.names
    if len(features) < 2:
        raise ContractError("ablation needs at least two input features")
    baseline = _holdout_row(panel, cfg, True, 'baseline')

    def run(name):
        if name == PICKUPS:
            report = _holdout_row(panel, cfg, False, f'without {name}')
        else:
            report = _holdout_row(panel.select(panel.schema.without(name).names), cfg, True, f'without {name}')
        return {'removed': name, 'rmse': report.rmse, 'smape': report.smape, 'n': report.n,
                'baseline_rmse': baseline.rmse, 'delta_rmse': report.rmse - baseline.rmse,
                'failed': report.failed, 'note': report.note}

    rows = _run_jobs(run, features, cfg.jobs)
    log.info(f"Ablation over {len(rows)} features (baseline RMSE {baseline.rmse:.4f})")
    return pd.DataFrame(rows, columns=['removed', 'rmse', 'smape', 'n', 'baseline_rmse',
                                       'delta_rmse', 'failed', 'note'])


# ============ Model introspection ============

def _denormalized(predictions: np.ndarray, normalizer: Optional[Normalizer]) -> np.ndarray:
    if normalizer is None:
        return predictions
    return normalizer.invert_values(PICKUPS, predictions)


def permutation_importance(net: Network, windows: WindowBatch, seed: int = 0, repeats: int = 5,
                           normalizer: Optional[Normalizer] = None, jobs: int = 1) -> pd.DataFrame:
    """
    Mean |RMSE change| when one input column is shuffled across windows.

    The whole (s+1)-row history of the column moves with its window, so the
    column's relation to the target is broken while its distribution is kept.

    Args:
        net: Trained network
        windows: Normalized test windows
        seed: Base seed; repeat r of feature f uses derive_seed(seed, 'f:r')
        repeats: Shuffles per feature
        normalizer: If given, errors are measured in pickup units

    Returns:
        feature, importance, std, rank; sorted by importance descending
    """
    if repeats < 1:
        raise ContractError(f"repeats must be >= 1, got {repeats}")
    if len(windows) < 2:
        raise ContractError("permutation importance needs at least two windows")
    targets = _denormalized(windows.targets, normalizer)
    base = rmse(_denormalized(predict_windows(net, windows.inputs), normalizer), targets)

    def score(name):
        j = windows.column_index(name)
        changes = []
        for r in range(repeats):
            order = np.random.default_rng(derive_seed(seed, f'{name}:{r}')).permutation(len(windows))
            inputs = windows.inputs.copy()
            inputs[:, :, j] = windows.inputs[order, :, j]
            shuffled = rmse(_denormalized(predict_windows(net, inputs), normalizer), targets)
            changes.append(abs(shuffled - base))
        return {'feature': name, 'importance': float(np.mean(changes)), 'std': float(np.std(changes))}

    frame = pd.DataFrame(_run_jobs(score, list(windows.columns), jobs))
    frame = frame.sort_values('importance', ascending=False, kind='mergesort').reset_index(drop=True)
    frame['rank'] = np.arange(1, len(frame) + 1)
    frame['method'] = 'permutation'
    log.info(f"Permutation importance over {len(windows)} windows, base RMSE {base:.4f}")
    return frame


def partial_dependence(net: Network, panel: Panel, feature: str, grid_points: int,
                       normalizer: Normalizer, values: Optional[Sequence[float]] = None) -> pd.DataFrame:
    """
    Mean prediction with `feature` overwritten by each grid value in every window.

    Args:
        net: Trained network
        panel: Raw imputed panel (typically the test range plus its lookback)
        feature: Continuous input column
        grid_points: Number of grid values (evenly spaced over the observed range)
        normalizer: Statistics the network was trained with
        values: Explicit grid in raw units, overriding grid_points

    Returns:
        Two columns: `feature` value and mean_prediction, both in raw units
    """
    spec = next((s for s in net.config.inputs if s.name == feature), None)
    if spec is None:
        raise ContractError(f"feature {feature!r} is not a network input")
    if spec.categorical:
        raise ContractError(f"partial dependence needs a continuous feature; {feature} is categorical")
    if values is None:
        if grid_points < 2:
            raise ContractError(f"grid_points must be >= 2, got {grid_points}")
        observed = panel.frame[feature].to_numpy(dtype=np.float64)
        values = np.linspace(observed.min(), observed.max(), grid_points)
    values = np.asarray(values, dtype=np.float64)

    windows = build_windows(normalizer.apply(panel), net.config.s, PICKUPS in net.config.input_names)
    j = windows.column_index(feature)
    means = []
    for value in values:
        inputs = windows.inputs.copy()
        inputs[:, :, j] = normalizer.apply_values(feature, value)
        means.append(float(_denormalized(predict_windows(net, inputs), normalizer).mean()))
    return pd.DataFrame({feature: values, 'mean_prediction': means})


# ============ Error breakdown ============

BREAKDOWN_KEYS = ('hour', 'region')


def error_breakdown(records: pd.DataFrame, by: str = 'hour', model: str = '') -> List[EvalReport]:
    """
    RMSE and SMAPE per hour of day or per region.

    Args:
        records: Residual records with datetime, actual, forecast (and region)
        by: 'hour' or 'region'
    """
    if by not in BREAKDOWN_KEYS:
        raise ContractError(f"breakdown key must be one of {BREAKDOWN_KEYS}, got {by!r}")
    records = records.dropna(subset=['forecast', 'actual'])
    if by == 'hour':
        keys = pd.DatetimeIndex(records['datetime']).hour
    else:
        if 'region' not in records.columns:
            raise ContractError("residual records carry no region column")
        keys = records['region'].astype(str).to_numpy()

    reports = []
    for key, group in records.groupby(keys, sort=True):
        if group.empty:
            log.info(f"Breakdown slice {key} is empty; omitted")
            continue
        reports.append(EvalReport.score(model, str(key), group['forecast'], group['actual']))
    return reports


# ============ Comparison and tuning ============

def compare_models(panel: Panel, cfg: RunConfig, models: Sequence[str],
                   plan: Optional[FoldPlan] = None) -> pd.DataFrame:
    """Run every named model through the same rolling CV; one row per model."""
    plan = plan or cv_plan(panel, cfg)
    rows = []
    for name in models:
        result = rolling_cv(panel, make_model_factory(replace(cfg, model=name, oracle=False)),
                            plan, seed=cfg.seed, jobs=cfg.jobs, model=name)
        rows.append({'model': name, 'rmse': result.pooled.rmse, 'smape': result.pooled.smape,
                     'n': result.pooled.n, 'fold_mean_rmse': result.to_dict()['fold_mean_rmse'],
                     'failed': result.pooled.failed, 'note': result.pooled.note})
    return pd.DataFrame(rows, columns=['model', 'rmse', 'smape', 'n', 'fold_mean_rmse', 'failed', 'note'])


def grid_search(panel: Panel, cfg: RunConfig, grid: Dict[str, list]) -> pd.DataFrame:
    """
    Score every combination of `grid` on a validation tail of the training range.

    The training range (before the configured split) is itself split by
    train_fraction; the test range is never touched.

    Returns:
        One row per combination, sorted by validation RMSE (failed rows last)
    """
    if not grid:
        raise ContractError("empty tuning grid")
    known = set(RunConfig.keys())
    unknown = [key for key in grid if key not in known]
    if unknown:
        raise ContractError(f"unknown tuning keys: {', '.join(unknown)}")
    panel = panel.with_levels()
    train, _ = train_test_split(panel, split_point(panel, cfg.split_date, cfg.train_fraction))
    keys = sorted(grid)
    combos = [dict(zip(keys, values)) for values in itertools.product(*(grid[key] for key in keys))]

    def run(combo):
        trial = replace(cfg.update(combo), split_date='')
        report = _holdout_row(train, trial, True, 'validation')
        return {**combo, 'rmse': report.rmse, 'smape': report.smape, 'n': report.n,
                'failed': report.failed, 'note': report.note}

    frame = pd.DataFrame(_run_jobs(run, combos, cfg.jobs))
    frame = frame.sort_values('rmse', na_position='last', kind='mergesort').reset_index(drop=True)
    log.info(f"Grid search over {len(combos)} combinations; best RMSE {frame['rmse'].iloc[0]:.4f}")
    return frame
