"""Panel construction - pickup ingestion, slot aggregation, feature joins, imputation, normalization, windowing."""
import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Dict, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from errors import (ContractError, FormatError, ImputationError, ParseError, RangeError,
                    SchemaError, SizeError)
from logger import get_logger
from models import (CALENDAR_FEATURES, PICKUPS, FeatureSchema, FeatureSpec, FeatureTables, Panel,
                    RawPickupEvent, TimeGrid, WindowBatch, region_adjacency)

log = get_logger('panel')

TIMESTAMP_FORMAT = '%Y-%m-%dT%H:%M'


# ============ Ingestion ============

def _parse_stamps(values: pd.Series) -> pd.Series:
    return pd.to_datetime(values, format='ISO8601', errors='coerce')


def parse_pickups(csv_source: Union[str, TextIO], path: str = None) -> List[RawPickupEvent]:
    """
    Parse a pickups CSV into events, in file order.

    Args:
        csv_source: Path or open text stream; header must name `datetime` and `region`
        path: Name used in error messages when csv_source is a stream

    Returns:
        One RawPickupEvent per data line
    """
    if path is None and isinstance(csv_source, str):
        path = csv_source
    try:
        frame = pd.read_csv(csv_source, dtype=str, keep_default_na=False, skip_blank_lines=False)
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{path or 'pickups'}: no header line")

    missing = {'datetime', 'region'} - set(frame.columns)
    if missing:
        raise SchemaError(f"{path or 'pickups'}: missing column(s) {', '.join(sorted(missing))}")
    if frame.empty:
        log.warning(f"No pickup records in {path or 'stream'}")
        return []

    stamps = _parse_stamps(frame['datetime'].str.strip())
    bad = np.flatnonzero(stamps.isna().to_numpy())
    if len(bad):
        row = int(bad[0])
        # header is line 1
        raise ParseError(f"malformed datetime {frame['datetime'].iloc[row]!r}", line=row + 2, path=path)

    regions = frame['region'].str.strip()
    empty = np.flatnonzero((regions == '').to_numpy())
    if len(empty):
        raise ParseError("empty region", line=int(empty[0]) + 2, path=path)

    events = [RawPickupEvent(ts.to_pydatetime(), region)
              for ts, region in zip(stamps, regions)]
    log.debug(f"Parsed {len(events)} pickup events from {path or 'stream'}")
    return events


def aggregate_counts(events: Sequence[RawPickupEvent], grid: TimeGrid,
                     scope: Optional[str] = None) -> Panel:
    """
    Count pickups per half-open slot [slot_start, slot_start + delta).

    Events outside the grid or outside `scope` are not counted and are
    reported as `dropped_events`, so sum(p) + dropped == len(events).
    """
    grid.validate()
    slots = grid.slot_times()
    n = len(slots)

    times = pd.DatetimeIndex([e.timestamp for e in events])
    regions = np.array([e.region for e in events], dtype=object)

    inside = (times >= grid.start) & (times < grid.end)
    in_scope = regions == scope if scope else np.ones(len(events), dtype=bool)
    counted = inside & in_scope

    positions = ((times[counted] - pd.Timestamp(grid.start)) // pd.Timedelta(grid.delta)).to_numpy()
    codes, names = pd.factorize(regions[counted], sort=True)
    if scope and not len(names):
        names = pd.Index([scope])
    matrix = np.zeros((n, len(names)), dtype=np.int64)
    np.add.at(matrix, (positions.astype(np.int64), codes), 1)

    region_counts = pd.DataFrame(matrix, index=slots, columns=[str(r) for r in names])
    frame = pd.DataFrame({PICKUPS: matrix.sum(axis=1)}, index=slots)
    mask = pd.DataFrame(index=slots)

    outside = int((~inside).sum())
    out_of_scope = int((inside & ~in_scope).sum())
    dropped = len(events) - int(counted.sum())
    log.info(f"Aggregated {int(counted.sum())} events into {n} slots of {grid.interval_minutes} min "
             f"({dropped} dropped: {outside} outside grid, {out_of_scope} out of scope)")

    return Panel(grid=grid, frame=frame, mask=mask, schema=FeatureSchema(), scope=scope,
                 region_counts=region_counts, dropped_events=dropped)


def load_schema(path: str) -> FeatureSchema:
    """Read a `name,set,kind,spatial[,levels]` schema CSV."""
    try:
        frame = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise SchemaError(f"{path}: empty schema file")
    return FeatureSchema.from_frame(frame)


def load_feature_tables(directory: str) -> FeatureTables:
    """
    Load every CSV under `directory` as a feature table.

    Tables with a `datetime` column are time-keyed (set A), tables with a
    `region` column are region-keyed (sets B-D).
    """
    tables = FeatureTables()
    if not directory:
        return tables
    for name in sorted(os.listdir(directory)):
        if not name.lower().endswith('.csv'):
            continue
        full = os.path.join(directory, name)
        table = pd.read_csv(full)
        if 'datetime' in table.columns:
            stamps = _parse_stamps(table['datetime'].astype(str))
            bad = np.flatnonzero(stamps.isna().to_numpy())
            if len(bad):
                raise ParseError(f"malformed datetime {table['datetime'].iloc[int(bad[0])]!r}",
                                 line=int(bad[0]) + 2, path=full)
            table = table.assign(datetime=stamps)
            tables.time_tables.append(table)
        elif 'region' in table.columns:
            tables.region_tables.append(table.assign(region=table['region'].astype(str)))
        else:
            raise SchemaError(f"{full}: feature table needs a 'datetime' or 'region' column")
        log.debug(f"Loaded feature table {name} ({len(table)} rows, columns={list(table.columns)})")
    return tables


def load_adjacency(path: Optional[str]) -> Dict[str, set]:
    if not path:
        return {}
    return region_adjacency(pd.read_csv(path, dtype=str))


# ============ Feature joins ============

def _mode(values: pd.Series) -> float:
    """Most frequent value; ties go to the smallest."""
    counts = values.value_counts()
    return float(min(counts[counts == counts.max()].index))


def calendar_feature(name: str, times: pd.DatetimeIndex) -> np.ndarray:
    if name in ('hour', 'hd'):
        values = times.hour
    elif name == 'day':
        values = times.dayofweek
    elif name == 'wed':
        values = (times.dayofweek >= 5).astype(int)
    elif name == 'month':
        values = times.month - 1
    else:
        raise SchemaError(f"not a calendar feature: {name}")
    return np.asarray(values, dtype=np.float64)


def _time_average(source: pd.DataFrame, spec: FeatureSpec, grid: TimeGrid) -> np.ndarray:
    stamps = pd.DatetimeIndex(source['datetime'])
    values = pd.to_numeric(source[spec.name], errors='coerce').to_numpy(dtype=np.float64)
    ok = (stamps >= grid.start) & (stamps < grid.end) & ~np.isnan(values)
    positions = ((stamps[ok] - pd.Timestamp(grid.start)) // pd.Timedelta(grid.delta)).to_numpy()
    grouped = pd.Series(values[ok]).groupby(positions)
    agg = grouped.agg(_mode) if spec.categorical else grouped.mean()
    out = np.full(grid.n_slots, np.nan)
    out[agg.index.to_numpy(dtype=np.int64)] = agg.to_numpy(dtype=np.float64)
    return out


def _spatial_values(region_counts: pd.DataFrame, region_values: pd.Series,
                    categorical: bool) -> np.ndarray:
    """Pickup-weighted average (or mode) of region values per slot.

    Slots without pickups weight every panel region equally. A slot is NaN
    when any region contributing to it has no value.
    """
    regions = list(region_counts.columns)
    n = len(region_counts)
    if not regions:
        return np.full(n, np.nan)
    weights = region_counts.to_numpy(dtype=np.float64).copy()
    weights[weights.sum(axis=1) == 0] = 1.0
    values = region_values.reindex(regions).to_numpy(dtype=np.float64)
    absent = np.isnan(values)
    incomplete = ((weights > 0) & absent[None, :]).any(axis=1)

    if categorical:
        levels = np.unique(values[~absent])
        if not len(levels):
            return np.full(n, np.nan)
        onehot = (values[:, None] == levels[None, :]).astype(np.float64)
        out = levels[np.argmax(weights @ onehot, axis=1)].astype(np.float64)
    else:
        out = (weights @ np.nan_to_num(values)) / weights.sum(axis=1)
    out[incomplete] = np.nan
    return out


def join_features(panel: Panel, tables: FeatureTables, schema: FeatureSchema) -> Panel:
    """
    Attach schema features to a pickups panel.

    Set-A features average all readings inside each slot; sets B-D are
    pickup-weighted averages over the regions of that slot's pickups.
    Calendar features with no table are derived from slot timestamps.
    """
    frame = panel.frame[[PICKUPS]].copy()
    columns = {}
    spatial_names = [spec.name for spec in schema if spec.space_dependent]
    region_features = None

    if spatial_names:
        if panel.region_counts is None:
            raise SchemaError("space-dependent features need per-region pickup counts from aggregation")
        table_regions = set()
        for name in spatial_names:
            if tables.region_source(name) is None:
                raise SchemaError(f"feature {name} is not present in any feature table")
            table_regions |= set(tables.region_source(name)['region'])
        regions = sorted(set(panel.region_counts.columns) | table_regions)
        region_features = pd.DataFrame(index=pd.Index(regions, name='region'))
        for name in spatial_names:
            source = tables.region_source(name)
            values = pd.to_numeric(source[name], errors='coerce')
            region_features[name] = values.groupby(source['region']).mean().reindex(regions)

    for spec in schema:
        if spec.space_dependent:
            columns[spec.name] = _spatial_values(panel.region_counts, region_features[spec.name],
                                                 spec.categorical)
            continue
        source = tables.time_source(spec.name)
        if source is not None:
            columns[spec.name] = _time_average(source, spec, panel.grid)
        elif spec.name in CALENDAR_FEATURES:
            columns[spec.name] = calendar_feature(spec.name, panel.times)
        else:
            raise SchemaError(f"feature {spec.name} is not present in any feature table")

    for name in schema.names:
        frame[name] = columns[name]
    mask = pd.DataFrame({name: np.isnan(columns[name]) for name in schema.names}, index=panel.times)
    missing = int(mask.to_numpy().sum())
    log.info(f"Joined {len(schema)} features over {len(frame)} slots ({missing} missing cells)")
    return panel.replace(frame=frame, mask=mask, schema=schema, region_features=region_features)


# ============ Imputation ============

def _nearest_value(region: str, values: pd.Series, adjacency: Dict[str, set]) -> Optional[float]:
    """Breadth-first search for the closest region with a value; ties by region id."""
    seen = {region}
    frontier = [region]
    while frontier:
        ring = sorted({n for r in frontier for n in adjacency.get(r, ())} - seen)
        for candidate in ring:
            if candidate in values.index and not np.isnan(values[candidate]):
                return float(values[candidate])
        seen.update(ring)
        frontier = ring
    return None


def _fill_regions(region_features: pd.DataFrame, adjacency: Dict[str, set],
                  names: Sequence[str], regions: Sequence[str]) -> pd.DataFrame:
    """Fill gaps of the panel's own regions; regions known only from feature tables are left as they are."""
    filled = region_features.copy()
    wanted = set(regions)
    for name in names:
        original = region_features[name]
        if original.isna().all():
            raise ImputationError(f"feature {name} has no value in any region", feature=name)
        for region in original.index[original.isna()]:
            if region not in wanted:
                log.trace(f"Skipping {name} for region {region}, which has no pickups in the panel")
                continue
            if region not in adjacency:
                raise ContractError(f"adjacency does not cover region {region}")
            value = _nearest_value(region, original, adjacency)
            if value is None:
                raise ImputationError(f"no region reachable from {region} has a value for {name}",
                                      feature=name)
            filled.at[region, name] = value
            log.trace(f"Imputed {name} for region {region} = {value}")
    return filled


def impute_missing(panel: Panel, adjacency: Dict[str, set],
                   train_end: Optional[datetime] = None) -> Panel:
    """
    Fill every missing cell.

    Space-dependent cells take the value of the nearest region over the
    adjacency graph. Space-independent cells are forward-filled; a leading gap
    takes the mean (mode for categorical) of observed cells before `train_end`.
    """
    missing = panel.missing_cells()
    if not missing:
        return panel

    frame = panel.frame.copy()
    mask = panel.mask.copy()
    pending = [spec for spec in panel.schema if mask[spec.name].any()]

    spatial = [spec.name for spec in pending if spec.space_dependent]
    has_regions = panel.region_features is not None and panel.region_counts is not None
    filled_regions = None
    if spatial and has_regions:
        filled_regions = _fill_regions(panel.region_features, adjacency, spatial, panel.regions)

    for spec in pending:
        rows = mask[spec.name].to_numpy()
        if spec.space_dependent and has_regions:
            values = _spatial_values(panel.region_counts, filled_regions[spec.name], spec.categorical)
            if np.isnan(values[rows]).any():
                raise ImputationError(f"could not impute {spec.name}", feature=spec.name)
            column = frame[spec.name].to_numpy(dtype=np.float64).copy()
            column[rows] = values[rows]
            frame[spec.name] = column
        else:
            if spec.space_dependent:
                log.warning(f"No region-level data for {spec.name}; forward-filling instead")
            series = frame[spec.name].where(~mask[spec.name])
            observed = series.dropna()
            if observed.empty:
                raise ImputationError(f"feature {spec.name} is missing in every slot", feature=spec.name)
            series = series.ffill()
            if series.isna().any():
                reference = observed
                if train_end is not None and (observed.index < train_end).any():
                    reference = observed[observed.index < train_end]
                fallback = _mode(reference) if spec.categorical else float(reference.mean())
                series = series.fillna(fallback)
            frame[spec.name] = series
        mask[spec.name] = False

    log.info(f"Imputed {missing} missing cells across {len(pending)} features")
    region_features = filled_regions if filled_regions is not None else panel.region_features
    return panel.replace(frame=frame, mask=mask, region_features=region_features)


# ============ Normalization ============

@dataclass(frozen=True)
class Normalizer:
    """Per-column z-score statistics fitted on a training range.

    Constant columns are listed in `constant` and passed through unscaled.
    """
    stats: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    constant: Tuple[str, ...] = ()

    def apply_values(self, name: str, values):
        if name not in self.stats or name in self.constant:
            return np.asarray(values, dtype=np.float64)
        mean, std = self.stats[name]
        return (np.asarray(values, dtype=np.float64) - mean) / std

    def invert_values(self, name: str, values):
        if name not in self.stats or name in self.constant:
            return np.asarray(values, dtype=np.float64)
        mean, std = self.stats[name]
        return np.asarray(values, dtype=np.float64) * std + mean

    def apply(self, panel: Panel) -> Panel:
        frame = panel.frame.astype(np.float64)
        for name in self.stats:
            if name in frame.columns:
                frame[name] = self.apply_values(name, frame[name].to_numpy())
        return panel.replace(frame=frame, normalized=True)

    def to_dict(self) -> dict:
        return {'stats': {name: [mean, std] for name, (mean, std) in self.stats.items()},
                'constant': list(self.constant)}

    @classmethod
    def from_dict(cls, data: dict) -> 'Normalizer':
        stats = {name: (float(pair[0]), float(pair[1])) for name, pair in data['stats'].items()}
        return cls(stats=stats, constant=tuple(data.get('constant', ())))


def fit_normalizer(panel: Panel, train_range: Tuple[datetime, datetime]) -> Normalizer:
    """
    Fit z-score statistics on rows with train_range[0] <= t < train_range[1].

    Covers the pickups column and every continuous schema feature; statistics
    use the population standard deviation.
    """
    start, end = train_range
    if start < panel.grid.start or end > panel.grid.end or not start < end:
        raise RangeError(f"train range [{start}, {end}) must be non-empty and inside "
                         f"[{panel.grid.start}, {panel.grid.end})")
    rows = panel.frame.loc[(panel.times >= start) & (panel.times < end)]
    if rows.empty:
        raise RangeError(f"train range [{start}, {end}) holds no rows")

    names = [PICKUPS] + [spec.name for spec in panel.schema if not spec.categorical]
    stats = {}
    constant = []
    for name in names:
        values = rows[name].to_numpy(dtype=np.float64)
        values = values[~np.isnan(values)]
        mean = float(values.mean()) if len(values) else 0.0
        std = float(values.std()) if len(values) else 0.0
        if std <= 1e-12 * max(1.0, abs(mean)):
            constant.append(name)
            log.warning(f"Feature {name} is constant over the training range; leaving it unscaled")
        stats[name] = (mean, std)
    log.debug(f"Fitted normalizer on {len(rows)} rows ({len(constant)} constant columns)")
    return Normalizer(stats=stats, constant=tuple(constant))


# ============ Windows and splits ============

def build_windows(panel: Panel, s: int, include_pickups: bool = True,
                  target_start: Optional[datetime] = None,
                  target_end: Optional[datetime] = None) -> WindowBatch:
    """
    Slide (s+1)-row input windows over the panel.

    Window j uses rows j-s-1 .. j-1 and targets p at row j. Without target
    bounds there are len(panel) - s - 1 windows.

    Args:
        panel: Imputed (usually normalized) panel
        s: Lookback length
        include_pickups: False drops p from the inputs (it stays the target)
        target_start: Keep only windows whose target time is >= this
        target_end: Keep only windows whose target time is < this
    """
    if s < 0:
        raise ContractError(f"lookback must be >= 0, got {s}")
    n = len(panel)
    if n < s + 2:
        raise SizeError(f"panel of {n} rows is too short for lookback {s} (needs {s + 2})")
    if panel.missing_cells():
        raise ContractError("panel still has missing cells; impute before windowing")
    steps = np.diff(panel.times.to_numpy())
    if len(steps) and (steps != np.timedelta64(panel.grid.delta)).any():
        raise ContractError("panel rows do not form a contiguous grid")

    columns = tuple(panel.columns if include_pickups else panel.schema.names)
    if not columns:
        raise ContractError("no input columns to window")
    values = panel.frame[list(columns)].to_numpy(dtype=np.float64)
    times = panel.times.to_numpy()

    count = n - s - 1
    inputs = np.ascontiguousarray(sliding_window_view(values, s + 1, axis=0)[:count].transpose(0, 2, 1))
    input_times = np.ascontiguousarray(sliding_window_view(times, s + 1)[:count])
    target_index = np.arange(s + 1, n)
    targets = panel.frame[PICKUPS].to_numpy(dtype=np.float64)[target_index]
    target_times = panel.times[target_index]

    keep = np.ones(count, dtype=bool)
    if target_start is not None:
        keep &= target_times >= target_start
    if target_end is not None:
        keep &= target_times < target_end
    if not keep.all():
        inputs, input_times, targets, target_times = (
            inputs[keep], input_times[keep], targets[keep], target_times[keep])

    assert (input_times.max(axis=1) < target_times.to_numpy()).all(), "window leaks its target"
    return WindowBatch(inputs=inputs, targets=targets, target_times=target_times,
                       input_times=input_times, columns=columns, s=s)


def train_test_split(panel: Panel, split_date: datetime) -> Tuple[Panel, Panel]:
    """Rows strictly before split_date go to train, the rest to test."""
    if not panel.grid.start <= split_date <= panel.grid.end:
        raise RangeError(f"split {split_date} outside grid [{panel.grid.start}, {panel.grid.end}]")
    return (panel.slice(panel.grid.start, split_date),
            panel.slice(split_date, panel.grid.end))


def split_point(panel: Panel, split_date: Optional[str], train_fraction: float) -> datetime:
    """Explicit split date, or the slot at `train_fraction` of the grid."""
    if split_date:
        return pd.Timestamp(split_date).to_pydatetime()
    index = int(math.floor(len(panel) * train_fraction))
    index = min(max(index, 0), len(panel))
    if index == len(panel):
        return panel.grid.end
    return panel.times[index].to_pydatetime()


# ============ Synthetic panels ============

# Monday..Sunday, highest Thursday to Saturday, lowest Sunday and Monday
WEEKLY_PROFILE = np.array([-1.0, -0.25, 0.0, 0.75, 1.0, 1.0, -0.75])


@dataclass(frozen=True)
class SynthConfig:
    slots: int = 2000
    interval_minutes: int = 15
    seed: int = 0
    start: datetime = datetime(2014, 4, 7)
    base: float = 100.0
    diurnal_amplitude: float = 40.0
    peak_hour: float = 17.0
    weekly_amplitude: float = 10.0
    drivers: int = 1
    driver_weights: Tuple[float, ...] = (20.0,)
    driver_lag: int = 0
    driver_phi: float = 0.9
    noise_sigma: float = 5.0
    noise_features: int = 0
    calendar: bool = True

    def weight(self, i: int) -> float:
        if not self.driver_weights:
            return 0.0
        return float(self.driver_weights[min(i, len(self.driver_weights) - 1)])


def synth_panel(config: SynthConfig) -> Panel:
    """
    Generate a deterministic panel with diurnal, weekly and driver structure.

    p(t) = round(max(0, base + diurnal + weekly + sum_i w_i * g_i(t - lag) + noise)).
    Drivers g_i are unit-variance AR(1) series emitted as set-A features
    `g1..`; `z1..` are pure-noise set-B features.
    """
    if config.slots <= 0:
        raise ContractError(f"slots must be positive, got {config.slots}")
    rng = np.random.default_rng(config.seed)
    span = timedelta(minutes=config.interval_minutes * config.slots)
    grid = TimeGrid(config.start, config.start + span, config.interval_minutes)
    times = grid.slot_times()
    n = config.slots
    lag = max(config.driver_lag, 0)

    hours = times.hour + times.minute / 60.0
    level = (config.base
             + config.diurnal_amplitude * np.cos(2 * np.pi * (hours - config.peak_hour) / 24.0)
             + config.weekly_amplitude * WEEKLY_PROFILE[times.dayofweek])

    specs = []
    columns = {}
    if config.calendar:
        specs += [FeatureSpec('hour', 'A', 'categorical', 'space-independent', 24),
                  FeatureSpec('day', 'A', 'categorical', 'space-independent', 7)]
        columns['hour'] = calendar_feature('hour', times)
        columns['day'] = calendar_feature('day', times)

    phi = config.driver_phi
    for i in range(config.drivers):
        series = np.empty(n + lag)
        shocks = rng.standard_normal(n + lag)
        series[0] = shocks[0]
        for t in range(1, n + lag):
            series[t] = phi * series[t - 1] + math.sqrt(1.0 - phi * phi) * shocks[t]
        name = f'g{i + 1}'
        specs.append(FeatureSpec(name, 'A'))
        columns[name] = series[lag:]
        level = level + config.weight(i) * series[:n]

    for i in range(config.noise_features):
        name = f'z{i + 1}'
        specs.append(FeatureSpec(name, 'B', 'continuous', 'space-dependent'))
        columns[name] = rng.standard_normal(n)

    noise = rng.standard_normal(n) * config.noise_sigma if config.noise_sigma > 0 else np.zeros(n)
    pickups = np.round(np.maximum(0.0, level + noise)).astype(np.int64)

    schema = FeatureSchema(tuple(specs))
    frame = pd.DataFrame({PICKUPS: pickups}, index=times)
    for spec in specs:
        frame[spec.name] = columns[spec.name]
    mask = pd.DataFrame(False, index=times, columns=schema.names)
    log.info(f"Synthesized {n} slots (seed={config.seed}, drivers={config.drivers}, "
             f"noise features={config.noise_features})")
    return Panel(grid=grid, frame=frame, mask=mask, schema=schema, scope='synthetic')


# ============ Interchange files ============

def _sidecar(path: str, suffix: str, ext: Optional[str] = None) -> str:
    stem, own = os.path.splitext(path)
    return f"{stem}_{suffix}{ext or own or '.csv'}"


def write_panel(panel: Panel, path: str) -> List[str]:
    """
    Write the panel CSV (`datetime,p,<features>`) plus missing-mask, schema and meta sidecars.

    The meta sidecar records the region scope so residuals keep their region.

    Returns:
        Paths written
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame = panel.frame.copy()
    for name in [PICKUPS] + [spec.name for spec in panel.schema if spec.categorical]:
        column = frame[name]
        if not column.isna().any() and np.allclose(column, np.round(column)):
            frame[name] = np.round(column).astype(np.int64)
    stamps = panel.times.strftime(TIMESTAMP_FORMAT)
    frame.index = pd.Index(stamps, name='datetime')
    frame.to_csv(path, lineterminator='\n')

    mask = panel.mask.astype(np.int64)
    mask.index = pd.Index(stamps, name='datetime')
    mask_path = _sidecar(path, 'mask')
    mask.to_csv(mask_path, lineterminator='\n')

    schema_path = _sidecar(path, 'schema')
    panel.schema.to_frame().to_csv(schema_path, index=False, lineterminator='\n')

    meta_path = _sidecar(path, 'meta', '.json')
    with open(meta_path, 'w') as f:
        json.dump({'scope': panel.scope, 'interval_minutes': panel.grid.interval_minutes}, f, indent=2)
    log.info(f"Wrote panel {path} ({len(panel)} rows, {len(panel.schema)} features)")
    return [path, mask_path, schema_path, meta_path]


def read_panel(path: str, schema: Optional[FeatureSchema] = None,
               interval_minutes: Optional[int] = None) -> Panel:
    """Read a panel written by write_panel (schema, mask and meta sidecars are optional)."""
    problems = validate_panel_file(path, interval_minutes)
    if problems:
        raise FormatError(f"{path}: {problems[0]}")
    frame = pd.read_csv(path)
    times = pd.DatetimeIndex(_parse_stamps(frame.pop('datetime')), name='datetime')
    frame.index = times

    if schema is None:
        schema_path = _sidecar(path, 'schema')
        if os.path.exists(schema_path):
            schema = load_schema(schema_path)
        else:
            schema = FeatureSchema(tuple(FeatureSpec(str(c), 'A') for c in frame.columns if c != PICKUPS))
    absent = [name for name in schema.names if name not in frame.columns]
    if absent:
        raise SchemaError(f"{path}: schema features missing from panel: {', '.join(absent)}")
    frame = frame[[PICKUPS] + schema.names]

    mask_path = _sidecar(path, 'mask')
    if os.path.exists(mask_path):
        mask = pd.read_csv(mask_path).drop(columns='datetime').astype(bool)
        mask.index = times
        mask = mask[schema.names]
    else:
        mask = frame[schema.names].isna()

    meta = {}
    meta_path = _sidecar(path, 'meta', '.json')
    if os.path.exists(meta_path):
        try:
            with open(meta_path) as f:
                meta = dict(json.load(f))
        except (OSError, ValueError, TypeError) as e:
            raise FormatError(f"{meta_path}: unreadable panel meta: {e}")

    if interval_minutes is None and len(times) < 2 and meta.get('interval_minutes'):
        interval_minutes = int(meta['interval_minutes'])
    if interval_minutes is None:
        interval_minutes = int((times[1] - times[0]).total_seconds() // 60) if len(times) > 1 else 15
    start = times[0].to_pydatetime()
    grid = TimeGrid(start, (times[-1] + pd.Timedelta(minutes=interval_minutes)).to_pydatetime(),
                    interval_minutes)
    return Panel(grid=grid, frame=frame, mask=mask, schema=schema, scope=meta.get('scope'))


def validate_panel_file(path: str, interval_minutes: Optional[int] = None) -> List[str]:
    """Check a panel CSV against the interchange format; returns a list of problems."""
    problems = []
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        return [f"unreadable panel file: {e}"]
    if list(frame.columns[:2]) != ['datetime', PICKUPS]:
        return ["header must start with 'datetime,p'"]
    if frame.empty:
        return ["panel has no rows"]
    stamps = _parse_stamps(frame['datetime'].astype(str))
    if stamps.isna().any():
        row = int(np.flatnonzero(stamps.isna().to_numpy())[0])
        problems.append(f"line {row + 2}: malformed datetime")
        return problems
    steps = stamps.diff().dropna().dt.total_seconds() / 60
    if len(steps):
        if (steps <= 0).any():
            problems.append("timestamps are not strictly increasing")
        elif steps.nunique() != 1:
            problems.append("timestamps are not evenly spaced")
        elif int(steps.iloc[0]) not in (15, 30):
            problems.append(f"interval of {int(steps.iloc[0])} minutes is not 15 or 30")
        elif interval_minutes is not None and int(steps.iloc[0]) != interval_minutes:
            problems.append(f"interval is {int(steps.iloc[0])} minutes, expected {interval_minutes}")
    pickups = pd.to_numeric(frame[PICKUPS], errors='coerce')
    if pickups.isna().any() or (pickups < 0).any():
        problems.append("pickups column must be non-negative numbers")
    mask_path = _sidecar(path, 'mask')
    if os.path.exists(mask_path):
        mask = pd.read_csv(mask_path)
        if len(mask) != len(frame):
            problems.append("missing-mask row count differs from panel")
        elif not mask.drop(columns='datetime').isin([0, 1]).all().all():
            problems.append("missing-mask values must be 0 or 1")
    return problems
