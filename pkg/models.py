"""Domain types for UberNet - pickup events, time grids, feature schemas, panels and windows."""
import hashlib
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from errors import ContractError, SchemaError

SET_TAGS = ('A', 'B', 'C', 'D')
KINDS = ('continuous', 'categorical')
SPATIAL = ('space-independent', 'space-dependent')

PICKUPS = 'p'


@dataclass(frozen=True)
class RawPickupEvent:
    """One completed pickup: when and in which region."""
    timestamp: datetime
    region: str

    def __post_init__(self):
        if not self.region:
            raise ContractError("pickup event region must be non-empty")


@dataclass(frozen=True)
class TimeGrid:
    """Half-open slot grid [start, end) with slot width `interval_minutes`.

    start == end is accepted only so that splitting a panel at its first or
    last slot can yield an empty side; user-facing constructors call validate().
    """
    start: datetime
    end: datetime
    interval_minutes: int = 15

    def __post_init__(self):
        if self.interval_minutes not in (15, 30):
            raise ContractError(f"interval_minutes must be 15 or 30, got {self.interval_minutes}")
        if self.end < self.start:
            raise ContractError(f"grid end {self.end} precedes start {self.start}")
        if (self.end - self.start) % self.delta:
            raise ContractError(
                f"grid span {self.end - self.start} is not a multiple of {self.interval_minutes} minutes")

    def validate(self) -> 'TimeGrid':
        if not self.start < self.end:
            raise ContractError(f"grid start {self.start} must precede end {self.end}")
        return self

    @property
    def delta(self) -> timedelta:
        return timedelta(minutes=self.interval_minutes)

    @property
    def n_slots(self) -> int:
        return (self.end - self.start) // self.delta

    def __len__(self):
        return self.n_slots

    def slot_times(self) -> pd.DatetimeIndex:
        return pd.date_range(self.start, periods=self.n_slots, freq=f'{self.interval_minutes}min',
                             name='datetime')

    def contains(self, when: datetime) -> bool:
        return self.start <= when < self.end

    @classmethod
    def covering(cls, first: datetime, last: datetime, interval_minutes: int = 15) -> 'TimeGrid':
        """Smallest aligned grid containing both timestamps."""
        ts_first = pd.Timestamp(first).floor(f'{interval_minutes}min')
        ts_last = pd.Timestamp(last).floor(f'{interval_minutes}min') + pd.Timedelta(minutes=interval_minutes)
        return cls(ts_first.to_pydatetime(), ts_last.to_pydatetime(), interval_minutes)


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    set_tag: str
    kind: str = 'continuous'
    spatial: str = 'space-independent'
    levels: int = 0  # categorical cardinality if known, 0 = infer from data

    def __post_init__(self):
        if self.set_tag not in SET_TAGS:
            raise SchemaError(f"feature {self.name}: set must be one of {SET_TAGS}, got {self.set_tag!r}")
        if self.kind not in KINDS:
            raise SchemaError(f"feature {self.name}: kind must be one of {KINDS}, got {self.kind!r}")
        if self.spatial not in SPATIAL:
            raise SchemaError(f"feature {self.name}: spatial must be one of {SPATIAL}, got {self.spatial!r}")
        expected = 'space-independent' if self.set_tag == 'A' else 'space-dependent'
        if self.spatial != expected:
            raise SchemaError(f"feature {self.name}: set {self.set_tag} features are {expected}")

    @property
    def categorical(self) -> bool:
        return self.kind == 'categorical'

    @property
    def space_dependent(self) -> bool:
        return self.spatial == 'space-dependent'


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature list; the pickups column is implicit and never part of it."""
    features: Tuple[FeatureSpec, ...] = ()

    def __post_init__(self):
        names = [f.name for f in self.features]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise SchemaError(f"duplicate feature names in schema: {', '.join(dupes)}")
        if PICKUPS in names:
            raise SchemaError(f"'{PICKUPS}' is reserved for the pickups column")

    def __len__(self):
        return len(self.features)

    def __iter__(self):
        return iter(self.features)

    def __contains__(self, name):
        return name in self.names

    @property
    def names(self) -> List[str]:
        return [f.name for f in self.features]

    def get(self, name: str) -> FeatureSpec:
        for spec in self.features:
            if spec.name == name:
                return spec
        raise SchemaError(f"feature not in schema: {name}")

    def in_sets(self, tags) -> 'FeatureSchema':
        tags = set(tags)
        return FeatureSchema(tuple(f for f in self.features if f.set_tag in tags))

    def select(self, names) -> 'FeatureSchema':
        keep = set(names)
        return FeatureSchema(tuple(f for f in self.features if f.name in keep))

    def without(self, name: str) -> 'FeatureSchema':
        return FeatureSchema(tuple(f for f in self.features if f.name != name))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(f.name, f.set_tag, f.kind, f.spatial, f.levels) for f in self.features],
            columns=['name', 'set', 'kind', 'spatial', 'levels'])

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> 'FeatureSchema':
        required = {'name', 'set', 'kind', 'spatial'}
        missing = required - set(frame.columns)
        if missing:
            raise SchemaError(f"schema file lacks columns: {', '.join(sorted(missing))}")
        specs = []
        for row in frame.itertuples(index=False):
            levels = getattr(row, 'levels', 0)
            levels = 0 if pd.isna(levels) else int(levels)
            specs.append(FeatureSpec(str(row.name), str(row.set), str(row.kind), str(row.spatial), levels))
        return cls(tuple(specs))

    def fingerprint(self) -> str:
        """sha256 over the canonical schema CSV text."""
        text = self.to_frame().to_csv(index=False, lineterminator='\n')
        return hashlib.sha256(text.encode('utf-8')).hexdigest()


def _spec(name, tag, kind='continuous', levels=0):
    spatial = 'space-independent' if tag == 'A' else 'space-dependent'
    return FeatureSpec(name, tag, kind, spatial, levels)


# The full 28-feature schema: sets A-D in reporting order.
DEFAULT_SCHEMA = FeatureSchema((
    _spec('hour', 'A', 'categorical', 24),
    _spec('wed', 'A', 'categorical', 2),
    _spec('day', 'A', 'categorical', 7),
    _spec('month', 'A', 'categorical', 12),
    _spec('vsb', 'A'),
    _spec('temp', 'A'),
    _spec('dewp', 'A'),
    _spec('hd', 'A', 'categorical', 24),
    _spec('spd', 'A'),
    _spec('slp', 'A'),
    _spec('pcp01', 'A'),
    _spec('pcp06', 'A'),
    _spec('pcp24', 'A'),
    _spec('sd', 'A'),
    _spec('Unemployment', 'B'),
    _spec('Income', 'B'),
    _spec('Poverty', 'B'),
    _spec('Self-employed', 'B'),
    _spec('TotalPop', 'B'),
    _spec('Walk', 'C'),
    _spec('Transit', 'C'),
    _spec('Carpool', 'C'),
    _spec('WorkAtHome', 'C'),
    _spec('MeanCommute', 'C'),
    _spec('streetcrime', 'D'),
    _spec('borough', 'D', 'categorical', 5),
    _spec('PUMA', 'D', 'categorical'),
    _spec('transp', 'D'),
))

# Set-A features computable from the slot timestamp alone.
CALENDAR_FEATURES = ('hour', 'hd', 'day', 'wed', 'month')


@dataclass
class FeatureTables:
    """Exogenous feature sources: time-keyed tables (set A) and region-keyed tables (sets B-D)."""
    time_tables: List[pd.DataFrame] = field(default_factory=list)
    region_tables: List[pd.DataFrame] = field(default_factory=list)

    def time_source(self, name: str) -> Optional[pd.DataFrame]:
        for table in self.time_tables:
            if name in table.columns:
                return table
        return None

    def region_source(self, name: str) -> Optional[pd.DataFrame]:
        for table in self.region_tables:
            if name in table.columns:
                return table
        return None


@dataclass(frozen=True)
class Panel:
    """Time-interval x feature table.

    frame: one row per grid slot (DatetimeIndex named 'datetime'), columns 'p' then schema order.
    mask: boolean missing-mask over the schema columns.
    region_counts: slots x regions pickup counts, kept from aggregation for spatial joins.
    region_features: regions x space-dependent features, kept for nearest-region imputation.
    normalized: set by Normalizer.apply; pickups are then z-scores and may be negative.
    """
    grid: TimeGrid
    frame: pd.DataFrame
    mask: pd.DataFrame
    schema: FeatureSchema = FeatureSchema()
    scope: Optional[str] = None
    region_counts: Optional[pd.DataFrame] = None
    region_features: Optional[pd.DataFrame] = None
    dropped_events: int = 0
    normalized: bool = False

    def __post_init__(self):
        if len(self.frame) != self.grid.n_slots:
            raise ContractError(f"panel has {len(self.frame)} rows for a grid of {self.grid.n_slots} slots")
        if len(self.frame) and not self.frame.index.is_monotonic_increasing:
            raise ContractError("panel rows must be in increasing time order")
        if not self.normalized and len(self.frame) and (self.frame[PICKUPS] < 0).any():
            raise ContractError("pickup counts must be non-negative")

    def __len__(self):
        return len(self.frame)

    @property
    def times(self) -> pd.DatetimeIndex:
        return self.frame.index

    @property
    def columns(self) -> List[str]:
        return [PICKUPS] + self.schema.names

    @property
    def pickups(self) -> np.ndarray:
        return self.frame[PICKUPS].to_numpy(dtype=np.float64)

    @property
    def regions(self) -> List[str]:
        if self.region_counts is None:
            return [self.scope] if self.scope else []
        return list(self.region_counts.columns)

    def missing_cells(self) -> int:
        return int(self.mask.to_numpy().sum())

    def replace(self, **changes) -> 'Panel':
        return replace(self, **changes)

    def slice(self, start: datetime, end: datetime) -> 'Panel':
        """Rows with start <= t < end, clipped to the grid."""
        start = self._align(start)
        end = max(start, self._align(end))
        rows = (self.frame.index >= start) & (self.frame.index < end)
        counts = self.region_counts.loc[rows] if self.region_counts is not None else None
        return replace(self,
                       grid=TimeGrid(start, end, self.grid.interval_minutes),
                       frame=self.frame.loc[rows].copy(),
                       mask=self.mask.loc[rows].copy(),
                       region_counts=counts)

    def _align(self, when) -> datetime:
        """First slot boundary at or after `when`, clipped to the grid."""
        origin = pd.Timestamp(self.grid.start)
        step = pd.Timedelta(self.grid.delta)
        when = min(max(pd.Timestamp(when), origin), pd.Timestamp(self.grid.end))
        slots = -((origin - when) // step)
        return (origin + slots * step).to_pydatetime()

    def with_levels(self) -> 'Panel':
        """Raise each categorical feature's levels to cover every code in the panel.

        Slices taken afterwards keep the full vocabulary, so a model fitted on
        a training slice accepts codes that first appear later.
        """
        specs = []
        for spec in self.schema:
            if spec.categorical and len(self.frame):
                observed = self.frame[spec.name].max()
                if not np.isnan(observed) and int(observed) + 1 > spec.levels:
                    spec = replace(spec, levels=int(observed) + 1)
            specs.append(spec)
        schema = FeatureSchema(tuple(specs))
        return self if schema == self.schema else replace(self, schema=schema)

    def select(self, names) -> 'Panel':
        """Keep only the named schema features (pickups always kept)."""
        schema = self.schema.select(names)
        return replace(self, schema=schema,
                       frame=self.frame[[PICKUPS] + schema.names].copy(),
                       mask=self.mask[schema.names].copy())


@dataclass(frozen=True)
class WindowBatch:
    """Stacked (s+1)-row input windows with one-step-ahead pickup targets.

    inputs: (N, s+1, F) in column order `columns`; targets: (N,) pickups at target_times.
    self_fed marks input cells holding model outputs rather than observations.
    """
    inputs: np.ndarray
    targets: np.ndarray
    target_times: pd.DatetimeIndex
    input_times: np.ndarray
    columns: Tuple[str, ...]
    s: int
    self_fed: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.targets)

    def subset(self, indices) -> 'WindowBatch':
        indices = np.asarray(indices)
        return replace(self,
                       inputs=self.inputs[indices],
                       targets=self.targets[indices],
                       target_times=self.target_times[indices],
                       input_times=self.input_times[indices],
                       self_fed=None if self.self_fed is None else self.self_fed[indices])

    def column_index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise SchemaError(f"column not in windows: {name}")

    def has_self_fed_cells(self) -> bool:
        return self.self_fed is not None and bool(self.self_fed.any())


def region_adjacency(edges: pd.DataFrame) -> Dict[str, set]:
    """Undirected adjacency map from a `region,neighbor` edge list."""
    if not {'region', 'neighbor'} <= set(edges.columns):
        raise SchemaError("adjacency file needs 'region' and 'neighbor' columns")
    adjacency: Dict[str, set] = {}
    for region, neighbor in edges[['region', 'neighbor']].astype(str).itertuples(index=False):
        adjacency.setdefault(region, set()).add(neighbor)
        adjacency.setdefault(neighbor, set()).add(region)
    return adjacency
