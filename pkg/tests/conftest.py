"""Shared fixtures: small panels, tiny networks, random windows, desk-scale run configs."""
from datetime import datetime

import numpy as np
import pandas as pd
import pytest

from config import RunConfig
from models import PICKUPS, FeatureSchema, FeatureSpec, Panel, TimeGrid
from net import InputSpec, NetworkConfig, init_params
from panel import SynthConfig, synth_panel

DEFAULT_INPUTS = (InputSpec('p'), InputSpec('g1'), InputSpec('hour', 'categorical', 24))


@pytest.fixture
def panel_factory():
    """Panel from column lists; columns other than p are continuous set-A features unless kinds says otherwise."""
    def make(columns: dict, start=datetime(2014, 4, 7, 8, 0), interval=15, kinds=None, mask=None):
        kinds = kinds or {}
        n = len(columns[PICKUPS])
        grid = TimeGrid(start, start + pd.Timedelta(minutes=interval * n).to_pytimedelta(), interval)
        specs = []
        for name in columns:
            if name == PICKUPS:
                continue
            kind, levels = kinds.get(name, ('continuous', 0))
            specs.append(FeatureSpec(name, 'A', kind, 'space-independent', levels))
        schema = FeatureSchema(tuple(specs))
        frame = pd.DataFrame({name: np.asarray(values, dtype=np.float64) for name, values in columns.items()},
                             index=grid.slot_times())
        if mask is None:
            mask = pd.DataFrame(False, index=frame.index, columns=schema.names)
        return Panel(grid=grid, frame=frame, mask=mask, schema=schema)
    return make


@pytest.fixture
def net_factory():
    def make(k=4, dilations=(1, 2), s=8, head='regression', seed=0, inputs=DEFAULT_INPUTS, **kwargs):
        if head == 'softmax':
            kwargs.setdefault('bins', 4)
            kwargs.setdefault('bin_edges', (-1.0, 0.0, 1.0))
            kwargs.setdefault('bin_centers', (-1.5, -0.5, 0.5, 1.5))
        config = NetworkConfig(inputs=tuple(inputs), s=s, k=k, dilations=tuple(dilations), head=head,
                               seed=seed, **kwargs)
        return init_params(config)
    return make


@pytest.fixture
def window_factory():
    """Random windows matching a network config: normal continuous values, valid categorical codes."""
    def make(config, seed=0, batch=None):
        rng = np.random.default_rng(seed)
        shape = (config.s + 1,) if batch is None else (batch, config.s + 1)
        columns = []
        for spec in config.inputs:
            if spec.categorical:
                columns.append(rng.integers(0, spec.cardinality, size=shape).astype(np.float64))
            else:
                columns.append(rng.standard_normal(shape))
        return np.stack(columns, axis=-1)
    return make


@pytest.fixture
def driver_panel():
    """Synthetic panel whose driver g1 leads pickups by one slot, plus one pure-noise feature."""
    return synth_panel(SynthConfig(slots=480, seed=3, driver_lag=1, noise_sigma=2.0, noise_features=1))


@pytest.fixture
def desk_config(tmp_path):
    return RunConfig(k=2, lookback=4, feature_width=2, dilations=[1], iterations=2, learning_rate=0.01,
                     batch_size=64, folds=2, min_train_fraction=0.5, train_fraction=0.8,
                     out=str(tmp_path / 'run'))
