"""Configuration for UberNet."""
import json
import os
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence

from errors import ConfigError

BASE_DIR = os.path.dirname(os.path.abspath(__file__))


class Config:
    # Run artifacts
    CONFIGS_DIR = os.path.join(BASE_DIR, 'configs')
    DEFAULT_OUT_DIR = os.path.join('runs', 'latest')

    CHECKPOINT_FORMAT_VERSION = 1

    # Fixed artifact names inside the output directory
    CONFIG_ECHO = 'config.json'
    PANEL_FILE = 'panel.csv'
    INGEST_REPORT = 'ingest_report.json'
    CHECKPOINT_FILE = 'checkpoint.json'
    LOSS_HISTORY = 'loss_history.csv'
    EVAL_FILE = 'eval.csv'
    RESIDUALS_FILE = 'residuals.csv'
    CV_FILE = 'cv.csv'
    CV_JSON = 'cv.json'
    ABLATION_FILE = 'ablation.csv'
    IMPORTANCE_FILE = 'importance.csv'
    FEATURE_SETS_FILE = 'feature_sets.csv'
    COMPARE_FILE = 'compare.csv'
    TUNE_FILE = 'tune.csv'
    GRADCHECK_FILE = 'gradcheck.json'
    SUMMARY_MD = 'summary.md'
    SUMMARY_HTML = 'summary.html'

    # Exit codes
    EXIT_OK = 0
    EXIT_UNEXPECTED = 1
    EXIT_SCHEMA = 2
    EXIT_PARSE = 3
    EXIT_DIVERGENCE = 4
    EXIT_CHECKPOINT = 5

    MODELS = ('ubernet', 'seasonal_naive', 'persistence', 'ridge_arx', 'oracle')
    FEATURE_SETS = ('A', 'B', 'C', 'D', 'all')

    @staticmethod
    def pdp_file(feature: str) -> str:
        return f'pdp_{feature}.csv'

    @staticmethod
    def breakdown_file(key: str) -> str:
        return f'breakdown_{key}.csv'


def _key(default, help_text: str, factory=None):
    if factory is not None:
        return field(default_factory=factory, metadata={'help': help_text})
    return field(default=default, metadata={'help': help_text})


@dataclass
class RunConfig:
    """Flat run settings; every key has a default and appears in `run.py --help`."""
    # data
    pickups: str = _key('', "raw pickup events CSV (datetime, region)")
    features_dir: str = _key('', "directory of feature table CSVs")
    schema: str = _key('', "feature schema CSV (default: built-in 28-feature schema)")
    adjacency: str = _key('', "region adjacency CSV (region, neighbor)")
    panel: str = _key('', "panel interchange CSV (default: <out>/panel.csv)")
    checkpoint: str = _key('', "checkpoint JSON (default: <out>/checkpoint.json)")
    residuals: str = _key('', "residual records CSV (default: <out>/residuals.csv); breakdown reads a comma-separated list")
    interval_minutes: int = _key(15, "slot length in minutes (15 or 30)")
    start: str = _key('', "grid start (default: first event, floored to a slot)")
    end: str = _key('', "grid end, exclusive (default: slot after the last event)")
    scope: str = _key('', "aggregate only this region (default: all regions)")
    split_date: str = _key('', "train/test split timestamp (default: by train_fraction)")
    train_fraction: float = _key(0.8, "fraction of slots used for training when split_date is empty")
    # network
    lookback: int = _key(16, "lookback s; windows hold s+1 rows")
    k: int = _key(100, "residual channel width k (embedding width f = 2k)")
    feature_width: int = _key(8, "per-feature embedding width")
    dilations: List[int] = _key(None, "dilation per residual block", lambda: [1, 2])
    head: str = _key('regression', "output head: regression or softmax")
    bins: int = _key(10, "softmax head bin count")
    max_pool: bool = _key(False, "max-pool the head over time instead of reading the last step")
    # training
    lam: float = _key(1e-4, "L2 penalty lambda")
    l1: float = _key(0.0, "L1 penalty strength")
    learning_rate: float = _key(1e-3, "gradient descent step size")
    iterations: int = _key(100, "training epochs")
    batch_size: int = _key(32, "windows per gradient step")
    shuffle: bool = _key(True, "shuffle windows each epoch")
    seed: int = _key(0, "base random seed")
    # evaluation
    model: str = _key('ubernet', "model: ubernet, seasonal_naive, persistence, ridge_arx, oracle")
    models: List[str] = _key(None, "models compared by `compare`",
                             lambda: ['ubernet', 'seasonal_naive', 'persistence', 'ridge_arx'])
    folds: int = _key(5, "rolling cross-validation folds")
    min_train_fraction: float = _key(0.5, "share of slots in the first fold's training set")
    jobs: int = _key(1, "worker threads for folds, rows and gradient chunks")
    out: str = _key(Config.DEFAULT_OUT_DIR, "output directory")
    horizon: int = _key(1, "iterative forecast horizon reported by eval")
    sets: List[str] = _key(None, "feature sets evaluated by `sets`", lambda: list(Config.FEATURE_SETS))
    feature: str = _key('', "feature for pdp")
    grid_points: int = _key(20, "pdp grid size")
    repeats: int = _key(5, "permutation importance repeats")
    breakdown_by: str = _key('hour', "breakdown key: hour or region")
    tune_grid: Dict[str, list] = _key(None, "grid for `tune` as a JSON object of key -> values",
                                      lambda: {'lam': [1e-4, 1e-3], 'learning_rate': [1e-3, 1e-2]})
    # baselines
    seasonal_period: int = _key(0, "seasonal naive period in slots (0 = one day)")
    ridge_lags: int = _key(4, "ridge ARX lag order")
    ridge_alpha: float = _key(1.0, "ridge ARX penalty")
    ridge_exog: List[str] = _key(None, "ridge ARX exogenous features ('all' = every continuous feature)",
                                 lambda: ['all'])
    oracle: bool = _key(False, "replace the model with the perfect oracle")
    # gradient check
    gradcheck_step: float = _key(1e-5, "finite-difference step")
    gradcheck_tolerance: float = _key(1e-4, "largest accepted relative error")
    gradcheck_samples: int = _key(200, "sampled coordinates")
    gradcheck_full: bool = _key(False, "check every coordinate")
    # synthetic panel
    synth_slots: int = _key(2000, "synthetic panel length in slots")
    synth_start: str = _key('2014-04-07T00:00', "synthetic panel start")
    synth_base: float = _key(100.0, "synthetic base level")
    synth_diurnal: float = _key(40.0, "synthetic diurnal amplitude")
    synth_peak_hour: float = _key(17.0, "synthetic diurnal peak hour")
    synth_weekly: float = _key(10.0, "synthetic weekly amplitude")
    synth_drivers: int = _key(1, "synthetic exogenous drivers g1..")
    synth_driver_weight: float = _key(20.0, "synthetic driver weight")
    synth_driver_lag: int = _key(0, "slots by which drivers lead pickups")
    synth_noise: float = _key(5.0, "synthetic Gaussian noise sigma")
    synth_noise_features: int = _key(0, "synthetic pure-noise features z1..")

    # ============ Loading ============

    @classmethod
    def keys(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_sources(cls, path: Optional[str] = None, overrides: Sequence[str] = (), **flags) -> 'RunConfig':
        """
        Build the effective config: defaults < config file < --set overrides < dedicated flags.

        Args:
            path: JSON config file (flat object)
            overrides: 'key=value' strings
            flags: Dedicated flag values; None means not given
        """
        config = cls()
        if path:
            config = config.update(cls.load_file(path))
        parsed = {}
        for item in overrides:
            if '=' not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, value = item.split('=', 1)
            parsed[key.strip()] = value.strip()
        config = config.update(parsed)
        return config.update({key: value for key, value in flags.items() if value is not None})

    @staticmethod
    def load_file(path: str) -> dict:
        try:
            with open(path) as f:
                data = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return data

    def update(self, values: dict) -> 'RunConfig':
        """Return a copy with `values` applied; unknown keys raise ConfigError."""
        hints = typing.get_type_hints(type(self))
        changes = {}
        for key, value in values.items():
            if key not in hints:
                raise ConfigError(f"unknown config key: {key}")
            changes[key] = _coerce(key, hints[key], value)
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, directory: str) -> str:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, Config.CONFIG_ECHO)
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write('\n')
        return path

    def path(self, key: str, filename: str) -> str:
        """Explicit path setting, or the fixed artifact name inside `out`."""
        return getattr(self, key) or os.path.join(self.out, filename)

    @classmethod
    def help_epilog(cls) -> str:
        defaults = cls()
        lines = ['Config keys (set in a --config JSON file or with --set key=value):']
        for f in fields(cls):
            default = json.dumps(getattr(defaults, f.name))
            lines.append(f"  {f.name:<22} {f.metadata['help']} [default: {default}]")
        return '\n'.join(lines)


def _coerce(key: str, hint, value):
    """Convert a file or command-line value to the declared type of `key`."""
    origin = typing.get_origin(hint)
    try:
        if hint is bool:
            if isinstance(value, str):
                lowered = value.lower()
                if lowered not in ('true', 'false', '1', '0', 'yes', 'no'):
                    raise ValueError(value)
                return lowered in ('true', '1', 'yes')
            if not isinstance(value, (bool, int)):
                raise ValueError(value)
            return bool(value)
        if hint is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            if isinstance(value, bool):
                raise ValueError(value)
            return int(value)
        if hint is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if hint is str:
            return str(value)
        if origin is list:
            (item,) = typing.get_args(hint)
            if isinstance(value, str):
                value = [part.strip() for part in value.split(',') if part.strip()]
            if not isinstance(value, (list, tuple)):
                raise ValueError(value)
            return [_coerce(key, item, part) for part in value]
        if origin is dict:
            if isinstance(value, str):
                value = json.loads(value)
            if not isinstance(value, dict):
                raise ValueError(value)
            return {str(name): list(values) if isinstance(values, (list, tuple)) else [values]
                    for name, values in value.items()}
    except (TypeError, ValueError) as e:
        raise ConfigError(f"config key {key}: cannot read {value!r} as {getattr(hint, '__name__', hint)}") from e
    raise ConfigError(f"config key {key}: unsupported type {hint}")
