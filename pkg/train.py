"""Training for UberNet: regularized loss, reverse-mode gradients, gradient descent, checkpoints."""
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from config import Config
from errors import CompatibilityError, ContractError, DivergenceError, FormatError, InputError, NumericError
from logger import get_logger
from models import PICKUPS, Panel, WindowBatch
from net import (ForwardTrace, Network, NetworkConfig, _categorical_index, causal_shift,
                 forward_batch, is_weight, parameter_shapes, predict_windows, target_bins)
from panel import Normalizer

log = get_logger('train')

# Windows per gradient work unit; fixed so the reduction order never depends on `jobs`
GRADIENT_CHUNK = 64

Gradients = Dict[str, np.ndarray]


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1e-4
    l1: float = 0.0

    def __post_init__(self):
        if self.lam < 0 or self.l1 < 0:
            raise ContractError(f"penalty strengths must be >= 0, got lam={self.lam}, l1={self.l1}")


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-3
    iterations: int = 100
    batch_size: int = 32
    seed: int = 0
    shuffle: bool = True
    jobs: int = 1

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ContractError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.iterations < 1 or self.batch_size < 1 or self.jobs < 1:
            raise ContractError("iterations, batch_size and jobs must be >= 1")


# ============ Loss ============

def penalty(net: Network, cfg: LossConfig) -> float:
    """(lam/2) * sum w^2 + l1 * sum |w| over weight arrays."""
    total = 0.0
    for name, value in net.params.items():
        if not is_weight(name):
            continue
        if cfg.lam:
            total += 0.5 * cfg.lam * float(np.sum(value * value))
        if cfg.l1:
            total += cfg.l1 * float(np.sum(np.abs(value)))
    return total


def loss(predictions, targets, params: Network, cfg: LossConfig) -> float:
    """Mean squared error plus the weight penalty."""
    predictions = np.asarray(predictions, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if predictions.shape != targets.shape or predictions.ndim != 1:
        raise ContractError(f"predictions {predictions.shape} and targets {targets.shape} must be matching 1-D")
    if len(targets) == 0:
        raise ContractError("loss of an empty batch")
    data = float(np.mean((targets - predictions) ** 2))
    if cfg.lam == 0 and cfg.l1 == 0:
        return data
    return data + penalty(params, cfg)


def _data_loss_and_seed(net: Network, trace: ForwardTrace, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Summed data loss over the chunk and d(sum)/d(head output)."""
    if net.config.head == 'softmax':
        bins = target_bins(net.config, targets)
        probs = trace.probs
        picked = probs[np.arange(len(targets)), bins]
        total = float(-np.sum(np.log(np.maximum(picked, 1e-300))))
        dout = probs.copy()
        dout[np.arange(len(targets)), bins] -= 1.0
        return total, dout
    residual = trace.output[:, 0] - targets
    return float(np.sum(residual * residual)), (2.0 * residual)[:, None]


# ============ Reverse pass ============

def causal_unshift(g: np.ndarray, m: int) -> np.ndarray:
    """Adjoint of causal_shift: row t receives g[t + m]."""
    if m == 0:
        return g
    out = np.zeros_like(g)
    if m < g.shape[-2]:
        out[..., :-m, :] = g[..., m:, :]
    return out


def _conv_backward(x: np.ndarray, dout: np.ndarray, kernel: np.ndarray, dilation: int):
    flat_out = dout.reshape(-1, dout.shape[-1])
    dkernel = np.empty_like(kernel)
    dx = np.zeros_like(x)
    for i in range(kernel.shape[0]):
        shifted = causal_shift(x, dilation * i).reshape(-1, x.shape[-1])
        dkernel[i] = shifted.T @ flat_out
        dx += causal_unshift(dout @ kernel[i].T, dilation * i)
    return dx, dkernel, flat_out.sum(axis=0)


def _backprop(net: Network, trace: ForwardTrace, dout: np.ndarray) -> Gradients:
    """Gradients of sum(dout * head output) with respect to every parameter."""
    config, params = net.config, net.params
    grads: Gradients = {}

    grads['head.out.weight'] = trace.head_in.T @ dout
    grads['head.out.bias'] = dout.sum(axis=0)
    dhead_in = dout @ params['head.out.weight'].T

    dhidden = np.zeros_like(trace.hidden)
    if trace.pool_index is not None:
        np.put_along_axis(dhidden, trace.pool_index[:, None, :], dhead_in[:, None, :], axis=1)
    else:
        dhidden[:, -1, :] = dhead_in
    dact, grads['head.conv.kernel'], grads['head.conv.bias'] = _conv_backward(
        trace.activated, dhidden, params['head.conv.kernel'], 1)
    dskip = dact * (1.0 - trace.activated ** 2)

    dy = np.zeros_like(dskip)
    for i in reversed(range(len(config.dilations))):
        cache = trace.blocks[i]
        d = config.dilations[i]
        prefix = f'block{i}'
        dtau = dskip + dy

        dz, grads[f'{prefix}.conv_out.kernel'], grads[f'{prefix}.conv_out.bias'] = _conv_backward(
            cache['z'], dtau, params[f'{prefix}.conv_out.kernel'], 1)
        tanh_f, sig_g = cache['tanh_f'], cache['sig_g']
        da_f = dz * sig_g * (1.0 - tanh_f ** 2)
        da_g = dz * tanh_f * sig_g * (1.0 - sig_g)

        dh_f, grads[f'{prefix}.filter.kernel'], grads[f'{prefix}.filter.bias'] = _conv_backward(
            cache['h'], da_f, params[f'{prefix}.filter.kernel'], d)
        dh_g, grads[f'{prefix}.gate.kernel'], grads[f'{prefix}.gate.bias'] = _conv_backward(
            cache['h'], da_g, params[f'{prefix}.gate.kernel'], d)
        dnormed, grads[f'{prefix}.conv_in.kernel'], grads[f'{prefix}.conv_in.bias'] = _conv_backward(
            cache['normed'], dh_f + dh_g, params[f'{prefix}.conv_in.kernel'], 1)

        xhat = cache['xhat']
        flat = dnormed.reshape(-1, dnormed.shape[-1])
        grads[f'{prefix}.norm.gain'] = (flat * xhat.reshape(flat.shape)).sum(axis=0)
        grads[f'{prefix}.norm.shift'] = flat.sum(axis=0)
        dxhat = dnormed * params[f'{prefix}.norm.gain']
        dx_norm = cache['inv_std'] * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                                      - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        dy = dy + dx_norm

    dembedded = dy
    w = config.feature_width
    parts = trace.parts.reshape(-1, trace.parts.shape[-1])
    grads['embed.mix'] = parts.T @ dembedded.reshape(-1, dembedded.shape[-1])
    dparts = dembedded @ params['embed.mix'].T
    for j, spec in enumerate(config.inputs):
        dpart = dparts[..., j * w:(j + 1) * w].reshape(-1, w)
        column = trace.inputs[..., j].reshape(-1)
        if spec.categorical:
            name = f'embed.cat.{spec.name}'
            table = np.zeros_like(params[name])
            np.add.at(table, _categorical_index(column, spec), dpart)
            grads[name] = table
        else:
            grads[f'embed.cont.{spec.name}'] = column @ dpart
    return {name: grads[name] for name in params}


def _chunk_gradients(net: Network, inputs: np.ndarray, targets: np.ndarray) -> Tuple[float, Gradients]:
    trace = forward_batch(net, inputs)
    total, dout = _data_loss_and_seed(net, trace, targets)
    return total, _backprop(net, trace, dout)


def batch_gradients(net: Network, inputs: np.ndarray, targets: np.ndarray, cfg: LossConfig,
                    jobs: int = 1) -> Tuple[float, Gradients]:
    """
    Mean regularized loss over stacked windows and its exact gradient.

    Chunks of GRADIENT_CHUNK windows may run on `jobs` worker threads; chunk
    results are summed in chunk order, so the result does not depend on jobs.
    """
    n = len(targets)
    if n == 0:
        raise ContractError("gradient of an empty batch")
    starts = list(range(0, n, GRADIENT_CHUNK))
    work = [(inputs[a:a + GRADIENT_CHUNK], targets[a:a + GRADIENT_CHUNK]) for a in starts]
    if jobs > 1 and len(work) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            results = list(executor.map(lambda item: _chunk_gradients(net, *item), work))
    else:
        results = [_chunk_gradients(net, *item) for item in work]

    total = 0.0
    grads = {name: np.zeros_like(value) for name, value in net.params.items()}
    for chunk_loss, chunk_grads in results:
        total += chunk_loss
        for name in grads:
            grads[name] += chunk_grads[name]
    value = total / n
    for name, param in net.params.items():
        grads[name] /= n
        if is_weight(name):
            if cfg.lam:
                grads[name] += cfg.lam * param
            if cfg.l1:
                grads[name] += cfg.l1 * np.sign(param)
        if not np.isfinite(grads[name]).all():
            raise NumericError("non-finite gradient", where=name)
    if cfg.lam or cfg.l1:
        value += penalty(net, cfg)
    return value, grads


def backward(net: Network, window: np.ndarray, target: float, cfg: LossConfig) -> Tuple[float, Gradients]:
    """Per-window regularized loss and its gradient for every parameter array."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise InputError(f"window must be 2-D, got shape {window.shape}")
    return batch_gradients(net, window[None], np.array([float(target)]), cfg)


# ============ Gradient check ============

@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_parameter: Optional[str]
    worst_index: Optional[int]
    checked: int
    tolerance: float
    passed: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def check_gradients(params: Dict[str, np.ndarray], objective: Callable[[Dict[str, np.ndarray]], float],
                    analytic: Gradients, step: float = 1e-5, tolerance: float = 1e-4,
                    samples: int = 200, seed: int = 0, full: bool = False) -> GradCheckReport:
    """
    Compare analytic gradients with central differences of `objective`.

    Args:
        params: Parameter arrays at which to check (not modified)
        objective: Maps a parameter dict to a scalar loss
        analytic: Gradient arrays to verify, shaped like params
        step: Finite-difference step
        tolerance: Largest accepted relative error
        samples: Coordinates to sample unless full is set
        seed: Sampling seed
        full: Check every coordinate
    """
    if not step > 0:
        raise ContractError(f"finite-difference step must be > 0, got {step}")
    names = list(params)
    sizes = np.array([params[name].size for name in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    if full or total <= samples:
        coords = np.arange(total)
    else:
        coords = np.sort(np.random.default_rng(seed).choice(total, size=samples, replace=False))

    shifted = {name: value.copy() for name, value in params.items()}
    worst = (0.0, None, None)
    for coord in coords:
        which = int(np.searchsorted(offsets, coord, side='right') - 1)
        name, index = names[which], int(coord - offsets[which])
        flat = shifted[name].reshape(-1)
        original = flat[index]
        flat[index] = original + step
        upper = objective(shifted)
        flat[index] = original - step
        lower = objective(shifted)
        flat[index] = original
        numeric = (upper - lower) / (2 * step)
        exact = float(analytic[name].reshape(-1)[index])
        rel = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-12)
        if rel > worst[0] or worst[1] is None:
            worst = (rel, name, index)
    report = GradCheckReport(max_rel_err=float(worst[0]), worst_parameter=worst[1], worst_index=worst[2],
                             checked=len(coords), tolerance=tolerance, passed=bool(worst[0] <= tolerance))
    log.debug(f"Gradient check over {report.checked} coordinates: max rel err {report.max_rel_err:.3e} "
              f"at {report.worst_parameter}[{report.worst_index}]")
    return report


def grad_check(net: Network, window: np.ndarray, target: float, cfg: LossConfig = LossConfig(),
               step: float = 1e-5, tolerance: float = 1e-4, samples: int = 200, seed: int = 0,
               full: bool = False, gradients: Optional[Gradients] = None) -> GradCheckReport:
    """Check backward() on one window; `gradients` overrides the analytic side."""
    window = np.asarray(window, dtype=np.float64)
    if gradients is None:
        _, gradients = backward(net, window, target, cfg)

    def objective(params):
        perturbed = Network(net.config, params)
        trace = forward_batch(perturbed, window[None])
        data, _ = _data_loss_and_seed(perturbed, trace, np.array([float(target)]))
        return data + penalty(perturbed, cfg)

    return check_gradients(net.params, objective, gradients, step, tolerance, samples, seed, full)


# ============ Fitting ============

def fit(net: Network, batch: WindowBatch, opt: OptimizerConfig = OptimizerConfig(),
        loss_cfg: LossConfig = LossConfig(),
        on_epoch: Optional[Callable[[int, float], None]] = None) -> Tuple[Network, List[float]]:
    """
    Gradient descent with teacher forcing on observed windows.

    Args:
        net: Starting network (left untouched; a copy is trained)
        batch: Training windows; must hold observed values only
        opt: Optimizer settings
        loss_cfg: Penalty strengths
        on_epoch: Called with (epoch, mean loss) after every epoch

    Returns:
        (trained network, one mean loss per epoch)
    """
    if len(batch) == 0:
        raise ContractError("cannot fit on an empty batch")
    if batch.has_self_fed_cells():
        raise ContractError("training windows contain model outputs; fit requires observed history")
    if batch.inputs.shape[-1] != len(net.config.inputs):
        raise InputError(f"windows have {batch.inputs.shape[-1]} columns, network expects {len(net.config.inputs)}")

    trained = net.copy()
    rng = np.random.default_rng(opt.seed)
    n = len(batch)
    history = []
    log.info(f"Training on {n} windows: {opt.iterations} epochs, batch {opt.batch_size}, "
             f"lr {opt.learning_rate}, lambda {loss_cfg.lam}")
    for epoch in range(1, opt.iterations + 1):
        order = rng.permutation(n) if opt.shuffle else np.arange(n)
        epoch_loss = 0.0
        for start in range(0, n, opt.batch_size):
            index = order[start:start + opt.batch_size]
            try:
                value, grads = batch_gradients(trained, batch.inputs[index], batch.targets[index],
                                               loss_cfg, jobs=opt.jobs)
            except NumericError as e:
                raise DivergenceError(f"training diverged ({e})", epoch) from e
            if not np.isfinite(value):
                raise DivergenceError("loss became non-finite", epoch)
            epoch_loss += value * len(index)
            if opt.learning_rate:
                for name, grad in grads.items():
                    trained.params[name] -= opt.learning_rate * grad
            log.trace(f"epoch {epoch} batch {start // opt.batch_size}: loss={value:.6g}")
        epoch_loss /= n
        if not np.isfinite(epoch_loss):
            raise DivergenceError("loss became non-finite", epoch)
        history.append(epoch_loss)
        log.info(f"epoch {epoch}/{opt.iterations} loss={epoch_loss:.6g}")
        if on_epoch:
            on_epoch(epoch, epoch_loss)
    return trained, history


# ============ Iterative inference ============

def predict_iterative(net: Network, history: Panel, horizon: int, future: pd.DataFrame,
                      normalizer: Normalizer,
                      on_step: Optional[Callable[[int, np.ndarray, np.ndarray], None]] = None) -> np.ndarray:
    """
    Forecast `horizon` slots past the end of `history`, feeding predictions back as pickups.

    Args:
        net: Trained network
        history: Raw (denormalized, imputed) panel ending where the forecast starts
        horizon: Number of future slots H
        future: Raw exogenous features for the H future slots, indexed by slot time
        normalizer: Statistics the network was trained with
        on_step: Called with (step, window, self_fed mask) before each prediction

    Returns:
        H denormalized pickup forecasts, clipped at 0
    """
    config = net.config
    s = config.s
    if horizon < 1:
        raise ContractError(f"horizon must be >= 1, got {horizon}")
    if len(history) < s + 1:
        raise ContractError(f"history of {len(history)} rows is shorter than the window of {s + 1}")
    if history.missing_cells():
        raise ContractError("history has missing cells; impute first")

    names = list(config.input_names)
    exogenous = [name for name in names if name != PICKUPS]
    slots = pd.date_range(history.grid.end, periods=horizon, freq=history.grid.delta)
    future = future if future is not None else pd.DataFrame(index=slots)
    absent = [name for name in exogenous if name not in future.columns]
    if absent:
        raise InputError(f"future features missing columns: {', '.join(absent)}")
    future = future.reindex(slots)
    if exogenous and future[exogenous].isna().any().any():
        gaps = future.index[future[exogenous].isna().any(axis=1)]
        raise InputError(f"future features missing for slot {gaps[0]}")

    recent = normalizer.apply(history).frame[names].to_numpy(dtype=np.float64)[-(s + 1):]
    rows = [row for row in recent]
    fed = [np.zeros(len(names), dtype=bool) for _ in rows]
    p_col = names.index(PICKUPS) if PICKUPS in names else None
    future_values = {name: normalizer.apply_values(name, future[name].to_numpy(dtype=np.float64))
                     for name in exogenous}

    predictions = []
    for h in range(horizon):
        window = np.stack(rows[-(s + 1):])
        mask = np.stack(fed[-(s + 1):])
        if on_step:
            on_step(h, window, mask)
        normalized = float(predict_windows(net, window[None])[0])
        value = max(0.0, float(normalizer.invert_values(PICKUPS, normalized)))
        predictions.append(value)

        row = np.empty(len(names))
        flags = np.zeros(len(names), dtype=bool)
        for j, name in enumerate(names):
            if name == PICKUPS:
                row[j] = normalizer.apply_values(PICKUPS, value)
                flags[j] = True
            else:
                row[j] = future_values[name][h]
        rows.append(row)
        fed.append(flags)
    log.debug(f"Iterative forecast of {horizon} slots from {slots[0]}"
              f"{'' if p_col is not None else ' (no pickup feedback)'}")
    return np.array(predictions)


# ============ Checkpoints ============

@dataclass
class Checkpoint:
    network: Network
    normalizer: Normalizer
    schema_sha: str
    meta: dict = field(default_factory=dict)


def save_checkpoint(net: Network, normalizer: Normalizer, path: str, schema_sha: str = '',
                    meta: Optional[dict] = None) -> str:
    """
    Write a self-describing JSON checkpoint.

    Floats are written with repr(), the shortest decimal that reads back to
    the same 64-bit value, so load -> forward is bitwise identical.
    """
    meta = dict(meta or {})
    meta['parameter_count'] = net.parameter_count()
    document = {
        'format_version': Config.CHECKPOINT_FORMAT_VERSION,
        'config': net.config.to_dict(),
        'schema_sha': schema_sha,
        'normalizer': normalizer.to_dict(),
        'params': {name: {'shape': list(value.shape), 'values': [float(v) for v in value.reshape(-1)]}
                   for name, value in net.params.items()},
        'meta': meta,
    }
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(document, f, indent=1, allow_nan=False)
        f.write('\n')
    log.info(f"Saved checkpoint ({meta['parameter_count']} parameters) to {path}")
    return path


def load_checkpoint(path: str, expected_schema_sha: Optional[str] = None) -> Checkpoint:
    """
    Read a checkpoint written by save_checkpoint.

    Raises:
        FormatError: truncated or malformed file
        CompatibilityError: schema fingerprint differs from expected_schema_sha
    """
    try:
        with open(path) as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not a valid checkpoint ({e})") from e
    except OSError as e:
        raise FormatError(f"{path}: cannot read checkpoint ({e})") from e

    try:
        version = document['format_version']
        if version != Config.CHECKPOINT_FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint format version {version}")
        config = NetworkConfig.from_dict(document['config'])
        normalizer = Normalizer.from_dict(document['normalizer'])
        params = {}
        for name, entry in document['params'].items():
            values = np.array(entry['values'], dtype=np.float64)
            params[name] = values.reshape(tuple(entry['shape']))
        schema_sha = document['schema_sha']
        meta = document.get('meta', {})
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: malformed checkpoint ({type(e).__name__}: {e})") from e

    network = Network(config, params)
    expected = [(name, shape) for name, shape, *_ in parameter_shapes(config)]
    if [(name, value.shape) for name, value in params.items()] != expected:
        raise FormatError(f"{path}: parameter arrays do not match the stored configuration")
    if expected_schema_sha is not None and schema_sha != expected_schema_sha:
        raise CompatibilityError(f"{path}: checkpoint was trained on schema {schema_sha[:12]}, "
                                 f"panel has {expected_schema_sha[:12]}")
    log.debug(f"Loaded checkpoint {path}: {network.parameter_count()} parameters")
    return Checkpoint(network=network, normalizer=normalizer, schema_sha=schema_sha, meta=meta)
