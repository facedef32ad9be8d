"""UberNet architecture - embeddings, dilated causal convolutions, gated residual blocks, output head.

Every function here is a pure forward computation over numpy arrays shaped
(..., time, channels); leading axes are batch axes. The convolution kernel
loop over taps (`causal_dilated_conv`) is the one place to swap in a faster
implementation later; the backward pass in train.py mirrors it tap by tap.
"""
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ContractError, InputError, NumericError
from logger import get_logger
from models import PICKUPS, Panel

log = get_logger('net')

LAYER_NORM_EPS = 1e-5
HEADS = ('regression', 'softmax')


# ============ Configuration ============

@dataclass(frozen=True)
class InputSpec:
    """One input column of a window: continuous value or categorical code."""
    name: str
    kind: str = 'continuous'
    cardinality: int = 0

    @property
    def categorical(self) -> bool:
        return self.kind == 'categorical'


@dataclass(frozen=True)
class NetworkConfig:
    inputs: Tuple[InputSpec, ...]
    s: int = 16
    k: int = 100
    dilations: Tuple[int, ...] = (1, 2)
    kernel_size: int = 3
    feature_width: int = 8
    head: str = 'regression'
    bins: int = 0
    bin_edges: Tuple[float, ...] = ()
    bin_centers: Tuple[float, ...] = ()
    lam: float = 1e-4
    max_pool: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.inputs:
            raise ContractError("network needs at least one input column")
        if self.k < 1 or self.feature_width < 1 or self.kernel_size < 1:
            raise ContractError("k, feature_width and kernel_size must be positive")
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise ContractError(f"dilations must be a non-empty list of positive integers, got {self.dilations}")
        if self.head not in HEADS:
            raise ContractError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.head == 'softmax':
            if self.bins < 2 or len(self.bin_edges) != self.bins - 1 or len(self.bin_centers) != self.bins:
                raise ContractError("softmax head needs bins >= 2, bins-1 edges and bins centers")
        if self.lam < 0:
            raise ContractError(f"lambda must be >= 0, got {self.lam}")
        for spec in self.inputs:
            if spec.categorical and spec.cardinality < 1:
                raise ContractError(f"categorical input {spec.name} needs a cardinality")
        if receptive_field(self) > self.s + 1:
            log.warning(f"Receptive field {receptive_field(self)} exceeds the window of {self.s + 1} rows; "
                        f"older context is zero-padded")

    @property
    def f(self) -> int:
        """Embedding width, fixed at 2k."""
        return 2 * self.k

    @property
    def out_dim(self) -> int:
        return self.bins if self.head == 'softmax' else 1

    @property
    def input_names(self) -> Tuple[str, ...]:
        return tuple(spec.name for spec in self.inputs)

    def to_dict(self) -> dict:
        data = asdict(self)
        data['inputs'] = [asdict(spec) for spec in self.inputs]
        data['dilations'] = list(self.dilations)
        data['bin_edges'] = list(self.bin_edges)
        data['bin_centers'] = list(self.bin_centers)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'NetworkConfig':
        data = dict(data)
        data['inputs'] = tuple(InputSpec(**spec) for spec in data['inputs'])
        for key in ('dilations', 'bin_edges', 'bin_centers'):
            data[key] = tuple(data.get(key, ()))
        return cls(**data)


def input_specs(panel: Panel, include_pickups: bool = True) -> Tuple[InputSpec, ...]:
    """Input columns for windows of this panel, with categorical cardinalities."""
    specs = [InputSpec(PICKUPS)] if include_pickups else []
    for feature in panel.schema:
        if feature.categorical:
            observed = panel.frame[feature.name].max() if len(panel) else 0
            observed = 0 if np.isnan(observed) else int(observed) + 1
            specs.append(InputSpec(feature.name, 'categorical', max(feature.levels, observed, 1)))
        else:
            specs.append(InputSpec(feature.name))
    return tuple(specs)


def receptive_field(config: Union[NetworkConfig, Sequence[int]], kernel_size: int = 3) -> int:
    """Number of most recent timesteps that can influence the last output: 1 + sum (k-1)*d."""
    if isinstance(config, NetworkConfig):
        dilations, kernel_size = config.dilations, config.kernel_size
    else:
        dilations = config
    return 1 + sum((kernel_size - 1) * d for d in dilations)


# ============ Parameters ============

@dataclass(frozen=True)
class Conv1DParams:
    kernel: np.ndarray  # (kernel_size, in_channels, out_channels)
    bias: np.ndarray    # (out_channels,)
    dilation: int = 1

    def __post_init__(self):
        if self.kernel.ndim != 3 or self.kernel.shape[0] < 1:
            raise ContractError(f"conv kernel must be (k, in, out), got shape {self.kernel.shape}")
        if self.dilation < 1:
            raise ContractError(f"dilation must be >= 1, got {self.dilation}")
        if self.bias.shape != (self.kernel.shape[2],):
            raise ContractError(f"conv bias shape {self.bias.shape} does not match kernel {self.kernel.shape}")


@dataclass(frozen=True)
class ResidualBlockSpec:
    norm_gain: np.ndarray
    norm_shift: np.ndarray
    conv_in: Conv1DParams
    conv_filter: Conv1DParams
    conv_gate: Conv1DParams
    conv_out: Conv1DParams

    def __post_init__(self):
        wide, narrow = self.conv_in.kernel.shape[1], self.conv_in.kernel.shape[2]
        chain = [self.conv_filter.kernel.shape[1:], self.conv_gate.kernel.shape[1:],
                 self.conv_out.kernel.shape[1:]]
        if chain != [(narrow, narrow), (narrow, narrow), (narrow, wide)] or wide != 2 * narrow:
            raise ContractError("residual block channels must chain 2k -> k -> k -> 2k")
        if self.conv_filter.dilation != self.conv_gate.dilation:
            raise ContractError("filter and gate convolutions must share a dilation")


@dataclass(frozen=True)
class EmbeddingTable:
    inputs: Tuple[InputSpec, ...]
    continuous: Dict[str, np.ndarray]   # name -> (width,)
    categorical: Dict[str, np.ndarray]  # name -> (cardinality, width)
    mix: np.ndarray                     # (n_inputs * width, 2k)


@dataclass
class Network:
    """Config plus named parameter arrays; treat as immutable outside training."""
    config: NetworkConfig
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> 'Network':
        return Network(self.config, {name: value.copy() for name, value in self.params.items()})

    def parameter_count(self) -> int:
        return int(sum(value.size for value in self.params.values()))

    def embedding_table(self) -> EmbeddingTable:
        cont, cat = {}, {}
        for spec in self.config.inputs:
            if spec.categorical:
                cat[spec.name] = self.params[f'embed.cat.{spec.name}']
            else:
                cont[spec.name] = self.params[f'embed.cont.{spec.name}']
        return EmbeddingTable(self.config.inputs, cont, cat, self.params['embed.mix'])

    def _conv(self, prefix: str, dilation: int = 1) -> Conv1DParams:
        return Conv1DParams(self.params[f'{prefix}.kernel'], self.params[f'{prefix}.bias'], dilation)

    def block(self, i: int) -> ResidualBlockSpec:
        d = self.config.dilations[i]
        return ResidualBlockSpec(
            norm_gain=self.params[f'block{i}.norm.gain'],
            norm_shift=self.params[f'block{i}.norm.shift'],
            conv_in=self._conv(f'block{i}.conv_in'),
            conv_filter=self._conv(f'block{i}.filter', d),
            conv_gate=self._conv(f'block{i}.gate', d),
            conv_out=self._conv(f'block{i}.conv_out'),
        )

    @property
    def blocks(self) -> List[ResidualBlockSpec]:
        return [self.block(i) for i in range(len(self.config.dilations))]


def is_weight(name: str) -> bool:
    """Weights carry the L2/L1 penalty; biases and layer-norm gain/shift do not."""
    return not name.endswith(('.bias', '.gain', '.shift'))


def parameter_shapes(config: NetworkConfig) -> List[Tuple[str, Tuple[int, ...], int, int]]:
    """(name, shape, fan_in, fan_out) for every parameter array, in storage order."""
    w, k, f = config.feature_width, config.k, config.f
    shapes = []
    for spec in config.inputs:
        if spec.categorical:
            shapes.append((f'embed.cat.{spec.name}', (spec.cardinality, w), spec.cardinality, w))
        else:
            shapes.append((f'embed.cont.{spec.name}', (w,), 1, w))
    n_in = len(config.inputs) * w
    shapes.append(('embed.mix', (n_in, f), n_in, f))
    taps = config.kernel_size
    for i in range(len(config.dilations)):
        shapes += [
            (f'block{i}.norm.gain', (f,), 0, 0),
            (f'block{i}.norm.shift', (f,), 0, 0),
            (f'block{i}.conv_in.kernel', (1, f, k), f, k),
            (f'block{i}.conv_in.bias', (k,), 0, 0),
            (f'block{i}.filter.kernel', (taps, k, k), taps * k, taps * k),
            (f'block{i}.filter.bias', (k,), 0, 0),
            (f'block{i}.gate.kernel', (taps, k, k), taps * k, taps * k),
            (f'block{i}.gate.bias', (k,), 0, 0),
            (f'block{i}.conv_out.kernel', (1, k, f), k, f),
            (f'block{i}.conv_out.bias', (f,), 0, 0),
        ]
    o = config.out_dim
    shapes += [
        ('head.conv.kernel', (1, f, f), f, f),
        ('head.conv.bias', (f,), 0, 0),
        ('head.out.weight', (f, o), f, o),
        ('head.out.bias', (o,), 0, 0),
    ]
    return shapes


def parameter_count(config: NetworkConfig) -> int:
    """Closed-form parameter count."""
    w, k, f, o = config.feature_width, config.k, config.f, config.out_dim
    taps = config.kernel_size
    embed = sum(spec.cardinality * w if spec.categorical else w for spec in config.inputs)
    embed += len(config.inputs) * w * f
    block = 2 * f + (f * k + k) + 2 * (taps * k * k + k) + (k * f + f)
    head = (f * f + f) + (f * o + o)
    return embed + len(config.dilations) * block + head


def init_params(config: NetworkConfig, seed: Optional[int] = None) -> Network:
    """
    Glorot-uniform weights, zero biases, unit layer-norm gains.

    Args:
        config: Network configuration
        seed: RNG seed (defaults to config.seed)
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = {}
    for name, shape, fan_in, fan_out in parameter_shapes(config):
        if name.endswith('.gain'):
            params[name] = np.ones(shape)
        elif not is_weight(name):
            params[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            params[name] = rng.uniform(-bound, bound, size=shape)
    net = Network(config, params)
    log.debug(f"Initialized network: {net.parameter_count()} parameters, k={config.k}, "
              f"dilations={list(config.dilations)}, receptive field {receptive_field(config)}")
    return net


# ============ Layers ============

def causal_shift(x: np.ndarray, m: int) -> np.ndarray:
    """Row t takes x[t - m]; rows before m are zero."""
    if m == 0:
        return x
    out = np.zeros_like(x)
    if m < x.shape[-2]:
        out[..., m:, :] = x[..., :-m, :]
    return out


def causal_dilated_conv(x: np.ndarray, p: Conv1DParams) -> np.ndarray:
    """out(t) = sum_i kernel[i] . x(t - d*i) + bias, zero left padding, length preserved."""
    if x.shape[-1] != p.kernel.shape[1]:
        raise ContractError(f"conv expects {p.kernel.shape[1]} input channels, got {x.shape[-1]}")
    out = np.zeros(x.shape[:-1] + (p.kernel.shape[2],))
    for i in range(p.kernel.shape[0]):
        out += causal_shift(x, p.dilation * i) @ p.kernel[i]
    out += p.bias
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def gated_activation(a_f: np.ndarray, a_g: np.ndarray) -> np.ndarray:
    """tanh(a_f) * sigmoid(a_g), elementwise."""
    if a_f.shape != a_g.shape:
        raise ContractError(f"gate shapes differ: {a_f.shape} vs {a_g.shape}")
    return np.tanh(a_f) * sigmoid(a_g)


def _normalize(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    return (x - mean) * inv_std, inv_std


def layer_norm(x: np.ndarray, gain: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Standardize each timestep over channels, then scale and shift."""
    if x.shape[-1] < 1:
        raise ContractError("layer norm needs at least one channel")
    xhat, _ = _normalize(x)
    return xhat * gain + shift


def _categorical_index(values: np.ndarray, spec: InputSpec) -> np.ndarray:
    index = np.rint(values).astype(np.int64)
    if (np.abs(values - index) > 1e-9).any() or (index < 0).any() or (index >= spec.cardinality).any():
        bad = values[(np.abs(values - index) > 1e-9) | (index < 0) | (index >= spec.cardinality)]
        raise InputError(f"categorical input {spec.name} has invalid code {bad.flat[0]!r} "
                         f"(cardinality {spec.cardinality})")
    return index


def _embedding_parts(window: np.ndarray, tables: EmbeddingTable) -> np.ndarray:
    if window.shape[-1] != len(tables.inputs):
        raise InputError(f"window has {window.shape[-1]} columns, network expects {len(tables.inputs)}")
    parts = []
    for j, spec in enumerate(tables.inputs):
        column = window[..., j]
        if spec.categorical:
            parts.append(tables.categorical[spec.name][_categorical_index(column, spec)])
        else:
            if not np.isfinite(column).all():
                raise InputError(f"continuous input {spec.name} is not finite")
            parts.append(column[..., None] * tables.continuous[spec.name])
    return np.concatenate(parts, axis=-1)


def embed_inputs(window: np.ndarray, tables: EmbeddingTable) -> np.ndarray:
    """Per timestep: look up / project each column, concatenate, mix linearly to width 2k."""
    return _embedding_parts(window, tables) @ tables.mix


def _block_forward(x: np.ndarray, spec: ResidualBlockSpec) -> Dict[str, np.ndarray]:
    if x.shape[-1] != spec.conv_in.kernel.shape[1]:
        raise ContractError(f"block expects width {spec.conv_in.kernel.shape[1]}, got {x.shape[-1]}")
    xhat, inv_std = _normalize(x)
    normed = xhat * spec.norm_gain + spec.norm_shift
    h = causal_dilated_conv(normed, spec.conv_in)
    a_f = causal_dilated_conv(h, spec.conv_filter)
    a_g = causal_dilated_conv(h, spec.conv_gate)
    tanh_f = np.tanh(a_f)
    sig_g = sigmoid(a_g)
    z = tanh_f * sig_g
    tau = causal_dilated_conv(z, spec.conv_out)
    return {'x': x, 'xhat': xhat, 'inv_std': inv_std, 'normed': normed, 'h': h,
            'tanh_f': tanh_f, 'sig_g': sig_g, 'z': z, 'tau': tau, 'y': x + tau}


def residual_block(x: np.ndarray, spec: ResidualBlockSpec) -> Tuple[np.ndarray, np.ndarray]:
    """y = x + tau(x), skip = tau(x), tau = conv_out(gate(filter(h), gate(h))), h = conv_in(LN(x))."""
    cache = _block_forward(x, spec)
    return cache['y'], cache['tau']


# ============ Forward pass ============

@dataclass
class ForwardTrace:
    """Activations kept for the reverse pass."""
    inputs: np.ndarray
    parts: np.ndarray
    embedded: np.ndarray
    blocks: List[Dict[str, np.ndarray]]
    activated: np.ndarray
    hidden: np.ndarray
    head_in: np.ndarray
    pool_index: Optional[np.ndarray]
    output: np.ndarray
    probs: Optional[np.ndarray] = None

    @property
    def prediction(self) -> np.ndarray:
        return self.probs if self.probs is not None else self.output[..., 0]


def _check(layer: str, values: np.ndarray):
    if not np.isfinite(values).all():
        raise NumericError("non-finite activation", where=layer)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward_batch(net: Network, inputs: np.ndarray) -> ForwardTrace:
    """Forward pass over windows stacked as (B, s+1, F)."""
    config = net.config
    tables = net.embedding_table()
    parts = _embedding_parts(inputs, tables)
    embedded = parts @ tables.mix
    _check('embed', embedded)

    x = embedded
    skip_sum = np.zeros_like(embedded)
    caches = []
    for i in range(len(config.dilations)):
        cache = _block_forward(x, net.block(i))
        _check(f'block{i}', cache['y'])
        caches.append(cache)
        skip_sum = skip_sum + cache['tau']
        x = cache['y']

    activated = np.tanh(skip_sum)
    hidden = causal_dilated_conv(activated, net._conv('head.conv'))
    _check('head.conv', hidden)
    if config.max_pool:
        pool_index = hidden.argmax(axis=-2)
        head_in = np.take_along_axis(hidden, pool_index[..., None, :], axis=-2)[..., 0, :]
    else:
        pool_index = None
        head_in = hidden[..., -1, :]
    output = head_in @ net.params['head.out.weight'] + net.params['head.out.bias']
    _check('head.out', output)
    probs = softmax(output) if config.head == 'softmax' else None
    return ForwardTrace(inputs=inputs, parts=parts, embedded=embedded, blocks=caches,
                        activated=activated, hidden=hidden, head_in=head_in,
                        pool_index=pool_index, output=output, probs=probs)


def forward(net: Network, window: np.ndarray) -> Tuple[Union[float, np.ndarray], ForwardTrace]:
    """
    Predict from one (s+1) x F window.

    Returns:
        (prediction, trace): a scalar in normalized pickup units for the
        regression head, or B bin probabilities for the softmax head
    """
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise InputError(f"window must be 2-D (rows x columns), got shape {window.shape}")
    trace = forward_batch(net, window[None])
    prediction = trace.prediction[0]
    if net.config.head == 'regression':
        prediction = float(prediction)
    return prediction, trace


def point_forecast(net: Network, prediction: np.ndarray) -> np.ndarray:
    """Scalar forecasts from head outputs (softmax: probability-weighted bin centers)."""
    if net.config.head == 'softmax':
        return np.asarray(prediction) @ np.asarray(net.config.bin_centers)
    return np.asarray(prediction, dtype=np.float64)


def predict_windows(net: Network, inputs: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Point forecasts (normalized units) for stacked windows, evaluated in chunks."""
    out = []
    for start in range(0, len(inputs), chunk):
        trace = forward_batch(net, inputs[start:start + chunk])
        out.append(point_forecast(net, trace.prediction))
    if not out:
        return np.zeros(0)
    return np.concatenate(out)


def quantile_bins(targets: np.ndarray, bins: int) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """Interior bin edges at target quantiles and in-bin mean centers."""
    targets = np.asarray(targets, dtype=np.float64)
    if bins < 2:
        raise ContractError("softmax head needs at least 2 bins")
    edges = np.quantile(targets, np.linspace(0, 1, bins + 1)[1:-1])
    index = np.searchsorted(edges, targets, side='right')
    centers = []
    for b in range(bins):
        members = targets[index == b]
        if len(members):
            centers.append(float(members.mean()))
        else:
            low = edges[b - 1] if b > 0 else edges[0]
            high = edges[b] if b < len(edges) else edges[-1]
            centers.append(float((low + high) / 2))
    return tuple(float(e) for e in edges), tuple(centers)


def target_bins(config: NetworkConfig, targets: np.ndarray) -> np.ndarray:
    return np.searchsorted(np.asarray(config.bin_edges), targets, side='right')
