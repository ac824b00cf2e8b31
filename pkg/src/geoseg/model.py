"""Network configuration, parameter containers and the forward pass.

Architecture: per-scale oriented filter banks (rectified, concatenated) ->
1x1 bridge -> L single-convolution residual blocks -> 3x3 head -> logistic.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from enum import Enum

import numpy as np

from . import priors
from .numerics import Padding, conv2d, relu, sigmoid


class InitStrategy(str, Enum):
    XAVIER = "xavier"
    PATTERNS = "patterns"
    RIDGE = "ridge"


@dataclass(frozen=True)
class ScaleSpec:
    scale_id: int
    filter_size: int
    pattern_size: int
    c1: float
    c2: float


DEFAULT_SCALES = {
    1: ScaleSpec(1, 3, 6, 1.0, 10.0),
    2: ScaleSpec(2, 5, 10, 2.0, 10.0),
    3: ScaleSpec(3, 7, 14, 3.0, 10.0),
    4: ScaleSpec(4, 9, 18, 4.0, 10.0),
    5: ScaleSpec(5, 11, 22, 5.0, 10.0),
}


@dataclass(frozen=True)
class ModelConfig:
    scales: tuple = tuple(DEFAULT_SCALES[s] for s in range(1, 6))
    n_filters: int = 12  # K, per scale
    n_blocks: int = 14  # L
    width: int = 32  # D
    init: InitStrategy = InitStrategy.RIDGE

    def __post_init__(self):
        object.__setattr__(self, "init", InitStrategy(self.init))
        object.__setattr__(self, "scales", tuple(
            s if isinstance(s, ScaleSpec) else ScaleSpec(**s) for s in self.scales))
        if not self.scales or self.n_filters < 1 or self.n_blocks < 0 or self.width < 1:
            raise ValueError(f"invalid model config {self}")

    @property
    def n_scales(self):
        return len(self.scales)

    @property
    def n_features(self):
        return self.n_scales * self.n_filters

    @property
    def max_filter_size(self):
        return max(s.filter_size for s in self.scales)

    @classmethod
    def full(cls, **kw):
        return cls(**kw)

    @classmethod
    def single_scale(cls, scale_id=3, **kw):
        return cls(scales=(DEFAULT_SCALES[scale_id],), **kw)

    @classmethod
    def tiny(cls, **kw):
        kw = {"n_filters": 2, "n_blocks": 2, "width": 3, **kw}
        return cls.single_scale(**kw)

    def to_dict(self):
        d = asdict(self)
        d["init"] = self.init.value
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "scales": tuple(ScaleSpec(**s) for s in d["scales"])})


@dataclass
class RepresentationParams:
    banks: list  # per scale, (K, m, m)


@dataclass
class TaskParams:
    bridge: np.ndarray  # (1, 1, Q*K, D)
    bridge_bias: np.ndarray  # (D,)
    blocks: list  # L x (3, 3, D, D)
    block_biases: list  # L x (D,)
    head: np.ndarray  # (3, 3, D, 1)
    head_bias: np.ndarray  # (1,)


@dataclass
class Params:
    rep: RepresentationParams
    task: TaskParams

    def named_tensors(self):
        """Tensors in serialization order: rep banks, bridge, blocks 1..L, head (bias after kernel)."""
        out = [(f"rep.{i}", b) for i, b in enumerate(self.rep.banks)]
        t = self.task
        out += [("bridge", t.bridge), ("bridge_bias", t.bridge_bias)]
        for i, (k, b) in enumerate(zip(t.blocks, t.block_biases)):
            out += [(f"block.{i}", k), (f"block_bias.{i}", b)]
        out += [("head", t.head), ("head_bias", t.head_bias)]
        return out

    def tensors(self):
        return [a for _, a in self.named_tensors()]

    @classmethod
    def from_tensors(cls, tensors, n_scales, n_blocks):
        tensors = list(tensors)
        Q, L = n_scales, n_blocks
        banks, rest = tensors[:Q], tensors[Q:]
        task = TaskParams(
            bridge=rest[0], bridge_bias=rest[1],
            blocks=rest[2:2 + 2 * L:2], block_biases=rest[3:3 + 2 * L:2],
            head=rest[2 + 2 * L], head_bias=rest[3 + 2 * L],
        )
        return cls(RepresentationParams(list(banks)), task)

    def map(self, fn):
        return Params.from_tensors([fn(a) for a in self.tensors()],
                                   len(self.rep.banks), len(self.task.blocks))

    def copy(self):
        return self.map(np.array)

    def flatten(self):
        return np.concatenate([a.ravel() for a in self.tensors()])

    def unflatten(self, vec):
        out, i = [], 0
        for a in self.tensors():
            out.append(np.asarray(vec[i:i + a.size], dtype=np.float64).reshape(a.shape))
            i += a.size
        return Params.from_tensors(out, len(self.rep.banks), len(self.task.blocks))


def xavier_uniform(rng, shape):
    """Glorot uniform for a (h, w, C, K) kernel."""
    h, w, c, k = shape
    limit = np.sqrt(6.0 / (h * w * c + h * w * k))
    return rng.uniform(-limit, limit, size=shape)


def _unit(f):
    f = f - f.mean()
    return f / np.sqrt(np.sum(f ** 2))


def init_representation(config, rng):
    banks = []
    K = config.n_filters
    for spec in config.scales:
        m = spec.filter_size
        if config.init is InitStrategy.XAVIER:
            bank = xavier_uniform(rng, (m, m, 1, K)).transpose(3, 0, 1, 2)[:, :, :, 0]
        elif config.init is InitStrategy.PATTERNS:
            # aligned pattern resampled on the filter's own grid
            bank = np.stack([_unit(priors.make_pattern(t, m, spec.c1, spec.c2).pixels)
                             for t in priors.orientations(K)])
        else:
            bank = priors.make_ridge_bank(spec.scale_id, K, size=m).filters
        banks.append(np.ascontiguousarray(bank, dtype=np.float64))
    return RepresentationParams(banks)


def init_params(config, seed):
    """Deterministic initial parameters; task weights Xavier-uniform, biases zero."""
    rng = np.random.default_rng(seed)
    rep = init_representation(config, rng)
    D = config.width
    task = TaskParams(
        bridge=xavier_uniform(rng, (1, 1, config.n_features, D)),
        bridge_bias=np.zeros(D),
        blocks=[xavier_uniform(rng, (3, 3, D, D)) for _ in range(config.n_blocks)],
        block_biases=[np.zeros(D) for _ in range(config.n_blocks)],
        head=xavier_uniform(rng, (3, 3, D, 1)),
        head_bias=np.zeros(1),
    )
    return Params(rep, task)


def bank_as_kernel(bank):
    """(K, m, m) filter bank -> (m, m, 1, K) conv kernel."""
    return bank.transpose(1, 2, 0)[:, :, None, :]


def _as_input(X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim in (2, 3) and (X.ndim == 2 or X.shape[-1] != 1):
        X = X[..., None]
    if not np.all(np.isfinite(X)):
        raise ValueError("input image contains non-finite values")
    return X


def representation_forward(X, rep, trace=None):
    """Rectified same-padded responses of every scale, channel-concatenated."""
    X = _as_input(X)
    feats = []
    for i, bank in enumerate(rep.banks):
        z = conv2d(X, bank_as_kernel(bank), padding=Padding.SAME)
        if trace is not None:
            trace[f"rep_pre.{i}"] = z
        feats.append(relu(z))
    return np.concatenate(feats, axis=-1)


def residual_block_forward(x, kernel, bias, trace=None, key=None):
    z = conv2d(x, kernel, bias, padding=Padding.SAME)
    if trace is not None:
        trace[key] = z
    return x + relu(z)


def forward(X, params, config=None, trace=None):
    """Soft segmentation map for an (M, N) image or an (B, M, N) batch.

    When ``trace`` is a dict it is filled with every intermediate needed by
    the reverse pass.
    """
    X = _as_input(X)
    rep, task = params.rep, params.task
    feats = representation_forward(X, rep, trace)
    zb = conv2d(feats, task.bridge, task.bridge_bias, padding=Padding.SAME)
    x = relu(zb)
    if trace is not None:
        trace.update(input=X, features=feats, bridge_pre=zb, block_in=[x])
    for i, (k, b) in enumerate(zip(task.blocks, task.block_biases)):
        x = residual_block_forward(x, k, b, trace, f"block_pre.{i}")
        if trace is not None:
            trace["block_in"].append(x)
    h = conv2d(x, task.head, task.head_bias, padding=Padding.SAME)
    y = sigmoid(h[..., 0])
    if trace is not None:
        trace["output"] = y
    return y


@dataclass
class ParamCount:
    representation: int
    bridge: int
    blocks: int
    head: int

    @property
    def total(self):
        return self.representation + self.bridge + self.blocks + self.head


def count_params(params_or_config, include_bias=False):
    """Per-component parameter counts; biases optional."""
    if isinstance(params_or_config, ModelConfig):
        c = params_or_config
        D, L, F = c.width, c.n_blocks, c.n_features
        rep = sum(c.n_filters * s.filter_size ** 2 for s in c.scales)
        bridge, blocks, head = F * D, L * 9 * D * D, 9 * D
        if include_bias:
            bridge, blocks, head = bridge + D, blocks + L * D, head + 1
        return ParamCount(rep, bridge, blocks, head)
    t = params_or_config.task
    b = include_bias
    return ParamCount(
        representation=sum(x.size for x in params_or_config.rep.banks),
        bridge=t.bridge.size + (t.bridge_bias.size if b else 0),
        blocks=sum(k.size for k in t.blocks) + (sum(x.size for x in t.block_biases) if b else 0),
        head=t.head.size + (t.head_bias.size if b else 0),
    )


def with_init(config, init):
    return replace(config, init=InitStrategy(init))
