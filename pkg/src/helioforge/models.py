"""SUNSET-family networks: baseline, condition-matrix and dual-head variants.

Layout of a model with ``condition_mode="none"``::

    images [N, 3*frames, S, S]
      -> block1: conv3x3(conv_filters[0]) -> ReLU -> BatchNorm -> maxpool2
      -> block2: conv3x3(conv_filters[1]) -> ReLU -> BatchNorm -> maxpool2
      -> flatten, concat lag vector [N, lag_len]
      -> head: dense(fc_width) -> ReLU -> dropout -> dense(fc_width) -> ReLU -> dropout -> dense(1)

Frames are stacked on the channel axis, frame-major (RGB of the oldest frame first).
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, get_dtype

CONDITION_MODES = ("none", "condition_matrix", "dual_head")
GROUPS = ("conv", "fc")


@dataclass(frozen=True)
class SunsetConfig:
    image_size: int = 64
    frames: int = 8
    lag_len: int = 8
    conv_filters: tuple[int, int] = (24, 48)
    fc_width: int = 1024
    dropout_rate: float = 0.4
    condition_mode: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "conv_filters", tuple(int(f) for f in self.conv_filters))
        if self.image_size <= 0 or self.image_size % 4:
            raise ValueError(f"image_size must be a positive multiple of 4, got {self.image_size}")
        if len(self.conv_filters) != 2 or min(self.conv_filters) <= 0:
            raise ValueError(f"conv_filters must be two positive counts, got {self.conv_filters}")
        if self.frames <= 0 or self.lag_len <= 0 or self.fc_width <= 0:
            raise ValueError("frames, lag_len and fc_width must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.condition_mode not in CONDITION_MODES:
            raise ValueError(f"condition_mode must be one of {CONDITION_MODES}, got {self.condition_mode!r}")

    @classmethod
    def test_profile(cls, **overrides) -> "SunsetConfig":
        """32-pixel images, filters (8, 16), 64-wide dense layers."""
        base = dict(image_size=32, conv_filters=(8, 16), fc_width=64)
        base.update(overrides)
        return cls(**base)

    @property
    def in_channels(self) -> int:
        return 3 * self.frames + (self.condition_mode == "condition_matrix")

    @property
    def flat_dim(self) -> int:
        return (self.image_size // 4) ** 2 * self.conv_filters[1]

    @property
    def heads(self) -> tuple[str, ...]:
        return ("head0", "head1") if self.condition_mode == "dual_head" else ("head",)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_filters"] = list(self.conv_filters)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SunsetConfig":
        return cls(**dict(d))

    def with_mode(self, condition_mode: str) -> "SunsetConfig":
        return replace(self, condition_mode=condition_mode)


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    group: str
    buffer: bool
    init: str


def parameter_specs(config: SunsetConfig) -> list[ParamSpec]:
    f1, f2 = config.conv_filters
    specs = []
    for block, cin, f in (("block1", config.in_channels, f1), ("block2", f1, f2)):
        specs += [
            ParamSpec(f"{block}.conv.weight", (f, cin, 3, 3), "conv", False, "he"),
            ParamSpec(f"{block}.conv.bias", (f,), "conv", False, "zeros"),
            ParamSpec(f"{block}.bn.gamma", (f,), "conv", False, "ones"),
            ParamSpec(f"{block}.bn.beta", (f,), "conv", False, "zeros"),
            ParamSpec(f"{block}.bn.running_mean", (f,), "conv", True, "zeros"),
            ParamSpec(f"{block}.bn.running_var", (f,), "conv", True, "ones"),
        ]
    width = config.fc_width
    for head in config.heads:
        for layer, din, dout in (
            ("fc1", config.flat_dim + config.lag_len, width),
            ("fc2", width, width),
            ("out", width, 1),
        ):
            specs += [
                ParamSpec(f"{head}.{layer}.weight", (din, dout), "fc", False, "he"),
                ParamSpec(f"{head}.{layer}.bias", (dout,), "fc", False, "zeros"),
            ]
    return sorted(specs, key=lambda s: s.name)


def closed_form_param_count(config: SunsetConfig) -> int:
    """Trainable parameter count.

    conv block k: 9*c_in*f_k + f_k (conv) + 2*f_k (BatchNorm scale/shift);
    each head: (flat + lag_len + 1)*w + (w + 1)*w + (w + 1), with
    flat = (S/4)^2 * f_2.
    """
    f1, f2 = config.conv_filters
    conv = 9 * config.in_channels * f1 + 3 * f1 + 9 * f1 * f2 + 3 * f2
    w = config.fc_width
    head = (config.flat_dim + config.lag_len + 1) * w + (w + 1) * w + (w + 1)
    return conv + len(config.heads) * head


def _name_seed(seed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, zlib.crc32(name.encode())])


@dataclass
class ModelParams:
    """Named model tensors in lexicographic order, each tagged ``conv`` or ``fc``.

    BatchNorm running statistics live here too, flagged as buffers.
    """

    config: SunsetConfig
    tensors: dict[str, Tensor]
    groups: dict[str, str]
    buffers: frozenset[str] = field(default_factory=frozenset)
    seed: int | None = None

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if n not in self.buffers]

    def count(self, trainable_only: bool = True) -> int:
        return int(np.sum([t.size for n, t in self.tensors.items() if not (trainable_only and n in self.buffers)]))

    def copy(self) -> "ModelParams":
        tensors = {n: Tensor(t.data.copy(), dtype=t.data.dtype) for n, t in self.tensors.items()}
        return ModelParams(self.config, tensors, dict(self.groups), self.buffers, self.seed)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}


def build_model(config: SunsetConfig, seed: int, dtype=None) -> ModelParams:
    """Fresh parameters: fan-in scaled uniform for weights, each drawn from a
    stream keyed by ``(seed, parameter name)``."""
    dtype = dtype or get_dtype()
    tensors, groups, buffers = {}, {}, set()
    for spec in parameter_specs(config):
        if spec.init == "he":
            fan_in = int(np.prod(spec.shape[1:])) if len(spec.shape) == 4 else spec.shape[0]
            limit = np.sqrt(6.0 / fan_in)
            rng = np.random.default_rng(_name_seed(seed, spec.name))
            data = rng.uniform(-limit, limit, size=spec.shape)
        elif spec.init == "ones":
            data = np.ones(spec.shape)
        else:
            data = np.zeros(spec.shape)
        tensors[spec.name] = Tensor(data, dtype=dtype)
        groups[spec.name] = spec.group
        if spec.buffer:
            buffers.add(spec.name)
    return ModelParams(config, tensors, groups, frozenset(buffers), seed)


def param_groups(params: ModelParams, group: str) -> list[str]:
    if group not in GROUPS:
        raise ValueError(f"unknown parameter group {group!r}; expected one of {GROUPS}")
    return [n for n in params if params.groups[n] == group]


def dropout_streams(config: SunsetConfig, seed: int) -> dict[str, np.random.Generator]:
    """One independent generator per dropout layer, keyed by layer name."""
    names = [f"{h}.drop{k}" for h in config.heads for k in (1, 2)]
    return {n: np.random.default_rng(_name_seed(seed, n)) for n in names}


def _site_matrix(site, n: int) -> np.ndarray:
    site = np.asarray(site, dtype=float)
    if site.shape == (2,):
        site = np.broadcast_to(site, (n, 2))
    if site.shape != (n, 2):
        raise ValueError(f"site labels must be a one-hot pair or an [N, 2] array, got shape {site.shape}")
    return site


def _conv_features(params, config, images: Tensor, mode: str, frozen) -> Tensor:
    x = images
    for block in ("block1", "block2"):
        p = f"{block}."
        x = ad.conv2d(x, params[p + "conv.weight"], params[p + "conv.bias"])
        x = ad.relu(x)
        bn_frozen = (p + "bn.gamma") in frozen
        x = ad.batchnorm2d(
            x,
            params[p + "bn.gamma"],
            params[p + "bn.beta"],
            params[p + "bn.running_mean"].data,
            params[p + "bn.running_var"].data,
            mode="eval" if bn_frozen else mode,
            update_stats=not bn_frozen,
        )
        x = ad.maxpool2(x)
    return ad.flatten(x)


def _head(params, config, head: str, feats: Tensor, lags: Tensor, train: bool, rngs) -> Tensor:
    rngs = rngs or {}
    x = ad.concat([feats, lags], axis=1)
    for k, layer in ((1, "fc1"), (2, "fc2")):
        x = ad.relu(ad.dense(x, params[f"{head}.{layer}.weight"], params[f"{head}.{layer}.bias"]))
        x = ad.dropout(x, config.dropout_rate, rngs.get(f"{head}.drop{k}"), train)
    return ad.dense(x, params[f"{head}.out.weight"], params[f"{head}.out.bias"])


def _prepare(config, images, lags, site):
    images = ad.as_tensor(images)
    lags = ad.as_tensor(lags)
    n = images.shape[0]
    expected = (n, 3 * config.frames, config.image_size, config.image_size)
    if images.shape != expected:
        raise ad.ShapeError(f"images must have shape {expected}, got {images.shape}")
    if lags.shape != (n, config.lag_len):
        raise ad.ShapeError(f"lags must have shape {(n, config.lag_len)}, got {lags.shape}")
    if config.condition_mode != "none":
        if site is None:
            raise ValueError(f"condition_mode {config.condition_mode!r} requires site labels")
        site = _site_matrix(site, n)
    if config.condition_mode == "condition_matrix":
        plane = np.broadcast_to(site[:, 1].reshape(n, 1, 1, 1), (n, 1, config.image_size, config.image_size))
        images = ad.concat([images, Tensor(plane, dtype=images.data.dtype)], axis=1)
    return images, lags, site


def forward(
    params: ModelParams,
    images,
    lags,
    site=None,
    mode: str = "eval",
    rngs: Mapping[str, np.random.Generator] | None = None,
    frozen=frozenset(),
) -> Tensor:
    """Normalized prediction [N, 1] for t0 + 15 min.

    ``site`` is a one-hot pair (or [N, 2] array); required unless the model is
    unconditioned. Train mode needs ``rngs`` from :func:`dropout_streams` when
    dropout is active. BatchNorm layers whose parameters are in ``frozen`` run
    on their running statistics and leave them untouched.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    config = params.config
    images, lags, site = _prepare(config, images, lags, site)
    feats = _conv_features(params, config, images, mode, frozen)
    train = mode == "train"
    if config.condition_mode != "dual_head":
        return _head(params, config, "head", feats, lags, train, rngs)
    stacked = ad.concat([_head(params, config, h, feats, lags, train, rngs) for h in config.heads], axis=1)
    onehot = Tensor(site, dtype=stacked.data.dtype)
    return ad.sum(ad.mul(stacked, onehot), axis=1, keepdims=True)


def head_forward(params: ModelParams, images, lags, head: int, site=None) -> Tensor:
    """Eval-mode output of one dual-head branch alone."""
    config = params.config
    images, lags, _ = _prepare(config, images, lags, site if site is not None else [1.0, 0.0])
    feats = _conv_features(params, config, images, "eval", frozenset())
    return _head(params, config, config.heads[head], feats, lags, False, None)
