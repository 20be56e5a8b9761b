"""ResNet-1D and Inception-1D classifiers.

Both split into ``features`` (blocks + global average pooling, output width
``d0``) and ``classify``. The head is one linear layer by default; with
``head_hidden > 0`` it becomes Linear-ReLU-Linear. It can be widened by
``extra_head_features`` so a second feature vector can be concatenated in
front of it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Union

import numpy as np

from . import tensor as T
from .nn import BatchNorm1d, Conv1d, Linear, Module
from .seeding import rng_stream
from .tensor import Tensor


@dataclass(frozen=True)
class ResNetSpec:
    in_channels: int
    num_classes: int
    filters: tuple = (64, 128, 128)
    kernels: tuple = (8, 5, 3)
    family: str = field(default="resnet", init=False)

    def __post_init__(self):
        object.__setattr__(self, "filters", tuple(self.filters))
        object.__setattr__(self, "kernels", tuple(self.kernels))
        if len(self.filters) != 3:
            raise ValueError("ResNet has exactly three blocks")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ValueError("need in_channels >= 1 and num_classes >= 2")

    @property
    def d0(self) -> int:
        return self.filters[-1]

    @property
    def min_length(self) -> int:
        return 1


@dataclass(frozen=True)
class InceptionSpec:
    in_channels: int
    num_classes: int
    depth: int = 3
    bottleneck: int = 32
    kernels: tuple = (10, 20, 40)
    branch_filters: int = 32
    family: str = field(default="inception", init=False)

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(self.kernels))
        if self.depth not in (3, 4):
            raise ValueError(f"Inception depth must be 3 or 4, got {self.depth}")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ValueError("need in_channels >= 1 and num_classes >= 2")

    @property
    def d0(self) -> int:
        return (len(self.kernels) + 1) * self.branch_filters

    @property
    def min_length(self) -> int:
        return max(self.kernels)


ModelSpec = Union[ResNetSpec, InceptionSpec]


def spec_to_dict(spec: ModelSpec) -> dict:
    d = asdict(spec)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def spec_from_dict(d: dict) -> ModelSpec:
    d = dict(d)
    family = d.pop("family")
    cls = {"resnet": ResNetSpec, "inception": InceptionSpec}.get(family)
    if cls is None:
        raise ValueError(f"unknown model family {family!r}")
    return cls(**d)


class ResNetBlock(Module):
    """conv(8)-BN-ReLU, conv(5)-BN-ReLU, conv(3)-BN, plus shortcut, then ReLU."""

    def __init__(self, in_channels: int, filters: int, kernels: tuple, rng: np.random.Generator):
        self.convs = []
        self.norms = []
        c = in_channels
        for k in kernels:
            self.convs.append(Conv1d(c, filters, k, rng))
            self.norms.append(BatchNorm1d(filters))
            c = filters
        if in_channels != filters:
            self.shortcut = Conv1d(in_channels, filters, 1, rng)
            self.shortcut_norm = BatchNorm1d(filters)
        else:
            self.shortcut = None
            self.shortcut_norm = None

    def forward(self, x: Tensor) -> Tensor:
        h = x
        last = len(self.convs) - 1
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            h = norm(conv(h))
            if i < last:
                h = T.relu(h)
        skip = x if self.shortcut is None else self.shortcut_norm(self.shortcut(x))
        return T.relu(h + skip)


class InceptionBlock(Module):
    """Bottleneck, parallel convolutions and a max-pool branch, BN-ReLU, residual."""

    def __init__(self, in_channels: int, spec: InceptionSpec, rng: np.random.Generator):
        nf = spec.branch_filters
        out = spec.d0
        if in_channels > 1:
            self.bottleneck = Conv1d(in_channels, spec.bottleneck, 1, rng)
            branch_in = spec.bottleneck
        else:
            self.bottleneck = None
            branch_in = in_channels
        self.branches = [Conv1d(branch_in, nf, k, rng) for k in spec.kernels]
        self.pool_conv = Conv1d(in_channels, nf, 1, rng)
        self.norm = BatchNorm1d(out)
        self.shortcut = Conv1d(in_channels, out, 1, rng)
        self.shortcut_norm = BatchNorm1d(out)

    def forward(self, x: Tensor) -> Tensor:
        z = x if self.bottleneck is None else self.bottleneck(x)
        outs = [conv(z) for conv in self.branches]
        outs.append(self.pool_conv(T.pool1d(x, "max", 3, 1, padding="same")))
        h = T.relu(self.norm(T.concat(outs, axis=1)))
        return T.relu(h + self.shortcut_norm(self.shortcut(x)))


class MLPHead(Module):
    """``Linear -> ReLU -> Linear``; used when a head must mix two feature blocks non-additively."""

    def __init__(self, in_features: int, hidden: int, out_features: int, rng: np.random.Generator):
        self.hidden = Linear(in_features, hidden, rng)
        self.out = Linear(hidden, out_features, rng)

    def forward(self, h: Tensor) -> Tensor:
        return self.out(T.relu(self.hidden(h)))


def make_head(in_features: int, num_classes: int, rng: np.random.Generator, hidden: int = 0) -> Module:
    if hidden < 0:
        raise ValueError("head_hidden must be >= 0")
    return Linear(in_features, num_classes, rng) if hidden == 0 else MLPHead(in_features, hidden, num_classes, rng)


class _Classifier(Module):
    spec: ModelSpec

    def features(self, x: Tensor) -> Tensor:
        """``[B, C', T] -> [B, d0]``."""
        x = T.as_tensor(x)
        if x.ndim != 3 or x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"expected input [B, {self.spec.in_channels}, T], got shape {x.shape}"
            )
        for block in self.blocks:
            x = block(x)
        return T.global_avg_pool(x)

    def classify(self, h: Tensor) -> Tensor:
        return self.head(h)

    def forward(self, x: Tensor) -> Tensor:
        return self.classify(self.features(x))


class ResNet1D(_Classifier):
    def __init__(self, spec: ResNetSpec, rng: np.random.Generator, extra_head_features: int = 0,
                 head_hidden: int = 0):
        self.spec = spec
        self.blocks = []
        c = spec.in_channels
        for f in spec.filters:
            self.blocks.append(ResNetBlock(c, f, spec.kernels, rng))
            c = f
        self.head = make_head(spec.d0 + extra_head_features, spec.num_classes, rng, head_hidden)


class Inception1D(_Classifier):
    def __init__(self, spec: InceptionSpec, rng: np.random.Generator, extra_head_features: int = 0,
                 head_hidden: int = 0):
        self.spec = spec
        self.blocks = []
        c = spec.in_channels
        for _ in range(spec.depth):
            self.blocks.append(InceptionBlock(c, spec, rng))
            c = spec.d0
        self.head = make_head(spec.d0 + extra_head_features, spec.num_classes, rng, head_hidden)


def build(spec: ModelSpec, seed: int = 0, extra_head_features: int = 0,
          rng: np.random.Generator | None = None, head_hidden: int = 0) -> _Classifier:
    """Instantiate a classifier; parameters depend only on ``spec`` and ``seed`` (or ``rng``)."""
    rng = rng_stream(seed, "init") if rng is None else rng
    if isinstance(spec, ResNetSpec):
        return ResNet1D(spec, rng, extra_head_features, head_hidden)
    if isinstance(spec, InceptionSpec):
        return Inception1D(spec, rng, extra_head_features, head_hidden)
    raise TypeError(f"unsupported model spec {type(spec).__name__}")


@dataclass(frozen=True)
class ModelFamily:
    """Architecture name plus fixed overrides; produces specs for a given input width."""

    name: str = "inception"
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in ("resnet", "inception"):
            raise ValueError(f"unknown model family {self.name!r}")

    @property
    def has_depth(self) -> bool:
        return self.name == "inception"

    def spec(self, in_channels: int, num_classes: int, depth: int | None = None) -> ModelSpec:
        kw = dict(self.overrides)
        if self.name == "resnet":
            return ResNetSpec(in_channels, num_classes, **kw)
        if depth is not None:
            kw["depth"] = depth
        return InceptionSpec(in_channels, num_classes, **kw)
