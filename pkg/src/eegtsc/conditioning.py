"""Subject conditioning around a base classifier.

* ``sa``  -- subject ignored.
* ``cic`` -- alpha-softened one-hot of the subject appended as S constant channels.
* ``cec`` -- learned E-dim subject embedding appended as E constant channels.
* ``se``  -- alpha-encoding through an MLP, concatenated with the pooled
  features in front of the classification head.

``subject_specific`` is a regime marker only: it trains one ``sa`` model per
subject (see :mod:`eegtsc.training`), so it cannot be used for a forward pass.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .data import encode_subjects_alpha
from .models import ModelSpec, build
from .nn import Linear, Module
from .seeding import rng_stream
from .tensor import Tensor

VARIANTS = ("subject_specific", "sa", "cic", "cec", "se")

CEC_INIT_STD = 0.1

# SE needs a non-linear head: with a single linear layer the logits are additive
# in the series features and the subject code, so no subject can flip a decision.
SE_HEAD_HIDDEN = 32


class ConfigurationError(ValueError):
    """Inconsistent model/mode configuration, detected at construction time."""


@dataclass(frozen=True)
class ConditioningMode:
    variant: str = "sa"
    alpha: float = 0.25
    embed_dim: int = 4
    mlp_hidden: int = 16
    d1: int = 16
    head_hidden: Optional[int] = None   # None: SE_HEAD_HIDDEN for se, 0 (linear head) otherwise

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown conditioning variant {self.variant!r}; choose from {VARIANTS}")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be >= 0")
        if self.embed_dim < 1 or self.d1 < 1 or self.mlp_hidden < 1:
            raise ConfigurationError("embed_dim, mlp_hidden and d1 must be >= 1")
        if self.head_hidden is not None and self.head_hidden < 0:
            raise ConfigurationError("head_hidden must be >= 0")

    @property
    def uses_alpha(self) -> bool:
        return self.variant in ("cic", "se")

    def with_alpha(self, alpha) -> "ConditioningMode":
        return self if alpha is None or not self.uses_alpha else replace(self, alpha=float(alpha))

    @property
    def effective_head_hidden(self) -> int:
        if self.head_hidden is not None:
            return self.head_hidden
        return SE_HEAD_HIDDEN if self.variant == "se" else 0

    def extra_channels(self, num_subjects: int) -> int:
        if self.variant == "cic":
            return num_subjects
        if self.variant == "cec":
            return self.embed_dim
        return 0

    def to_dict(self) -> dict:
        return asdict(self)


class SubjectMLP(Module):
    """``R^S -> R^hidden -> ReLU -> R^d1``."""

    def __init__(self, num_subjects: int, hidden: int, d1: int, rng: np.random.Generator):
        self.hidden = Linear(num_subjects, hidden, rng)
        self.out = Linear(hidden, d1, rng)

    def forward(self, z: Tensor) -> Tensor:
        return self.out(T.relu(self.hidden(z)))


class ConditionedModel(Module):
    """A base classifier wrapped with a subject-information scheme.

    ``spec.in_channels`` must already include the appended channels
    (``C + S`` for CIC, ``C + E`` for CEC); use :func:`make_conditioned`
    to derive it from the raw channel count.
    """

    def __init__(self, spec: ModelSpec, mode: ConditioningMode, num_subjects: int, num_channels: int,
                 seed: int = 0):
        if mode.variant == "subject_specific":
            raise ConfigurationError("subject_specific trains separate 'sa' models; build those instead")
        if num_subjects < 1 or num_channels < 1:
            raise ConfigurationError("num_subjects and num_channels must be >= 1")
        expected = num_channels + mode.extra_channels(num_subjects)
        if spec.in_channels != expected:
            raise ConfigurationError(
                f"{mode.variant} with C={num_channels}, S={num_subjects} needs a base with "
                f"{expected} input channels, spec has {spec.in_channels}"
            )
        self.mode = mode
        self.num_subjects = num_subjects
        self.num_channels = num_channels
        self.seed = seed
        extra_head = mode.d1 if mode.variant == "se" else 0
        self.base = build(spec, rng=rng_stream(seed, "init"), extra_head_features=extra_head,
                          head_hidden=mode.effective_head_hidden)
        aux = rng_stream(seed, "init.subject")
        if mode.variant == "cec":
            self.subject_table = Tensor(aux.normal(0.0, CEC_INIT_STD, size=(num_subjects, mode.embed_dim)),
                                        requires_grad=True)
        if mode.variant == "se":
            self.mlp = SubjectMLP(num_subjects, mode.mlp_hidden, mode.d1, aux)

    @property
    def spec(self) -> ModelSpec:
        return self.base.spec

    def _check_subjects(self, subjects, batch: int) -> np.ndarray:
        subjects = np.asarray(subjects, dtype=np.int64).reshape(-1)
        if subjects.shape[0] != batch:
            raise ValueError(f"got {subjects.shape[0]} subject ids for a batch of {batch}")
        if subjects.size and (subjects.min() < 1 or subjects.max() > self.num_subjects):
            raise ValueError(f"subject ids must lie in 1:{self.num_subjects}")
        return subjects

    def forward(self, subjects, x) -> Tensor:
        """``x[B, C, T]`` plus per-row subject ids -> logits ``[B, Y]``."""
        x = T.as_tensor(x)
        if x.ndim != 3 or x.shape[1] != self.num_channels:
            raise ValueError(f"expected input [B, {self.num_channels}, T], got shape {x.shape}")
        B, _, L = x.shape
        subjects = self._check_subjects(subjects, B)
        variant = self.mode.variant
        if variant == "sa":
            return self.base(x)
        if variant == "cic":
            enc = encode_subjects_alpha(subjects, self.num_subjects, self.mode.alpha)
            ind = np.repeat(enc[:, :, None], L, axis=2)
            return self.base(T.concat([x, T.Tensor._wrap(ind)], axis=1))
        if variant == "cec":
            emb = T.embedding_lookup(self.subject_table, subjects)
            return self.base(T.concat([x, T.broadcast_time(emb, L)], axis=1))
        # se
        h = self.base.features(x)
        z = self.mlp(T.Tensor._wrap(encode_subjects_alpha(subjects, self.num_subjects, self.mode.alpha)))
        return self.base.classify(T.concat([h, z], axis=1))


def make_conditioned(spec_factory, mode: ConditioningMode, num_subjects: int, num_channels: int,
                     num_classes: int, seed: int = 0) -> ConditionedModel:
    """Build with the effective input width: ``spec_factory(in_channels, num_classes)``."""
    if mode.variant == "subject_specific":
        mode = replace(mode, variant="sa")
    spec = spec_factory(num_channels + mode.extra_channels(num_subjects), num_classes)
    return ConditionedModel(spec, mode, num_subjects, num_channels, seed)


def trainable_parameters(model: ConditionedModel) -> list[Tensor]:
    """Base parameters, plus the embedding table (CEC) or subject MLP (SE)."""
    return model.parameters()
