"""Model-poisoning behaviours injected into selected clients' uploads."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _rng
from .exceptions import ConfigError
from .nn import ModelParams


@dataclass(frozen=True)
class FirstLayerNoise:
    """Additive zero-mean Gaussian noise on the first weight tensor."""

    std: float = 1.0

    def __post_init__(self):
        if not self.std >= 0:
            raise ConfigError("noise std must be >= 0")


@dataclass(frozen=True)
class RandomParams:
    """Every tensor replaced by ``U(-scale, scale)`` values."""

    scale: float = 1.0

    def __post_init__(self):
        if not self.scale >= 0:
            raise ConfigError("scale must be >= 0")


@dataclass(frozen=True)
class AttackSpec:
    targets: frozenset = field(default_factory=lambda: frozenset({1, 2}))
    kind: FirstLayerNoise | RandomParams = field(default_factory=FirstLayerNoise)
    attack_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "targets", frozenset(int(t) for t in self.targets))

    def validate(self, n_clients):
        bad = sorted(t for t in self.targets if not 0 <= t < n_clients)
        if bad:
            raise ConfigError(f"attack targets {bad} outside [0, {n_clients})")


def inject(w, client_id, round, spec):
    """Return the parameters client ``client_id`` uploads in ``round``.

    Honest clients (and ``spec=None``) get ``w`` back untouched.
    """
    if spec is None or client_id not in spec.targets:
        return w
    rng = _rng.stream(spec.attack_seed, _rng.ATTACK, client_id, round)
    kind = spec.kind
    if isinstance(kind, FirstLayerNoise):
        if kind.std == 0:
            return w
        first = next(i for i, (_, role, _) in enumerate(w.entries) if role == "weight")
        entries = list(w.entries)
        layer, role, arr = entries[first]
        entries[first] = (layer, role, arr + rng.normal(0.0, kind.std, size=arr.shape))
        return ModelParams(entries)
    if isinstance(kind, RandomParams):
        return w.map(lambda a: rng.uniform(-kind.scale, kind.scale, size=a.shape))
    raise ConfigError(f"unknown attack kind {kind!r}")
