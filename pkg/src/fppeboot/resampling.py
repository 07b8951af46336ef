"""Exchangeable bootstrap weights and reproducible random streams.

Every weight vector is non-negative and sums to ``t``.  Streams are
counter-based (Philox) and keyed by ``(seed, purpose, index)``, so replicate
``k`` draws the same weights whatever order replicates are run in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateWeights, ValidationError
from .market import MarketInstance, eval_empirical_objective

# purposes for rng_stream; distinct keys give independent streams
WEIGHTS = 1
GENERATOR = 2
LIMIT = 3
TRUTH = 4
REGION = 5
DEMO = 6

_IID = {"exponential", "poisson"}


@dataclass(frozen=True)
class WeightScheme:
    """``kind`` is one of ``multinomial``, ``without_replacement``,
    ``iid_normalized`` or ``unit`` (all weights one, for degenerate checks)."""

    kind: str = "multinomial"
    alpha: float | None = None
    dist: str | None = None

    def __post_init__(self):
        if self.kind == "without_replacement":
            if self.alpha is None or not 0 < self.alpha < 1:
                raise ValidationError("without_replacement needs alpha in (0, 1)")
        elif self.kind == "iid_normalized":
            if self.dist not in _IID:
                raise ValidationError(f"iid_normalized dist must be one of {sorted(_IID)}")
        elif self.kind not in ("multinomial", "unit"):
            raise ValidationError(f"unknown weight scheme {self.kind!r}")

    @classmethod
    def multinomial(cls):
        return cls("multinomial")

    @classmethod
    def without_replacement(cls, alpha):
        return cls("without_replacement", alpha=alpha)

    @classmethod
    def iid(cls, dist="exponential"):
        return cls("iid_normalized", dist=dist)

    def to_dict(self):
        return {k: v for k, v in (("kind", self.kind), ("alpha", self.alpha), ("dist", self.dist))
                if v is not None}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("kind", "multinomial"), d.get("alpha"), d.get("dist"))


def rng_stream(seed, purpose, index=0) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(purpose), int(index)))
    return np.random.Generator(np.random.Philox(ss))


def draw_weights(scheme: WeightScheme, t: int, rng: np.random.Generator) -> np.ndarray:
    if t < 1:
        raise ValidationError("t must be at least 1")
    if scheme.kind == "unit":
        return np.ones(t)
    if scheme.kind == "multinomial":
        return rng.multinomial(t, np.full(t, 1.0 / t)).astype(float)
    if scheme.kind == "without_replacement":
        h = int(np.floor(scheme.alpha * t))
        if h >= t:
            raise ValidationError("without_replacement drops every item")
        w = np.zeros(t)
        keep = rng.permutation(t)[: t - h]
        w[keep] = t / (t - h)
        return w
    for _ in range(10):
        if scheme.dist == "exponential":
            raw = rng.exponential(1.0, size=t)
        else:
            raw = rng.poisson(1.0, size=t).astype(float)
        s = raw.sum()
        if s > 0:
            return raw * (t / s)
    raise DegenerateWeights("ten consecutive iid weight draws had zero mean")


def scheme_c_squared(scheme: WeightScheme) -> float:
    if scheme.kind == "multinomial":
        return 1.0
    if scheme.kind == "without_replacement":
        return scheme.alpha / (1.0 - scheme.alpha)
    if scheme.kind == "unit":
        return 0.0
    # exponential(1) and poisson(1) both have variance equal to mean squared
    return 1.0


def weighted_objective(market: MarketInstance, weights, beta) -> float:
    """``(1/t) sum_tau W_tau F(theta_tau, beta)``."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (market.t,):
        raise ValidationError(f"expected {market.t} weights, got shape {weights.shape}")
    return eval_empirical_objective(market, beta, weights)
