"""Finite markets, the per-item dual EG objective and market generation.

A market holds ``n`` buyer budgets and a dense ``t x n`` matrix of item values
(value per unit of supply).  Every item carries supply ``1/t``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import (
    DimensionMismatch,
    GenerationFailed,
    NonPositiveBeta,
    ParseError,
    ValidationError,
)


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MarketInstance:
    """Immutable finite market.

    Parameters
    ----------
    budgets : array_like, shape (n,)
        Strictly positive budgets.
    values : array_like, shape (t, n)
        Non-negative finite values; row ``tau`` is item ``tau``.
    """

    budgets: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        b = _frozen(self.budgets)
        v = _frozen(self.values)
        if b.ndim != 1:
            raise DimensionMismatch("budgets must be a vector")
        if v.ndim != 2:
            raise DimensionMismatch("values must be a t x n matrix")
        if v.shape[1] != b.shape[0]:
            raise DimensionMismatch(
                f"values have {v.shape[1]} columns but there are {b.shape[0]} budgets"
            )
        if v.shape[0] < 1 or b.shape[0] < 1:
            raise DimensionMismatch("need at least one item and one buyer")
        if not np.all(np.isfinite(b)) or np.any(b <= 0):
            raise ValidationError("budgets must be finite and strictly positive")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValidationError("values must be finite and non-negative")
        idle = np.flatnonzero(~np.any(v > 0, axis=0))
        if idle.size:
            raise ValidationError(
                f"buyers {idle.tolist()} have no item with positive value"
            )
        object.__setattr__(self, "budgets", b)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.budgets.shape[0]

    @property
    def t(self) -> int:
        return self.values.shape[0]

    @property
    def vbar(self) -> float:
        return float(self.values.max())

    def with_budgets(self, budgets) -> "MarketInstance":
        return MarketInstance(budgets, self.values)

    def subsample(self, rows) -> "MarketInstance":
        return MarketInstance(self.budgets, self.values[np.asarray(rows)])

    def __eq__(self, other):
        if not isinstance(other, MarketInstance):
            return NotImplemented
        return np.array_equal(self.budgets, other.budgets) and np.array_equal(
            self.values, other.values
        )

    def __repr__(self):
        return f"MarketInstance(n={self.n}, t={self.t}, vbar={self.vbar:.4g})"


def _check_beta(beta):
    beta = np.asarray(beta, dtype=float)
    if np.any(~(beta > 0)):
        raise NonPositiveBeta(f"pacing multipliers must be > 0, got min {beta.min()}")
    return beta


def eval_item_objective(item_values, beta, budgets) -> float:
    """``max_i beta_i v_i - sum_i b_i log beta_i`` for a single item."""
    beta = _check_beta(beta)
    v = np.asarray(item_values, dtype=float)
    b = np.asarray(budgets, dtype=float)
    return float(np.max(beta * v) - np.sum(b * np.log(beta)))


def eval_empirical_objective(market: MarketInstance, beta, weights=None) -> float:
    """Sample EG objective ``H_t(beta)``; optional item weights ``W`` give
    ``(1/t) sum_tau W_tau F(theta_tau, beta)``."""
    beta = _check_beta(beta)
    top = np.max(market.values * beta, axis=1)
    if weights is None:
        lin = top.mean()
    else:
        lin = np.dot(weights, top) / market.t
    return float(lin - np.dot(market.budgets, np.log(beta)))


def objective_batch(market: MarketInstance, betas, weights=None) -> np.ndarray:
    """``H_t`` at each row of ``betas`` (shape ``(m, n)``).  Rows with a
    non-positive entry evaluate to ``+inf``."""
    betas = np.atleast_2d(np.asarray(betas, dtype=float))
    out = np.full(betas.shape[0], np.inf)
    ok = np.all(betas > 0, axis=1)
    if not ok.any():
        return out
    bb = betas[ok]
    # (m, t) top bids, chunked to bound memory
    lin = np.empty(bb.shape[0])
    step = max(1, int(4e6 // max(1, market.t * market.n)))
    for s in range(0, bb.shape[0], step):
        top = np.max(market.values[None, :, :] * bb[s : s + step, None, :], axis=2)
        if weights is None:
            lin[s : s + step] = top.mean(axis=1)
        else:
            lin[s : s + step] = top @ weights / market.t
    out[ok] = lin - np.log(bb) @ market.budgets
    return out


def winners(values, beta) -> np.ndarray:
    """Index of the highest bidder per item, smallest index on ties."""
    return np.argmax(np.asarray(values) * beta, axis=-1)


def subgradient(item_values, beta, budgets) -> np.ndarray:
    """Deterministic subgradient ``D_F`` of the per-item objective.

    Entry ``i`` is ``v_i 1{i = i*} - b_i / beta_i`` where ``i*`` is the
    smallest index attaining ``max_k beta_k v_k``.
    """
    beta = _check_beta(beta)
    v = np.asarray(item_values, dtype=float)
    g = -np.asarray(budgets, dtype=float) / beta
    i_star = int(np.argmax(beta * v))
    g[i_star] += v[i_star]
    return g


def subgradients(market: MarketInstance, beta) -> np.ndarray:
    """``D_F(theta_tau, beta)`` for every item, shape ``(t, n)``."""
    beta = _check_beta(beta)
    win = winners(market.values, beta)
    out = np.zeros_like(market.values)
    rows = np.arange(market.t)
    out[rows, win] = market.values[rows, win]
    out -= market.budgets / beta
    return out


# --------------------------------------------------------------------------
# generation


@dataclass(frozen=True)
class ValueDist:
    """Bounded value distribution.

    ``kind`` is ``"uniform"`` (params ``lo``, ``hi``), ``"exponential"``
    (``rate``, ``cap``; ``cap`` defaults to the 0.999 quantile) or
    ``"truncated_normal"`` (``mean``, ``sd``, ``lo``, ``hi``).
    """

    kind: str = "uniform"
    params: dict = field(default_factory=dict)

    _DEFAULTS = {
        "uniform": {"lo": 0.0, "hi": 1.0},
        "exponential": {"rate": 1.0},
        "truncated_normal": {"mean": 0.5, "sd": 0.25, "lo": 0.0, "hi": 1.0},
    }

    def __post_init__(self):
        if self.kind not in self._DEFAULTS:
            raise ValidationError(f"unknown value distribution {self.kind!r}")
        p = dict(self._DEFAULTS[self.kind])
        p.update(self.params)
        if self.kind == "exponential":
            p.setdefault("cap", -math.log(1e-3) / p["rate"])
            if not (p["rate"] > 0 and 0 < p["cap"] < math.inf):
                raise ValidationError("exponential needs rate > 0 and a finite cap")
        elif self.kind == "uniform":
            # lo == hi gives a point mass
            if not (0 <= p["lo"] <= p["hi"] < math.inf and p["hi"] > 0):
                raise ValidationError("uniform needs 0 <= lo <= hi < inf and hi > 0")
        else:
            if not (p["sd"] > 0 and 0 <= p["lo"] < p["hi"] < math.inf):
                raise ValidationError("truncated_normal needs sd > 0, 0 <= lo < hi < inf")
        object.__setattr__(self, "params", p)

    @property
    def upper(self) -> float:
        p = self.params
        return p["cap"] if self.kind == "exponential" else p["hi"]

    def sample(self, rng, size):
        p = self.params
        if self.kind == "uniform":
            return rng.uniform(p["lo"], p["hi"], size=size)
        u = rng.uniform(size=size)
        if self.kind == "exponential":
            top = -math.expm1(-p["rate"] * p["cap"])
            return -np.log1p(-u * top) / p["rate"]
        a = (p["lo"] - p["mean"]) / p["sd"]
        b = (p["hi"] - p["mean"]) / p["sd"]
        return stats.truncnorm.ppf(u, a, b, loc=p["mean"], scale=p["sd"])

    def to_dict(self):
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kind = d.pop("kind", "uniform")
        return cls(kind, d)


@dataclass(frozen=True)
class GeneratorSpec:
    """Recipe for a random market.

    Exactly one of ``budgets`` (explicit vector) and ``paced_fraction``
    should be given; with ``paced_fraction`` the first ``floor(alpha n)``
    buyers are left unconstrained and the rest are budget-constrained.
    """

    n: int
    t: int
    value_dist: ValueDist = field(default_factory=ValueDist)
    budgets: tuple | None = None
    paced_fraction: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.t < 1:
            raise ValidationError("n and t must be positive")
        if (self.budgets is None) == (self.paced_fraction is None):
            raise ValidationError("give exactly one of budgets / paced_fraction")
        if self.budgets is not None:
            if len(self.budgets) != self.n:
                raise DimensionMismatch("budget vector length must equal n")
            object.__setattr__(self, "budgets", tuple(float(x) for x in self.budgets))
        elif not 0 <= self.paced_fraction <= 1:
            raise ValidationError("paced_fraction must lie in [0, 1]")
        if isinstance(self.value_dist, dict):
            object.__setattr__(self, "value_dist", ValueDist.from_dict(self.value_dist))

    def replace(self, **kw) -> "GeneratorSpec":
        d = dict(
            n=self.n, t=self.t, value_dist=self.value_dist, budgets=self.budgets,
            paced_fraction=self.paced_fraction, seed=self.seed,
        )
        d.update(kw)
        if "budgets" in kw and kw["budgets"] is not None:
            d["paced_fraction"] = None
        if "paced_fraction" in kw and kw["paced_fraction"] is not None:
            d["budgets"] = None
        return GeneratorSpec(**d)

    def to_dict(self):
        return {
            "n": self.n,
            "t": self.t,
            "value_dist": self.value_dist.to_dict(),
            "budgets": None if self.budgets is None else list(self.budgets),
            "paced_fraction": self.paced_fraction,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        vd = d.pop("value_dist", {"kind": "uniform"})
        b = d.pop("budgets", None)
        return cls(
            value_dist=ValueDist.from_dict(vd),
            budgets=None if b is None else tuple(b),
            **d,
        )


def draw_values(spec: GeneratorSpec, rng=None) -> np.ndarray:
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    vals = spec.value_dist.sample(rng, (spec.t, spec.n))
    return np.asarray(vals, dtype=float)


def calibrate_budgets(values, paced_fraction, rng, *, unpaced_scale=None,
                      max_halvings=60, threshold=1e-3, config=None):
    """Budget rule used by the synthetic experiments.

    The first ``floor(paced_fraction * n)`` buyers get budget
    ``vbar * t`` (they can never run out).  The remaining budgets start from a
    random draw and the ones whose pacing multiplier is still within
    ``threshold`` of 1 are halved, re-solving the FPPE each round.
    """
    from .solver import solve_fppe

    values = np.asarray(values, dtype=float)
    t, n = values.shape
    vbar = float(values.max())
    k = int(math.floor(paced_fraction * n + 1e-12))
    big = vbar * t if unpaced_scale is None else unpaced_scale
    budgets = np.empty(n)
    budgets[:k] = big
    budgets[k:] = rng.uniform(0.1, 1.0, size=n - k) * vbar
    if k == n:
        return budgets
    market = MarketInstance(budgets, values)
    for _ in range(max_halvings):
        res = solve_fppe(market, config)
        hot = np.flatnonzero(res.beta[k:] >= 1 - threshold) + k
        if hot.size == 0:
            return budgets
        budgets[hot] *= 0.5
        market = MarketInstance(budgets, values)
    raise GenerationFailed(
        f"budget halving did not pace buyers within {max_halvings} rounds"
    )


def generate_market(spec: GeneratorSpec, config=None) -> MarketInstance:
    """Deterministic market from a generator spec (values first, then budgets)."""
    rng = np.random.default_rng(spec.seed)
    values = draw_values(spec, rng)
    if not np.all(np.any(values > 0, axis=0)):
        raise GenerationFailed("a buyer drew only zero values; increase t")
    if spec.budgets is not None:
        budgets = np.array(spec.budgets)
    else:
        budgets = calibrate_budgets(values, spec.paced_fraction, rng, config=config)
    return MarketInstance(budgets, values)


# --------------------------------------------------------------------------
# I/O

def _fmt(x):
    return format(float(x), ".17g")


def save_market(market: MarketInstance, path, fmt=None):
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "json")
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["budgets", *map(_fmt, market.budgets)])
            for row in market.values:
                w.writerow(list(map(_fmt, row)))
    elif fmt == "json":
        with open(path, "w") as fh:
            json.dump(market_to_dict(market), fh)
    else:
        raise ValidationError(f"unknown market format {fmt!r}")


def market_to_dict(market: MarketInstance):
    return {
        "n": market.n,
        "t": market.t,
        "budgets": market.budgets.tolist(),
        "values": market.values.tolist(),
    }


def market_from_dict(d) -> MarketInstance:
    try:
        budgets = d["budgets"]
        values = d["values"]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"market JSON missing field {exc}") from None
    if not values or any(not isinstance(r, list) for r in values):
        raise ParseError("values must be a non-empty list of rows")
    widths = {len(r) for r in values}
    if len(widths) != 1:
        bad = next(i for i, r in enumerate(values) if len(r) != len(values[0]))
        raise ParseError("ragged values matrix", row=bad)
    for key, expect in (("n", len(budgets)), ("t", len(values))):
        if key in d and d[key] != expect:
            raise DimensionMismatch(f"{key}={d[key]} but data imply {expect}")
    return MarketInstance(budgets, values)


def load_market(path, fmt=None) -> MarketInstance:
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "json")
    if fmt == "json":
        try:
            with open(path) as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", row=exc.lineno, column=exc.colno) from None
        return market_from_dict(d)
    if fmt != "csv":
        raise ValidationError(f"unknown market format {fmt!r}")
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows or rows[0][0].strip() != "budgets":
        raise ParseError("first line must start with 'budgets'", row=1, column=1)

    def num(s, r, c):
        try:
            return float(s)
        except ValueError:
            raise ParseError(f"not a number: {s!r}", row=r, column=c) from None

    budgets = [num(s, 1, j + 2) for j, s in enumerate(rows[0][1:])]
    n = len(budgets)
    values = []
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != n:
            raise ParseError(f"expected {n} values, found {len(r)}", row=i)
        values.append([num(s, i, j + 1) for j, s in enumerate(r)])
    if not values:
        raise ParseError("no item rows", row=2)
    return MarketInstance(budgets, values)
