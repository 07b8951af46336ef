"""Bootstrap estimators for linear Fisher markets.

Each estimator returns a :class:`BootstrapRun` whose ``samples`` are scaled
deviations ``(beta_b - beta_gamma) / scaling``; ``scaling`` is ``c / sqrt(t)``
for the exchangeable bootstrap and ``eps`` for the numerical and proximal
ones.  Replicate ``k`` draws its weights from its own stream, so results do
not depend on the worker count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .boxqp import solve_box_qp
from .errors import NotConverged, NotPD, ValidationError
from .market import MarketInstance, subgradients
from .resampling import WEIGHTS, WeightScheme, draw_weights, rng_stream, scheme_c_squared
from .solver import SolverConfig, solve


@dataclass
class BootstrapRun:
    method: str
    mode: str
    samples: np.ndarray
    scaling: float
    beta_gamma: np.ndarray
    config: dict = field(default_factory=dict)
    flags: np.ndarray | None = None

    def __post_init__(self):
        if not self.scaling > 0:
            raise ValidationError("scaling must be positive")
        if self.flags is None:
            self.flags = np.zeros(self.samples.shape[0], dtype=bool)

    @property
    def B(self):
        return self.samples.shape[0]

    def raw(self):
        """Replicate multipliers ``beta_b``."""
        return self.beta_gamma + self.scaling * self.samples

    def to_dict(self):
        return {
            "method": self.method,
            "mode": self.mode,
            "scaling": self.scaling,
            "beta_gamma": self.beta_gamma.tolist(),
            "config": self.config,
            "samples": self.samples.tolist(),
            "flags": [bool(f) for f in self.flags],
        }


def default_eps(t, d=0.3):
    return float(t) ** (-d)


def _map(fn, B, workers):
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(fn, range(B)))
    return [fn(k) for k in range(B)]


def _check_eps(eps):
    if not 0 < eps <= 1:
        raise ValidationError("eps must lie in (0, 1]")


def _resolve(market, mode, weights, beta_gamma, config, k):
    try:
        return solve(market, mode, config, weights=weights, beta0=beta_gamma,
                     compute_duals=False).beta
    except NotConverged as e:
        raise NotConverged(str(e), best=e.best, gap=e.gap, replicate=k) from None


def exchangeable_bootstrap(market: MarketInstance, beta_gamma, scheme: WeightScheme, B: int,
                           seed=0, *, mode="lfm", config: SolverConfig | None = None,
                           workers=1) -> BootstrapRun:
    """Re-solve under exchangeable weights; deviations ``sqrt(t)(beta_b - beta_gamma)/c``."""
    beta_gamma = np.asarray(beta_gamma, dtype=float)
    c = math.sqrt(scheme_c_squared(scheme))
    scaling = (c if c > 0 else 1.0) / math.sqrt(market.t)

    def one(k):
        w = draw_weights(scheme, market.t, rng_stream(seed, WEIGHTS, k))
        if np.all(w == 1.0):
            return beta_gamma.copy()
        return _resolve(market, mode, w, beta_gamma, config, k)

    betas = np.array(_map(one, B, workers))
    return BootstrapRun("exchangeable", mode, (betas - beta_gamma) / scaling, scaling, beta_gamma,
                        {"scheme": scheme.to_dict(), "B": B, "seed": seed})


def numerical_multipliers(weights, eps):
    t = weights.shape[0]
    return 1.0 + eps * math.sqrt(t) * (weights - 1.0)


def _numerical(market, beta_gamma, eps, B, seed, mode, config, workers, scheme):
    _check_eps(eps)
    beta_gamma = np.asarray(beta_gamma, dtype=float)
    flags = np.zeros(B, dtype=bool)

    def one(k):
        w = draw_weights(scheme, market.t, rng_stream(seed, WEIGHTS, k))
        mult = numerical_multipliers(w, eps)
        if np.all(mult == 1.0):
            return beta_gamma.copy(), False
        return _resolve(market, mode, mult, beta_gamma, config, k), bool(np.any(mult < 0))

    out = _map(one, B, workers)
    betas = np.array([o[0] for o in out])
    flags[:] = [o[1] for o in out]
    return BootstrapRun("numerical", mode, (betas - beta_gamma) / eps, eps, beta_gamma,
                        {"eps": eps, "B": B, "seed": seed, "scheme": scheme.to_dict()}, flags)


def numerical_bootstrap_lfm(market, beta_gamma, eps, B, seed=0, *, config=None, workers=1,
                            scheme=WeightScheme.multinomial()) -> BootstrapRun:
    """Re-solve with item multipliers ``1 + eps sqrt(t) (W - 1)``; deviations
    ``(beta_b - beta_gamma) / eps``.  Replicates with a negative multiplier
    are flagged."""
    return _numerical(market, beta_gamma, eps, B, seed, "lfm", config, workers, scheme)


def compute_score_bootstrap(market: MarketInstance, beta, weights):
    """``sqrt(t) (1/t) sum_tau (W_tau - 1) D_F(theta_tau, beta)``."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (market.t,):
        raise ValidationError(f"expected {market.t} weights")
    return (weights - 1.0) @ subgradients(market, beta) / math.sqrt(market.t)


class ProxStep:
    """Minimizer of ``G^T u + u^T H u / 2`` over ``lo <= u <= hi``.

    Coordinates with ``lo == hi`` are fixed, so only the block of ``H`` on the
    remaining coordinates has to be positive definite.  The interior Newton
    point is returned directly when it is feasible; otherwise the active-set
    QP is solved on the free block.
    """

    def __init__(self, hessian, lo, hi):
        self.H = np.asarray(hessian, dtype=float)
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.free = self.lo < self.hi
        self.fixed = self.lo.copy()
        f = self.free
        self.H_ff = self.H[np.ix_(f, f)]
        self.shift = self.H[np.ix_(f, ~f)] @ self.lo[~f]
        self.chol = None
        if f.any():
            try:
                self.chol = linalg.cho_factor(self.H_ff, check_finite=False)
            except linalg.LinAlgError:
                raise NotPD("Hessian estimate is not positive definite on the free coordinates") from None

    def __call__(self, G):
        u = self.fixed.copy()
        f = self.free
        if self.chol is None:
            return u
        g = np.asarray(G, dtype=float)[f] + self.shift
        lo, hi = self.lo[f], self.hi[f]
        x = -linalg.cho_solve(self.chol, g, check_finite=False)
        if not (np.all(x >= lo) and np.all(x <= hi)):
            x = solve_box_qp(self.H_ff, g, lo, hi)
        u[f] = x
        return u


def _proximal(market, beta_gamma, hessian_hat, eps, B, seed, mode, lo, hi, method, scheme,
              extra=None):
    _check_eps(eps)
    beta_gamma = np.asarray(beta_gamma, dtype=float)
    step = ProxStep(hessian_hat, lo, hi)
    D = subgradients(market, beta_gamma)
    rt = math.sqrt(market.t)
    samples = np.empty((B, market.n))
    for k in range(B):
        w = draw_weights(scheme, market.t, rng_stream(seed, WEIGHTS, k))
        samples[k] = step((w - 1.0) @ D / rt)
    cfg = {"eps": eps, "B": B, "seed": seed, "scheme": scheme.to_dict()}
    cfg.update(extra or {})
    return BootstrapRun(method, mode, samples, eps, beta_gamma, cfg)


def proximal_bootstrap_lfm(market, beta_gamma, hessian_hat, eps, B, seed=0, *,
                           scheme=WeightScheme.multinomial()) -> BootstrapRun:
    """Quadratic prox step per replicate; never calls the equilibrium solver.

    ``beta_b`` minimizes ``eps G_b^T (beta - beta_gamma) + |beta - beta_gamma|_H^2 / 2``
    over the nonnegative orthant.
    """
    beta_gamma = np.asarray(beta_gamma, dtype=float)
    lo = -beta_gamma / eps
    hi = np.full_like(beta_gamma, np.inf)
    return _proximal(market, beta_gamma, hessian_hat, eps, B, seed, "lfm", lo, hi, "proximal",
                     scheme)
