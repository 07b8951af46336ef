"""Bootstrap estimators for first-price pacing equilibria, plus a
demonstration that the plain multinomial bootstrap fails at a degenerate
unpaced buyer."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import norm

from .bootstrap_lfm import BootstrapRun, _numerical, _proximal
from .errors import InfeasibleTieSplit, SeedSearchFailed, ValidationError
from .market import MarketInstance
from .resampling import DEMO, WEIGHTS, WeightScheme, draw_weights, rng_stream
from .solver import default_delta_t, recover_duals, solve_fppe


class RegimeWarning(UserWarning):
    """The estimated active sets fall outside the estimator's validity regime."""


def _estimated_unpaced_with_leftover(market, beta_gamma, delta_t):
    beta_gamma = np.asarray(beta_gamma, dtype=float)
    try:
        delta, _, _ = recover_duals(market, beta_gamma, "fppe")
    except InfeasibleTieSplit:
        return ()
    near = beta_gamma > 1 - delta_t
    return tuple(np.flatnonzero(near & (delta > delta_t * market.budgets)))


def _regime_check(market, beta_gamma, delta_t, name):
    delta_t = default_delta_t(market.t) if delta_t is None else delta_t
    plus = _estimated_unpaced_with_leftover(market, beta_gamma, delta_t)
    if plus:
        warnings.warn(
            f"{name}: buyers {list(plus)} look unpaced with leftover budget; "
            "this estimator assumes every buyer exhausts its budget",
            RegimeWarning,
            stacklevel=3,
        )
    return plus


def numerical_bootstrap_fppe(market: MarketInstance, beta_gamma, eps, B, seed=0, *,
                             config=None, workers=1, delta_t=None,
                             scheme=WeightScheme.multinomial()) -> BootstrapRun:
    """Re-solve the perturbed problem over ``(0, 1]^n``; deviations ``(beta_b - beta_gamma)/eps``."""
    plus = _regime_check(market, beta_gamma, delta_t, "numerical bootstrap")
    run = _numerical(market, beta_gamma, eps, B, seed, "fppe", config, workers, scheme)
    run.config["regime_flag"] = bool(plus)
    return run


def proximal_bootstrap_fppe(market: MarketInstance, beta_gamma, hessian_hat, eps, B, seed=0, *,
                            delta_t=None, scheme=WeightScheme.multinomial()) -> BootstrapRun:
    """Box-constrained prox step over ``[0, 1]^n`` per replicate."""
    beta_gamma = np.asarray(beta_gamma, dtype=float)
    plus = _regime_check(market, beta_gamma, delta_t, "proximal bootstrap")
    lo = -beta_gamma / eps
    hi = (1.0 - beta_gamma) / eps
    return _proximal(market, beta_gamma, hessian_hat, eps, B, seed, "fppe", lo, hi, "proximal",
                     scheme, {"regime_flag": bool(plus)})


def constrained_proximal_bootstrap(market: MarketInstance, beta_gamma, hessian_hat, eps,
                                   delta_t, B, seed=0, *,
                                   scheme=WeightScheme.multinomial()) -> BootstrapRun:
    """Prox step over ``[0, 1]^n`` with buyers above ``1 - delta_t`` pinned at one.

    Pinned coordinates get the constant deviation ``(1 - beta_gamma_i) / eps``.
    """
    if not delta_t > 0:
        raise ValidationError("delta_t must be positive")
    beta_gamma = np.asarray(beta_gamma, dtype=float)
    pinned = beta_gamma > 1 - delta_t
    lo = np.where(pinned, (1.0 - beta_gamma) / eps, -beta_gamma / eps)
    hi = (1.0 - beta_gamma) / eps
    return _proximal(market, beta_gamma, hessian_hat, eps, B, seed, "fppe", lo, hi,
                     "constrained_proximal", scheme,
                     {"delta_t": delta_t, "pinned": [int(i) for i in np.flatnonzero(pinned)]})


# --------------------------------------------------------------------------
# multinomial failure


@dataclass
class FailureReport:
    true_mass_at_zero: float
    boot_mass_at_zero: float
    sup_cdf_distance: float
    chosen_seed: int
    t: int
    B: int

    def to_dict(self):
        return asdict(self)


def sup_distance_to_censored_normal(samples, sd):
    """Sup distance between the empirical CDF of ``samples`` and the CDF of
    ``min(Z, 0)`` with ``Z ~ N(0, sd^2)``."""
    x = np.sort(np.asarray(samples, dtype=float))
    pts = np.append(np.unique(x), 0.0)
    ecdf = np.searchsorted(x, pts, side="right") / x.size
    ecdf_left = np.searchsorted(x, pts, side="left") / x.size
    cdf = np.where(pts >= 0, 1.0, norm.cdf(pts / sd))
    cdf_left = np.where(pts > 0, 1.0, norm.cdf(np.minimum(pts, 0.0) / sd))
    return float(max(np.abs(ecdf - cdf).max(), np.abs(ecdf_left - cdf_left).max()))


def multinomial_failure_demo(t=10_000, seed=0, B=2000, max_seeds=10_000) -> FailureReport:
    """One buyer with ``b = 1`` and values uniform on ``[0, 2]``.

    Searches seeds from ``seed`` upward for a dataset whose mean value sits at
    least one standard unit ``1/sqrt(t)`` below one, so the buyer is unpaced in
    the sample.  The multinomial bootstrap of ``sqrt(t)(beta_b - beta_gamma)``
    then piles up at zero far more than the true limit ``min(Z, 0)`` does.
    """
    sd = math.sqrt(1.0 / 3.0)
    for s in range(seed, seed + max_seeds):
        v = rng_stream(s, DEMO).uniform(0.0, 2.0, size=t)
        if math.sqrt(t) * (1.0 - v.mean()) >= 1.0:
            break
    else:
        raise SeedSearchFailed(f"no qualifying dataset among {max_seeds} seeds")
    market = MarketInstance(np.array([1.0]), v[:, None])
    beta_gamma = solve_fppe(market).beta[0]
    scheme = WeightScheme.multinomial()
    dev = np.empty(B)
    for k in range(B):
        w = draw_weights(scheme, t, rng_stream(s, WEIGHTS, k))
        # one-buyer weighted minimizer over (0, 1]
        beta_b = min(1.0, 1.0 / (w @ v / t))
        dev[k] = math.sqrt(t) * (beta_b - beta_gamma)
    return FailureReport(
        true_mass_at_zero=float(1.0 - norm.cdf(0.0)),
        boot_mass_at_zero=float(np.mean(dev == 0.0)),
        sup_cdf_distance=sup_distance_to_censored_normal(dev, sd),
        chosen_seed=int(s),
        t=int(t),
        B=int(B),
    )

