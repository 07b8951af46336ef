"""Test-inversion confidence regions for ``(beta*, delta*)`` in general FPPE.

``T_gamma(beta, delta) = -t * min_{|s| <= kappa / sqrt(t)} [L(beta + s) - L(beta)]``
with ``L(beta') = H_t(beta') + delta^T beta'``.  The region is every feasible
``(beta, delta)`` with ``T_gamma <= c``, where ``c`` is a bootstrap quantile of
``T_b = -min_{u >= -beta_gamma / eps} (G_b^T u + u^T H u / 2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.optimize import brentq

from .boxqp import solve_box_qp
from .errors import NonPositiveBeta, NotPD, ValidationError
from .market import MarketInstance, eval_empirical_objective, subgradients
from .resampling import REGION, WeightScheme, draw_weights, rng_stream
from .solver import _Smoothed


@dataclass
class RegionConfig:
    kappa: float | None = None
    alpha: float = 0.05
    eps: float | None = None
    B: int = 200

    def __post_init__(self):
        if self.kappa is not None and not self.kappa > 0:
            raise ValidationError("kappa must be positive")
        if not 0 <= self.alpha < 1:
            raise ValidationError("alpha must lie in [0, 1)")
        if self.B < 1:
            raise ValidationError("B must be at least 1")

    def radius(self, n):
        return default_kappa(n) if self.kappa is None else self.kappa


def default_kappa(n):
    """Stand-in for an unbounded ball: ``10 sqrt(n)`` on the ``sqrt(t)`` scale."""
    return 10.0 * math.sqrt(n)


def _ball_qp(H, c, r):
    """``argmin c^T y + y^T H y / 2`` over ``|y| <= r`` for positive definite ``H``."""
    w, Q = np.linalg.eigh(H)
    if w[0] <= 0:
        raise NotPD("smoothed Hessian is not positive definite")
    a = Q.T @ c
    y0 = -a / w
    if np.linalg.norm(y0) <= r:
        return Q @ y0

    def excess(lam):
        return np.linalg.norm(a / (w + lam)) - r

    hi = np.linalg.norm(a) / r
    lam = brentq(excess, 0.0, hi, xtol=1e-14 * (1 + hi), rtol=4 * np.finfo(float).eps)
    y = Q @ (-a / (w + lam))
    return y * min(1.0, r / np.linalg.norm(y))


def _inner_min(market, beta, delta, radius, mu_final=1e-10, max_iter=400):
    """Minimize ``H_t(beta + s) - H_t(beta) + delta^T s`` over ``|s| <= radius``,
    ``beta + s > 0``.  Returns ``(value, s)`` with the value from the exact
    objective."""
    sm = _Smoothed(market.values, market.budgets, None)
    vbar = market.vbar
    s = np.zeros(market.n)
    mu = 0.1 * vbar
    it = 0
    while True:
        last = mu <= mu_final * vbar * (1 + 1e-12)
        for _ in range(60):
            it += 1
            if it > max_iter:
                break
            f, g, H = sm.full(beta + s, mu)
            f += delta @ s
            g = g + delta
            y = _ball_qp(H, g - H @ s, radius)
            d = y - s
            dec = -float(g @ d)
            if not dec > 0:
                break
            slack = 8 * np.finfo(float).eps * (abs(f) + vbar)
            alpha = 1.0
            while alpha > 1e-10:
                ft = sm.value(beta + s + alpha * d, mu) + delta @ (s + alpha * d)
                if ft <= f - 1e-4 * alpha * dec + slack:
                    break
                alpha *= 0.5
            if alpha <= 1e-10:
                break
            s = s + alpha * d
            if dec <= (1e-3 * slack if last else 1e-6 * mu):
                break
        if last or it > max_iter:
            break
        mu = max(mu * 0.1, mu_final * vbar)
    base = eval_empirical_objective(market, beta)
    val = eval_empirical_objective(market, beta + s) - base + float(delta @ s)
    if val > 0:
        return 0.0, np.zeros_like(s)
    return val, s


def _check_point(market, beta, delta):
    beta = np.asarray(beta, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if beta.shape != (market.n,) or delta.shape != (market.n,):
        raise ValidationError("beta and delta must have one entry per buyer")
    return beta, delta


def statistic_T_gamma(market: MarketInstance, beta, delta, kappa=None) -> float:
    beta, delta = _check_point(market, beta, delta)
    if np.any(beta <= 0):
        raise NonPositiveBeta("T_gamma needs strictly positive beta")
    kappa = default_kappa(market.n) if kappa is None else kappa
    if not kappa > 0:
        raise ValidationError("kappa must be positive")
    val, _ = _inner_min(market, beta, delta, kappa / math.sqrt(market.t))
    return max(0.0, float(-market.t * val))


def statistic_T_boot(g_boot, hessian_hat, beta_gamma, eps) -> float:
    g = np.asarray(g_boot, dtype=float)
    H = np.asarray(hessian_hat, dtype=float)
    try:
        c = linalg.cho_factor(H, check_finite=False)
    except linalg.LinAlgError:
        raise NotPD("Hessian estimate is not positive definite") from None
    u = -linalg.cho_solve(c, g, check_finite=False)
    lo = -np.asarray(beta_gamma, dtype=float) / eps
    if np.all(u >= lo):
        return float(-0.5 * g @ u)
    u = solve_box_qp(H, g, lo, np.full_like(lo, np.inf))
    return float(-(g @ u + 0.5 * u @ H @ u))


def inverted_cdf_quantile(samples, level):
    x = np.sort(np.asarray(samples, dtype=float))
    k = max(1, math.ceil(level * x.size - 1e-12))
    return float(x[min(k, x.size) - 1])


def bootstrap_statistics(market: MarketInstance, beta_gamma, hessian_hat, eps, B, seed=0,
                         scheme=WeightScheme.multinomial()):
    D = subgradients(market, beta_gamma)
    rt = math.sqrt(market.t)
    out = np.empty(B)
    for k in range(B):
        w = draw_weights(scheme, market.t, rng_stream(seed, REGION, k))
        out[k] = statistic_T_boot((w - 1.0) @ D / rt, hessian_hat, beta_gamma, eps)
    return out


def region_quantile(market: MarketInstance, beta_gamma, hessian_hat, config: RegionConfig,
                    seed=0) -> float:
    """Empirical ``(1 - alpha)`` quantile (inverted CDF) of ``B`` draws of ``T_b``."""
    eps = config.eps if config.eps is not None else market.t ** -0.3
    T = bootstrap_statistics(market, beta_gamma, hessian_hat, eps, config.B, seed)
    return inverted_cdf_quantile(T, 1.0 - config.alpha)


def region_membership(market: MarketInstance, beta, delta, kappa, c) -> bool:
    beta, delta = _check_point(market, beta, delta)
    if c < 0:
        return False
    if np.any(beta <= 0) or np.any(beta > 1) or np.any(delta < 0) or np.any(delta > market.budgets):
        return False
    return statistic_T_gamma(market, beta, delta, kappa) <= c
