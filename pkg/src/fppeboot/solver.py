"""Dual Eisenberg-Gale solver for finite LFM and FPPE.

The nonsmooth objective ``H_t(beta) = mean_tau max_i beta_i v_i^tau -
sum_i b_i log beta_i`` is replaced by its entropic smoothing
``mu * logsumexp(beta * v / mu)``, whose minimizer is tracked while ``mu`` is
driven to ``mu_final * vbar``.  Each step is a projected Newton step (a small
box QP).  The smoothing changes the objective by at most ``mu log n``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .boxqp import solve_box_qp
from .errors import InfeasibleTieSplit, NotConverged, ValidationError
from .market import MarketInstance, eval_empirical_objective

UNPACED_TOL = 1e-9


@dataclass
class SolverConfig:
    tol: float = 1e-8
    max_iters: int = 1000
    mu_start: float = 1e-1
    mu_final: float = 1e-11
    mu_factor: float = 0.1
    tie_tol: float = 1e-9

    def __post_init__(self):
        if not self.tol > 0:
            raise ValidationError("tol must be positive")
        if not 0 < self.mu_factor < 1:
            raise ValidationError("mu_factor must lie in (0, 1)")


@dataclass
class EquilibriumResult:
    beta: np.ndarray
    delta: np.ndarray
    pay: np.ndarray
    utilities: np.ndarray
    revenue: float
    objective: float
    mode: str
    iterations: int = 0
    gap: float = 0.0
    split: dict = field(default_factory=dict, repr=False)

    def to_dict(self):
        return {
            "mode": self.mode,
            "beta": self.beta.tolist(),
            "delta": self.delta.tolist(),
            "pay": self.pay.tolist(),
            "utilities": self.utilities.tolist(),
            "revenue": self.revenue,
            "objective": self.objective,
            "iterations": self.iterations,
            "gap": self.gap,
        }


@dataclass(frozen=True)
class ActiveSets:
    """Partition of buyers into unpaced-with-leftover (``I_plus``),
    degenerate (``I_zero``) and paced (``I_c``); indices are 0-based."""

    I_plus: tuple
    I_zero: tuple
    I_c: tuple

    def __post_init__(self):
        sets = [tuple(sorted(int(i) for i in s)) for s in (self.I_plus, self.I_zero, self.I_c)]
        allidx = [i for s in sets for i in s]
        if len(allidx) != len(set(allidx)):
            raise ValidationError("active sets must be disjoint")
        if sorted(allidx) != list(range(len(allidx))):
            raise ValidationError("active sets must partition 0..n-1")
        for name, s in zip(("I_plus", "I_zero", "I_c"), sets):
            object.__setattr__(self, name, s)

    @property
    def n(self):
        return len(self.I_plus) + len(self.I_zero) + len(self.I_c)

    @classmethod
    def interior(cls, n):
        return cls((), (), tuple(range(n)))

    def to_dict(self):
        return {"I_plus": list(self.I_plus), "I_zero": list(self.I_zero), "I_c": list(self.I_c)}


# --------------------------------------------------------------------------
# smoothed objective


class _Smoothed:
    """Entropic smoothing of the weighted sample EG objective."""

    def __init__(self, values, budgets, weights):
        self.V = values
        self.b = budgets
        self.t = values.shape[0]
        if weights is None:
            self.w = None
            self.wpos = None
        else:
            self.w = np.asarray(weights, dtype=float)
            self.wpos = np.maximum(self.w, 0.0)

    def _soft(self, beta, mu):
        # rows whose runner-up bid trails by more than 40 mu are one-hot
        # up to exp(-40); only the others are exponentiated
        z = self.V * beta
        win = np.argmax(z, axis=1)
        m = z[np.arange(z.shape[0]), win]
        near = z >= (m - 40.0 * mu)[:, None]
        rows = np.flatnonzero(near.sum(axis=1) > 1)
        smax = m.copy()
        p = None
        if rows.size:
            e = np.exp((z[rows] - m[rows, None]) / mu)
            sr = e.sum(axis=1)
            smax[rows] += mu * np.log(sr)
            p = e / sr[:, None]
        return smax, win, rows, p

    def _mean(self, x):
        if self.w is None:
            return x.mean(axis=0)
        return self.w @ x / self.t

    def value(self, beta, mu):
        if np.any(beta <= 0):
            return math.inf
        smax = self._soft(beta, mu)[0]
        return float(self._mean(smax) - self.b @ np.log(beta))

    def full(self, beta, mu):
        smax, win, rows, p = self._soft(beta, mu)
        n = beta.shape[0]
        t = self.t
        f = float(self._mean(smax) - self.b @ np.log(beta))
        hard = np.ones(t, dtype=bool)
        hard[rows] = False
        w = np.ones(t) if self.w is None else self.w
        hv = self.V[hard, win[hard]] * w[hard]
        g = np.bincount(win[hard], weights=hv, minlength=n).astype(float)
        H = np.zeros((n, n))
        if rows.size:
            q = p * self.V[rows]
            g += w[rows] @ q
            ws = np.ones(rows.size) if self.wpos is None else self.wpos[rows]
            H += np.diag(ws @ (q * self.V[rows])) - (q * ws[:, None]).T @ q
            H /= mu * t
        g = g / t - self.b / beta
        H[np.diag_indices(n)] += self.b / beta**2
        return f, g, H


def beta_floor(values, budgets, weights=None):
    """Lower box for beta.  Utility under unit supply is at most ``vbar``
    (times the mean positive weight), so ``b_i / (vbar + sum b)`` is safe."""
    vbar = float(np.max(values))
    scale = 1.0 if weights is None else max(1.0, float(np.maximum(weights, 0).mean()))
    return float(np.min(budgets) / (vbar * scale + np.sum(budgets)))


def beta_ceiling(values, budgets, weights=None):
    """Upper box for LFM: ``beta_i * mean_w(v_i) <= mean_w(price) = sum b``."""
    if weights is None:
        means = values.mean(axis=0)
        slack = 1.0
    else:
        w = np.maximum(weights, 0.0)
        means = w @ values / values.shape[0]
        slack = 1.0 if np.all(weights >= 0) else 4.0
    if np.any(means <= 0):
        raise ValidationError("a buyer has zero (weighted) value on every item")
    return float(slack * np.sum(budgets) / means.min())


def _minimize(values, budgets, weights, lo, hi, beta0, cfg: SolverConfig):
    sm = _Smoothed(values, budgets, weights)
    vbar = float(values.max())
    n = budgets.shape[0]
    lo_v = np.full(n, lo)
    hi_v = np.full(n, hi)
    if beta0 is None:
        w = np.ones(values.shape[0]) if weights is None else np.maximum(weights, 0)
        mv = w @ values / values.shape[0]
        beta = n * budgets / np.maximum(mv, 1e-300)
    else:
        beta = np.asarray(beta0, dtype=float).copy()
    beta = np.clip(beta, lo_v, hi_v)

    def kkt(beta, g):
        # stationarity residual in spend units, ignoring bound-blocked signs
        r = beta * g
        r[(beta >= hi_v) & (g < 0)] = 0.0
        r[(beta <= lo_v) & (g > 0)] = 0.0
        return float(np.abs(r).sum())

    eps = np.finfo(float).eps
    mu = cfg.mu_start * vbar
    mu_end = cfg.mu_final * vbar
    iters = 0
    cur = None
    while True:
        last = mu <= mu_end * (1 + 1e-12)
        stage_tol = 1e-6 * mu
        noisy = 0
        cur = None
        while True:
            if iters >= cfg.max_iters:
                raise NotConverged("Newton iteration budget exhausted", best=beta)
            iters += 1
            f, g, H = cur if cur is not None else sm.full(beta, mu)
            cur = None
            d = solve_box_qp(H, g, lo_v - beta, hi_v - beta)
            dec = -float(g @ d)
            if not (dec > 0):
                break
            slack = 8 * eps * (abs(f) + float(np.abs(budgets @ np.log(beta))) + vbar)
            alpha = 1.0
            while True:
                trial = np.clip(beta + alpha * d, lo_v, hi_v)
                ft = sm.value(trial, mu)
                if ft <= f - 1e-4 * alpha * dec + slack:
                    break
                alpha *= 0.5
                if alpha < 1e-10:
                    break
            if alpha < 1e-10:
                if dec > 1e3 * slack or noisy >= 20:
                    break
                # objective differences are at roundoff: accept a full step
                # only if it shrinks the stationarity residual
                trial = np.clip(beta + d, lo_v, hi_v)
                nxt = sm.full(trial, mu)
                noisy += 1
                if kkt(trial, nxt[1]) >= 0.5 * kkt(beta, g):
                    break
                beta, cur = trial, nxt
                continue
            if ft > f - 1e-4 * alpha * dec:
                noisy += 1
            step = np.max(np.abs(trial - beta))
            beta = trial
            if (step <= 1e-13 * (1 + np.max(beta)) or noisy >= 20
                    or dec <= (1e-3 * slack if last else stage_tol)):
                break
        if last:
            return beta, iters, mu
        mu = max(mu * cfg.mu_factor, mu_end)


def recover_duals(market: MarketInstance, beta, mode="fppe", weights=None, tie_tol=1e-9,
                  feas_tol=None):
    """Leftover budgets and payments at an (approximate) equilibrium.

    Items whose top bids lie within ``tie_tol * vbar`` of each other are
    split between the tied buyers by a small LP so that paced buyers spend
    exactly their budget and unpaced buyers spend at most their budget.
    When an equal split of every tied item already works it is kept, which
    makes symmetric instances come out symmetric.

    Returns ``(delta, pay, info)`` where ``info`` holds the L1 residual of
    the spend conditions (in budget units) and the split weights.
    """
    V = market.values
    t, n = V.shape
    beta = np.asarray(beta, dtype=float)
    b = market.budgets
    w = np.ones(t) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0):
        raise ValidationError("dual recovery needs non-negative item weights")
    bids = V * beta
    top = bids.max(axis=1)
    tie = (bids >= (top - tie_tol * market.vbar)[:, None]) & (top[:, None] > 0) & (w[:, None] > 0)
    cnt = tie.sum(axis=1)
    strict = cnt == 1
    rows = np.flatnonzero(strict)
    win = np.argmax(tie[rows], axis=1)
    spend0 = np.zeros(n)
    np.add.at(spend0, win, w[rows] * top[rows] / t)
    tied_items = np.flatnonzero(cnt >= 2)
    if mode == "fppe":
        unpaced = beta >= 1 - UNPACED_TOL
    else:
        unpaced = np.zeros(n, dtype=bool)
    if feas_tol is None:
        feas_tol = 1e-6 * (1.0 + b.sum())

    # pairs (item, buyer) for the split variables
    pi, pb = np.nonzero(tie[tied_items])
    pitem = tied_items[pi]
    coef = w[pitem] * top[pitem] / t  # spend contributed by a full unit

    def residual(x):
        spend = spend0.copy()
        np.add.at(spend, pb, coef * x)
        r = spend - b
        res = np.where(unpaced, np.maximum(r, 0.0), np.abs(r))
        return spend, float(res.sum())

    x = np.zeros(pi.shape[0])
    if pi.size:
        x = 1.0 / cnt[pitem]
    spend, res = residual(x)
    if pi.size and res > feas_tol * 1e-3:
        K = pi.size
        P = np.flatnonzero(~unpaced)
        U = np.flatnonzero(unpaced)
        nvar = K + n + P.size  # x, s_plus (all buyers), s_minus (paced)
        c = np.concatenate([np.zeros(K), np.ones(n), np.ones(P.size)])
        A = np.zeros((n, nvar))
        A[pb, np.arange(K)] = coef  # np.add.at not needed: (buyer, var) unique
        A[np.arange(n), K + np.arange(n)] = -1.0
        A[P, K + n + np.arange(P.size)] = 1.0
        rhs = b - spend0
        # one simplex row per tied item
        grp = np.searchsorted(tied_items, pitem)
        S = np.zeros((tied_items.size, nvar))
        S[grp, np.arange(K)] = 1.0
        A_eq = np.vstack([A[P], S])
        b_eq = np.concatenate([rhs[P], np.ones(tied_items.size)])
        A_ub = A[U] if U.size else None
        b_ub = rhs[U] if U.size else None
        out = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq,
                      bounds=(0, None), method="highs")
        if out.status != 0:
            raise InfeasibleTieSplit(f"tie-split LP failed: {out.message}")
        x = np.clip(out.x[:K], 0.0, 1.0)
        spend, res = residual(x)
    if res > feas_tol:
        raise InfeasibleTieSplit(
            f"no tie split meets the spend conditions (residual {res:.3g}); beta is not optimal"
        )
    delta = np.where(unpaced, np.clip(b - spend, 0.0, b), 0.0)
    pay = b - delta
    return delta, pay, {"residual": res, "items": tied_items, "pairs": (pitem, pb), "x": x}


def _solve(market, mode, config, weights, beta0, compute_duals):
    cfg = config or SolverConfig()
    V, b = market.values, market.budgets
    lo = beta_floor(V, b, weights)
    hi = 1.0 if mode == "fppe" else beta_ceiling(V, b, weights)
    beta, iters, mu = _minimize(V, b, weights, lo, hi, beta0, cfg)
    n = market.n
    objective = eval_empirical_objective(market, beta, weights)
    wmean = 1.0 if weights is None else float(np.mean(weights))
    revenue = float(np.max(V * beta, axis=1) @ (np.ones(market.t) if weights is None else weights) / market.t)
    if compute_duals:
        delta, pay, info = recover_duals(market, beta, mode, weights, cfg.tie_tol)
        gap = info["residual"]
        if gap > cfg.tol * (1.0 + b.sum()) and gap > mu * math.log(max(n, 2)) * 10:
            raise NotConverged("optimality residual above target", best=beta, gap=gap)
        if mode == "lfm":
            delta = np.zeros(n)
            pay = b.copy()
    else:
        delta = np.zeros(n)
        pay = np.full(n, np.nan)
        gap = mu * math.log(max(n, 2)) * wmean
        info = {}
    return EquilibriumResult(
        beta=beta, delta=delta, pay=pay, utilities=b / beta, revenue=revenue,
        objective=objective, mode=mode, iterations=iters, gap=gap,
        split={k: v for k, v in info.items() if k != "residual"},
    )


def solve_lfm(market: MarketInstance, config: SolverConfig | None = None, *,
              weights=None, beta0=None, compute_duals=True) -> EquilibriumResult:
    """Finite linear Fisher market: minimize ``H_t`` over the positive orthant."""
    return _solve(market, "lfm", config, weights, beta0, compute_duals)


def solve_fppe(market: MarketInstance, config: SolverConfig | None = None, *,
               weights=None, beta0=None, compute_duals=True) -> EquilibriumResult:
    """Finite first-price pacing equilibrium: minimize ``H_t`` over ``(0, 1]^n``."""
    return _solve(market, "fppe", config, weights, beta0, compute_duals)


def solve(market, mode="fppe", config=None, **kw) -> EquilibriumResult:
    if mode not in ("lfm", "fppe"):
        raise ValidationError(f"mode must be 'lfm' or 'fppe', not {mode!r}")
    return _solve(market, mode, config, kw.get("weights"), kw.get("beta0"),
                  kw.get("compute_duals", True))


def classify_buyers(result: EquilibriumResult, delta_threshold, budgets=None) -> ActiveSets:
    """Estimated active sets.

    Unpaced buyers have ``beta_i > 1 - delta_threshold``; among them those with
    leftover budget above ``delta_threshold * b_i`` form ``I_plus`` and the
    rest ``I_zero``.
    """
    if not delta_threshold > 0:
        raise ValidationError("delta_threshold must be positive")
    beta = result.beta
    b = result.pay + result.delta if budgets is None else np.asarray(budgets)
    near = beta > 1 - delta_threshold
    plus = near & (result.delta > delta_threshold * b)
    zero = near & ~plus
    return ActiveSets(
        tuple(np.flatnonzero(plus)), tuple(np.flatnonzero(zero)), tuple(np.flatnonzero(~near))
    )


def default_delta_t(t, scale=1.0):
    """Active-set threshold ``scale / sqrt(t)``."""
    return scale / math.sqrt(t)
