"""Limit-distribution ingredients for the pacing multipliers.

The FPPE limit is the ``H``-norm projection of ``-H^{-1} xi`` onto the cone
``{h : h_i = 0 on I_plus, h_i <= 0 on I_zero}``, evaluated at a Gaussian
score ``xi``.  It is computed exactly by enumerating which degenerate
constraints bind; a plain projected-gradient solver is kept as an
independent check.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.linalg import lapack

from .errors import EnumerationBudgetExceeded, NotPD, StencilOutOfDomain, ValidationError
from .market import MarketInstance, objective_batch, subgradients
from .solver import ActiveSets

MAX_ENUMERATED = 20


def _cholesky(H, tol=1e-12):
    try:
        c = linalg.cho_factor(H, check_finite=False)
    except linalg.LinAlgError:
        raise NotPD("Hessian is not positive definite") from None
    d = np.diag(c[0])
    if d.min() <= tol * max(1.0, d.max()):
        raise NotPD("Hessian is numerically singular")
    return c


@dataclass
class LimitModel:
    hessian: np.ndarray
    score_cov: np.ndarray
    active: ActiveSets
    beta_ref: np.ndarray

    def __post_init__(self):
        self.hessian = np.asarray(self.hessian, dtype=float)
        self.score_cov = np.asarray(self.score_cov, dtype=float)
        self.beta_ref = np.asarray(self.beta_ref, dtype=float)
        n = self.beta_ref.shape[0]
        if self.hessian.shape != (n, n) or self.score_cov.shape != (n, n) or self.active.n != n:
            raise ValidationError("limit model dimensions disagree")
        if np.max(np.abs(self.hessian - self.hessian.T), initial=0.0) > 1e-10:
            raise ValidationError("hessian is not symmetric")
        if np.max(np.abs(self.score_cov - self.score_cov.T), initial=0.0) > 1e-10:
            raise ValidationError("score covariance is not symmetric")
        if n and np.linalg.eigvalsh(self.score_cov).min() < -1e-10:
            raise ValidationError("score covariance is not positive semidefinite")
        self._chol = _cholesky(self.hessian)

    @property
    def n(self):
        return self.beta_ref.shape[0]

    def hessian_solve(self, rhs):
        return linalg.cho_solve(self._chol, rhs, check_finite=False)

    def to_dict(self):
        return {
            "hessian": self.hessian.tolist(),
            "score_cov": self.score_cov.tolist(),
            "active": self.active.to_dict(),
            "beta_ref": self.beta_ref.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        a = d["active"]
        return cls(
            np.array(d["hessian"], dtype=float),
            np.array(d["score_cov"], dtype=float),
            ActiveSets(tuple(a["I_plus"]), tuple(a["I_zero"]), tuple(a["I_c"])),
            np.array(d["beta_ref"], dtype=float),
        )


# --------------------------------------------------------------------------
# estimation


def default_eta(t, exponent=1 / 6):
    return float(t) ** (-exponent)


def capped_eta(t, beta, exponent=1 / 6, cap=0.45):
    """``t^-exponent``, shrunk so the stencil stays inside the positive orthant."""
    return min(default_eta(t, exponent), cap * float(np.min(beta)))


def fd_hessian(func, beta, eta):
    """Second-difference Hessian of ``func`` at ``beta``.

    ``func`` maps an ``(m, n)`` array of points to ``m`` values.  Entry
    ``(k, l)`` uses the four points ``beta +- eta e_k +- eta e_l``; the
    result is symmetrized.
    """
    beta = np.asarray(beta, dtype=float)
    n = beta.shape[0]
    if not eta > 0:
        raise ValidationError("eta must be positive")
    pairs = [(k, l) for k in range(n) for l in range(k, n)]
    signs = ((1, 1), (-1, 1), (1, -1), (-1, -1))
    pts = np.repeat(beta[None, :], 4 * len(pairs), axis=0)
    for j, (k, l) in enumerate(pairs):
        for s, (sk, sl) in enumerate(signs):
            pts[4 * j + s, k] += sk * eta
            pts[4 * j + s, l] += sl * eta
    vals = np.asarray(func(pts), dtype=float).reshape(len(pairs), 4)
    est = (vals[:, 0] - vals[:, 1] - vals[:, 2] + vals[:, 3]) / (4 * eta * eta)
    M = np.zeros((n, n))
    for j, (k, l) in enumerate(pairs):
        M[k, l] = M[l, k] = est[j]
    return 0.5 * (M + M.T)


def estimate_hessian(market: MarketInstance, beta, eta=None, weights=None):
    """Finite-difference estimate of the Hessian of the population objective."""
    beta = np.asarray(beta, dtype=float)
    if eta is None:
        eta = default_eta(market.t)
    if np.min(beta) - 2 * eta <= 0:
        raise StencilOutOfDomain(
            f"stencil step {eta:.4g} leaves the positive orthant (min beta {np.min(beta):.4g})"
        )
    return fd_hessian(lambda P: objective_batch(market, P, weights), beta, eta)


def estimate_score_cov(market: MarketInstance, beta):
    """Demeaned empirical covariance of the per-item subgradients."""
    D = subgradients(market, beta)
    D = D - D.mean(axis=0)
    return D.T @ D / market.t


def build_limit_model(market, beta, active, eta=None):
    return LimitModel(estimate_hessian(market, beta, eta), estimate_score_cov(market, beta),
                      active, np.asarray(beta, dtype=float))


# --------------------------------------------------------------------------
# limit QP


def _cone_masks(active, n):
    plus = np.zeros(n, dtype=bool)
    zero = np.zeros(n, dtype=bool)
    plus[list(active.I_plus)] = True
    zero[list(active.I_zero)] = True
    return plus, zero


def solve_limit_qp_batch(hessian, active: ActiveSets, Xi, tie_tol=1e-12, feas_tol=1e-10):
    """Row-wise ``h(xi)`` for an ``(m, n)`` array by subset enumeration.

    For each subset ``B`` of ``I_zero`` the constraints on ``I_plus + B`` are
    imposed as equalities; the feasible candidate with the smallest
    ``Q = y_A^T (H^{-1})_{AA}^{-1} y_A`` (``y = H^{-1} xi``) wins, the smaller
    subset on ties.
    """
    H = np.asarray(hessian, dtype=float)
    Xi = np.atleast_2d(np.asarray(Xi, dtype=float))
    m, n = Xi.shape
    if len(active.I_zero) > MAX_ENUMERATED:
        raise EnumerationBudgetExceeded(
            f"|I_zero| = {len(active.I_zero)} exceeds the enumeration budget {MAX_ENUMERATED}"
        )
    c = _cholesky(H)
    Hinv = linalg.cho_solve(c, np.eye(n), check_finite=False)
    Y = Xi @ Hinv  # rows are H^{-1} xi (H symmetric)
    plus = list(active.I_plus)
    zero = list(active.I_zero)
    best = np.full(m, np.inf)
    out = np.zeros((m, n))
    for size in range(len(zero) + 1):
        for B in itertools.combinations(zero, size):
            A = plus + list(B)
            if A:
                M = Hinv[np.ix_(A, A)]
                lam = np.linalg.solve(M, Y[:, A].T).T  # (m, |A|)
                h = -(Y - lam @ Hinv[A, :])
                h[:, A] = 0.0
                Q = np.einsum("ij,ij->i", Y[:, A], lam)
            else:
                h = -Y
                Q = np.zeros(m)
            free0 = [i for i in zero if i not in B]
            scale = 1.0 + np.abs(Y).max(axis=1)
            ok = np.all(h[:, free0] <= feas_tol * scale[:, None], axis=1) if free0 else np.ones(m, bool)
            seen = np.isfinite(best)
            margin = np.where(seen, best - tie_tol * (1.0 + np.abs(np.where(seen, best, 0.0))), np.inf)
            better = ok & (Q < margin)
            out[better] = h[better]
            best[better] = Q[better]
    if not np.all(np.isfinite(best)):
        raise ValidationError("no feasible enumeration candidate")  # unreachable: B = I_zero is feasible
    zmask = np.zeros(n, dtype=bool)
    zmask[zero] = True
    out[:, zmask] = np.minimum(out[:, zmask], 0.0)
    return out


def solve_limit_qp(model: LimitModel, xi):
    xi = np.asarray(xi, dtype=float)
    h = solve_limit_qp_batch(model.hessian, model.active, xi.reshape(-1, model.n))
    return h[0] if xi.ndim == 1 else h


def projected_gradient_batch(Hs, Xis, plus, zero, iters=100_000):
    """Projected gradient on ``xi^T h + h^T H h / 2`` over the cone, batched.

    ``Hs`` is ``(k, n, n)``, ``Xis`` ``(k, n)``, ``plus``/``zero`` boolean
    ``(k, n)`` masks.  Fixed step ``1 / lambda_max(H)`` per instance.
    """
    Hs = np.asarray(Hs, dtype=float)
    Xis = np.asarray(Xis, dtype=float)
    step = 1.0 / np.linalg.eigvalsh(Hs)[:, -1]
    keep = ~np.asarray(plus, dtype=bool)
    zero = np.asarray(zero, dtype=bool)
    h = np.zeros_like(Xis)
    for _ in range(iters):
        h -= step[:, None] * (np.einsum("kij,kj->ki", Hs, h) + Xis)
        h *= keep
        np.minimum(h, 0.0, out=h, where=zero)
    return h


def solve_limit_qp_oracle(model: LimitModel, xi, iters=100_000):
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    plus, zero = _cone_masks(model.active, model.n)
    k = xi.shape[0]
    h = projected_gradient_batch(
        np.broadcast_to(model.hessian, (k, model.n, model.n)), xi,
        np.broadcast_to(plus, xi.shape), np.broadcast_to(zero, xi.shape), iters,
    )
    return h[0] if k == 1 else h


def scs_solution(hessian, active: ActiveSets, xi):
    """``-(P H P)^+ xi`` with ``P`` the projector onto the paced coordinates;
    valid when ``I_zero`` is empty."""
    n = hessian.shape[0]
    P = np.zeros((n, n))
    idx = list(active.I_c)
    P[idx, idx] = 1.0
    return -(np.linalg.pinv(P @ hessian @ P) @ np.asarray(xi, dtype=float).T).T


def _normalized(hessian, score):
    Hinv = np.linalg.inv(hessian)
    d = np.sqrt(np.diag(Hinv))
    rho = Hinv / np.outer(d, d)
    Z = -(np.asarray(score, dtype=float) @ Hinv) / d
    return d, rho, Z


def closed_form_one_degenerate(hessian, score):
    """Limit draw for ``I_zero = {0}``, ``I_plus`` empty.

    With ``D = diag(H^{-1})^{1/2}``, ``rho = D^{-1} H^{-1} D^{-1}`` and
    ``Z = -D^{-1} H^{-1} G``: ``D Z`` if ``Z_0 < 0``, otherwise
    ``D (0, Z_i - rho_{0i} Z_0)``.
    """
    d, rho, Z = _normalized(hessian, score)
    Z = np.atleast_2d(Z)
    pinned = Z - Z[:, [0]] * rho[0][None, :]
    pinned[:, 0] = 0.0
    out = np.where((Z[:, 0] < 0)[:, None], Z, pinned) * d
    return out[0] if np.ndim(score) == 1 else out


def closed_form_two_degenerate(hessian, score):
    """Limit draw for ``I_zero = {0, 1}``, ``I_plus`` empty (four cases)."""
    hessian = np.asarray(hessian, dtype=float)
    d, rho, Z = _normalized(hessian, score)
    G = np.atleast_2d(np.asarray(score, dtype=float))
    Z = np.atleast_2d(Z)
    n = hessian.shape[0]
    pin0 = Z - Z[:, [0]] * rho[0][None, :]
    pin0[:, 0] = 0.0
    pin1 = Z - Z[:, [1]] * rho[1][None, :]
    pin1[:, 1] = 0.0
    both = np.zeros_like(Z)
    if n > 2:
        rest = hessian[2:, 2:]
        both[:, 2:] = -np.linalg.solve(rest, G[:, 2:].T).T / d[2:]
    c1 = (Z[:, 0] < 0) & (Z[:, 1] < 0)
    c2 = ~c1 & (Z[:, 0] >= 0) & (pin0[:, 1] < 0)
    c3 = ~c1 & ~c2 & (Z[:, 1] >= 0) & (pin1[:, 0] < 0)
    out = np.where(c1[:, None], Z, np.where(c2[:, None], pin0, np.where(c3[:, None], pin1, both)))
    out = out * d
    return out[0] if np.ndim(score) == 1 else out


# --------------------------------------------------------------------------
# sampling


def gaussian_draws(cov, m, rng):
    """``m`` draws of ``N(0, cov)`` through a pivoted Cholesky factor, so
    singular covariances are handled."""
    cov = np.asarray(cov, dtype=float)
    n = cov.shape[0]
    if not np.any(cov):
        return np.zeros((m, n))
    c, piv, rank, info = lapack.dpstrf(cov, lower=1, tol=1e-12 * np.abs(cov).max())
    if info < 0:
        raise ValidationError("pivoted Cholesky failed on the score covariance")
    L = np.tril(c)[:, :rank]
    z = rng.standard_normal((m, rank))
    out = np.empty((m, n))
    out[:, piv - 1] = z @ L.T
    return out


def sample_limit_distribution(model: LimitModel, m: int, rng, mode="fppe"):
    G = gaussian_draws(model.score_cov, m, rng)
    if mode == "lfm":
        return -model.hessian_solve(G.T).T
    if mode != "fppe":
        raise ValidationError(f"mode must be 'lfm' or 'fppe', not {mode!r}")
    return solve_limit_qp_batch(model.hessian, model.active, G)


def sandwich_cov(model: LimitModel):
    """``H^{-1} Cov H^{-1}``, the LFM limit covariance."""
    A = model.hessian_solve(model.score_cov)
    return model.hessian_solve(A.T)

