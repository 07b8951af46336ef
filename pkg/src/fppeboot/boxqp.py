"""Primal active-set solver for small dense bound-constrained convex QPs.

    minimize    g @ x + 0.5 * x @ H @ x
    subject to  lo <= x <= hi

Bounds may be infinite; ``lo[i] == hi[i]`` pins coordinate ``i``.
"""

import numpy as np
from scipy import linalg

from .errors import NotConverged, NotPD


def _chol_solve(H, rhs):
    try:
        c = linalg.cho_factor(H, check_finite=False)
    except linalg.LinAlgError:
        raise NotPD("QP Hessian is not positive definite") from None
    return linalg.cho_solve(c, rhs, check_finite=False)


def solve_box_qp(H, g, lo, hi, x0=None, max_iter=None, tol=1e-12):
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = g.shape[0]
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (n,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (n,)).copy()
    if np.any(lo > hi):
        raise ValueError("empty box")
    if max_iter is None:
        max_iter = 5 * n + 10
    pinned = lo == hi

    if x0 is None:
        free = ~pinned
        x = np.where(pinned, lo, 0.0)
        if free.any():
            rhs = -(g[free] + H[np.ix_(free, ~free)] @ x[~free])
            x[free] = _chol_solve(H[np.ix_(free, free)], rhs)
    else:
        x = np.array(x0, dtype=float)
    x = np.clip(x, lo, hi)
    at_lo = (x <= lo) & np.isfinite(lo)
    at_hi = (x >= hi) & np.isfinite(hi) & ~at_lo

    for _ in range(max_iter + 1):
        free = ~(at_lo | at_hi)
        r = g + H @ x
        p = np.zeros(n)
        if free.any():
            p[free] = _chol_solve(H[np.ix_(free, free)], -r[free])
        # ratio test against the bounds of the free coordinates
        alpha, block, side = 1.0, -1, 0
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            up = np.where(free & (p > 0), (hi - x) / p, np.inf)
            dn = np.where(free & (p < 0), (lo - x) / p, np.inf)
        if up.min() < alpha:
            block, side, alpha = int(np.argmin(up)), 1, float(up.min())
        if dn.min() < alpha:
            block, side, alpha = int(np.argmin(dn)), -1, float(dn.min())
        x = x + max(alpha, 0.0) * p
        if block >= 0:
            if side > 0:
                x[block] = hi[block]
                at_hi[block] = True
            else:
                x[block] = lo[block]
                at_lo[block] = True
            continue
        # x minimizes over the current face; check the working-bound multipliers
        r = g + H @ x
        lam = np.where(at_lo, r, np.where(at_hi, -r, 0.0))
        lam[pinned] = 0.0
        j = int(np.argmin(lam))
        scale = np.abs(g).max() + np.abs(H).max() * (1.0 + np.abs(x).max())
        if lam[j] >= -tol * scale:
            return x
        at_lo[j] = at_hi[j] = False
    raise NotConverged("active-set QP hit its iteration limit", best=x)
