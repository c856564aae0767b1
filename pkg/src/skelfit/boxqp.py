"""Proxy-space quadratic model assembly and the box-constrained QP step.

The quadratic model is

    m(dp) = 1/2 ||W_m (J_m dp + r_m)||^2 + 1/2 ||W_t (J_phi dp + e_t)||^2
            + 1/2 ||W_damp^{1/2} dp||^2

expanded to 1/2 dp' H dp + g' dp with

    H = J_m' W_m'W_m J_m + J_phi' W_t'W_t J_phi + W_damp
    g = J_m' W_m'W_m r_m + J_phi' W_t'W_t e_t

and the step minimizes that subject to lb <= dp <= ub. W_m and W_t are
square-root diagonal weights; W_damp is the full (already squared) damping
diagonal, so it enters H directly and the step penalty uses its square root.

The solver is a projected Newton iteration with free-set factorization:
exact for strictly convex box QPs at small fixed cost. A brute-force
active-set enumeration (solve_box_qp_enum) is kept for small instances as
an independent test oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np


@dataclass(frozen=True)
class WeightSet:
    """Diagonal weights: sqrt marker (n_x), sqrt tracking (n_y), full damping (n_p)."""

    w_marker: np.ndarray
    w_tracking: np.ndarray
    w_damp: np.ndarray

    def __post_init__(self):
        wm = np.asarray(self.w_marker, dtype=float)
        wt = np.asarray(self.w_tracking, dtype=float)
        wd = np.asarray(self.w_damp, dtype=float)
        if np.any(wm < 0) or np.any(wt < 0):
            raise ValueError("weights must be nonnegative")
        if np.any(wd <= 0):
            raise ValueError("damping diagonal must be strictly positive")
        object.__setattr__(self, "w_marker", wm)
        object.__setattr__(self, "w_tracking", wt)
        object.__setattr__(self, "w_damp", wd)


@dataclass(frozen=True)
class QuadraticModel:
    """1/2 dp' H dp + g' dp over lb <= dp <= ub, with H symmetric PD."""

    H: np.ndarray
    g: np.ndarray
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        g = np.asarray(self.g, dtype=float)
        lb = np.asarray(self.lb, dtype=float)
        ub = np.asarray(self.ub, dtype=float)
        n = g.size
        if H.shape != (n, n) or lb.shape != (n,) or ub.shape != (n,):
            raise ValueError("inconsistent QP dimensions")
        if not (np.all(np.isfinite(H)) and np.all(np.isfinite(g))):
            raise ValueError("non-finite QP data")
        if np.max(np.abs(H - H.T), initial=0.0) > 1e-10 * (1 + np.max(np.abs(H), initial=0.0)):
            raise ValueError("H is not symmetric")
        if np.any(lb > 0) or np.any(ub < 0):
            raise ValueError("bounds must contain the zero step")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)

    @property
    def n(self) -> int:
        return self.g.size

    def objective(self, dp: np.ndarray) -> float:
        return float(0.5 * dp @ self.H @ dp + self.g @ dp)


def assemble(J_m, J_phi, r_m, e_t, weights: WeightSet, lb=None, ub=None) -> QuadraticModel:
    """Form (H, g) from the weighted residual linearizations.

    J_m is the marker Jacobian already mapped to proxy space (J_y @ J_phi,
    computed by the caller). Bounds default to +/-inf placeholders replaced
    by the caller; pass lb/ub to get a solvable model directly.
    """
    J_m = np.asarray(J_m, dtype=float)
    J_phi = np.asarray(J_phi, dtype=float)
    r_m = np.asarray(r_m, dtype=float)
    e_t = np.asarray(e_t, dtype=float)
    n_p = J_m.shape[1]
    if J_phi.shape[1] != n_p:
        raise ValueError("J_m and J_phi disagree on proxy dimension")
    if r_m.shape != (J_m.shape[0],) or e_t.shape != (J_phi.shape[0],):
        raise ValueError("residual lengths do not match Jacobian rows")
    if weights.w_marker.shape != (J_m.shape[0],) or weights.w_tracking.shape != (J_phi.shape[0],):
        raise ValueError("weight lengths do not match Jacobian rows")
    if weights.w_damp.shape != (n_p,):
        raise ValueError("damping length does not match proxy dimension")
    for arr in (J_m, J_phi, r_m, e_t):
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite assembly input")

    wm2 = weights.w_marker**2
    wt2 = weights.w_tracking**2
    H = J_m.T @ (wm2[:, None] * J_m) + J_phi.T @ (wt2[:, None] * J_phi) + np.diag(weights.w_damp)
    H = 0.5 * (H + H.T)
    g = J_m.T @ (wm2 * r_m) + J_phi.T @ (wt2 * e_t)
    if lb is None:
        lb = np.full(n_p, -np.inf)
    if ub is None:
        ub = np.full(n_p, np.inf)
    return QuadraticModel(H=H, g=g, lb=np.minimum(lb, 0.0), ub=np.maximum(ub, 0.0))


def _projected_gradient(x, grad, lb, ub):
    pg = grad.copy()
    pg[(x <= lb) & (grad > 0)] = 0.0
    pg[(x >= ub) & (grad < 0)] = 0.0
    return pg


def solve_box_qp(model: QuadraticModel, max_iter: int = 100) -> np.ndarray:
    """Global minimizer of the box QP.

    Fast path: projected Newton with epsilon-active bound identification
    and trial points placed exactly on the bounds. On strongly coupled,
    ill-conditioned instances the active-set estimate can cycle, so if the
    fast path has not met the KKT tolerance after its iteration budget the
    solve falls back to a primal active-set method with single-constraint
    working-set changes, which terminates finitely for strictly convex
    problems. KKT tolerance: projected gradient norm <= 1e-10 * (1+||g||).
    """
    H, g, lb, ub = model.H, model.g, model.lb, model.ub
    n = model.n
    tol = 1e-10 * (1.0 + np.linalg.norm(g))

    try:
        x = -np.linalg.solve(H, g)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("QP Hessian is singular (internal error)") from exc
    if np.all(x >= lb) and np.all(x <= ub):
        return x

    eps_cap = 1e-2 * float(np.min(ub - lb))
    x = np.clip(np.zeros(n), lb, ub)
    value = model.objective(x)
    for _ in range(30):
        grad = H @ x + g
        if np.linalg.norm(_projected_gradient(x, grad, lb, ub)) <= tol:
            return x
        resid = np.linalg.norm(x - np.clip(x - grad, lb, ub))
        eps = min(eps_cap, resid)
        lo = (x <= lb + eps) & (grad > 0)
        hi = (x >= ub - eps) & (grad < 0)
        clamped = lo | hi
        free = ~clamped

        target = x.copy()
        target[lo] = lb[lo]
        target[hi] = ub[hi]
        if np.any(free):
            Hff = H[np.ix_(free, free)]
            rhs = -(g[free] + H[np.ix_(free, clamped)] @ target[clamped])
            try:
                L = np.linalg.cholesky(Hff)
            except np.linalg.LinAlgError as exc:
                raise RuntimeError("reduced Hessian not positive definite (internal error)") from exc
            target[free] = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
        dx = target - x

        # Backtracking along the projection path; Armijo on the quadratic.
        alpha = 1.0
        for _ in range(40):
            xc = np.clip(x + alpha * dx, lb, ub)
            vc = model.objective(xc)
            if vc <= value + 0.1 * float(grad @ (xc - x)) and vc <= value:
                break
            alpha *= 0.5
        else:
            break
        x, value = xc, vc

    grad = H @ x + g
    if np.linalg.norm(_projected_gradient(x, grad, lb, ub)) <= tol:
        return x
    return _active_set_qp(model, x, tol, max_iter=max(max_iter, 20 * n + 50))


def _active_set_qp(model: QuadraticModel, x0, tol, max_iter) -> np.ndarray:
    """Primal active-set method; working set changes one bound at a time."""
    H, g, lb, ub = model.H, model.g, model.lb, model.ub
    n = model.n
    x = np.clip(x0, lb, ub)
    # working set: 0 free, -1 at lower, +1 at upper
    state = np.zeros(n, dtype=int)
    state[x <= lb] = -1
    state[x >= ub] = 1

    for _ in range(max_iter):
        free = state == 0
        target = np.where(state < 0, lb, np.where(state > 0, ub, x))
        if np.any(free):
            Hff = H[np.ix_(free, free)]
            rhs = -(g[free] + H[np.ix_(free, ~free)] @ target[~free])
            try:
                target[free] = np.linalg.solve(Hff, rhs)
            except np.linalg.LinAlgError as exc:
                raise RuntimeError("reduced Hessian singular (internal error)") from exc
        d = target - x

        if np.max(np.abs(d), initial=0.0) <= 1e-14 * (1.0 + np.max(np.abs(x), initial=0.0)):
            grad = H @ x + g
            if np.linalg.norm(_projected_gradient(x, grad, lb, ub)) <= tol:
                return x
            # Drop the active bound with the worst multiplier sign violation.
            mult = np.where(state < 0, grad, -grad)
            mult[state == 0] = np.inf
            worst = int(np.argmin(mult))
            if mult[worst] >= -tol:
                return x
            state[worst] = 0
            continue

        # Step to the target or to the first blocking bound.
        alpha = 1.0
        blocker = -1
        block_side = 0
        for i in np.nonzero(free)[0]:
            if d[i] > 0 and x[i] + alpha * d[i] > ub[i]:
                alpha = (ub[i] - x[i]) / d[i]
                blocker, block_side = i, 1
            elif d[i] < 0 and x[i] + alpha * d[i] < lb[i]:
                alpha = (lb[i] - x[i]) / d[i]
                blocker, block_side = i, -1
        x = np.clip(x + alpha * d, lb, ub)
        if blocker >= 0:
            state[blocker] = block_side
            x[blocker] = lb[blocker] if block_side < 0 else ub[blocker]

    grad = H @ x + g
    if np.linalg.norm(_projected_gradient(x, grad, lb, ub)) <= 100 * tol:
        return x
    raise RuntimeError("box QP iteration cap exceeded")


def solve_box_qp_enum(model: QuadraticModel) -> np.ndarray:
    """Exhaustive active-set oracle for n <= 8: every bound-activity pattern.

    For each of the 3^n lower/free/upper patterns, solve the equality-
    constrained subproblem and keep the feasible candidate with the lowest
    objective. Exact for strictly convex problems; test use only.
    """
    H, g, lb, ub = model.H, model.g, model.lb, model.ub
    n = model.n
    if n > 8:
        raise ValueError("enumeration oracle limited to n <= 8")
    best = None
    best_val = np.inf
    tol = 1e-12
    for pattern in product((-1, 0, 1), repeat=n):
        pattern = np.asarray(pattern)
        x = np.where(pattern < 0, lb, np.where(pattern > 0, ub, 0.0))
        free = pattern == 0
        if np.any(free):
            Hff = H[np.ix_(free, free)]
            rhs = -(g[free] + H[np.ix_(free, ~free)] @ x[~free])
            try:
                x[free] = np.linalg.solve(Hff, rhs)
            except np.linalg.LinAlgError:
                continue
        if np.any(x < lb - tol) or np.any(x > ub + tol):
            continue
        val = model.objective(np.clip(x, lb, ub))
        if val < best_val:
            best_val = val
            best = np.clip(x, lb, ub)
    assert best is not None, "zero step is always feasible"
    return best


def predicted_decrease(model: QuadraticModel, dp: np.ndarray) -> float:
    """m(0) - m(dp) = -g'dp - 1/2 dp'H dp; nonnegative at the QP optimum."""
    dp = np.asarray(dp, dtype=float)
    return float(-(model.g @ dp) - 0.5 * dp @ model.H @ dp)
