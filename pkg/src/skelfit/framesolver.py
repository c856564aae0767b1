"""Per-frame trust-region solve and the sequential trial loop.

One frame iterates: evaluate residuals and Jacobians at the current state,
map them to proxy space (J_m = J_y J_phi), assemble the damped quadratic
model, solve the box-constrained QP, and accept the step only if the actual
decrease (with the step's damping penalty charged against it) is positive.
The acceptance ratio rho = actual / (predicted + eps) drives the damping
scalar up or down. Termination: weighted residual below tolerance, relative
decrease below tolerance on an accepted step, or the iteration cap.

A trial is a sequence of frames solved in order, each warm-started from the
previous frame's estimate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from skelfit import boxqp
from skelfit.kinmodel import (
    KIND_ANGULAR,
    KIND_LINEAR,
    FullState,
    KinematicModel,
    predict_and_jacobian,
    predict_markers,
)
from skelfit.proxy import Identity, ProxyMap, Selection

STATUS_CONVERGED_RESIDUAL = "converged_residual"
STATUS_CONVERGED_DECREASE = "converged_decrease"
STATUS_MAX_ITERS = "max_iters"
STATUS_FAILED_NONFINITE = "failed_nonfinite"


@dataclass(frozen=True)
class Observation:
    """Observed marker positions (meters) with a per-marker visibility mask.

    Rows of invisible markers never enter the residual (their weights are
    zeroed); their x_obs entries are ignored and may be zero-filled.
    """

    x_obs: np.ndarray
    visibility: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x_obs, dtype=float)
        vis = np.asarray(self.visibility, dtype=bool)
        if x.shape != (3 * vis.size,):
            raise ValueError("x_obs length must be 3 * marker count")
        x = np.where(np.repeat(vis, 3), x, 0.0)
        object.__setattr__(self, "x_obs", x)
        object.__setattr__(self, "visibility", vis)

    @classmethod
    def full(cls, x_obs) -> "Observation":
        x_obs = np.asarray(x_obs, dtype=float)
        return cls(x_obs=x_obs, visibility=np.ones(x_obs.size // 3, dtype=bool))


@dataclass(frozen=True)
class SolverConfig:
    """Trust-region constants, weights and termination thresholds.

    Step bounds are given per coordinate kind and mapped to proxy space by
    default_step_bounds; explicit lb/ub arrays override that. Tracking is
    off (weight 0) unless y_ref is provided.
    """

    lambda_init: float = 1e-3
    lambda_min: float = 1e-9
    lambda_max: float = 1e8
    nu_up: float = 4.0
    nu_down: float = 0.5
    rho_low: float = 0.25
    rho_high: float = 0.75
    eps_rho: float = 1e-12
    max_iters: int = 20
    tol_residual: float = 1e-8
    tol_rel_decrease: float = 1e-6
    bound_angular: float = 0.2
    bound_linear: float = 0.05
    bound_scale: float = 0.05
    scale_min: float = 0.25
    scale_max: float = 4.0
    tracking_weight: float = 0.0
    y_ref: np.ndarray | None = None
    track_previous: bool = False
    damping_diag: np.ndarray | None = None
    lb: np.ndarray | None = None
    ub: np.ndarray | None = None
    freeze_scale_after: int | None = None
    marker_weight_scale: float = 1.0

    def __post_init__(self):
        if not (0 < self.nu_down < 1 < self.nu_up):
            raise ValueError("need 0 < nu_down < 1 < nu_up")
        if not (0 <= self.rho_low < self.rho_high <= 1):
            raise ValueError("need 0 <= rho_low < rho_high <= 1")
        if self.eps_rho <= 0:
            raise ValueError("eps_rho must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if min(self.bound_angular, self.bound_linear, self.bound_scale) <= 0:
            raise ValueError("step bounds must be positive")


@dataclass(frozen=True)
class IterationRecord:
    """One TR iteration, kept when solve_frame runs with collect_trace."""

    energy_before: float
    energy_after: float
    df_pred: float
    df_act: float
    rho: float
    accepted: bool
    dp: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    lam: float
    p_after: np.ndarray
    y_after: np.ndarray


@dataclass(frozen=True)
class FrameResult:
    y_est: FullState
    p_est: np.ndarray
    iterations: int
    accepted_steps: int
    final_weighted_energy: float
    marker_rmse_mm: float
    status: str
    wall_time_us: float
    trace: tuple = ()


@dataclass(frozen=True)
class TrialResult:
    """Per-frame results plus nearest-rank trial aggregates."""

    frames: tuple
    p50_time_us: float = field(init=False)
    p90_time_us: float = field(init=False)
    p50_iterations: float = field(init=False)
    p90_iterations: float = field(init=False)
    mean_rmse_mm: float = field(init=False)
    p50_rmse_mm: float = field(init=False)
    p90_rmse_mm: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        times = np.array([f.wall_time_us for f in self.frames])
        iters = np.array([f.iterations for f in self.frames])
        rmse = np.array([f.marker_rmse_mm for f in self.frames])
        rmse_ok = rmse[np.isfinite(rmse)]
        object.__setattr__(self, "p50_time_us", _nearest_rank(times, 50))
        object.__setattr__(self, "p90_time_us", _nearest_rank(times, 90))
        object.__setattr__(self, "p50_iterations", _nearest_rank(iters, 50))
        object.__setattr__(self, "p90_iterations", _nearest_rank(iters, 90))
        object.__setattr__(self, "mean_rmse_mm", float(np.mean(rmse_ok)) if rmse_ok.size else float("nan"))
        object.__setattr__(self, "p50_rmse_mm", _nearest_rank(rmse_ok, 50))
        object.__setattr__(self, "p90_rmse_mm", _nearest_rank(rmse_ok, 90))


def _nearest_rank(values, pct) -> float:
    values = np.sort(np.asarray(values, dtype=float))
    if values.size == 0:
        return float("nan")
    rank = int(np.ceil(pct / 100.0 * values.size))
    return float(values[max(rank, 1) - 1])


# ---------------------------------------------------------------------------
# Objective pieces
# ---------------------------------------------------------------------------

def marker_weights(model: KinematicModel, obs: Observation, scale: float = 1.0) -> np.ndarray:
    """Square-root marker weight per residual row; invisible markers get 0."""
    w = np.repeat([m.weight for m in model.markers], 3).astype(float)
    w *= np.repeat(obs.visibility.astype(float), 3)
    return scale * w


def tracking_weights(model: KinematicModel, config: SolverConfig) -> np.ndarray:
    if config.y_ref is None or config.tracking_weight == 0.0:
        return np.zeros(model.n_y)
    return np.full(model.n_y, float(config.tracking_weight))


def energy(model, y, obs, w_m, w_t=None, y_ref=None) -> float:
    """E(y) = 1/2 ||W_m r_m||^2 + 1/2 ||W_t (y - y_ref)||^2."""
    r = predict_markers(model, y) - obs.x_obs
    e = 0.5 * float(np.sum((w_m * r) ** 2))
    if w_t is not None and y_ref is not None and np.any(w_t != 0.0):
        e += 0.5 * float(np.sum((w_t * (y - y_ref)) ** 2))
    return e


def acceptance_quantities(e_before, e_after, dp, w_damp, df_pred, eps_rho):
    """Actual decrease (damping penalty charged) and acceptance ratio."""
    dp = np.asarray(dp, dtype=float)
    penalty = 0.5 * float(np.sum(np.asarray(w_damp) * dp**2))
    df_act = e_before - (e_after + penalty)
    rho = df_act / (df_pred + eps_rho)
    return df_act, rho


def update_damping(lam, rho, accepted, config: SolverConfig) -> float:
    if (not accepted) or rho < config.rho_low:
        return min(lam * config.nu_up, config.lambda_max)
    if rho > config.rho_high:
        return max(lam * config.nu_down, config.lambda_min)
    return lam


def default_step_bounds(model: KinematicModel, proxy: ProxyMap, config: SolverConfig,
                        J_phi: np.ndarray | None = None):
    """Per-kind state bounds mapped into proxy coordinates.

    Each proxy coordinate gets the tightest bound over the y rows it drives,
    scaled by that row's Jacobian entry, so a unit single-coordinate proxy
    move never exceeds any driven coordinate's per-kind limit.
    """
    if config.lb is not None and config.ub is not None:
        return np.asarray(config.lb, float), np.asarray(config.ub, float)
    kinds = model.coord_kinds()
    per_kind = {
        KIND_ANGULAR: config.bound_angular,
        KIND_LINEAR: config.bound_linear,
    }
    bound_y = np.array([per_kind.get(k, config.bound_scale) for k in kinds])
    J = proxy.jacobian() if J_phi is None else J_phi
    b = np.empty(proxy.n_p)
    for j in range(proxy.n_p):
        rows = np.nonzero(J[:, j])[0]
        if rows.size == 0:
            b[j] = config.bound_angular
        else:
            b[j] = np.min(bound_y[rows] / np.abs(J[rows, j]))
    return -b, b


def _scale_selector_columns(model, J_phi):
    """Columns mapping one-to-one (entry +1) onto a scale row."""
    cols = []
    for j in range(J_phi.shape[1]):
        rows = np.nonzero(J_phi[:, j])[0]
        if rows.size == 1 and rows[0] >= model.n_q and J_phi[rows[0], j] == 1.0:
            cols.append((j, int(rows[0])))
    return cols


def _tighten_scale_bounds(y, lb, ub, scale_cols, config):
    """Keep selector-mapped scale coordinates inside [scale_min, scale_max].

    General affine couplings are left to the per-step bound.
    """
    if not scale_cols:
        return lb, ub
    lb = lb.copy()
    ub = ub.copy()
    for j, row in scale_cols:
        cur = y[row]
        lb[j] = min(max(lb[j], config.scale_min - cur), 0.0)
        ub[j] = max(min(ub[j], config.scale_max - cur), 0.0)
    return lb, ub


def _weighted_residual_norm(e: float) -> float:
    return float(np.sqrt(max(2.0 * e, 0.0)))


def _as_y(model, init) -> np.ndarray:
    if isinstance(init, FullState):
        return init.as_vector()
    y = np.asarray(init, dtype=float)
    if y.shape != (model.n_y,):
        raise ValueError(f"init has shape {y.shape}, expected ({model.n_y},)")
    return y.copy()


# ---------------------------------------------------------------------------
# Per-frame solve
# ---------------------------------------------------------------------------

def solve_frame(model: KinematicModel, proxy: ProxyMap, obs: Observation, init,
                config: SolverConfig = SolverConfig(), collect_trace: bool = False) -> FrameResult:
    """Run the trust-region loop for one frame from the given init state."""
    t0 = time.perf_counter_ns()
    y0 = _as_y(model, init)
    proxy = proxy.rebased(y0)
    p = proxy.project(y0)
    y = proxy.apply(p)

    w_m = marker_weights(model, obs, config.marker_weight_scale)
    w_t = tracking_weights(model, config)
    y_ref = config.y_ref
    damp_diag = np.ones(proxy.n_p) if config.damping_diag is None else np.asarray(config.damping_diag, float)
    J_phi = proxy.jacobian()
    lb0, ub0 = default_step_bounds(model, proxy, config, J_phi)
    scale_cols = _scale_selector_columns(model, J_phi)

    trace: list[IterationRecord] = []
    e_cur = energy(model, y, obs, w_m, w_t, y_ref)
    if not np.isfinite(e_cur):
        return _result(model, obs, y, p, 0, 0, e_cur, STATUS_FAILED_NONFINITE, t0, trace)

    if _weighted_residual_norm(e_cur) <= config.tol_residual:
        return _result(model, obs, y, p, 0, 0, e_cur, STATUS_CONVERGED_RESIDUAL, t0, trace)

    lam = config.lambda_init
    status = STATUS_MAX_ITERS
    accepted_steps = 0
    iterations = 0

    for _ in range(config.max_iters):
        iterations += 1
        x_hat, J_y = predict_and_jacobian(model, y)
        r_m = x_hat - obs.x_obs
        e_t = (y - y_ref) if y_ref is not None else np.zeros(model.n_y)
        J_m = J_y @ J_phi
        lb, ub = _tighten_scale_bounds(y, lb0, ub0, scale_cols, config)
        weights = boxqp.WeightSet(w_marker=w_m, w_tracking=w_t, w_damp=lam * damp_diag)
        qm = boxqp.assemble(J_m, J_phi, r_m, e_t, weights, lb=lb, ub=ub)
        dp = boxqp.solve_box_qp(qm)
        df_pred = boxqp.predicted_decrease(qm, dp)

        p_trial = p + dp
        y_trial = proxy.apply(p_trial)
        e_trial = energy(model, y_trial, obs, w_m, w_t, y_ref)
        df_act, rho = acceptance_quantities(e_cur, e_trial, dp, weights.w_damp, df_pred, config.eps_rho)
        accepted = bool(np.isfinite(e_trial) and df_act > 0.0)

        e_before = e_cur
        if accepted:
            p, y, e_cur = p_trial, y_trial, e_trial
            accepted_steps += 1
        lam = update_damping(lam, rho, accepted, config)

        if collect_trace:
            trace.append(IterationRecord(
                energy_before=e_before, energy_after=e_trial, df_pred=df_pred,
                df_act=df_act, rho=rho, accepted=accepted, dp=dp.copy(),
                lb=lb.copy(), ub=ub.copy(), lam=lam, p_after=p.copy(), y_after=y.copy(),
            ))

        if accepted:
            if _weighted_residual_norm(e_cur) <= config.tol_residual:
                status = STATUS_CONVERGED_RESIDUAL
                break
            if df_act <= config.tol_rel_decrease * max(e_before, 1e-300):
                status = STATUS_CONVERGED_DECREASE
                break

    return _result(model, obs, y, p, iterations, accepted_steps, e_cur, status, t0, trace)


def _result(model, obs, y, p, iterations, accepted, e_cur, status, t0, trace) -> FrameResult:
    rmse = _marker_rmse_mm(model, y, obs)
    return FrameResult(
        y_est=FullState.from_vector(model, y),
        p_est=np.asarray(p, float).copy(),
        iterations=iterations,
        accepted_steps=accepted,
        final_weighted_energy=float(e_cur),
        marker_rmse_mm=rmse,
        status=status,
        wall_time_us=(time.perf_counter_ns() - t0) / 1000.0,
        trace=tuple(trace),
    )


def _marker_rmse_mm(model, y, obs) -> float:
    if not np.any(obs.visibility):
        return float("nan")
    d = (predict_markers(model, y) - obs.x_obs).reshape(-1, 3)
    d2 = np.sum(d * d, axis=1)[obs.visibility]
    return float(np.sqrt(np.mean(d2)) * 1000.0)


# ---------------------------------------------------------------------------
# Trial loop
# ---------------------------------------------------------------------------

def _freeze_scale_proxy(model, proxy, y):
    if not isinstance(proxy, Identity):
        raise NotImplementedError("scale freezing is only supported with an Identity proxy")
    return Selection(active_indices=np.arange(model.n_q), frozen_values=np.asarray(y, float).copy())


def solve_trial(model: KinematicModel, proxy: ProxyMap, frames, init,
                config: SolverConfig = SolverConfig(), presolve_fn=None,
                collect_trace: bool = False) -> TrialResult:
    """Solve a frame sequence; frame t warm-starts from frame t-1's estimate.

    ``presolve_fn``, when given, maps (model, obs, y_init) to a warmed init
    and is applied to the first frame only (later frames inherit warmth).
    With ``config.track_previous``, each frame softly tracks the previous
    frame's estimate, damping drift along weakly observed directions.
    Per-frame failures are recorded in the frame status, never raised.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("trial needs at least one frame")
    y = _as_y(model, init)
    results = []
    active_proxy = proxy
    for t, obs in enumerate(frames):
        if t == 0 and presolve_fn is not None:
            y = presolve_fn(model, obs, y)
        if config.freeze_scale_after is not None and t == config.freeze_scale_after:
            active_proxy = _freeze_scale_proxy(model, proxy, y)
        cfg_t = replace(config, y_ref=y.copy()) if config.track_previous else config
        res = solve_frame(model, active_proxy, obs, y, cfg_t, collect_trace=collect_trace)
        results.append(res)
        if res.status != STATUS_FAILED_NONFINITE:
            y = res.y_est.as_vector()
    return TrialResult(frames=tuple(results))


def with_tracking(config: SolverConfig, y_ref, weight: float) -> SolverConfig:
    """Convenience: enable the soft reference-tracking term."""
    return replace(config, y_ref=np.asarray(y_ref, float), tracking_weight=float(weight))
