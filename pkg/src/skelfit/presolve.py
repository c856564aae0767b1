"""Gauss-Seidel warm-start stage: root-to-leaf sweeps of local subproblems.

Each body gets a local subproblem spanning itself plus a short ancestor
window; its marker rows include the window bodies' markers and those of
their immediate children, so consecutive subproblems overlap. Subproblems
are solved with the same trust-region machinery through a Selection proxy,
committing accepted updates into the shared state before the next one runs.
A subproblem result that raises the full weighted energy is rolled back, so
the sweep can never leave the state worse than the init.

Local solves use wider per-step bounds than the main solver: the point of
the pre-solve is to untangle large configuration errors quickly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from skelfit.framesolver import (
    Observation,
    SolverConfig,
    energy,
    marker_weights,
    solve_frame,
)
from skelfit.kinmodel import ROOT_PARENT, KinematicModel
from skelfit.proxy import Selection


@dataclass(frozen=True)
class PresolveConfig:
    # inner_cap 10 (not lower): local Gauss-Newton steps shrink near
    # antipodal hinge configurations, and the sweep must be able to pull a
    # flipped segment most of the way back in one pass.
    window_size: int = 2
    sweeps: int = 2
    inner_cap: int = 10
    bound_angular: float = 1.5
    bound_linear: float = 0.2
    bound_scale: float = 0.1

    def __post_init__(self):
        if self.window_size < 1 or self.sweeps < 1 or self.inner_cap < 1:
            raise ValueError("window_size, sweeps and inner_cap must be >= 1")


@dataclass(frozen=True)
class LocalSubproblem:
    """Body window, its active y coordinates, and overlapping marker rows."""

    body_window: tuple[int, ...]
    active_coords: np.ndarray
    marker_indices: np.ndarray


def build_subproblems(model: KinematicModel, window_size: int = 2) -> list[LocalSubproblem]:
    """One subproblem per body, root-to-leaf, windows spanning ancestors."""
    if window_size < 1:
        raise ValueError("window_size must be >= 1")
    subs = []
    for b in model.bodies:
        window = [b.id]
        c = b.parent
        while c != ROOT_PARENT and len(window) < window_size:
            window.append(c)
            c = model.bodies[c].parent
        window = tuple(sorted(window))
        coords: list[int] = []
        for i in window:
            sl = model.q_slice(i)
            coords.extend(range(sl.start, sl.stop))
            si = model.scale_index(i)
            if si is not None:
                coords.append(si)
        overlap = set(window)
        for i in window:
            overlap.update(model.children(i))
        marker_idx = np.array(
            [k for k, m in enumerate(model.markers) if m.body in overlap], dtype=int
        )
        subs.append(LocalSubproblem(
            body_window=window,
            active_coords=np.asarray(coords, dtype=int),
            marker_indices=marker_idx,
        ))
    return subs


def presolve_sweep(model: KinematicModel, obs: Observation, init, config: SolverConfig = SolverConfig(),
                   presolve: PresolveConfig = PresolveConfig(), sweeps: int | None = None) -> np.ndarray:
    """Warm-start state after Gauss-Seidel sweeps; full energy never increases."""
    y = np.asarray(init, dtype=float).copy() if not hasattr(init, "as_vector") else init.as_vector()
    n_sweeps = presolve.sweeps if sweeps is None else sweeps
    subs = build_subproblems(model, presolve.window_size)
    w_full = marker_weights(model, obs, config.marker_weight_scale)
    local_cfg = replace(
        config,
        max_iters=presolve.inner_cap,
        bound_angular=presolve.bound_angular,
        bound_linear=presolve.bound_linear,
        bound_scale=presolve.bound_scale,
        y_ref=None,
        tracking_weight=0.0,
        lb=None,
        ub=None,
    )

    e_full = energy(model, y, obs, w_full)
    if not np.isfinite(e_full):
        raise ValueError("non-finite energy at presolve init")

    for _ in range(n_sweeps):
        for sub in subs:
            visible = obs.visibility[sub.marker_indices]
            if not np.any(visible):
                continue
            mask = np.zeros(model.n_markers, dtype=bool)
            mask[sub.marker_indices] = obs.visibility[sub.marker_indices]
            local_obs = Observation(x_obs=obs.x_obs, visibility=mask)
            sel = Selection(active_indices=sub.active_coords, frozen_values=y)
            res = solve_frame(model, sel, local_obs, y, local_cfg)
            y_new = res.y_est.as_vector()
            e_new = energy(model, y_new, obs, w_full)
            if np.isfinite(e_new) and e_new <= e_full:
                y, e_full = y_new, e_new
    return y


def make_presolve_fn(config: SolverConfig, presolve: PresolveConfig = PresolveConfig()):
    """Adapter matching solve_trial's presolve hook signature."""

    def fn(model, obs, y_init):
        return presolve_sweep(model, obs, y_init, config, presolve)

    return fn
