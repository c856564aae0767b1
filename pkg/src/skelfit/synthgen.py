"""Deterministic synthetic ground truth: models, trajectories, observations.

Randomness is counter-based (Philox) and keyed by (seed, stream, frame), so
every draw is addressable and reproducible regardless of evaluation order:
stream 0 seeds model geometry, 1 trajectory parameters, 2 true scales, and
streams 3/4 are keyed per frame for observation noise and dropout. Noise
matrices are drawn in fixed (marker, axis) order within a frame.

Units: meters internally; observation noise is specified in millimeters.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from skelfit.framesolver import Observation
from skelfit.kinmodel import (
    ROOT_PARENT,
    BodyNode,
    FullState,
    JointSpec,
    KinematicModel,
    MarkerAttachment,
    marker_jacobian,
    predict_markers,
)

TOPOLOGIES = ("chain", "biped", "spine", "tree")

_STREAM_MODEL = 0
_STREAM_TRAJ = 1
_STREAM_SCALE = 2
_STREAM_NOISE = 3
_STREAM_DROPOUT = 4


def _rng(seed: int, stream: int, frame: int = 0) -> np.random.Generator:
    key = np.array([np.uint64(seed), np.uint64((stream << 32) + frame)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one synthetic trial; deterministic in ``seed``."""

    topology: str = "chain"
    body_count: int = 4
    markers_per_body: int = 3
    n_frames: int = 50
    dt: float = 0.01
    noise_sigma_mm: float = 0.0
    dropout_rate: float = 0.0
    amp_angular: float = 0.3
    amp_linear: float = 0.02
    pose_offset_rad: float = 0.0
    zero_phase: bool = False
    freq_hz: tuple[float, float] = (0.2, 0.7)
    scale_range: tuple[float, float] = (0.85, 1.2)
    marker_style: str = "spread"
    marker_bodies: tuple[int, ...] | None = None
    with_scale_slots: bool = True
    bone_length: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"unknown topology {self.topology!r}")
        if self.marker_style not in ("spread", "clustered"):
            raise ValueError(f"unknown marker style {self.marker_style!r}")
        if not (0 <= self.dropout_rate < 1):
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.body_count < 2:
            raise ValueError("need at least a root and one child body")
        if self.n_frames < 1:
            raise ValueError("need at least one frame")


# ---------------------------------------------------------------------------
# Model construction
# ---------------------------------------------------------------------------

def _marker_offsets(rng, spec: SynthSpec, n: int) -> np.ndarray:
    """n non-collinear local offsets; clustered style hugs the bone axis."""
    L = spec.bone_length
    if spec.marker_style == "clustered":
        base = np.tile([0.95 * L, 0.0, 0.0], (n, 1))
        lateral = 0.012 * L
    else:
        base = np.stack([
            np.array([L * (0.25 + 0.6 * k / max(n - 1, 1)), 0.0, 0.0]) for k in range(n)
        ])
        lateral = 0.25 * L
    jitter = rng.uniform(-1.0, 1.0, size=(n, 3)) * np.array([0.05 * L, lateral, lateral])
    # Deterministic lateral spread pattern guarantees non-collinearity even
    # for unlucky jitter draws.
    pattern = np.array([[0.0, 1.0, 0.0], [0.0, -0.5, 0.9], [0.0, -0.5, -0.9]])
    for k in range(n):
        base[k] += lateral * pattern[k % 3]
    return base + jitter


def _build_chain(spec: SynthSpec, rng) -> KinematicModel:
    axes = [np.array([0, 0, 1.0]), np.array([0, 1.0, 0])]
    bodies = [BodyNode(0, ROOT_PARENT, JointSpec("free6"),
                       scale_slot=0 if spec.with_scale_slots else None)]
    slot = 1
    for i in range(1, spec.body_count):
        bodies.append(BodyNode(
            i, i - 1, JointSpec("hinge1", axis=axes[i % 2]),
            anchor=[spec.bone_length, 0.0, 0.0],
            scale_slot=slot if spec.with_scale_slots else None,
        ))
        slot += 1
    return KinematicModel(bodies=tuple(bodies), markers=_place_markers(spec, rng, spec.body_count))


def _build_biped(spec: SynthSpec, rng) -> KinematicModel:
    L = spec.bone_length
    slot = iter(range(100))

    def next_slot():
        return next(slot) if spec.with_scale_slots else None

    bodies = [
        BodyNode(0, ROOT_PARENT, JointSpec("free6"), scale_slot=next_slot()),
        BodyNode(1, 0, JointSpec("ball3"), anchor=[0, 0, 0.15], scale_slot=next_slot()),
        BodyNode(2, 1, JointSpec("hinge1", axis=[0, 1.0, 0]), anchor=[0, 0, L], scale_slot=next_slot()),
        BodyNode(3, 0, JointSpec("ball3"), anchor=[0, 0.12, -0.05], scale_slot=next_slot()),
        BodyNode(4, 3, JointSpec("hinge1", axis=[0, 1.0, 0]), anchor=[0, 0, -L], scale_slot=next_slot()),
        BodyNode(5, 0, JointSpec("ball3"), anchor=[0, -0.12, -0.05], scale_slot=next_slot()),
        BodyNode(6, 5, JointSpec("hinge1", axis=[0, 1.0, 0]), anchor=[0, 0, -L], scale_slot=next_slot()),
    ]
    return KinematicModel(bodies=tuple(bodies), markers=_place_markers(spec, rng, len(bodies)))


def _build_spine(spec: SynthSpec, rng) -> KinematicModel:
    """Root plus a hinge-z chain; marker_bodies usually sparse."""
    bodies = [BodyNode(0, ROOT_PARENT, JointSpec("free6"),
                       scale_slot=0 if spec.with_scale_slots else None)]
    seg = spec.bone_length / 3.0
    for i in range(1, spec.body_count):
        bodies.append(BodyNode(
            i, i - 1, JointSpec("hinge1", axis=[0, 0, 1.0]), anchor=[seg, 0.0, 0.0],
            scale_slot=None,
        ))
    return KinematicModel(bodies=tuple(bodies), markers=_place_markers(spec, rng, spec.body_count))


def _build_tree(spec: SynthSpec, rng) -> KinematicModel:
    """Branching ball-joint tree (body i hangs off (i-1)//2), full-body-like:
    DoF count grows three per body with shallow chains."""
    bodies = [BodyNode(0, ROOT_PARENT, JointSpec("free6"),
                       scale_slot=0 if spec.with_scale_slots else None)]
    L = spec.bone_length
    for i in range(1, spec.body_count):
        parent = (i - 1) // 2
        side = 1.0 if i % 2 else -1.0
        anchor = np.array([0.6 * L, side * 0.4 * L, 0.1 * L * (i % 3)])
        bodies.append(BodyNode(
            i, parent, JointSpec("ball3"), anchor=anchor,
            scale_slot=i if spec.with_scale_slots else None,
        ))
    return KinematicModel(bodies=tuple(bodies), markers=_place_markers(spec, rng, spec.body_count))


def _place_markers(spec: SynthSpec, rng, n_bodies: int):
    which = range(n_bodies) if spec.marker_bodies is None else spec.marker_bodies
    markers = []
    k = 0
    for b in which:
        for off in _marker_offsets(rng, spec, spec.markers_per_body):
            markers.append(MarkerAttachment(f"m{k}", int(b), off))
            k += 1
    return tuple(markers)


_BUILDERS = {"chain": _build_chain, "biped": _build_biped, "spine": _build_spine,
             "tree": _build_tree}


def build_model(spec: SynthSpec) -> KinematicModel:
    return _BUILDERS[spec.topology](spec, _rng(spec.seed, _STREAM_MODEL))


# ---------------------------------------------------------------------------
# Trajectories and observations
# ---------------------------------------------------------------------------

def _trajectory_params(spec: SynthSpec, model: KinematicModel):
    rng = _rng(spec.seed, _STREAM_TRAJ)
    kinds = model.coord_kinds()
    amp = np.zeros(model.n_y)
    freq = np.zeros(model.n_y)
    phase = np.zeros(model.n_y)
    offset = np.zeros(model.n_y)
    for j, kind in enumerate(kinds):
        a = spec.amp_angular if kind == "ang" else spec.amp_linear if kind == "lin" else 0.0
        amp[j] = a * rng.uniform(0.4, 1.0)
        freq[j] = rng.uniform(*spec.freq_hz)
        # zero_phase makes the trial open at the rest pose (a calibration-
        # style straight configuration) and bend from there.
        phase[j] = 0.0 if spec.zero_phase else rng.uniform(0.0, 2 * np.pi)
        if kind == "ang" and spec.pose_offset_rad:
            offset[j] = spec.pose_offset_rad * rng.uniform(0.6, 1.0) * rng.choice([-1.0, 1.0])
    return amp, freq, phase, offset


def true_scales(spec: SynthSpec, model: KinematicModel) -> np.ndarray:
    rng = _rng(spec.seed, _STREAM_SCALE)
    return rng.uniform(*spec.scale_range, size=model.n_s)


def generate(spec: SynthSpec):
    """(model, true states per frame, observations per frame)."""
    model = build_model(spec)
    s_true = true_scales(spec, model)
    amp, freq, phase, offset = _trajectory_params(spec, model)
    sigma = spec.noise_sigma_mm / 1000.0

    states: list[FullState] = []
    observations: list[Observation] = []
    for t in range(spec.n_frames):
        ti = t * spec.dt
        y = model.default_state()
        nq = model.n_q
        y[:nq] = offset[:nq] + amp[:nq] * np.sin(2 * np.pi * freq[:nq] * ti + phase[:nq])
        y[model.n_q:] = s_true
        states.append(FullState.from_vector(model, y))

        x = predict_markers(model, y)
        if sigma > 0:
            noise = _rng(spec.seed, _STREAM_NOISE, t).normal(0.0, sigma, size=(model.n_markers, 3))
            x = x + noise.reshape(-1)
        if spec.dropout_rate > 0:
            vis = _rng(spec.seed, _STREAM_DROPOUT, t).random(model.n_markers) >= spec.dropout_rate
        else:
            vis = np.ones(model.n_markers, dtype=bool)
        observations.append(Observation(x_obs=x, visibility=vis))
    return model, states, observations


def observe_states(spec: SynthSpec, model: KinematicModel, states) -> list[Observation]:
    """Observations for caller-supplied true states, using the same noise
    and dropout streams as generate (frame index keys the draw)."""
    sigma = spec.noise_sigma_mm / 1000.0
    observations = []
    for t, st in enumerate(states):
        y = st.as_vector() if hasattr(st, "as_vector") else np.asarray(st, float)
        x = predict_markers(model, y)
        if sigma > 0:
            noise = _rng(spec.seed, _STREAM_NOISE, t).normal(0.0, sigma, size=(model.n_markers, 3))
            x = x + noise.reshape(-1)
        if spec.dropout_rate > 0:
            vis = _rng(spec.seed, _STREAM_DROPOUT, t).random(model.n_markers) >= spec.dropout_rate
        else:
            vis = np.ones(model.n_markers, dtype=bool)
        observations.append(Observation(x_obs=x, visibility=vis))
    return observations


# ---------------------------------------------------------------------------
# Ambiguity probes
# ---------------------------------------------------------------------------

def scale_pose_conditioning(model: KinematicModel, y) -> float:
    """Condition number of the column-normalized marker Jacobian.

    Large values mean some mixture of scale and pose columns explains the
    same marker motion, the regime where stage-wise estimation leaks.
    """
    J = marker_jacobian(model, np.asarray(y, dtype=float))
    norms = np.linalg.norm(J, axis=0)
    keep = norms > 1e-12
    Jn = J[:, keep] / norms[keep]
    return float(np.linalg.cond(Jn))


def make_ambiguous_spec(seed: int, **overrides) -> SynthSpec:
    """A chain spec whose clustered markers correlate scale and pose columns.

    The trial opens at the straight rest pose (zero_phase), where the
    marker clusters leave segment scales nearly interchangeable with root
    placement, and bends from there; a stage that commits to scale on the
    opening frames inherits that ambiguity.
    """
    base = SynthSpec(
        topology="chain",
        body_count=3,
        markers_per_body=4,
        marker_style="clustered",
        amp_angular=0.55,
        zero_phase=True,
        scale_range=(0.8, 1.25),
        seed=seed,
    )
    return replace(base, **overrides) if overrides else base
