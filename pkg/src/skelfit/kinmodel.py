"""Articulated rigid-body model: forward kinematics, marker prediction and
the analytic marker Jacobian with both pose and scale columns.

Conventions
-----------
* Quaternions are scalar-first (w, x, y, z) and unit norm.
* A body's frame is built from its parent frame by (1) translating along the
  parent's scaled anchor vector, (2) applying the fixed joint frame offset,
  (3) applying the joint motion transform.
* Rotational DoFs (ball joints, the rotational half of free joints) use
  absolute exponential-map 3-vectors, so the step space is unconstrained.
* Isotropic scale: a body's scale multiplies its own markers' local offsets
  and its children's anchor vectors. Joint frame offsets are never scaled.

State layout: y = [q, s] with q built body by body in topological order
(free6 contributes [tx, ty, tz, wx, wy, wz], ball3 [wx, wy, wz], hinge1 and
slide1 one coordinate each) and s indexed by scale slot.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ROOT_PARENT = -1

JOINT_DOF = {"free6": 6, "ball3": 3, "hinge1": 1, "slide1": 1}

# Coordinate kinds, used for per-kind step bounds.
KIND_ANGULAR = "ang"
KIND_LINEAR = "lin"
KIND_SCALE = "scale"


# ---------------------------------------------------------------------------
# Quaternion / SO(3) helpers
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.sqrt(q @ q)


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    out = np.empty(4)
    out[0] = aw * bw - ax * bx - ay * by - az * bz
    out[1] = aw * bx + ax * bw + ay * bz - az * by
    out[2] = aw * by - ax * bz + ay * bw + az * bx
    out[3] = aw * bz + ax * by - ay * bx + az * bw
    return out


def quat_to_mat(q):
    w, x, y, z = q
    out = np.empty((3, 3))
    out[0, 0] = 1 - 2 * (y * y + z * z)
    out[0, 1] = 2 * (x * y - w * z)
    out[0, 2] = 2 * (x * z + w * y)
    out[1, 0] = 2 * (x * y + w * z)
    out[1, 1] = 1 - 2 * (x * x + z * z)
    out[1, 2] = 2 * (y * z - w * x)
    out[2, 0] = 2 * (x * z - w * y)
    out[2, 1] = 2 * (y * z + w * x)
    out[2, 2] = 1 - 2 * (x * x + y * y)
    return out


def quat_from_rotvec(w):
    """Exponential map R^3 -> unit quaternion, Taylor-safe near zero."""
    w = np.asarray(w, dtype=float)
    theta = np.sqrt(w @ w)
    out = np.empty(4)
    if theta < 1e-8:
        # sin(t/2)/t ~ 1/2 - t^2/48
        k = 0.5 - theta * theta / 48.0
        out[0] = 1.0 - theta * theta / 8.0
        out[1:] = k * w
        return quat_normalize(out)
    half = 0.5 * theta
    out[0] = np.cos(half)
    out[1:] = (np.sin(half) / theta) * w
    return out


def skew(v):
    out = np.zeros((3, 3))
    out[0, 1] = -v[2]
    out[0, 2] = v[1]
    out[1, 0] = v[2]
    out[1, 2] = -v[0]
    out[2, 0] = -v[1]
    out[2, 1] = v[0]
    return out


def so3_left_jacobian(w):
    """Left Jacobian of the SO(3) exponential map.

    Satisfies exp((w + d)^) ~ exp((J_l(w) d)^) exp(w^) to first order, which
    is what turns exp-map coordinate perturbations into world-frame angular
    velocities.
    """
    w = np.asarray(w, dtype=float)
    theta = np.sqrt(w @ w)
    W = skew(w)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    t2 = theta * theta
    a = (1.0 - np.cos(theta)) / t2
    b = (theta - np.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * W + b * (W @ W)


def rotvec_about_axis(axis, angle):
    axis = np.asarray(axis, dtype=float)
    return quat_from_rotvec(axis * angle)


def rotvec_to_mat(w):
    """Rodrigues formula, Taylor-safe near zero."""
    w = np.asarray(w, dtype=float)
    t2 = w @ w
    W = skew(w)
    if t2 < 1e-16:
        return np.eye(3) + W + 0.5 * (W @ W)
    theta = np.sqrt(t2)
    return np.eye(3) + (np.sin(theta) / theta) * W + ((1.0 - np.cos(theta)) / t2) * (W @ W)


def mat_to_quat(R):
    """Rotation matrix -> unit quaternion (w, x, y, z), Shepperd's method."""
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    q = np.empty(4)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q[0] = 0.25 * s
        q[1] = (R[2, 1] - R[1, 2]) / s
        q[2] = (R[0, 2] - R[2, 0]) / s
        q[3] = (R[1, 0] - R[0, 1]) / s
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q[0] = (R[2, 1] - R[1, 2]) / s
        q[1] = 0.25 * s
        q[2] = (R[0, 1] + R[1, 0]) / s
        q[3] = (R[0, 2] + R[2, 0]) / s
    elif R[1, 1] >= R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q[0] = (R[0, 2] - R[2, 0]) / s
        q[1] = (R[0, 1] + R[1, 0]) / s
        q[2] = 0.25 * s
        q[3] = (R[1, 2] + R[2, 1]) / s
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q[0] = (R[1, 0] - R[0, 1]) / s
        q[1] = (R[0, 2] + R[2, 0]) / s
        q[2] = (R[1, 2] + R[2, 1]) / s
        q[3] = 0.25 * s
    return quat_normalize(q)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class JointSpec:
    """One joint: its kind, motion axis, and fixed frame offset in the parent.

    ``axis`` is only meaningful for hinge1/slide1 and must be unit norm.
    ``offset_translation`` (meters) and ``offset_quaternion`` (unit, scalar
    first) place the joint frame in the parent body frame.
    """

    kind: str
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    offset_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    offset_quaternion: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))

    def __post_init__(self):
        if self.kind not in JOINT_DOF:
            raise ValueError(f"unknown joint kind {self.kind!r}")
        object.__setattr__(self, "axis", np.asarray(self.axis, dtype=float))
        object.__setattr__(self, "offset_translation", np.asarray(self.offset_translation, dtype=float))
        object.__setattr__(self, "offset_quaternion", np.asarray(self.offset_quaternion, dtype=float))

    @property
    def dof(self) -> int:
        return JOINT_DOF[self.kind]


@dataclass(frozen=True)
class BodyNode:
    """One rigid body: parent link, joint, anchor offset and scale slot."""

    id: int
    parent: int
    joint: JointSpec
    anchor: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale_slot: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "anchor", np.asarray(self.anchor, dtype=float))


@dataclass(frozen=True)
class MarkerAttachment:
    """A marker rigidly attached to a body at a local offset (meters).

    ``weight`` is the square-root residual weight of this marker's three
    rows; zero removes the marker from the objective.
    """

    marker_id: str
    body: int
    local_offset: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "local_offset", np.asarray(self.local_offset, dtype=float))


@dataclass(frozen=True)
class KinematicModel:
    """Immutable rigid-body tree with scale slots and marker attachments.

    Derived index maps (q layout, children lists, marker rows) are computed
    once at construction; evaluation writes only local buffers, so a model
    can be shared freely across threads.
    """

    bodies: tuple[BodyNode, ...]
    markers: tuple[MarkerAttachment, ...]

    def __post_init__(self):
        object.__setattr__(self, "bodies", tuple(self.bodies))
        object.__setattr__(self, "markers", tuple(self.markers))
        report = validate_model(self)
        if report:
            raise ValueError("invalid model: " + "; ".join(report))
        q_start = []
        off = 0
        for b in self.bodies:
            q_start.append(off)
            off += b.joint.dof
        object.__setattr__(self, "_q_start", tuple(q_start))
        object.__setattr__(self, "n_q", off)
        slots = [b.scale_slot for b in self.bodies if b.scale_slot is not None]
        object.__setattr__(self, "n_s", len(slots))
        object.__setattr__(self, "n_y", self.n_q + self.n_s)
        object.__setattr__(self, "n_x", 3 * len(self.markers))
        children: list[list[int]] = [[] for _ in self.bodies]
        for b in self.bodies:
            if b.parent != ROOT_PARENT:
                children[b.parent].append(b.id)
        object.__setattr__(self, "_children", tuple(tuple(c) for c in children))
        # Marker groupings for batched evaluation: per-body marker rows and
        # offsets, and per-body subtree marker rows (markers moved by the
        # body's joint).
        on_body: list[list[int]] = [[] for _ in self.bodies]
        for k, m in enumerate(self.markers):
            on_body[m.body].append(k)
        object.__setattr__(self, "_marker_rows", tuple(np.array(r, dtype=int) for r in on_body))
        object.__setattr__(self, "_marker_offsets", tuple(
            np.array([self.markers[k].local_offset for k in rows]).reshape(len(rows), 3)
            for rows in on_body
        ))
        subtree: list[set[int]] = [set(r) for r in on_body]
        for b in reversed(self.bodies):
            if b.parent != ROOT_PARENT:
                subtree[b.parent] |= subtree[b.id]
        object.__setattr__(self, "_subtree_marker_rows", tuple(
            np.array(sorted(s), dtype=int) for s in subtree
        ))
        # Constant per-body rotation pieces for the evaluation hot path.
        object.__setattr__(self, "_R_off", tuple(
            quat_to_mat(quat_normalize(b.joint.offset_quaternion)) for b in self.bodies
        ))
        object.__setattr__(self, "_axis_skew", tuple(
            skew(b.joint.axis) if b.joint.kind in ("hinge1", "slide1") else None
            for b in self.bodies
        ))

    @property
    def n_markers(self) -> int:
        return len(self.markers)

    def q_slice(self, body_id: int) -> slice:
        start = self._q_start[body_id]
        return slice(start, start + self.bodies[body_id].joint.dof)

    def scale_index(self, body_id: int) -> int | None:
        slot = self.bodies[body_id].scale_slot
        return None if slot is None else self.n_q + slot

    def children(self, body_id: int) -> tuple[int, ...]:
        return self._children[body_id]

    def coord_kinds(self) -> list[str]:
        """Kind of every y coordinate: angular, linear or scale."""
        kinds: list[str] = []
        for b in self.bodies:
            if b.joint.kind == "free6":
                kinds += [KIND_LINEAR] * 3 + [KIND_ANGULAR] * 3
            elif b.joint.kind == "ball3":
                kinds += [KIND_ANGULAR] * 3
            elif b.joint.kind == "hinge1":
                kinds.append(KIND_ANGULAR)
            else:
                kinds.append(KIND_LINEAR)
        kinds += [KIND_SCALE] * self.n_s
        return kinds

    def scale_of(self, body_id: int, s: np.ndarray) -> float:
        slot = self.bodies[body_id].scale_slot
        return 1.0 if slot is None else float(s[slot])

    def split(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.n_y,):
            raise ValueError(f"state has shape {y.shape}, expected ({self.n_y},)")
        return y[: self.n_q], y[self.n_q:]

    def default_state(self) -> np.ndarray:
        """q = 0, s = 1."""
        y = np.zeros(self.n_y)
        y[self.n_q:] = 1.0
        return y


@dataclass(frozen=True)
class FullState:
    """Pose coordinates q plus morphology scales s."""

    q: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "s", np.asarray(self.s, dtype=float))

    @classmethod
    def from_vector(cls, model: KinematicModel, y: np.ndarray) -> "FullState":
        q, s = model.split(y)
        return cls(q=q.copy(), s=s.copy())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.s])


@dataclass(frozen=True)
class BodyFrames:
    """World pose of every body: positions (n_b, 3) and unit quaternions (n_b, 4)."""

    positions: np.ndarray
    quaternions: np.ndarray


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_model(model) -> list[str]:
    """Structural checks; returns a list of violations (empty means ok)."""
    bad: list[str] = []
    bodies = model.bodies
    n = len(bodies)
    roots = 0
    for i, b in enumerate(bodies):
        if b.id != i:
            bad.append(f"body {i}: id {b.id} does not match list position")
        if b.parent == ROOT_PARENT:
            roots += 1
        elif not (0 <= b.parent < b.id):
            bad.append(f"body {b.id}: cycle/order violation (parent {b.parent})")
        if b.joint.kind in ("hinge1", "slide1"):
            if abs(np.linalg.norm(b.joint.axis) - 1.0) > 1e-12:
                bad.append(f"body {b.id}: non-unit joint axis")
        if abs(np.linalg.norm(b.joint.offset_quaternion) - 1.0) > 1e-12:
            bad.append(f"body {b.id}: non-unit offset quaternion")
    if roots != 1:
        bad.append(f"expected exactly one root, found {roots}")
    slots = sorted(b.scale_slot for b in bodies if b.scale_slot is not None)
    if len(set(slots)) != len(slots):
        bad.append("duplicate scale slot")
    elif slots and slots != list(range(len(slots))):
        bad.append(f"scale slots not contiguous 0..{len(slots) - 1}: {slots}")
    if len(model.markers) < 1:
        bad.append("model has no markers")
    for m in model.markers:
        if not (0 <= m.body < n):
            bad.append(f"marker {m.marker_id}: orphan (body {m.body})")
        if m.weight < 0:
            bad.append(f"marker {m.marker_id}: negative weight")
    return bad


# ---------------------------------------------------------------------------
# Forward kinematics
# ---------------------------------------------------------------------------

class _FKCache:
    """Per-body world frames plus the joint-base frames the Jacobian needs."""

    __slots__ = ("p_body", "R_body", "p_base", "R_base")

    def __init__(self, n_b: int):
        self.p_body = np.zeros((n_b, 3))
        self.R_body = np.zeros((n_b, 3, 3))
        self.p_base = np.zeros((n_b, 3))
        self.R_base = np.zeros((n_b, 3, 3))


_EYE3 = np.eye(3)


def _fk(model: KinematicModel, y: np.ndarray) -> _FKCache:
    q, s = model.split(y)
    cache = _FKCache(len(model.bodies))
    for b in model.bodies:
        i = b.id
        if b.parent == ROOT_PARENT:
            p_par, R_par, s_par = np.zeros(3), _EYE3, 1.0
        else:
            p_par = cache.p_body[b.parent]
            R_par = cache.R_body[b.parent]
            s_par = model.scale_of(b.parent, s)

        p_base = p_par + R_par @ (s_par * b.anchor + b.joint.offset_translation)
        R_base = R_par @ model._R_off[i]

        qj = q[model.q_slice(i)]
        kind = b.joint.kind
        if kind == "hinge1":
            K = model._axis_skew[i]
            th = qj[0]
            R_joint = _EYE3 + np.sin(th) * K + (1.0 - np.cos(th)) * (K @ K)
            p_body = p_base
            R_body = R_base @ R_joint
        elif kind == "slide1":
            p_body = p_base + R_base @ (qj[0] * b.joint.axis)
            R_body = R_base
        elif kind == "ball3":
            p_body = p_base
            R_body = R_base @ rotvec_to_mat(qj)
        else:  # free6
            p_body = p_base + R_base @ qj[:3]
            R_body = R_base @ rotvec_to_mat(qj[3:])

        cache.p_base[i] = p_base
        cache.R_base[i] = R_base
        cache.p_body[i] = p_body
        cache.R_body[i] = R_body
    return cache


def forward_kinematics(model: KinematicModel, y: np.ndarray) -> BodyFrames:
    """World position and orientation of every body for state y."""
    cache = _fk(model, np.asarray(y, dtype=float))
    quats = np.stack([mat_to_quat(cache.R_body[i]) for i in range(len(model.bodies))])
    return BodyFrames(positions=cache.p_body.copy(), quaternions=quats)


def _marker_world(model: KinematicModel, cache: _FKCache, s: np.ndarray) -> np.ndarray:
    """(n_markers, 3) world marker positions, batched per body."""
    X = np.zeros((model.n_markers, 3))
    for b in model.bodies:
        rows = model._marker_rows[b.id]
        if rows.size == 0:
            continue
        sb = model.scale_of(b.id, s)
        X[rows] = cache.p_body[b.id] + (sb * model._marker_offsets[b.id]) @ cache.R_body[b.id].T
    return X


def predict_markers(model: KinematicModel, y: np.ndarray) -> np.ndarray:
    """Stacked world positions of all markers (length 3 * n_markers)."""
    y = np.asarray(y, dtype=float)
    _, s = model.split(y)
    cache = _fk(model, y)
    return _marker_world(model, cache, s).reshape(-1)


def predict_and_jacobian(model: KinematicModel, y: np.ndarray):
    """(x_hat, J_y) sharing one kinematics pass; the solver's hot path."""
    y = np.asarray(y, dtype=float)
    q, s = model.split(y)
    cache = _fk(model, y)
    X = _marker_world(model, cache, s)
    J = np.zeros((model.n_markers, 3, model.n_y))

    for b in model.bodies:
        c = b.id
        rows = model._subtree_marker_rows[c]
        cols = model.q_slice(c)
        kind = b.joint.kind
        if rows.size:
            if kind == "hinge1":
                w = cache.R_base[c] @ b.joint.axis
                # cross(w, r) row-wise as one matmul
                J[rows, :, cols.start] = (X[rows] - cache.p_base[c]) @ skew(w).T
            elif kind == "slide1":
                J[rows, :, cols.start] = cache.R_base[c] @ b.joint.axis
            else:
                qj = q[cols]
                wvec = qj[3:] if kind == "free6" else qj
                omega = cache.R_base[c] @ so3_left_jacobian(wvec)
                rot0 = cols.start + 3 if kind == "free6" else cols.start
                r = X[rows] - cache.p_body[c]
                if kind == "free6":
                    J[rows, :, cols.start: cols.start + 3] = cache.R_base[c][None, :, :]
                for j in range(3):
                    J[rows, :, rot0 + j] = r @ skew(omega[:, j]).T

        si = model.scale_index(c)
        if si is not None:
            own = model._marker_rows[c]
            if own.size:
                J[own, :, si] += model._marker_offsets[c] @ cache.R_body[c].T
            for child in model.children(c):
                crows = model._subtree_marker_rows[child]
                if crows.size:
                    J[crows, :, si] += cache.R_body[c] @ model.bodies[child].anchor
    return X.reshape(-1), J.reshape(model.n_x, model.n_y)


def marker_jacobian(model: KinematicModel, y: np.ndarray) -> np.ndarray:
    """Analytic d(marker positions)/d(y), shape (n_x, n_y).

    Pose columns follow rigid-body rules: a hinge column is w x (x_k - p_j)
    with w the world joint axis and p_j the joint origin; a slide column is
    the world axis; ball/free rotational columns map exp-map perturbations
    through the SO(3) left Jacobian before taking the cross product. Scale
    columns sum the direct local-offset term with the anchor term of the
    ancestor chain passing through the scaled body.
    """
    return predict_and_jacobian(model, y)[1]
