"""Shared helpers: random model generation and finite-difference oracles.

The oracles here are intentionally independent of the package internals:
rotations go through scipy, and marker positions are re-derived by naive
per-marker transform accumulation from the root.
"""

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from skelfit.kinmodel import (
    ROOT_PARENT,
    BodyNode,
    JointSpec,
    KinematicModel,
    MarkerAttachment,
    predict_markers,
)

JOINT_KINDS = ["free6", "ball3", "hinge1", "slide1"]


def random_unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def random_model(rng, n_bodies=None, markers_per_body=2, all_scaled=True):
    """A random tree exercising every joint kind; root is free6."""
    if n_bodies is None:
        n_bodies = rng.integers(2, 6)
    bodies = []
    slot = 0
    for i in range(n_bodies):
        if i == 0:
            parent = ROOT_PARENT
            joint = JointSpec("free6")
            anchor = np.zeros(3)
        else:
            parent = int(rng.integers(0, i))
            kind = JOINT_KINDS[rng.integers(0, 4)] if i > 1 else JOINT_KINDS[rng.integers(1, 4)]
            quat = Rotation.random(random_state=np.random.RandomState(int(rng.integers(0, 2**31)))).as_quat()
            joint = JointSpec(
                kind,
                axis=random_unit(rng),
                offset_translation=rng.normal(scale=0.05, size=3),
                offset_quaternion=np.array([quat[3], quat[0], quat[1], quat[2]]),
            )
            anchor = rng.normal(scale=0.3, size=3)
        scale_slot = slot if all_scaled or rng.random() < 0.5 else None
        if scale_slot is not None:
            slot += 1
        bodies.append(BodyNode(id=i, parent=parent, joint=joint, anchor=anchor, scale_slot=scale_slot))
    markers = []
    k = 0
    for i in range(n_bodies):
        for _ in range(markers_per_body):
            markers.append(MarkerAttachment(f"m{k}", body=i, local_offset=rng.normal(scale=0.15, size=3)))
            k += 1
    return KinematicModel(bodies=tuple(bodies), markers=tuple(markers))


def random_state(rng, model, angle_scale=0.6):
    y = model.default_state()
    kinds = model.coord_kinds()
    for i, kind in enumerate(kinds):
        if kind == "ang":
            y[i] = rng.uniform(-angle_scale, angle_scale)
        elif kind == "lin":
            y[i] = rng.uniform(-0.3, 0.3)
        else:
            y[i] = rng.uniform(0.7, 1.4)
    return y


def fk_oracle(model, y):
    """Marker positions by naive recursive transform accumulation via scipy."""
    q, s = model.split(y)
    frames = {}
    for b in model.bodies:
        if b.parent == ROOT_PARENT:
            R_par, p_par, s_par = np.eye(3), np.zeros(3), 1.0
        else:
            R_par, p_par = frames[b.parent]
            s_par = model.scale_of(b.parent, s)
        off_q = b.joint.offset_quaternion
        R_off = Rotation.from_quat([off_q[1], off_q[2], off_q[3], off_q[0]]).as_matrix()
        p_base = p_par + R_par @ (s_par * b.anchor + b.joint.offset_translation)
        R_base = R_par @ R_off
        qj = q[model.q_slice(b.id)]
        if b.joint.kind == "free6":
            p = p_base + R_base @ qj[:3]
            R = R_base @ Rotation.from_rotvec(qj[3:]).as_matrix()
        elif b.joint.kind == "ball3":
            p = p_base
            R = R_base @ Rotation.from_rotvec(qj).as_matrix()
        elif b.joint.kind == "hinge1":
            p = p_base
            R = R_base @ Rotation.from_rotvec(b.joint.axis * qj[0]).as_matrix()
        else:
            p = p_base + R_base @ (qj[0] * b.joint.axis)
            R = R_base
        frames[b.id] = (R, p)
    out = np.zeros(model.n_x)
    for k, m in enumerate(model.markers):
        R, p = frames[m.body]
        out[3 * k: 3 * k + 3] = p + R @ (model.scale_of(m.body, s) * m.local_offset)
    return out


def fd_jacobian(model, y, h=1e-6):
    """Central finite differences of predict_markers."""
    J = np.zeros((model.n_x, model.n_y))
    for j in range(model.n_y):
        hi = y.copy()
        lo = y.copy()
        hi[j] += h
        lo[j] -= h
        J[:, j] = (predict_markers(model, hi) - predict_markers(model, lo)) / (2 * h)
    return J


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
