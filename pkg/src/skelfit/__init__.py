"""skelfit: joint pose + per-segment scale estimation from 3D markers.

Per frame, a box-constrained trust-region QP is solved in a reduced proxy
subspace; an optional Gauss-Seidel pre-solve warm-starts difficult frames,
and a stage-wise baseline plus synthetic-data oracle support leakage audits.
"""

from skelfit.kinmodel import (
    BodyFrames,
    BodyNode,
    FullState,
    JointSpec,
    KinematicModel,
    MarkerAttachment,
    forward_kinematics,
    marker_jacobian,
    predict_markers,
    validate_model,
)

__version__ = "0.1.0"

__all__ = [
    "BodyFrames",
    "BodyNode",
    "FullState",
    "JointSpec",
    "KinematicModel",
    "MarkerAttachment",
    "forward_kinematics",
    "marker_jacobian",
    "predict_markers",
    "validate_model",
    "__version__",
]
