import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from skelfit.kinmodel import (
    ROOT_PARENT,
    BodyNode,
    JointSpec,
    KinematicModel,
    MarkerAttachment,
    forward_kinematics,
    marker_jacobian,
    predict_markers,
    validate_model,
)
from conftest import fd_jacobian, fk_oracle, random_model, random_state


def hinge_root_model(axis=(0, 0, 1), offset=(1.0, 0.0, 0.0), scaled=True):
    return KinematicModel(
        bodies=(BodyNode(0, ROOT_PARENT, JointSpec("hinge1", axis=np.asarray(axis, float)),
                         scale_slot=0 if scaled else None),),
        markers=(MarkerAttachment("m0", 0, np.asarray(offset, float)),),
    )


class TestValidation:
    def test_valid_chain_ok(self):
        model = KinematicModel(
            bodies=(
                BodyNode(0, ROOT_PARENT, JointSpec("free6"), scale_slot=0),
                BodyNode(1, 0, JointSpec("hinge1"), anchor=[0.3, 0, 0], scale_slot=1),
                BodyNode(2, 1, JointSpec("ball3"), anchor=[0.3, 0, 0]),
            ),
            markers=(MarkerAttachment("m0", 2, [0.1, 0, 0]),),
        )
        assert validate_model(model) == []

    def test_self_parent_rejected(self):
        with pytest.raises(ValueError, match="cycle/order"):
            KinematicModel(
                bodies=(
                    BodyNode(0, ROOT_PARENT, JointSpec("free6")),
                    BodyNode(1, 1, JointSpec("hinge1")),
                ),
                markers=(MarkerAttachment("m0", 0, [0.1, 0, 0]),),
            )

    def test_duplicate_scale_slot_rejected(self):
        with pytest.raises(ValueError, match="duplicate scale slot"):
            KinematicModel(
                bodies=(
                    BodyNode(0, ROOT_PARENT, JointSpec("free6"), scale_slot=0),
                    BodyNode(1, 0, JointSpec("hinge1"), scale_slot=0),
                ),
                markers=(MarkerAttachment("m0", 0, [0.1, 0, 0]),),
            )

    def test_non_unit_axis_rejected(self):
        with pytest.raises(ValueError, match="non-unit joint axis"):
            KinematicModel(
                bodies=(BodyNode(0, ROOT_PARENT, JointSpec("hinge1", axis=[0, 0, 2.0])),),
                markers=(MarkerAttachment("m0", 0, [0.1, 0, 0]),),
            )

    def test_orphan_marker_rejected(self):
        with pytest.raises(ValueError, match="orphan"):
            KinematicModel(
                bodies=(BodyNode(0, ROOT_PARENT, JointSpec("free6")),),
                markers=(MarkerAttachment("m0", 3, [0.1, 0, 0]),),
            )


class TestForwardKinematics:
    def test_identity_pose(self):
        model = hinge_root_model()
        x = predict_markers(model, np.array([0.0, 1.0]))
        assert np.allclose(x, [1.0, 0.0, 0.0])

    def test_quarter_turn(self):
        model = hinge_root_model()
        x = predict_markers(model, np.array([np.pi / 2, 1.0]))
        assert np.allclose(x, [0.0, 1.0, 0.0], atol=1e-12)

    def test_scale_on_local_offset(self):
        model = hinge_root_model()
        x = predict_markers(model, np.array([0.0, 2.0]))
        assert np.allclose(x, [2.0, 0.0, 0.0])

    def test_marker_vector_shape(self, rng):
        model = random_model(rng, n_bodies=3, markers_per_body=1)
        assert predict_markers(model, model.default_state()).shape == (model.n_x,)

    def test_zero_offset_marker_at_origin(self):
        model = KinematicModel(
            bodies=(BodyNode(0, ROOT_PARENT, JointSpec("free6")),),
            markers=(MarkerAttachment("m0", 0, [0.0, 0.0, 0.0]),),
        )
        assert np.allclose(predict_markers(model, model.default_state()), 0.0)

    def test_matches_recursive_oracle(self, rng):
        for _ in range(25):
            model = random_model(rng)
            y = random_state(rng, model)
            assert np.allclose(predict_markers(model, y), fk_oracle(model, y), atol=1e-12)

    def test_deterministic(self, rng):
        model = random_model(rng)
        y = random_state(rng, model)
        a = predict_markers(model, y)
        b = predict_markers(model, y)
        assert np.array_equal(a, b)

    def test_orientations_unit_norm(self, rng):
        model = random_model(rng)
        frames = forward_kinematics(model, random_state(rng, model))
        assert np.all(np.abs(np.linalg.norm(frames.quaternions, axis=1) - 1.0) < 1e-10)

    def test_dimension_mismatch(self, rng):
        model = random_model(rng)
        with pytest.raises(ValueError, match="shape"):
            predict_markers(model, np.zeros(model.n_y + 1))


class TestMarkerJacobian:
    def test_hinge_column(self):
        model = hinge_root_model()
        J = marker_jacobian(model, np.array([0.0, 1.0]))
        assert np.allclose(J[:, 0], [0.0, 1.0, 0.0], atol=1e-12)

    def test_root_scale_column(self):
        model = hinge_root_model()
        J = marker_jacobian(model, np.array([0.0, 1.0]))
        assert np.allclose(J[:, 1], [1.0, 0.0, 0.0], atol=1e-12)

    def test_matches_finite_differences(self, rng):
        worst = 0.0
        for _ in range(100):
            model = random_model(rng)
            y = random_state(rng, model)
            J = marker_jacobian(model, y)
            Jfd = fd_jacobian(model, y)
            err = np.max(np.abs(J - Jfd)) / (1.0 + np.max(np.abs(J)))
            worst = max(worst, err)
        assert worst < 1e-6

    def test_linearization_slope_is_quadratic(self, rng):
        model = random_model(rng, n_bodies=4)
        y = random_state(rng, model)
        J = marker_jacobian(model, y)
        v = rng.normal(size=model.n_y)
        v /= np.linalg.norm(v)
        x0 = predict_markers(model, y)
        eps = np.array([1e-2, 1e-3, 1e-4, 1e-5])
        errs = np.array([
            np.linalg.norm(predict_markers(model, y + e * v) - x0 - e * (J @ v)) for e in eps
        ])
        assert np.all(errs > 1e-15), "perturbation direction degenerate for slope fit"
        slope = np.polyfit(np.log(eps), np.log(errs), 1)[0]
        assert 1.7 < slope < 2.3

    def test_scale_locality(self, rng):
        # Perturbing one body's scale moves only markers on that body and
        # its descendants; all other rows stay bit-identical.
        for _ in range(10):
            model = random_model(rng, n_bodies=5, markers_per_body=2)
            y = random_state(rng, model)
            x0 = predict_markers(model, y)
            descendants = {i: {i} for i in range(len(model.bodies))}
            for b in model.bodies:
                c = b.parent
                while c != ROOT_PARENT:
                    descendants[c].add(b.id)
                    c = model.bodies[c].parent
            for b in model.bodies:
                si = model.scale_index(b.id)
                if si is None:
                    continue
                y2 = y.copy()
                y2[si] += 0.1
                x1 = predict_markers(model, y2)
                for k, m in enumerate(model.markers):
                    rows = slice(3 * k, 3 * k + 3)
                    if m.body in descendants[b.id]:
                        continue
                    assert np.array_equal(x0[rows], x1[rows])

    def test_rigid_invariance_of_root(self, rng):
        # A rigid transform applied through the root free joint moves every
        # marker by the same rigid transform.
        model = random_model(rng, n_bodies=4)
        y = random_state(rng, model)
        x0 = predict_markers(model, y).reshape(-1, 3)

        Rg = Rotation.from_rotvec([0.3, -0.2, 0.5])
        tg = np.array([0.4, -0.1, 0.25])
        y2 = y.copy()
        root = model.q_slice(0)
        R_root = Rotation.from_rotvec(y[root.start + 3: root.start + 6])
        y2[root.start: root.start + 3] = Rg.apply(y[root.start: root.start + 3]) + tg
        y2[root.start + 3: root.start + 6] = (Rg * R_root).as_rotvec()
        x1 = predict_markers(model, y2).reshape(-1, 3)
        assert np.allclose(x1, Rg.apply(x0) + tg, atol=1e-10)
