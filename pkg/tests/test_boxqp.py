import numpy as np
import pytest

from skelfit.boxqp import (
    QuadraticModel,
    WeightSet,
    assemble,
    predicted_decrease,
    solve_box_qp,
    solve_box_qp_enum,
)


def random_instance(rng, n=None, bound_scale=1.0):
    n = n or int(rng.integers(1, 7))
    A = rng.normal(size=(n, n))
    H = A @ A.T + (0.1 + rng.random()) * np.eye(n)
    g = rng.normal(size=n) * 2.0
    lb = -bound_scale * rng.uniform(0.05, 1.5, size=n)
    ub = bound_scale * rng.uniform(0.05, 1.5, size=n)
    return QuadraticModel(H=H, g=g, lb=lb, ub=ub)


def make_weights(n_x, n_y, n_p, wm=1.0, wt=0.0, wd=1e-3):
    return WeightSet(
        w_marker=np.full(n_x, wm),
        w_tracking=np.full(n_y, wt),
        w_damp=np.full(n_p, wd),
    )


class TestAssemble:
    def test_zero_residuals_give_zero_gradient(self, rng):
        J_m = rng.normal(size=(6, 3))
        J_phi = rng.normal(size=(4, 3))
        qm = assemble(J_m, J_phi, np.zeros(6), np.zeros(4), make_weights(6, 4, 3))
        assert np.allclose(qm.g, 0.0)

    def test_identity_algebra(self):
        lam = 0.25
        r = np.array([1.0, -2.0, 3.0])
        w = WeightSet(np.ones(3), np.zeros(3), np.full(3, lam))
        qm = assemble(np.eye(3), np.eye(3), r, np.zeros(3), w)
        assert np.allclose(qm.H, (1 + lam) * np.eye(3))
        assert np.allclose(qm.g, r)

    def test_matches_triple_product(self, rng):
        n_x, n_y, n_p = 8, 5, 4
        J_m = rng.normal(size=(n_x, n_p))
        J_phi = rng.normal(size=(n_y, n_p))
        r_m = rng.normal(size=n_x)
        e_t = rng.normal(size=n_y)
        w = WeightSet(rng.uniform(0.1, 2, n_x), rng.uniform(0, 1, n_y), rng.uniform(0.01, 1, n_p))
        qm = assemble(J_m, J_phi, r_m, e_t, w)
        Wm2 = np.diag(w.w_marker**2)
        Wt2 = np.diag(w.w_tracking**2)
        H_ref = J_m.T @ Wm2 @ J_m + J_phi.T @ Wt2 @ J_phi + np.diag(w.w_damp)
        g_ref = J_m.T @ Wm2 @ r_m + J_phi.T @ Wt2 @ e_t
        assert np.max(np.abs(qm.H - H_ref)) < 1e-12 * (1 + np.max(np.abs(H_ref)))
        assert np.max(np.abs(qm.g - g_ref)) < 1e-12 * (1 + np.max(np.abs(g_ref)))

    def test_rejects_nonfinite(self, rng):
        with pytest.raises(ValueError, match="non-finite"):
            assemble(np.full((3, 2), np.nan), np.eye(2), np.zeros(3), np.zeros(2), make_weights(3, 2, 2))


class TestSolve:
    def test_interior_minimum(self):
        qm = QuadraticModel(H=[[2.0]], g=[-2.0], lb=[-10.0], ub=[10.0])
        assert np.allclose(solve_box_qp(qm), [1.0])

    def test_clamped_minimum(self):
        qm = QuadraticModel(H=[[2.0]], g=[-4.0], lb=[-1.0], ub=[1.0])
        assert np.allclose(solve_box_qp(qm), [1.0])

    def test_matches_enumeration(self, rng):
        for _ in range(400):
            qm = random_instance(rng)
            x = solve_box_qp(qm)
            x_ref = solve_box_qp_enum(qm)
            assert np.max(np.abs(x - x_ref)) < 1e-8
            assert abs(qm.objective(x) - qm.objective(x_ref)) < 1e-8

    def test_kkt_conditions(self, rng):
        for _ in range(50):
            qm = random_instance(rng)
            x = solve_box_qp(qm)
            grad = qm.H @ x + qm.g
            for i in range(qm.n):
                if x[i] <= qm.lb[i] + 1e-12:
                    assert grad[i] > -1e-8
                elif x[i] >= qm.ub[i] - 1e-12:
                    assert grad[i] < 1e-8
                else:
                    assert abs(grad[i]) < 1e-8 * (1 + np.linalg.norm(qm.g))

    def test_scaling_covariance(self, rng):
        qm = random_instance(rng, n=4)
        x1 = solve_box_qp(qm)
        qm2 = QuadraticModel(H=7.5 * qm.H, g=7.5 * qm.g, lb=qm.lb, ub=qm.ub)
        x2 = solve_box_qp(qm2)
        assert np.max(np.abs(x1 - x2)) < 1e-10

    def test_bounds_must_contain_zero(self):
        with pytest.raises(ValueError, match="zero step"):
            QuadraticModel(H=[[1.0]], g=[0.0], lb=[0.5], ub=[1.0])


class TestPredictedDecrease:
    def test_zero_step(self, rng):
        qm = random_instance(rng, n=3)
        assert predicted_decrease(qm, np.zeros(3)) == 0.0

    def test_direct_arithmetic(self):
        qm = QuadraticModel(H=[[2.0]], g=[-2.0], lb=[-10.0], ub=[10.0])
        assert predicted_decrease(qm, np.array([1.0])) == pytest.approx(1.0)

    def test_equals_model_difference(self, rng):
        # Recompute m(0) - m(dp) from the full quadratic-model definition.
        n_x, n_y, n_p = 7, 5, 3
        J_m = rng.normal(size=(n_x, n_p))
        J_phi = rng.normal(size=(n_y, n_p))
        r_m = rng.normal(size=n_x)
        e_t = rng.normal(size=n_y)
        w = WeightSet(rng.uniform(0.1, 2, n_x), rng.uniform(0, 1, n_y), rng.uniform(0.01, 1, n_p))
        qm = assemble(J_m, J_phi, r_m, e_t, w)
        dp = rng.normal(size=n_p) * 0.3

        def m(d):
            return (
                0.5 * np.sum((w.w_marker * (J_m @ d + r_m)) ** 2)
                + 0.5 * np.sum((w.w_tracking * (J_phi @ d + e_t)) ** 2)
                + 0.5 * np.sum(w.w_damp * d**2)
            )

        assert predicted_decrease(qm, dp) == pytest.approx(m(np.zeros(n_p)) - m(dp), abs=1e-12)

    def test_nonnegative_at_optimum(self, rng):
        for _ in range(50):
            qm = random_instance(rng)
            dp = solve_box_qp(qm)
            assert predicted_decrease(qm, dp) >= -1e-12
