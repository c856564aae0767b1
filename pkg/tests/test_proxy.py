import numpy as np
import pytest

from skelfit.proxy import Affine, ChainBasis, Composite, Identity, Selection, make_spine_maps


def random_composite(rng, n_y=9):
    perm = rng.permutation(n_y)
    idx_a, idx_b, idx_c = perm[:3], perm[3:5], perm[5:]
    blocks = (
        (idx_a, Identity(3)),
        (idx_b, Affine(rng.normal(size=(2, 2)), rng.normal(size=2))),
        (idx_c, ChainBasis(np.arange(4), rng.normal(size=(4, 2)), rng.normal(size=4))),
    )
    return Composite(blocks, n_y)


class TestApply:
    def test_identity(self):
        assert np.array_equal(Identity(2).apply([1.0, 2.0]), [1.0, 2.0])

    def test_selection_freezes_scale(self):
        m = Selection(active_indices=[0], frozen_values=[0.0, 1.0])
        assert np.array_equal(m.apply([0.3]), [0.3, 1.0])

    def test_chain_basis_uniform_bend(self):
        m = ChainBasis(np.arange(4), np.ones((4, 1)), np.zeros(4))
        assert np.array_equal(m.apply([0.2]), [0.2] * 4)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            Identity(2).apply([1.0, 2.0, 3.0])


class TestJacobian:
    def test_identity(self):
        assert np.array_equal(Identity(3).jacobian(), np.eye(3))

    def test_affine_returns_a(self, rng):
        A = rng.normal(size=(5, 2))
        assert np.array_equal(Affine(A, np.zeros(5)).jacobian(), A)

    def test_composite_matches_finite_differences(self, rng):
        m = random_composite(rng)
        p0 = rng.normal(size=m.n_p)
        J = m.jacobian(p0)
        h = 1e-7
        for j in range(m.n_p):
            hi, lo = p0.copy(), p0.copy()
            hi[j] += h
            lo[j] -= h
            col = (m.apply(hi) - m.apply(lo)) / (2 * h)
            assert np.max(np.abs(col - J[:, j])) < 1e-8 * (1 + np.max(np.abs(J)))

    def test_jacobian_constant_in_p(self, rng):
        m = random_composite(rng)
        J1 = m.jacobian(rng.normal(size=m.n_p))
        J2 = m.jacobian(rng.normal(size=m.n_p))
        assert np.array_equal(J1, J2)


class TestAffineConsistency:
    @pytest.mark.parametrize("seed", range(5))
    def test_apply_matches_jacobian_increment(self, seed):
        rng = np.random.default_rng(seed)
        m = random_composite(rng)
        p = rng.normal(size=m.n_p)
        dp = rng.normal(size=m.n_p)
        lhs = m.apply(p + dp) - m.apply(p)
        assert np.allclose(lhs, m.jacobian() @ dp, atol=1e-12)

    def test_selection_round_trip(self, rng):
        m = Selection(active_indices=[4, 1, 6], frozen_values=np.arange(8.0))
        p = rng.normal(size=3)
        assert np.array_equal(m.apply(p)[m.active_indices], p)

    def test_composite_coverage_enforced(self):
        with pytest.raises(ValueError, match="exactly once"):
            Composite((([0, 1], Identity(2)), ([1, 2], Identity(2))), 3)


class TestRebase:
    def test_selection_rebase(self):
        m = Selection(active_indices=[0], frozen_values=[0.0, 0.0])
        m2 = m.rebased(np.array([5.0, 7.0]))
        assert np.array_equal(m2.apply([1.0]), [1.0, 7.0])

    def test_project_apply_consistency(self, rng):
        m = random_composite(rng)
        p = rng.normal(size=m.n_p)
        y = m.apply(p)
        # project is a least-squares preimage; for consistent y it recovers
        # a p with the same image
        assert np.allclose(m.apply(m.project(y)), y, atol=1e-9)


class TestSpineMaps:
    def test_poly_degree_one_basis(self):
        m = make_spine_maps(np.arange(8), "poly", degree=1)
        assert m.n_p == 2
        J = m.jacobian()
        assert np.allclose(J[:, 0], np.ones(8))
        assert np.allclose(J[:, 1], np.arange(8) / 7.0)

    def test_nopoly_identity(self):
        m = make_spine_maps(np.arange(8), "nopoly")
        assert m.n_p == 8
        assert np.array_equal(m.jacobian(), np.eye(8))

    def test_classical_three_segments(self):
        m = make_spine_maps(np.arange(8), "classical", segment_count=3)
        assert m.n_p == 3
        y = m.apply([0.1, 0.2, 0.3])
        assert np.count_nonzero(y) == 3
        # frozen intra-group DoFs stay at zero
        assert np.count_nonzero(y == 0.0) == 5

    def test_errors(self):
        with pytest.raises(ValueError, match="empty chain"):
            make_spine_maps([], "poly")
        with pytest.raises(ValueError, match="exceeds chain length"):
            make_spine_maps(np.arange(3), "poly", degree=3)
