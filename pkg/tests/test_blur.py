import numpy as np
import pytest

from dbdl.blur import (AdamState, adam_step, bme_gr, bme_sr,
                       build_basis_matrices, build_blur_matrix,
                       project_to_toeplitz, realize_theta, sr_objective_grad,
                       structure_residual, trend_nonincreasing)
from dbdl.dictionary import Dictionary
from dbdl.imaging import Image, PatchSet, narrow_convolve
from dbdl.sparse import SparseCodes

from conftest import brute_force_narrow_convolve


def dense_basis(basis, i):
    """Materialize selector matrix M_i from its per-row column indices."""
    M = np.zeros((basis.n_rows, basis.n_cols))
    M[np.arange(basis.n_rows), basis.cols[i]] = 1.0
    return M


def random_sparse_codes(rng, n_atoms, n, density=0.25):
    C = rng.standard_normal((n_atoms, n))
    C *= rng.random((n_atoms, n)) < density
    return C


class TestBuildBlurMatrix:
    def test_dims_k2_p3(self):
        B = build_blur_matrix(np.full((2, 2), 0.25), 3)
        assert B.dense.shape == (4, 9)

    def test_k1_identity(self):
        B = build_blur_matrix(np.array([[1.0]]), 5)
        np.testing.assert_array_equal(B.dense, np.eye(25))

    def test_matches_convolution_oracle(self):
        rng = np.random.default_rng(0)
        kern = rng.standard_normal((3, 3))
        B = build_blur_matrix(kern, 5)
        for _ in range(100):
            x = rng.random((5, 5))
            lhs = B.dense @ x.ravel()
            rhs = brute_force_narrow_convolve(x, kern).ravel()
            assert np.abs(lhs - rhs).max() < 1e-12

    def test_kernel_larger_than_patch(self):
        with pytest.raises(ValueError):
            build_blur_matrix(np.ones((4, 4)), 3)

    def test_row_support_counts(self):
        kern = np.arange(1.0, 10.0).reshape(3, 3)
        B = build_blur_matrix(kern, 6)
        assert np.all(np.count_nonzero(B.dense, axis=1) == 9)


class TestBasisMatrices:
    def test_k1_single_identity(self):
        basis = build_basis_matrices(1, 4)
        assert len(basis.cols) == 1
        np.testing.assert_array_equal(dense_basis(basis, 0), np.eye(16))

    def test_k2_p3_hand_enumerated(self):
        # output pixels (i,j) in {0,1}^2 map to input column (i+u)*3 + (j+v)
        basis = build_basis_matrices(2, 3)
        expected = {
            0: [0, 1, 3, 4],   # (u,v) = (0,0)
            1: [1, 2, 4, 5],   # (0,1)
            2: [3, 4, 6, 7],   # (1,0)
            3: [4, 5, 7, 8],   # (1,1)
        }
        assert len(basis.cols) == 4
        for i, cols in expected.items():
            np.testing.assert_array_equal(basis.cols[i], cols)
            M = dense_basis(basis, i)
            assert np.all(M.sum(axis=1) == 1.0)

    def test_disjoint_supports_and_row_counts(self):
        basis = build_basis_matrices(3, 6)
        total = np.zeros((basis.n_rows, basis.n_cols))
        for i in range(9):
            M = dense_basis(basis, i)
            assert np.all(M.sum(axis=1) == 1.0)
            assert np.max(total * M) == 0.0    # pairwise disjoint supports
            total += M
        assert np.all(total.sum(axis=1) == 9.0)

    def test_linear_combination_reproduces_builder(self):
        rng = np.random.default_rng(2)
        theta = rng.standard_normal(9)
        basis = build_basis_matrices(3, 5)
        np.testing.assert_array_equal(
            realize_theta(theta, basis),
            build_blur_matrix(theta.reshape(3, 3), 5).dense)

    def test_structural_consistency_with_convolution(self):
        rng = np.random.default_rng(3)
        basis = build_basis_matrices(3, 7)
        for _ in range(20):
            theta = rng.standard_normal(9)
            x = rng.random((7, 7))
            lhs = realize_theta(theta, basis) @ x.ravel()
            rhs = narrow_convolve(Image(x), theta.reshape(3, 3)).data.ravel()
            assert np.abs(lhs - rhs).max() < 1e-12


class TestProjection:
    def test_sr_matrix_is_in_family(self):
        rng = np.random.default_rng(4)
        basis = build_basis_matrices(3, 6)
        B = realize_theta(rng.standard_normal(9), basis)
        assert structure_residual(B, basis) < 1e-12

    def test_projected_gr_residual_nonnegative(self):
        rng = np.random.default_rng(5)
        basis = build_basis_matrices(2, 4)
        dense = rng.standard_normal((9, 16))
        res = structure_residual(dense, basis)
        assert res >= 0.0
        assert res > 1e-6  # a random dense matrix is not block Toeplitz

    def test_projection_recovers_exact_member(self):
        rng = np.random.default_rng(6)
        basis = build_basis_matrices(3, 5)
        theta = rng.standard_normal(9)
        np.testing.assert_allclose(
            project_to_toeplitz(realize_theta(theta, basis), basis),
            theta, atol=1e-14)


class TestAdam:
    def test_zero_gradient_zero_update(self):
        state = AdamState(lr=0.05)
        delta = adam_step(state, np.zeros(4))
        np.testing.assert_array_equal(delta, np.zeros(4))

    def test_first_step_hand_computed(self):
        # t=1: m_hat = g, v_hat = g^2, delta = -lr * g / (|g| + eps)
        g = np.array([0.3, -2.0, 0.0, 1e-4])
        lr, eps = 0.05, 1e-8
        state = AdamState(lr=lr, eps=eps)
        delta = adam_step(state, g)
        expected = -lr * g / (np.abs(g) + eps)
        np.testing.assert_allclose(delta, expected, atol=1e-15)

    def test_deterministic(self):
        g = np.array([0.5, -1.0])
        s1 = AdamState(lr=0.01)
        s2 = AdamState(lr=0.01)
        for _ in range(5):
            d1 = adam_step(s1, g)
            d2 = adam_step(s2, g)
            np.testing.assert_array_equal(d1, d2)
        assert s1.step_count == 5

    def test_nonfinite_gradient_rejected(self):
        with pytest.raises(ValueError):
            adam_step(AdamState(), np.array([1.0, np.nan]))


def make_sr_instance(rng, k=2, p=5, n_c=30, n=80, density=0.2):
    q = p - k + 1
    basis = build_basis_matrices(k, p)
    theta_true = rng.random(k * k) + 0.1
    atoms = rng.standard_normal((p * p, n_c))
    atoms /= np.linalg.norm(atoms, axis=0)
    C = random_sparse_codes(rng, n_c, n, density)
    Yl_cols = realize_theta(theta_true, basis) @ (atoms @ C)
    return (PatchSet(q, q, Yl_cols), Dictionary(atoms), SparseCodes(C),
            basis, theta_true)


class TestBmeSr:
    def test_exact_recovery(self):
        rng = np.random.default_rng(42)
        Yl, D, C, basis, theta_true = make_sr_instance(rng)
        adam = AdamState(lr=0.05)
        theta0 = np.full(4, 0.25)
        B = bme_sr(Yl, D, C, basis, theta0, adam, iters=500)
        rel = np.linalg.norm(B.theta - theta_true) / np.linalg.norm(theta_true)
        assert rel < 1e-3
        assert trend_nonincreasing(adam.objective_trace)
        # output lies in the Toeplitz family
        assert structure_residual(B.dense, basis) < 1e-12

    def test_zero_iters_noop(self):
        rng = np.random.default_rng(1)
        Yl, D, C, basis, _ = make_sr_instance(rng)
        theta0 = np.full(4, 0.25)
        B = bme_sr(Yl, D, C, basis, theta0, AdamState(), iters=0)
        np.testing.assert_array_equal(B.theta, theta0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        Yl, D, C, basis, _ = make_sr_instance(rng, k=2, p=4, n_c=12, n=20)
        theta = rng.standard_normal(4)
        P = D.atoms @ C.matrix

        def objective(th):
            model = np.zeros_like(Yl.columns)
            for i in range(th.size):
                model += th[i] * P[basis.cols[i], :]
            r = Yl.columns - model
            return float(np.sum(r * r))

        _, grad = sr_objective_grad(Yl.columns, P, theta, basis)
        h = 1e-6
        for i in range(4):
            e = np.zeros(4)
            e[i] = h
            fd = (objective(theta + e) - objective(theta - e)) / (2 * h)
            assert abs(grad[i] - fd) < 1e-5

    def test_dim_mismatch(self):
        rng = np.random.default_rng(8)
        Yl, D, C, basis, _ = make_sr_instance(rng)
        bad = SparseCodes(C.matrix[:, :-3])
        with pytest.raises(ValueError):
            bme_sr(Yl, D, bad, basis, np.full(4, 0.25), AdamState(), 1)


class TestBmeGr:
    def test_exact_recovery_full_rank(self):
        rng = np.random.default_rng(9)
        k, p, n_c, n = 2, 4, 20, 60
        q = p - k + 1
        atoms = rng.standard_normal((p * p, n_c))
        atoms /= np.linalg.norm(atoms, axis=0)
        C = rng.standard_normal((n_c, n))  # dense: Dh C full row rank
        B_true = build_blur_matrix(rng.random((k, k)), p)
        Yl = PatchSet(q, q, B_true.dense @ (atoms @ C))
        B_est = bme_gr(Yl, Dictionary(atoms), SparseCodes(C))
        assert np.linalg.norm(B_est.dense - B_true.dense) < 1e-8
        assert B_est.theta is None

    def test_zero_codes_rejected(self):
        rng = np.random.default_rng(10)
        atoms = rng.standard_normal((16, 8))
        Yl = PatchSet(3, 3, np.zeros((9, 5)))
        with pytest.raises(ValueError, match="rank-zero"):
            bme_gr(Yl, Dictionary(atoms), SparseCodes(np.zeros((8, 5))))

    def test_rank_deficient_warns(self):
        rng = np.random.default_rng(11)
        p, k = 4, 2
        atoms = rng.standard_normal((16, 6))
        atoms /= np.linalg.norm(atoms, axis=0)
        C = np.zeros((6, 30))
        C[0] = rng.standard_normal(30)   # rank-1 system
        Yl = PatchSet(3, 3, rng.standard_normal((9, 30)))
        with pytest.warns(RuntimeWarning, match="rank-deficient"):
            bme_gr(Yl, Dictionary(atoms), SparseCodes(C))


class TestTrend:
    def test_short_traces_pass(self):
        assert trend_nonincreasing([5.0, 4.0, 6.0])

    def test_decreasing_with_wiggle_passes(self):
        t = np.linspace(10, 1, 300) + 0.01 * np.sin(np.arange(300))
        assert trend_nonincreasing(t)

    def test_increasing_fails(self):
        t = np.linspace(1, 10, 300)
        assert not trend_nonincreasing(t)
