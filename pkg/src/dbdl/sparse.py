"""LASSO sparse coding via monotone FISTA with adaptive restart.

Objective convention, per column c of C:

    f(c) = ||y - A c||_2^2 + lambda * ||c||_1        (no 1/2 factor)

so the gradient of the smooth part is 2 A^T (A c - y), its Lipschitz constant
is 2 sigma_max(A)^2, and the proximal step soft-thresholds at lambda * step.

Columns are solved independently and reproducibly: every cross-column matrix
product is performed one column at a time (fixed-shape GEMV), so solving a
column jointly with others or alone yields bit-identical iterates for the
same iteration count.  Each iteration needs a single Gram product G @ z; the
gradient at the momentum point reuses it, since y_{k+1} is a per-column
linear combination of the two latest accepted iterates.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class SparseCodes:
    """Coefficient matrix, one column per coded signal."""

    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError("codes must form a 2D matrix")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("codes contain non-finite entries")

    @property
    def n_atoms(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_signals(self) -> int:
        return self.matrix.shape[1]

    def nonzeros_per_column(self) -> np.ndarray:
        return np.count_nonzero(self.matrix, axis=0)

    @property
    def max_nonzeros(self) -> int:
        """Observed sparsity bound (diagnostic; never enforced)."""
        if self.matrix.shape[1] == 0:
            return 0
        return int(self.nonzeros_per_column().max())


@dataclass
class LassoProblem:
    """Dictionary A (N_sig x N_c), signals Y (N_sig x N), l1 weight lambda."""

    A: np.ndarray
    Y: np.ndarray
    lam: float

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.A.ndim != 2 or self.Y.ndim != 2:
            raise ValueError("A and Y must be 2D")
        if self.A.shape[0] != self.Y.shape[0]:
            raise ValueError(
                f"signal length mismatch: A has {self.A.shape[0]} rows, "
                f"Y has {self.Y.shape[0]}"
            )
        if not self.lam > 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")
        if not np.all(np.isfinite(self.A)) or not np.all(np.isfinite(self.Y)):
            raise ValueError("non-finite inputs")
        if not np.any(self.A):
            raise ValueError("zero dictionary")


def _colwise_matmul(M: np.ndarray, X: np.ndarray) -> np.ndarray:
    """M @ X computed column by column (bitwise independent of column set)."""
    out = np.empty((M.shape[0], X.shape[1]), order="F")
    for j in range(X.shape[1]):
        out[:, j] = M @ X[:, j]
    return out


def lipschitz_step(A: np.ndarray) -> float:
    """FISTA step size 1 / (2 sigma_max(A)^2).

    sigma_max is estimated by power iteration on A^T A to 1e-6 relative
    tolerance, with a fixed-seed start vector for determinism.
    """
    A = np.asarray(A, dtype=np.float64)
    if not np.any(A):
        raise ValueError("zero dictionary")
    G = A.T @ A
    v = np.random.default_rng(0x5EED).standard_normal(G.shape[0])
    v /= np.linalg.norm(v)
    lam_max = 0.0
    for _ in range(5000):
        w = G @ v
        lam_max = float(v @ w)                     # Rayleigh quotient, v unit
        # |lam_max - eigenvalue| <= residual norm for symmetric G
        if np.linalg.norm(w - lam_max * v) <= 1e-6 * max(lam_max, 1e-300):
            break
        v = w / np.linalg.norm(w)
    return 1.0 / (2.0 * lam_max)


def soft_threshold(x: np.ndarray, level) -> np.ndarray:
    return np.sign(x) * np.maximum(np.abs(x) - level, 0.0)


def fista_solve(prob: LassoProblem, max_iters: int = 200,
                tol: float = 1e-6, deterministic: bool = True) -> SparseCodes:
    """Solve min ||Y - A C||_F^2 + lambda ||C||_{1,1} column-wise.

    Monotone variant: a step whose per-column objective increases is
    rejected for that column and its momentum restarted (plain ISTA step
    next), so per-column objectives are non-increasing across iterations.
    Stops early when every column's relative objective change falls below
    ``tol``; tol=0 forces exactly ``max_iters`` iterations.

    In deterministic mode (default) every matrix product runs column by
    column, which makes results bit-identical however the columns are
    batched; deterministic=False uses plain GEMM, which is faster on large
    batches but lets BLAS blocking perturb the last bits across batch sizes.
    """
    A, lam = prob.A, prob.lam
    # Fortran order keeps per-column reductions bitwise independent of the
    # column set (contiguous columns -> per-column pairwise summation).
    Y = np.asfortranarray(prob.Y)
    n_c, n = A.shape[1], Y.shape[1]
    if n == 0:
        return SparseCodes(np.zeros((n_c, 0)))

    matmul = _colwise_matmul if deterministic else (
        lambda M, X: np.asfortranarray(M @ X))
    step = lipschitz_step(A)
    thr = lam * step
    G = A.T @ A
    b = matmul(A.T, Y)
    ysq = np.einsum("ij,ij->j", Y, Y)

    x = np.zeros((n_c, n), order="F")       # accepted iterate x_k
    x_prev = np.zeros((n_c, n), order="F")
    gx = np.zeros((n_c, n), order="F")       # G @ x
    gx_prev = np.zeros((n_c, n), order="F")
    f_x = ysq.copy()                          # objective at x (c=0 fits f=||y||^2)
    t = np.ones(n)

    for _ in range(max_iters):
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_next
        # momentum point y = (1+beta) x - beta x_prev, so G y needs no matmul
        ym = (1.0 + beta) * x - beta * x_prev
        gy = (1.0 + beta) * gx - beta * gx_prev
        z = soft_threshold(ym - (2.0 * step) * (gy - b), thr)
        gz = matmul(G, z)
        f_z = (np.einsum("ij,ij->j", z, gz)
               - 2.0 * np.einsum("ij,ij->j", z, b)
               + ysq + lam * np.abs(z).sum(axis=0))

        accept = f_z <= f_x
        rel_change = np.abs(f_x - f_z) / np.maximum(np.abs(f_x), 1e-300)

        # rejected columns keep x, and x_prev == x kills their momentum;
        # together with t=1 this restarts them on a plain ISTA step
        x_prev = x.copy(order="F")      # plain .copy() would flip to C order
        gx_prev = gx.copy(order="F")
        x[:, accept] = z[:, accept]
        gx[:, accept] = gz[:, accept]
        f_x = np.where(accept, f_z, f_x)
        t = np.where(accept, t_next, 1.0)

        if tol > 0 and np.all(accept & (rel_change < tol)):
            break

    return SparseCodes(x)


def lasso_objective(A: np.ndarray, Y: np.ndarray, C: np.ndarray, lam: float) -> np.ndarray:
    """Per-column f(c) = ||y - A c||^2 + lambda ||c||_1, computed directly."""
    R = Y - A @ C
    return np.einsum("ij,ij->j", R, R) + lam * np.abs(C).sum(axis=0)
