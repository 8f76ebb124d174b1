"""Block-Toeplitz blur matrices and the two blur estimators.

A k x k kernel acting on p x p patches by narrow convolution is a linear map
R^{p^2} -> R^{(p-k+1)^2}.  Its matrix B has exactly k^2 distinct values (the
kernel taps theta_1..theta_{k^2}) placed at known positions, so it decomposes
as B = sum_i theta_i * M_i over k^2 binary selector matrices with pairwise
disjoint supports and exactly one 1 per row each.

Two estimators for B given LR patches and a sparse model Dh @ C:

* BME-GR: unstructured least squares via Moore-Penrose pseudo-inverse.
* BME-SR: gradient descent (Adam) on the k^2 Toeplitz coefficients.
"""

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .imaging import PatchSet, valid_correlate


@dataclass
class BasisMatrixSet:
    """The k^2 selector matrices, stored as per-row column indices.

    ``cols[i, r]`` is the column of the single 1 in row r of M_i; the dense
    matrices are never materialized.
    """

    k: int
    p: int
    cols: np.ndarray

    @property
    def n_rows(self) -> int:
        return (self.p - self.k + 1) ** 2

    @property
    def n_cols(self) -> int:
        return self.p ** 2


@dataclass
class BlurMatrix:
    """Dense realization of a blur operator on vectorized p x p patches.

    ``theta`` is set for operators living in the block-Toeplitz family
    (built from a kernel or estimated by BME-SR) and None for unstructured
    BME-GR estimates.
    """

    dense: np.ndarray
    k: int
    p: int
    theta: Optional[np.ndarray] = None

    def __post_init__(self):
        self.dense = np.asarray(self.dense, dtype=np.float64)
        q = self.p - self.k + 1
        if self.dense.shape != (q * q, self.p * self.p):
            raise ValueError(
                f"blur matrix shape {self.dense.shape} inconsistent with "
                f"k={self.k}, p={self.p}"
            )
        if self.theta is not None:
            self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
            if self.theta.size != self.k * self.k:
                raise ValueError("theta must have k^2 entries")

    @property
    def n_rows(self) -> int:
        return self.dense.shape[0]

    @property
    def n_cols(self) -> int:
        return self.dense.shape[1]

    def kernel(self) -> np.ndarray:
        if self.theta is None:
            raise ValueError("unstructured blur matrix has no kernel")
        return self.theta.reshape(self.k, self.k)


def build_basis_matrices(k: int, p: int) -> BasisMatrixSet:
    """Selector matrices for the k^2 kernel taps on p x p patches."""
    if k > p:
        raise ValueError(f"kernel side {k} exceeds patch side {p}")
    q = p - k + 1
    oi, oj = np.meshgrid(np.arange(q), np.arange(q), indexing="ij")
    cols = np.empty((k * k, q * q), dtype=np.intp)
    for u in range(k):
        for v in range(k):
            cols[u * k + v] = ((oi + u) * p + (oj + v)).ravel()
    return BasisMatrixSet(k, p, cols)


def realize_theta(theta: np.ndarray, basis: BasisMatrixSet) -> np.ndarray:
    """Dense sum(theta_i * M_i)."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if theta.size != basis.k ** 2:
        raise ValueError("theta must have k^2 entries")
    dense = np.zeros((basis.n_rows, basis.n_cols))
    rows = np.arange(basis.n_rows)
    for i in range(theta.size):
        dense[rows, basis.cols[i]] = theta[i]
    return dense


def build_blur_matrix(kernel: np.ndarray, p: int) -> BlurMatrix:
    """Matrix form of narrow convolution with ``kernel`` on p x p patches.

    For every p x p patch x: dense @ vec(x) == vec(narrow_convolve(x, kernel)).
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"kernel must be square 2D, got {kernel.shape}")
    k = kernel.shape[0]
    basis = build_basis_matrices(k, p)
    theta = kernel.reshape(-1)
    return BlurMatrix(realize_theta(theta, basis), k, p, theta)


def project_to_toeplitz(dense: np.ndarray, basis: BasisMatrixSet) -> np.ndarray:
    """Least-squares projection onto span{M_i}: per-tap mean over each support."""
    rows = np.arange(basis.n_rows)
    return np.array([dense[rows, basis.cols[i]].mean() for i in range(len(basis.cols))])


def structure_residual(dense: np.ndarray, basis: BasisMatrixSet) -> float:
    """Frobenius distance from the block-Toeplitz family."""
    theta = project_to_toeplitz(dense, basis)
    return float(np.linalg.norm(dense - realize_theta(theta, basis)))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Adam optimizer state over the k^2 blur coefficients."""

    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    objective_trace: list = field(default_factory=list)


def adam_step(state: AdamState, grad: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update; returns the delta to add to theta."""
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient")
    if state.m is None:
        state.m = np.zeros_like(grad)
        state.v = np.zeros_like(grad)
    if state.m.size != grad.size:
        raise ValueError("gradient size does not match optimizer state")
    state.step_count += 1
    t = state.step_count
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** t)
    v_hat = state.v / (1.0 - state.beta2 ** t)
    return -state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------------------
# Blur estimators
# ---------------------------------------------------------------------------

PINV_RCOND = 1e-10


def bme_gr(Yl: PatchSet, Dh, C) -> BlurMatrix:
    """Unstructured estimate B = Yl @ pinv(Dh @ C).

    The pseudo-inverse is SVD-based with singular values below
    1e-10 * sigma_max truncated.  The result has no Toeplitz structure
    guaranteed; ``theta`` is left unset.
    """
    atoms = _atoms_of(Dh)
    codes = _codes_of(C)
    if atoms.shape[1] != codes.shape[0]:
        raise ValueError("dictionary/code dims mismatch")
    if Yl.n_samples != codes.shape[1]:
        raise ValueError("LR patch count does not match code count")
    P = atoms @ codes
    s = np.linalg.svd(P, compute_uv=False)
    if s.size == 0 or s[0] <= 0:
        raise ValueError("rank-zero system: Dh @ C is zero")
    rank = int(np.sum(s > PINV_RCOND * s[0]))
    if rank == 0:
        raise ValueError("rank-zero system: Dh @ C is zero")
    n_h = atoms.shape[0]
    if rank < n_h:
        warnings.warn(
            f"Dh @ C is rank-deficient ({rank} < {n_h}); "
            "pseudo-inverse solution is not unique",
            RuntimeWarning,
        )
    dense = Yl.columns @ np.linalg.pinv(P, rcond=PINV_RCOND)
    k, p = lr_patch_geometry(Yl, n_h)
    return BlurMatrix(dense, k, p, theta=None)


def lr_patch_geometry(Yl: PatchSet, n_h: int):
    """Recover (k, p) from LR patch side and HR vector length."""
    p = int(round(np.sqrt(n_h)))
    if p * p != n_h:
        raise ValueError(f"HR patch length {n_h} is not a perfect square")
    if Yl.patch_height != Yl.patch_width:
        raise ValueError("LR patches must be square")
    k = p - Yl.patch_height + 1
    if k < 1:
        raise ValueError("LR patches larger than HR patches")
    return k, p


def sr_objective_grad(Yl_cols: np.ndarray, P: np.ndarray, theta: np.ndarray,
                      basis: BasisMatrixSet, gathers: Optional[list] = None):
    """Objective ||Yl - sum theta_i M_i P||_F^2 and its exact gradient.

    grad_i = -2 <Yl - sum_j theta_j M_j P, M_i P>; M_i P is a row gather of P,
    optionally precomputed in ``gathers``.
    """
    model = np.zeros_like(Yl_cols)
    for i in range(theta.size):
        g = gathers[i] if gathers is not None else P[basis.cols[i], :]
        model += theta[i] * g
    resid = Yl_cols - model
    grad = np.empty(theta.size)
    for i in range(theta.size):
        g = gathers[i] if gathers is not None else P[basis.cols[i], :]
        grad[i] = -2.0 * np.sum(resid * g)
    return float(np.sum(resid * resid)), grad


def bme_sr(Yl: PatchSet, Dh, C, basis: BasisMatrixSet, theta: np.ndarray,
           adam: AdamState, iters: int) -> BlurMatrix:
    """Structured estimate: Adam on the k^2 Toeplitz coefficients.

    Runs ``iters`` Adam steps on ||Yl - sum theta_i M_i Dh C||_F^2 starting
    from ``theta`` (iters=0 returns it unchanged).  Appends the objective
    after each step to adam.objective_trace; the trend over 50-step windows
    is expected to be non-increasing (Adam may overshoot locally) and a
    warning is emitted when it is not.
    """
    atoms = _atoms_of(Dh)
    codes = _codes_of(C)
    if atoms.shape[1] != codes.shape[0]:
        raise ValueError("dictionary/code dims mismatch")
    if Yl.n_samples != codes.shape[1]:
        raise ValueError("LR patch count does not match code count")
    if Yl.patch_height * Yl.patch_width != basis.n_rows:
        raise ValueError("LR patch size does not match basis geometry")
    if atoms.shape[0] != basis.n_cols:
        raise ValueError("HR patch size does not match basis geometry")
    theta = np.asarray(theta, dtype=np.float64).reshape(-1).copy()
    if theta.size != basis.k ** 2:
        raise ValueError("theta must have k^2 entries")
    if iters < 0:
        raise ValueError("iters must be >= 0")

    P = atoms @ codes
    gathers = None
    if theta.size * basis.n_rows * P.shape[1] <= 3e8:
        gathers = [P[basis.cols[i], :] for i in range(theta.size)]
    start = len(adam.objective_trace)
    for _ in range(iters):
        _, grad = sr_objective_grad(Yl.columns, P, theta, basis, gathers)
        theta += adam_step(adam, grad)
        obj, _ = sr_objective_grad(Yl.columns, P, theta, basis, gathers)
        adam.objective_trace.append(obj)
    run = adam.objective_trace[start:]
    if len(run) >= 100 and not trend_nonincreasing(run):
        warnings.warn("BME-SR objective trend increased over a 50-step window",
                      RuntimeWarning)
    return BlurMatrix(realize_theta(theta, basis), basis.k, basis.p, theta)


def trend_nonincreasing(trace, window: int = 50, tol_per_step: float = 1e-9) -> bool:
    """Windowed descent check: successive window means must not increase."""
    trace = np.asarray(trace, dtype=np.float64)
    n_win = trace.size // window
    if n_win < 2:
        return True
    means = trace[: n_win * window].reshape(n_win, window).mean(axis=1)
    return bool(np.all(np.diff(means) <= window * tol_per_step))


def _atoms_of(Dh) -> np.ndarray:
    return Dh.atoms if hasattr(Dh, "atoms") else np.asarray(Dh, dtype=np.float64)


def _codes_of(C) -> np.ndarray:
    return C.matrix if hasattr(C, "matrix") else np.asarray(C, dtype=np.float64)
