"""Dictionary updates: classic K-SVD, dual-domain joint K-SVD, CDL baseline.

All updates sweep atoms in ascending index order and resolve the SVD sign
ambiguity by forcing the largest-magnitude entry of each new atom positive,
so runs are reproducible.  Atoms with empty support are replaced by the
currently worst-reconstructed signal column (normalized); an all-zero
candidate leaves the atom untouched.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh
from scipy.linalg.blas import dsyrk

from .blur import BlurMatrix
from .imaging import PatchSet
from .sparse import LassoProblem, SparseCodes, fista_solve

BTB_REG = 1e-8


@dataclass
class Dictionary:
    """Atom matrix, one unit-norm column per atom."""

    atoms: np.ndarray

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=np.float64)
        if self.atoms.ndim != 2:
            raise ValueError("atoms must form a 2D matrix")
        if np.isnan(self.atoms).any():
            raise ValueError("dictionary contains NaN")

    @property
    def n_features(self) -> int:
        return self.atoms.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[1]

    def atom_norms(self) -> np.ndarray:
        return np.linalg.norm(self.atoms, axis=0)


@dataclass
class AtomSupport:
    """Column indices using atom t in the LR (omega) and HR (omega_tilde) codes."""

    t: int
    omega: np.ndarray
    omega_tilde: np.ndarray


@dataclass
class JointResidual:
    """Concatenated dual-domain residual for one atom update."""

    E_h: np.ndarray
    E_l: np.ndarray
    gamma: np.ndarray

    @property
    def E(self) -> np.ndarray:
        return np.concatenate([self.E_h, self.E_l], axis=1)


def init_dictionary(patches: PatchSet, n_atoms: int, seed: int) -> Dictionary:
    """Seed a dictionary from randomly chosen patch columns, l2-normalized.

    Samples without replacement when enough patches exist, with replacement
    otherwise.  An all-zero pick is replaced by a unit coordinate vector.
    """
    if patches.n_samples == 0:
        raise ValueError("empty patch set")
    if n_atoms < 1:
        raise ValueError("need at least one atom")
    rng = np.random.default_rng(seed)
    replace = patches.n_samples < n_atoms
    idx = rng.choice(patches.n_samples, size=n_atoms, replace=replace)
    atoms = patches.columns[:, idx].copy()
    norms = np.linalg.norm(atoms, axis=0)
    for t in range(n_atoms):
        if norms[t] <= 1e-12:
            atoms[:, t] = 0.0
            atoms[t % atoms.shape[0], t] = 1.0
        else:
            atoms[:, t] /= norms[t]
    return Dictionary(atoms)


def rank_one_update(E: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Best rank-1 fit of a residual block: E ~ d gamma^T.

    Returns the first left singular vector (sign-fixed so its largest
    magnitude entry is positive) and sigma_1 * v_1^T.  Only the top triplet
    is needed, so for rectangular blocks it is taken from the small-side
    Gram matrix instead of a full SVD.
    """
    E = np.asarray(E, dtype=np.float64)
    m, n = E.shape
    if min(m, n) <= 8:
        U, s, Vt = np.linalg.svd(E, full_matrices=False)
        d = U[:, 0]
        gamma = s[0] * Vt[0]
    elif m <= n:
        # eigh only reads the lower triangle, which is all dsyrk fills
        _, vecs = eigh(dsyrk(1.0, E, lower=1), lower=True,
                       subset_by_index=(m - 1, m - 1))
        d = vecs[:, 0]
        gamma = d @ E
    else:
        _, vecs = eigh(dsyrk(1.0, E, lower=1, trans=1), lower=True,
                       subset_by_index=(n - 1, n - 1))
        v = vecs[:, 0]
        Ev = E @ v
        s1 = np.linalg.norm(Ev)
        if s1 <= 1e-300:
            U, s, Vt = np.linalg.svd(E, full_matrices=False)
            d = U[:, 0]
            gamma = s[0] * Vt[0]
        else:
            d = Ev / s1
            gamma = s1 * v
    i = int(np.argmax(np.abs(d)))
    if d[i] < 0:
        d = -d
        gamma = -gamma
    return d, gamma


def _replace_atom(atoms: np.ndarray, t: int, candidates: np.ndarray,
                  resid_sq: np.ndarray) -> None:
    """Swap atom t for the worst-reconstructed candidate column, normalized."""
    worst = int(np.argmax(resid_sq))
    col = candidates[:, worst]
    norm = np.linalg.norm(col)
    if norm > 1e-12:
        atoms[:, t] = col / norm


def ksvd_update_paired(Yh: PatchSet, D: Dictionary, C: SparseCodes
                       ) -> Tuple[Dictionary, SparseCodes]:
    """One K-SVD sweep: rank-1 refit of every atom and its coefficients.

    Never increases ||Yh - D C||_F; the code support pattern is preserved.

    Wide supports (the usual case here, since training enforces a high
    non-sparsity level) take a fast path: the residual Gram R R^T is
    maintained across the sweep by rank-2 updates, so each atom costs
    O(N_h |omega|) instead of O(N_h^2 |omega|).  Results are identical to
    the direct computation up to roundoff.
    """
    Y = Yh.columns
    atoms = D.atoms.copy()
    codes = C.matrix.copy()
    if Y.shape[0] != atoms.shape[0]:
        raise ValueError("patch length does not match dictionary rows")
    if atoms.shape[1] != codes.shape[0] or Y.shape[1] != codes.shape[1]:
        raise ValueError("code dims inconsistent with data/dictionary")

    n_h, n = Y.shape
    R = Y - atoms @ codes
    S = dsyrk(1.0, R, lower=1) if n >= n_h else None   # lower-tri of R R^T

    for t in range(atoms.shape[1]):
        omega = np.flatnonzero(codes[t])
        if omega.size == 0:
            _replace_atom(atoms, t, Y, np.einsum("ij,ij->j", R, R))
            continue
        d_old = atoms[:, t].copy()
        c_old = codes[t, omega].copy()
        if S is not None and omega.size >= n_h and omega.size >= n // 2:
            d, gamma = _atom_from_gram(R, S, omega, d_old, c_old)
        else:
            E = R[:, omega] + np.outer(d_old, c_old)
            d, gamma = rank_one_update(E)
        atoms[:, t] = d
        codes[t, omega] = gamma
        if S is not None:
            _gram_rank2_update(S, R, omega, d_old, c_old, d, gamma)
        delta = np.outer(d_old, c_old) - np.outer(d, gamma)
        if omega.size == n:
            R += delta
        else:
            R[:, omega] += delta
    return Dictionary(atoms), SparseCodes(codes)


def _symmetrize_lower(L: np.ndarray) -> np.ndarray:
    return np.tril(L) + np.tril(L, -1).T


def _support_view(R, omega):
    """R restricted to the support, avoiding a copy when it is everything."""
    return R if omega.size == R.shape[1] else R[:, omega]


def _atom_from_gram(R, S, omega, d_old, c_old):
    """Top singular pair of E = R[:, omega] + d_old c_old^T via the running
    Gram S = R R^T (E E^T assembled with rank-2 corrections)."""
    n = R.shape[1]
    G = _symmetrize_lower(S)
    if omega.size < n:
        comp = np.setdiff1d(np.arange(n), omega, assume_unique=True)
        G -= _symmetrize_lower(dsyrk(1.0, R[:, comp], lower=1))
    Rom = _support_view(R, omega)
    Rc = Rom @ c_old
    G += np.outer(Rc, d_old) + np.outer(d_old, Rc)
    G += (c_old @ c_old) * np.outer(d_old, d_old)
    _, vecs = eigh(G, lower=True, subset_by_index=(G.shape[0] - 1, G.shape[0] - 1))
    d = vecs[:, 0]
    gamma = d @ Rom + (d @ d_old) * c_old
    i = int(np.argmax(np.abs(d)))
    if d[i] < 0:
        d = -d
        gamma = -gamma
    return d, gamma


def _gram_rank2_update(S, R, omega, d_old, c_old, d_new, c_new):
    """Keep S = tril(R R^T) current for R[:, omega] += d_old c_old^T - d_new c_new^T."""
    Rom = _support_view(R, omega)
    Rco = Rom @ c_old
    Rcn = Rom @ c_new
    upd = (np.outer(Rco, d_old) - np.outer(Rcn, d_new))
    upd += upd.T
    coo = c_old @ c_old
    con = c_old @ c_new
    cnn = c_new @ c_new
    upd += coo * np.outer(d_old, d_old) + cnn * np.outer(d_new, d_new)
    cross = con * np.outer(d_old, d_new)
    upd -= cross + cross.T
    S += np.tril(upd)


def atom_support(C: SparseCodes, Ct: SparseCodes, t: int) -> AtomSupport:
    return AtomSupport(
        t,
        np.flatnonzero(C.matrix[t]),
        np.flatnonzero(Ct.matrix[t]),
    )


def backprojector(B: BlurMatrix):
    """Regularized left inverse of B: x -> (B^T B + eps I)^-1 B^T x.

    B^T B is singular in general (B is wide), so a Tikhonov term
    eps = 1e-8 * trace(B^T B) / N_h keeps the Cholesky factorization valid.
    """
    Bd = B.dense
    BtB = Bd.T @ Bd
    n_h = BtB.shape[0]
    reg = BTB_REG * np.trace(BtB) / n_h
    factor = cho_factor(BtB + reg * np.eye(n_h), lower=True)

    def apply(M: np.ndarray) -> np.ndarray:
        return cho_solve(factor, Bd.T @ M)

    return apply


def joint_ksvd_update(Yl: PatchSet, Xh: PatchSet, B: BlurMatrix,
                      D: Dictionary, C: SparseCodes, Ct: SparseCodes
                      ) -> Tuple[Dictionary, SparseCodes, SparseCodes]:
    """Dual-domain K-SVD sweep for the no-correspondence setting.

    Per atom t: the HR residual on the HR support and the back-projected LR
    residual on the LR support are concatenated into one block, refit rank-1
    by SVD, and the coefficient row split back into the HR codes (first
    |omega_tilde| entries) and LR codes (remainder).
    """
    Bd = B.dense
    atoms = D.atoms.copy()
    c_lr = C.matrix.copy()
    c_hr = Ct.matrix.copy()
    X = Xh.columns
    Y = Yl.columns
    n_h, n_c = atoms.shape
    if X.shape[0] != n_h:
        raise ValueError("HR patch length does not match dictionary rows")
    if Y.shape[0] != Bd.shape[0] or Bd.shape[1] != n_h:
        raise ValueError("LR patch length does not match blur matrix")
    if c_lr.shape != (n_c, Y.shape[1]) or c_hr.shape != (n_c, X.shape[1]):
        raise ValueError("code dims inconsistent with data/dictionary")

    backproject = backprojector(B)
    R_h = X - atoms @ c_hr            # HR-domain residual
    R_l = Y - Bd @ (atoms @ c_lr)     # LR-domain residual, not back-projected

    for t in range(n_c):
        sup = AtomSupport(t, np.flatnonzero(c_lr[t]), np.flatnonzero(c_hr[t]))
        if sup.omega.size == 0 and sup.omega_tilde.size == 0:
            cand = np.concatenate([X, backproject(Y)], axis=1)
            resid = np.concatenate(
                [np.einsum("ij,ij->j", R_h, R_h),
                 _colsq(backproject(R_l))]
            )
            _replace_atom(atoms, t, cand, resid)
            continue

        d_old = atoms[:, t]
        E_h = R_h[:, sup.omega_tilde] + np.outer(d_old, c_hr[t, sup.omega_tilde])
        El_raw = R_l[:, sup.omega] + np.outer(Bd @ d_old, c_lr[t, sup.omega])
        E_l = backproject(El_raw)
        jr = JointResidual(E_h, E_l,
                           np.concatenate([c_hr[t, sup.omega_tilde],
                                           c_lr[t, sup.omega]]))
        d, gamma = rank_one_update(jr.E)
        split = sup.omega_tilde.size
        atoms[:, t] = d
        c_hr[t, sup.omega_tilde] = gamma[:split]
        c_lr[t, sup.omega] = gamma[split:]
        R_h[:, sup.omega_tilde] = E_h - np.outer(d, gamma[:split])
        R_l[:, sup.omega] = El_raw - np.outer(Bd @ d, gamma[split:])

    return Dictionary(atoms), SparseCodes(c_lr), SparseCodes(c_hr)


def _colsq(M: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->j", M, M)


def cdl_train(Yh: PatchSet, Yl: PatchSet, lam: float, iters: int,
              n_atoms: int = 400, seed: int = 0, fista_iters: int = 200,
              fista_tol: float = 1e-6, deterministic: bool = True):
    """Conventional coupled dictionary learning baseline.

    Stacks [Yl; Yh] with a shared code matrix and alternates FISTA with
    paired K-SVD sweeps on the stacked system.  Requires paired inputs
    (equal column counts); returns (Dh, Dl, C) as plain arrays, split from
    the stacked dictionary.
    """
    if Yh.n_samples != Yl.n_samples:
        raise ValueError(
            "CDL needs paired data: "
            f"{Yh.n_samples} HR vs {Yl.n_samples} LR patches"
        )
    n_l = Yl.patch_height * Yl.patch_width
    stacked = PatchSet(
        Yl.patch_height * Yl.patch_width + Yh.patch_height * Yh.patch_width, 1,
        np.concatenate([Yl.columns, Yh.columns], axis=0),
    )
    D = init_dictionary(stacked, n_atoms, seed)
    C = SparseCodes(np.zeros((n_atoms, stacked.n_samples)))
    for _ in range(iters):
        C = fista_solve(LassoProblem(D.atoms, stacked.columns, lam),
                        fista_iters, fista_tol, deterministic)
        D, C = ksvd_update_paired(stacked, D, C)
    Dl = D.atoms[:n_l].copy()
    Dh = D.atoms[n_l:].copy()
    return Dh, Dl, C
