"""Alternating-optimization training loops and checkpoint persistence.

Both modes alternate sparse coding, a dictionary sweep and a blur update,
one of each per outer iteration (the blur update runs a fixed budget of Adam
steps, and can be scheduled every ``b_every`` iterations).  Patches carry
raw [0, 1] intensities; no per-patch mean removal, since the blur model acts
on raw intensities and mean removal would break the B-consistency of the
HR/LR pair.

Checkpoint file layout (little-endian):

    magic "DBDL" | version u32 | k, p, n_atoms u32 | theta k^2 f64
    | atoms (p^2 * n_atoms) f64 row-major | text length u32 | UTF-8 text

The trailing text block holds the config snapshot and the loss trace as
key=value lines; floats are written with repr() so they round-trip exactly.
"""

import struct
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Tuple

import numpy as np

from .blur import (AdamState, BasisMatrixSet, BlurMatrix, bme_gr, bme_sr,
                   build_basis_matrices, project_to_toeplitz, realize_theta)
from .dictionary import Dictionary, init_dictionary, joint_ksvd_update, ksvd_update_paired
from .imaging import PatchSet
from .sparse import LassoProblem, SparseCodes, fista_solve

MAGIC = b"DBDL"
FORMAT_VERSION = 1

MODES = ("paired", "no_correspondence")
BME_KINDS = ("gr", "sr")


class CheckpointError(ValueError):
    """Raised for corrupt, truncated or version-mismatched checkpoint files."""


@dataclass
class TrainConfig:
    mode: str = "paired"
    bme: str = "sr"
    n_atoms: int = 400
    lam: float = 0.02
    lr: float = 0.05
    outer_iters: int = 5000
    p: int = 15
    k: int = 7
    n_patches: int = 20000
    seed: int = 0
    fista_iters: int = 200
    fista_tol: float = 1e-6
    adam_steps: int = 10
    b_every: int = 1
    deterministic: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.bme not in BME_KINDS:
            raise ValueError(f"bme must be one of {BME_KINDS}, got {self.bme!r}")
        if self.mode == "no_correspondence" and self.bme != "sr":
            raise ValueError("no-correspondence mode requires bme='sr'")
        for name in ("n_atoms", "lr", "p", "k", "n_patches",
                     "fista_iters", "adam_steps", "b_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.outer_iters < 0:
            raise ValueError("outer_iters must be >= 0")
        if not self.lam > 0:
            raise ValueError("lambda must be > 0")
        if self.fista_tol < 0:
            raise ValueError("fista_tol must be >= 0")
        if self.p < self.k:
            raise ValueError(f"patch side p={self.p} must be >= kernel side k={self.k}")


@dataclass
class LossTrace:
    """Per-outer-iteration objective terms (HR fit, LR fit, l1 penalty)."""

    hr_fidelity: list = field(default_factory=list)
    lr_fidelity: list = field(default_factory=list)
    l1_penalty: list = field(default_factory=list)

    def total(self) -> list:
        return [h + l + s for h, l, s in
                zip(self.hr_fidelity, self.lr_fidelity, self.l1_penalty)]

    def __len__(self) -> int:
        return len(self.hr_fidelity)


@dataclass
class ModelCheckpoint:
    """Trained model state: HR dictionary, blur coefficients and provenance."""

    atoms: np.ndarray
    theta: np.ndarray
    k: int
    p: int
    config: TrainConfig
    loss_trace: LossTrace = field(default_factory=LossTrace)

    def __post_init__(self):
        self.atoms = np.ascontiguousarray(self.atoms, dtype=np.float64)
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64).reshape(-1)
        if self.atoms.shape[0] != self.p * self.p:
            raise ValueError(
                f"atom length {self.atoms.shape[0]} != p^2 = {self.p * self.p}"
            )
        if self.theta.size != self.k * self.k:
            raise ValueError(f"theta length {self.theta.size} != k^2 = {self.k * self.k}")

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[1]

    def blur_matrix(self) -> BlurMatrix:
        basis = build_basis_matrices(self.k, self.p)
        return BlurMatrix(realize_theta(self.theta, basis), self.k, self.p, self.theta)


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------

def _check_patch_geometry(hr: PatchSet, cfg: TrainConfig):
    q = cfg.p - cfg.k + 1
    if hr.patch_height != cfg.p or hr.patch_width != cfg.p:
        raise ValueError(
            f"HR patches are {hr.patch_height}x{hr.patch_width}, config wants p={cfg.p}"
        )
    return q


def _check_lr_geometry(lr: PatchSet, q: int):
    if lr.patch_height != q or lr.patch_width != q:
        raise ValueError(
            f"LR patches are {lr.patch_height}x{lr.patch_width}, expected {q}x{q}"
        )


def _fit_sq(Y: np.ndarray, M: np.ndarray) -> float:
    R = Y - M
    return float(np.sum(R * R))


def _record(trace: LossTrace, hr: float, lr: float, s: float, it: int):
    if not (np.isfinite(hr) and np.isfinite(lr) and np.isfinite(s)):
        raise RuntimeError(
            f"non-finite training loss at outer iteration {it}: "
            f"hr={hr} lr={lr} l1={s}"
        )
    trace.hr_fidelity.append(hr)
    trace.lr_fidelity.append(lr)
    trace.l1_penalty.append(s)


def train_paired(Yh: PatchSet, Yl: PatchSet, cfg: TrainConfig,
                 progress: Optional[Callable[[int, LossTrace], None]] = None
                 ) -> Tuple[ModelCheckpoint, LossTrace]:
    """Joint paired training: codes on the HR term, K-SVD, blur estimation.

    Yh and Yl must be column-aligned patch pairs.  Returns the checkpoint
    (with theta from BME-SR, or the Toeplitz projection of the dense BME-GR
    estimate) and the loss trace.
    """
    if cfg.mode != "paired":
        raise ValueError("config mode must be 'paired'")
    q = _check_patch_geometry(Yh, cfg)
    _check_lr_geometry(Yl, q)
    if Yh.n_samples != Yl.n_samples:
        raise ValueError("paired training needs equal HR/LR patch counts")

    basis = build_basis_matrices(cfg.k, cfg.p)
    theta = np.full(cfg.k * cfg.k, 1.0 / (cfg.k * cfg.k))
    adam = AdamState(lr=cfg.lr)
    D = init_dictionary(Yh, cfg.n_atoms, cfg.seed)
    C = SparseCodes(np.zeros((cfg.n_atoms, Yh.n_samples)))
    B = BlurMatrix(realize_theta(theta, basis), cfg.k, cfg.p, theta)
    trace = LossTrace()

    for it in range(cfg.outer_iters):
        C = fista_solve(LassoProblem(D.atoms, Yh.columns, cfg.lam),
                        cfg.fista_iters, cfg.fista_tol, cfg.deterministic)
        D, C = ksvd_update_paired(Yh, D, C)
        if it % cfg.b_every == 0:
            if cfg.bme == "gr":
                B = bme_gr(Yl, D, C)
            else:
                B = bme_sr(Yl, D, C, basis, theta, adam, cfg.adam_steps)
                theta = B.theta
        recon = D.atoms @ C.matrix
        _record(trace,
                _fit_sq(Yh.columns, recon),
                _fit_sq(Yl.columns, B.dense @ recon),
                cfg.lam * float(np.abs(C.matrix).sum()),
                it)
        if progress is not None:
            progress(it, trace)

    final_theta = theta if cfg.bme == "sr" else project_to_toeplitz(B.dense, basis)
    cp = ModelCheckpoint(D.atoms, final_theta, cfg.k, cfg.p, cfg, trace)
    return cp, trace


def train_no_correspondence(Xh: PatchSet, Yl: PatchSet, cfg: TrainConfig,
                            progress: Optional[Callable[[int, LossTrace], None]] = None
                            ) -> Tuple[ModelCheckpoint, LossTrace]:
    """Training without patch correspondence (counts may differ).

    Per outer iteration: two independent sparse-coding solves (LR codes over
    B Dh, HR codes over Dh), BME-SR on the LR fidelity term, then the joint
    dual-domain K-SVD sweep.
    """
    if cfg.mode != "no_correspondence":
        raise ValueError("config mode must be 'no_correspondence'")
    q = _check_patch_geometry(Xh, cfg)
    _check_lr_geometry(Yl, q)

    basis = build_basis_matrices(cfg.k, cfg.p)
    theta = np.full(cfg.k * cfg.k, 1.0 / (cfg.k * cfg.k))
    adam = AdamState(lr=cfg.lr)
    D = init_dictionary(Xh, cfg.n_atoms, cfg.seed)
    C = SparseCodes(np.zeros((cfg.n_atoms, Yl.n_samples)))
    Ct = SparseCodes(np.zeros((cfg.n_atoms, Xh.n_samples)))
    B = BlurMatrix(realize_theta(theta, basis), cfg.k, cfg.p, theta)
    trace = LossTrace()

    for it in range(cfg.outer_iters):
        C = fista_solve(LassoProblem(B.dense @ D.atoms, Yl.columns, cfg.lam),
                        cfg.fista_iters, cfg.fista_tol, cfg.deterministic)
        Ct = fista_solve(LassoProblem(D.atoms, Xh.columns, cfg.lam),
                         cfg.fista_iters, cfg.fista_tol, cfg.deterministic)
        if it % cfg.b_every == 0:
            B = bme_sr(Yl, D, C, basis, theta, adam, cfg.adam_steps)
            theta = B.theta
        D, C, Ct = joint_ksvd_update(Yl, Xh, B, D, C, Ct)
        _record(trace,
                _fit_sq(Xh.columns, D.atoms @ Ct.matrix),
                _fit_sq(Yl.columns, B.dense @ (D.atoms @ C.matrix)),
                cfg.lam * float(np.abs(C.matrix).sum() + np.abs(Ct.matrix).sum()),
                it)
        if progress is not None:
            progress(it, trace)

    cp = ModelCheckpoint(D.atoms, theta, cfg.k, cfg.p, cfg, trace)
    return cp, trace


def stderr_progress(every: int = 50):
    """Progress callback printing the loss terms every ``every`` iterations."""

    def cb(it: int, trace: LossTrace):
        if it % every == 0:
            print(
                f"iter {it}: hr={trace.hr_fidelity[-1]:.6g} "
                f"lr={trace.lr_fidelity[-1]:.6g} l1={trace.l1_penalty[-1]:.6g}",
                file=sys.stderr,
            )

    return cb


# ---------------------------------------------------------------------------
# Config and checkpoint serialization
# ---------------------------------------------------------------------------

def config_to_text(cfg: TrainConfig) -> str:
    lines = [f"{f.name}={getattr(cfg, f.name)!r}" for f in fields(TrainConfig)]
    return "\n".join(lines) + "\n"


def config_from_text(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    """Parse key=value lines; unknown keys are rejected, missing keep defaults."""
    values = {}
    names = {f.name: f.type for f in fields(TrainConfig)}
    for line_no, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("trace."):
            continue
        if line.startswith("normalization="):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ValueError(f"line {line_no}: expected key=value, got {line!r}")
        if key not in names:
            raise ValueError(f"line {line_no}: unknown config key {key!r}")
        values[key] = value.strip()
    cfg = base or TrainConfig()
    kwargs = {}
    for key, raw in values.items():
        current = getattr(cfg, key)
        if isinstance(current, bool):
            kwargs[key] = raw in ("True", "true", "1")
        elif isinstance(current, int):
            kwargs[key] = int(raw)
        elif isinstance(current, float):
            kwargs[key] = float(raw)
        else:
            kwargs[key] = raw.strip("'\"")
    return replace(cfg, **kwargs)


def _floats_to_csv(values) -> str:
    return ",".join(repr(v) for v in values)


def _floats_from_csv(text: str) -> list:
    return [float(v) for v in text.split(",")] if text else []


def _snapshot_text(cfg: TrainConfig, trace: LossTrace) -> str:
    parts = [config_to_text(cfg), "normalization=raw-[0,1]-no-mean-removal\n"]
    parts.append(f"trace.hr_fidelity={_floats_to_csv(trace.hr_fidelity)}\n")
    parts.append(f"trace.lr_fidelity={_floats_to_csv(trace.lr_fidelity)}\n")
    parts.append(f"trace.l1_penalty={_floats_to_csv(trace.l1_penalty)}\n")
    return "".join(parts)


def _trace_from_text(text: str) -> LossTrace:
    trace = LossTrace()
    for line in text.splitlines():
        if line.startswith("trace."):
            key, _, value = line.partition("=")
            values = _floats_from_csv(value)
            setattr(trace, key[len("trace."):], values)
    return trace


def save_checkpoint(cp: ModelCheckpoint, path) -> None:
    text = _snapshot_text(cp.config, cp.loss_trace).encode("utf-8")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    blob += struct.pack("<III", cp.k, cp.p, cp.n_atoms)
    blob += cp.theta.astype("<f8").tobytes()
    blob += np.ascontiguousarray(cp.atoms).astype("<f8").tobytes()
    blob += struct.pack("<I", len(text))
    blob += text
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> ModelCheckpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 20:
        raise CheckpointError("truncated checkpoint file")
    if raw[:4] != MAGIC:
        raise CheckpointError("corrupt magic bytes (not a DBDL checkpoint)")
    version, = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} unsupported "
            f"(expected {FORMAT_VERSION})"
        )
    k, p, n_atoms = struct.unpack_from("<III", raw, 8)
    off = 20
    n_theta = k * k
    n_dict = p * p * n_atoms
    need = off + 8 * (n_theta + n_dict) + 4
    if len(raw) < need:
        raise CheckpointError("truncated checkpoint file")
    theta = np.frombuffer(raw, dtype="<f8", count=n_theta, offset=off).copy()
    off += 8 * n_theta
    atoms = np.frombuffer(raw, dtype="<f8", count=n_dict, offset=off).copy()
    off += 8 * n_dict
    text_len, = struct.unpack_from("<I", raw, off)
    off += 4
    if len(raw) < off + text_len:
        raise CheckpointError("truncated checkpoint file")
    text = raw[off:off + text_len].decode("utf-8")
    try:
        cfg = config_from_text(text)
    except ValueError as exc:
        raise CheckpointError(f"bad config snapshot: {exc}") from exc
    trace = _trace_from_text(text)
    return ModelCheckpoint(atoms.reshape(p * p, n_atoms), theta, k, p, cfg, trace)
