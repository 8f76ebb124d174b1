"""Deblurring with a trained checkpoint: patch-wise sparse coding + overlap
averaging.

The LR image is cut into overlapping (p-k+1)-sided patches (stride
configurable, default 1, last patch snapped to the far edge so every pixel
is covered), each patch is sparse-coded against the derived LR dictionary
B Dh, and the HR reconstructions Dh C are accumulated into an HR-sized
buffer and averaged by coverage count.  Output dims are the LR dims plus
k - 1 per axis.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .imaging import Image, PatchSet, extract_patches_grid
from .sparse import LassoProblem, fista_solve
from .training import ModelCheckpoint


@dataclass
class DeblurRequest:
    lr_image: Image
    checkpoint: ModelCheckpoint
    stride: int = 1
    lam_infer: Optional[float] = None       # None: reuse the training lambda
    fista_iters: int = 200
    fista_tol: float = 1e-6
    deterministic: bool = True

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        q = self.checkpoint.p - self.checkpoint.k + 1
        if q > min(self.lr_image.height, self.lr_image.width):
            raise ValueError(
                f"LR patch side {q} exceeds LR image {self.lr_image.data.shape}"
            )


@dataclass
class AggregationBuffer:
    """HR-sized accumulator and coverage counts for overlap averaging."""

    accumulator: np.ndarray
    counts: np.ndarray

    @classmethod
    def empty(cls, height: int, width: int) -> "AggregationBuffer":
        return cls(np.zeros((height, width)), np.zeros((height, width), dtype=np.int64))

    def add(self, patch: np.ndarray, row: int, col: int) -> None:
        h, w = patch.shape
        self.accumulator[row:row + h, col:col + w] += patch
        self.counts[row:row + h, col:col + w] += 1

    def normalize(self) -> np.ndarray:
        if not np.all(self.counts > 0):
            raise RuntimeError("aggregation left uncovered pixels")
        return self.accumulator / self.counts


def derive_lr_dictionary(cp: ModelCheckpoint) -> np.ndarray:
    """The LR dictionary is always the product of the realized blur and Dh."""
    return cp.blur_matrix().dense @ cp.atoms


def reconstruct_patches(lr: Image, Dl: np.ndarray, Dh: np.ndarray,
                        p: int, k: int, stride: int, lam: float,
                        fista_iters: int, fista_tol: float,
                        deterministic: bool = True) -> Image:
    """Core deblurring routine on explicit dictionaries (used by the CDL
    baseline as well as checkpoint-based inference)."""
    q = p - k + 1
    patches = extract_patches_grid(lr, q, stride)
    codes = fista_solve(LassoProblem(Dl, patches.columns, lam),
                        fista_iters, fista_tol, deterministic)
    recon = Dh @ codes.matrix

    buf = AggregationBuffer.empty(lr.height + k - 1, lr.width + k - 1)
    for i, (_, r, c) in enumerate(patches.origins):
        buf.add(recon[:, i].reshape(p, p), r, c)
    return Image(np.clip(buf.normalize(), 0.0, 1.0))


def deblur(req: DeblurRequest) -> Image:
    """Restore an HR image from a blurred input using a trained checkpoint."""
    cp = req.checkpoint
    lam = req.lam_infer if req.lam_infer is not None else cp.config.lam
    if not lam > 0:
        raise ValueError("inference lambda must be > 0")
    Dl = derive_lr_dictionary(cp)
    return reconstruct_patches(req.lr_image, Dl, cp.atoms, cp.p, cp.k,
                               req.stride, lam, req.fista_iters, req.fista_tol,
                               req.deterministic)


def naive_baseline(lr: Image, k: int) -> Image:
    """Blurred input centered in the HR frame by edge replication.

    The no-training reference against which deblurred outputs are scored:
    same dims as the HR ground truth, no sharpening.
    """
    half = (k - 1) // 2
    other = (k - 1) - half
    return Image(np.pad(lr.data, ((half, other), (half, other)), mode="edge"))
