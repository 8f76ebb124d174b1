"""Image I/O, narrow convolution, patch extraction and blurred-dataset generation.

All images are single-channel 2D grids of float64 intensities in [0, 1].
Color inputs are reduced to luminance (0.299 R + 0.587 G + 0.114 B) at load
time.  Supported raster formats: PGM (P2 ascii / P5 binary) and PNG (8-bit
grayscale or RGB).

"Narrow" convolution is convolution without zero-padding: the output shrinks
by (k - 1) pixels per axis.  It is implemented in correlation orientation
(no kernel flip); symmetric kernels such as Gaussians are unaffected.
"""

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image as PILImage

LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class ImageFormatError(ValueError):
    """Raised for unreadable, unsupported or malformed raster files."""


@dataclass
class Image:
    """A single-channel image: 2D float64 grid, row-major."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"image data must be 2D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image dimensions must be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image data contains non-finite values")
        self.data = arr

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class PatchSet:
    """A bag of vectorized patches.

    ``columns`` has one row per patch pixel (patch_height * patch_width, in
    row-major raster order) and one column per sample.  ``origins`` records
    (image_id, row, col) per sample when patches came from real images; it is
    None for synthetic or shuffled sets.
    """

    patch_height: int
    patch_width: int
    columns: np.ndarray
    origins: Optional[list] = None

    def __post_init__(self):
        self.columns = np.asarray(self.columns, dtype=np.float64)
        if self.columns.ndim != 2:
            raise ValueError("patch columns must form a 2D matrix")
        if self.columns.shape[0] != self.patch_height * self.patch_width:
            raise ValueError(
                f"row count {self.columns.shape[0]} != patch size "
                f"{self.patch_height}x{self.patch_width}"
            )
        if self.origins is not None and len(self.origins) != self.columns.shape[1]:
            raise ValueError("origins length must match sample count")

    @property
    def n_samples(self) -> int:
        return self.columns.shape[1]

    def patch(self, i: int) -> np.ndarray:
        """The i-th patch as a 2D grid."""
        return devectorize_patch(
            self.columns[:, i], self.patch_height, self.patch_width
        )


@dataclass(frozen=True)
class GaussianKernelSpec:
    """Parameters of an isotropic Gaussian blur kernel."""

    k: int
    sigma: float

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"kernel side must be odd and >= 1, got {self.k}")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")


def vectorize_patch(grid: np.ndarray) -> np.ndarray:
    """Flatten a 2D patch to a vector in row-major raster order."""
    return np.asarray(grid, dtype=np.float64).reshape(-1)


def devectorize_patch(vec: np.ndarray, height: int, width: int) -> np.ndarray:
    """Inverse of :func:`vectorize_patch`."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size != height * width:
        raise ValueError(f"vector length {vec.size} != {height}x{width}")
    return vec.reshape(height, width)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def _rgb_to_luma(arr: np.ndarray) -> np.ndarray:
    r, g, b = LUMA_WEIGHTS
    return r * arr[..., 0] + g * arr[..., 1] + b * arr[..., 2]


def _read_pgm(raw: bytes) -> np.ndarray:
    """Parse a P2/P5 PGM file into a float array in [0, 1]."""
    pos = 0

    def next_token():
        nonlocal pos
        while pos < len(raw):
            if raw[pos:pos + 1].isspace():
                pos += 1
            elif raw[pos:pos + 1] == b"#":
                while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                break
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PGM header")
        return raw[start:pos]

    magic = next_token()
    if magic not in (b"P2", b"P5"):
        raise ImageFormatError(f"not a P2/P5 PGM file (magic {magic!r})")
    try:
        width = int(next_token())
        height = int(next_token())
        maxval = int(next_token())
    except ValueError as exc:
        raise ImageFormatError("malformed PGM header") from exc
    if width < 1 or height < 1:
        raise ImageFormatError("zero-dimension image")
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"invalid PGM maxval {maxval}")

    n = width * height
    if magic == b"P5":
        pos += 1  # single whitespace byte after maxval
        itemsize = 1 if maxval < 256 else 2
        data = raw[pos:pos + n * itemsize]
        if len(data) < n * itemsize:
            raise ImageFormatError("truncated PGM pixel data")
        dtype = np.uint8 if itemsize == 1 else ">u2"
        pixels = np.frombuffer(data, dtype=dtype, count=n).astype(np.float64)
    else:
        try:
            values = [int(next_token()) for _ in range(n)]
        except ImageFormatError as exc:
            raise ImageFormatError("truncated PGM pixel data") from exc
        pixels = np.asarray(values, dtype=np.float64)
    if pixels.min() < 0 or pixels.max() > maxval:
        raise ImageFormatError("PGM sample out of range")
    return (pixels / maxval).reshape(height, width)


def load_image(path) -> Image:
    """Load a PGM or PNG file as a grayscale Image in [0, 1].

    RGB inputs are converted with luminance weights 0.299/0.587/0.114.
    Raises ImageFormatError for unreadable or unsupported files.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ImageFormatError(f"cannot read {path}: {exc}") from exc

    if raw[:2] in (b"P2", b"P5"):
        return Image(_read_pgm(raw))
    if raw[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            with PILImage.open(path) as im:
                im.load()
                mode = im.mode
                arr = np.asarray(im)
        except Exception as exc:
            raise ImageFormatError(f"cannot decode PNG {path}: {exc}") from exc
        if arr.size == 0:
            raise ImageFormatError("zero-dimension image")
        if mode == "L":
            return Image(arr.astype(np.float64) / 255.0)
        if mode == "RGB":
            return Image(_rgb_to_luma(arr.astype(np.float64) / 255.0))
        raise ImageFormatError(f"unsupported PNG mode {mode!r} (need 8-bit L or RGB)")
    raise ImageFormatError(f"unsupported raster format in {path}")


def save_image(img: Image, path) -> None:
    """Write an Image as 8-bit PGM (P5) or PNG, clamping to [0, 1] first."""
    path = Path(path)
    quant = np.rint(np.clip(img.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    suffix = path.suffix.lower()
    if suffix == ".pgm":
        header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
        path.write_bytes(header + quant.tobytes())
    elif suffix == ".png":
        PILImage.fromarray(quant, mode="L").save(path)
    else:
        raise ImageFormatError(f"unsupported output format {suffix!r} (use .pgm or .png)")


# ---------------------------------------------------------------------------
# Convolution and kernels
# ---------------------------------------------------------------------------

def valid_correlate(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlation of a 2D array with a kernel, valid region only.

    out[i, j] = sum_{u, v} kernel[u, v] * arr[i + u, j + v]
    """
    arr = np.asarray(arr, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2:
        raise ValueError("kernel must be 2D")
    kh, kw = kernel.shape
    if kh > arr.shape[0] or kw > arr.shape[1]:
        raise ValueError(
            f"kernel {kernel.shape} larger than image {arr.shape}"
        )
    windows = sliding_window_view(arr, (kh, kw))
    return np.einsum("ijuv,uv->ij", windows, kernel)


def narrow_convolve(img: Image, kernel: np.ndarray) -> Image:
    """Convolve without padding; output is (H-k+1) x (W-k+1).

    Correlation orientation (no kernel flip): symmetric kernels are
    unaffected, directional kernels act as written on the page.
    """
    return Image(valid_correlate(img.data, kernel))


def gaussian_kernel(spec: GaussianKernelSpec) -> np.ndarray:
    """Sampled isotropic Gaussian on the k x k integer grid, normalized to sum 1."""
    half = (spec.k - 1) / 2.0
    coords = np.arange(spec.k, dtype=np.float64) - half
    sq = coords[:, None] ** 2 + coords[None, :] ** 2
    kern = np.exp(-sq / (2.0 * spec.sigma ** 2))
    return kern / kern.sum()


# ---------------------------------------------------------------------------
# Patch extraction
# ---------------------------------------------------------------------------

def extract_patch_pairs(hr: Image, lr: Image, p: int, k: int, n: int, seed: int):
    """Sample n aligned HR/LR patch pairs.

    The HR patch at (r, c) is p x p; its LR partner sits at the same (r, c)
    with side p - k + 1, so that the LR patch is exactly the narrow
    convolution of the HR patch (lr must be the k-blurred version of hr).

    Returns (hr_patches, lr_patches) with matching column order.
    """
    q = p - k + 1
    if q < 1:
        raise ValueError(f"patch side p={p} must be >= kernel side k={k}")
    if lr.height != hr.height - (k - 1) or lr.width != hr.width - (k - 1):
        raise ValueError(
            f"LR dims {lr.data.shape} inconsistent with HR {hr.data.shape} and k={k}"
        )
    if p > min(hr.height, hr.width):
        raise ValueError(f"patch side {p} exceeds HR image {hr.data.shape}")
    if n < 1:
        raise ValueError("need at least one patch")

    rng = np.random.default_rng(seed)
    rows = rng.integers(0, hr.height - p + 1, size=n)
    cols = rng.integers(0, hr.width - p + 1, size=n)

    hr_windows = sliding_window_view(hr.data, (p, p))
    lr_windows = sliding_window_view(lr.data, (q, q))
    hr_cols = hr_windows[rows, cols].reshape(n, p * p).T.copy()
    lr_cols = lr_windows[rows, cols].reshape(n, q * q).T.copy()
    origins = [(0, int(r), int(c)) for r, c in zip(rows, cols)]
    return (
        PatchSet(p, p, hr_cols, origins),
        PatchSet(q, q, lr_cols, origins),
    )


def align_for_kernel(hr: Image, lr: Image, k: int):
    """Center-crop an HR/LR image pair to the geometry an assumed kernel
    side implies (hr dims - lr dims == k - 1).

    Lets one blurred dataset train models for several candidate kernel
    sizes: the over-sized image loses (excess / 2) pixels per border.
    Raises when the size excess is negative-odd/odd (incompatible parity).
    """
    def crop(img: Image, excess_h: int, excess_w: int) -> Image:
        if excess_h == 0 and excess_w == 0:
            return img
        top, left = excess_h // 2, excess_w // 2
        return Image(img.data[top:img.height - (excess_h - top),
                              left:img.width - (excess_w - left)])

    dh = hr.height - lr.height - (k - 1)
    dw = hr.width - lr.width - (k - 1)
    if dh % 2 or dw % 2:
        raise ValueError(
            f"HR/LR dims {hr.data.shape}/{lr.data.shape} cannot be aligned "
            f"for kernel side {k} (odd excess)"
        )
    if dh >= 0 and dw >= 0:
        return crop(hr, dh, dw), lr
    if dh <= 0 and dw <= 0:
        return hr, crop(lr, -dh, -dw)
    raise ValueError("inconsistent HR/LR size excess between axes")


def center_crop_to_common(a: Image, b: Image):
    """Center-crop two images to their common dims (for metric comparison
    across models that assume different kernel sizes)."""
    h = min(a.height, b.height)
    w = min(a.width, b.width)

    def crop(img: Image) -> Image:
        top = (img.height - h) // 2
        left = (img.width - w) // 2
        return Image(img.data[top:top + h, left:left + w])

    return crop(a), crop(b)


def random_patches(img: Image, side: int, n: int, seed: int) -> PatchSet:
    """Sample n patches of the given side uniformly at random (with origins)."""
    if side > min(img.height, img.width):
        raise ValueError(f"patch side {side} exceeds image {img.data.shape}")
    if n < 1:
        raise ValueError("need at least one patch")
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, img.height - side + 1, size=n)
    cols = rng.integers(0, img.width - side + 1, size=n)
    windows = sliding_window_view(img.data, (side, side))
    columns = windows[rows, cols].reshape(n, side * side).T.copy()
    origins = [(0, int(r), int(c)) for r, c in zip(rows, cols)]
    return PatchSet(side, side, columns, origins)


def grid_positions(dim: int, patch: int, stride: int) -> np.ndarray:
    """Start offsets covering [0, dim) with a final patch snapped to the edge."""
    if patch > dim:
        raise ValueError(f"patch side {patch} exceeds dimension {dim}")
    pos = list(range(0, dim - patch + 1, stride))
    if pos[-1] != dim - patch:
        pos.append(dim - patch)
    return np.asarray(pos, dtype=np.intp)


def extract_patches_grid(img: Image, patch: int, stride: int = 1) -> PatchSet:
    """All patches on a regular stride grid (edge-snapped), with origins."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    rows = grid_positions(img.height, patch, stride)
    cols = grid_positions(img.width, patch, stride)
    windows = sliding_window_view(img.data, (patch, patch))
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr = rr.ravel()
    cc = cc.ravel()
    columns = windows[rr, cc].reshape(rr.size, patch * patch).T.copy()
    origins = [(0, int(r), int(c)) for r, c in zip(rr, cc)]
    return PatchSet(patch, patch, columns, origins)


def pool_patch_sets(sets: list) -> PatchSet:
    """Concatenate patch sets from several images, re-tagging image ids."""
    if not sets:
        raise ValueError("no patch sets to pool")
    ph, pw = sets[0].patch_height, sets[0].patch_width
    cols = []
    origins = []
    for img_id, ps in enumerate(sets):
        if (ps.patch_height, ps.patch_width) != (ph, pw):
            raise ValueError("patch sizes differ across sets")
        cols.append(ps.columns)
        if ps.origins is not None:
            origins.extend((img_id, r, c) for (_, r, c) in ps.origins)
    merged_origins = origins if len(origins) == sum(s.n_samples for s in sets) else None
    return PatchSet(ph, pw, np.concatenate(cols, axis=1), merged_origins)


# ---------------------------------------------------------------------------
# Synthetic blurred datasets
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.txt"


def write_manifest(records: list, path) -> None:
    """One key=value block per image, blank-line separated."""
    lines = []
    for rec in records:
        for key in ("source", "output", "k", "sigma", "height", "width"):
            lines.append(f"{key}={rec[key]}")
        lines.append("")
    Path(path).write_text("\n".join(lines), encoding="utf-8")


def read_manifest(path) -> list:
    records = []
    current = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            if current:
                records.append(current)
                current = {}
            continue
        key, _, value = line.partition("=")
        current[key] = value
    if current:
        records.append(current)
    for rec in records:
        rec["k"] = int(rec["k"])
        rec["sigma"] = float(rec["sigma"])
        rec["height"] = int(rec["height"])
        rec["width"] = int(rec["width"])
    return records


def generate_blurred_dataset(inputs: list, spec: GaussianKernelSpec, out_dir) -> list:
    """Blur each input image with the given Gaussian and write a manifest.

    ``inputs`` is a list of file paths.  Outputs keep the source format and
    are named <stem>_blurred<ext>.  Returns the manifest records; the
    manifest itself is written to out_dir/manifest.txt.  Deterministic:
    re-running produces byte-identical files.
    """
    if not inputs:
        raise ValueError("empty input list")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kern = gaussian_kernel(spec)
    records = []
    for src in inputs:
        src = Path(src)
        img = load_image(src)
        blurred = narrow_convolve(img, kern)
        out_path = out_dir / f"{src.stem}_blurred{src.suffix.lower()}"
        save_image(blurred, out_path)
        records.append({
            "source": str(src),
            "output": str(out_path),
            "k": spec.k,
            "sigma": spec.sigma,
            "height": blurred.height,
            "width": blurred.width,
        })
    write_manifest(records, out_dir / MANIFEST_NAME)
    return records
