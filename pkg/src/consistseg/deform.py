"""Dense elastic deformation fields: sampling, inversion, composition,
and application to images, label maps and coordinate grids.

A field stores per-pixel displacements (dx, dy) in pixel units with
pull-back semantics: the warped output at pixel (i, j) reads the input at
location (i + dy[i, j], j + dx[i, j]).  Out-of-bounds reads clamp to the
border.  Fields are sampled as per-pixel uniform noise smoothed by a
Gaussian (reflective borders, truncated at 4 sigma), which yields smooth
near-invertible displacements when the amplitude is small relative to
sigma.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter


class FieldError(ValueError):
    pass


class InversionError(RuntimeError):
    """Fixed-point inversion failed to converge; carries the residual."""

    def __init__(self, residual: float, iters: int):
        super().__init__(f"field inversion did not converge in {iters} iterations "
                         f"(max residual {residual:.4g} px)")
        self.residual = residual
        self.iters = iters


@dataclass
class DeformationField:
    """Per-pixel displacement maps, pixel units, pull-back semantics."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        self.dx = np.asarray(self.dx, dtype=np.float64)
        self.dy = np.asarray(self.dy, dtype=np.float64)
        if self.dx.shape != self.dy.shape or self.dx.ndim != 2:
            raise FieldError(f"dx/dy shapes {self.dx.shape} vs {self.dy.shape} invalid")
        if not (np.isfinite(self.dx).all() and np.isfinite(self.dy).all()):
            raise FieldError("displacements must be finite")

    @property
    def height(self) -> int:
        return self.dx.shape[0]

    @property
    def width(self) -> int:
        return self.dx.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape

    def max_abs(self) -> float:
        return float(max(np.abs(self.dx).max(), np.abs(self.dy).max(), 0.0))


def zero_field(height: int, width: int) -> DeformationField:
    return DeformationField(np.zeros((height, width)), np.zeros((height, width)))


@dataclass
class DeformParams:
    """Sampling parameters for the transformation distribution."""

    width: int = 64
    height: int = 64
    amplitude: float = 125.0
    sigma: float = 12.5
    elastic_prob: float = 0.5
    invert_iters: int = 25
    invert_tol: float = 1e-3
    max_redraws: int = 5

    @classmethod
    def for_size(cls, n: int, **kwargs) -> "DeformParams":
        """Scale the reference parameters (amplitude 1000, sigma 100 at
        512 px) to an n x n image, preserving the post-smoothing RMS
        displacement in pixels (about 1.6 px per axis)."""
        return cls(width=n, height=n, amplitude=1000.0 * n / 512.0,
                   sigma=100.0 * n / 512.0, **kwargs)


def sample_field(width: int, height: int, amplitude: float, sigma: float,
                 rng: np.random.Generator) -> DeformationField:
    """Per-pixel displacements ~ U(-amplitude, amplitude), smoothed with a
    Gaussian of std `sigma` (truncate 4 sigma, reflective borders)."""
    if width <= 0 or height <= 0:
        raise FieldError(f"field dimensions must be positive, got {width}x{height}")
    if amplitude < 0 or sigma <= 0:
        raise FieldError(f"need amplitude >= 0 and sigma > 0, got {amplitude}, {sigma}")
    dx = rng.uniform(-amplitude, amplitude, size=(height, width))
    dy = rng.uniform(-amplitude, amplitude, size=(height, width))
    dx = gaussian_filter(dx, sigma=sigma, mode="reflect", truncate=4.0)
    dy = gaussian_filter(dy, sigma=sigma, mode="reflect", truncate=4.0)
    return DeformationField(dx, dy)


def smoothed_uniform_rms(amplitude: float, sigma: float) -> float:
    """Predicted per-axis RMS of a smoothed-uniform field: a / (2*sigma*sqrt(3*pi))."""
    return amplitude / (2.0 * sigma * np.sqrt(3.0 * np.pi))


# -- sampling the field's maps at fractional positions ---------------------

def _bilinear_sample(m: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear sample of map `m` at (ys, xs), coordinates clamped to the border."""
    h, w = m.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.clip(np.floor(ys).astype(np.intp), 0, h - 2) if h > 1 else np.zeros_like(ys, np.intp)
    x0 = np.clip(np.floor(xs).astype(np.intp), 0, w - 2) if w > 1 else np.zeros_like(xs, np.intp)
    ty = ys - y0
    tx = xs - x0
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    return ((1 - ty) * (1 - tx) * m[y0, x0] + (1 - ty) * tx * m[y0, x1]
            + ty * (1 - tx) * m[y1, x0] + ty * tx * m[y1, x1])


def _grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    ii, jj = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    return ii, jj


def invert_field(f: DeformationField, iters: int = 25, tol: float = 1e-3) -> DeformationField:
    """Fixed-point inversion g(p) = -f(p + g(p)) with bilinear sampling.

    Raises InversionError if the max update is still above `tol` after
    `iters` iterations.
    """
    ii, jj = _grid(f.height, f.width)
    gx = np.zeros_like(f.dx)
    gy = np.zeros_like(f.dy)
    update = np.inf
    for _ in range(iters):
        nx = -_bilinear_sample(f.dx, ii + gy, jj + gx)
        ny = -_bilinear_sample(f.dy, ii + gy, jj + gx)
        update = float(max(np.abs(nx - gx).max(), np.abs(ny - gy).max()))
        gx, gy = nx, ny
        if update < tol:
            return DeformationField(gx, gy)
    raise InversionError(update, iters)


def compose_fields(a: DeformationField, b: DeformationField) -> DeformationField:
    """c(p) = a(p) + b(p + a(p)), bilinear sampling of b's maps.

    Warping an image by c equals warping by b first, then by a (pull-back
    semantics: the last-applied warp contributes its displacement at p).
    """
    if a.shape != b.shape:
        raise FieldError(f"compose: field shapes {a.shape} and {b.shape} differ")
    ii, jj = _grid(a.height, a.width)
    cx = a.dx + _bilinear_sample(b.dx, ii + a.dy, jj + a.dx)
    cy = a.dy + _bilinear_sample(b.dy, ii + a.dy, jj + a.dx)
    return DeformationField(cx, cy)


# -- applying fields -------------------------------------------------------

def _catmull_rom_weights(t: np.ndarray) -> tuple[np.ndarray, ...]:
    t2 = t * t
    t3 = t2 * t
    return (
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    )


def apply_to_image(f: DeformationField | None, img: np.ndarray) -> np.ndarray:
    """Warp an intensity image with bicubic (Catmull-Rom) interpolation.

    `f` is None for the identity transform. Reads clamp to the border.
    """
    img = np.asarray(img, dtype=np.float64)
    if f is None:
        return img.copy()
    if img.shape != f.shape:
        raise FieldError(f"image shape {img.shape} != field shape {f.shape}")
    h, w = img.shape
    ii, jj = _grid(h, w)
    ys = np.clip(ii + f.dy, 0.0, h - 1.0)
    xs = np.clip(jj + f.dx, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    ty = ys - y0
    tx = xs - x0
    wy = _catmull_rom_weights(ty)
    wx = _catmull_rom_weights(tx)
    out = np.zeros_like(img)
    for a in range(4):
        yi = np.clip(y0 + (a - 1), 0, h - 1)
        row = np.zeros_like(img)
        for b in range(4):
            xi = np.clip(x0 + (b - 1), 0, w - 1)
            row += wx[b] * img[yi, xi]
        out += wy[a] * row
    return out


def apply_to_labels(f: DeformationField | None, labelmap: np.ndarray) -> np.ndarray:
    """Warp an integer label map with nearest-neighbour interpolation."""
    labelmap = np.asarray(labelmap)
    if f is None:
        return labelmap.copy()
    if labelmap.shape != f.shape:
        raise FieldError(f"labelmap shape {labelmap.shape} != field shape {f.shape}")
    si, sj = source_indices(f)
    return labelmap[si, sj]


def source_indices(f: DeformationField) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour source pixel (row, col) for every output pixel."""
    ii, jj = _grid(f.height, f.width)
    si = np.clip(np.rint(ii + f.dy), 0, f.height - 1).astype(np.intp)
    sj = np.clip(np.rint(jj + f.dx), 0, f.width - 1).astype(np.intp)
    return si, sj


# -- the transformation distribution ---------------------------------------

@dataclass
class TransformPair:
    """One draw from the transformation distribution: identity or elastic.

    For elastic draws the same field acts on the image and the labels
    (t_in = t_out), and the inverse is precomputed so warp contexts can be
    assembled without redrawing.
    """

    kind: str  # "identity" | "elastic"
    field: DeformationField | None = None
    inverse: DeformationField | None = None

    @property
    def is_identity(self) -> bool:
        return self.kind == "identity"


#: Counter of fields redrawn because fixed-point inversion failed.
REDRAW_COUNT = {"count": 0}


def sample_transform_pair(params: DeformParams, rng: np.random.Generator) -> TransformPair:
    """Identity with probability 1 - elastic_prob, else a fresh elastic field.

    Non-invertible fields are redrawn (counted in REDRAW_COUNT); running
    out of redraws raises InversionError.
    """
    if rng.random() >= params.elastic_prob:
        return TransformPair("identity")
    last: InversionError | None = None
    for _ in range(params.max_redraws):
        f = sample_field(params.width, params.height, params.amplitude, params.sigma, rng)
        try:
            inv = invert_field(f, params.invert_iters, params.invert_tol)
        except InversionError as exc:
            REDRAW_COUNT["count"] += 1
            last = exc
            continue
        return TransformPair("elastic", field=f, inverse=inv)
    raise last  # type: ignore[misc]


# -- serialization (test fixtures) -----------------------------------------

FIELD_MAGIC = b"WCF1"


def save_field(path, f: DeformationField) -> None:
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<2I", f.width, f.height))
        fh.write(f.dx.astype("<f8").tobytes())
        fh.write(f.dy.astype("<f8").tobytes())


def load_field(path) -> DeformationField:
    with open(path, "rb") as fh:
        if fh.read(4) != FIELD_MAGIC:
            raise ValueError(f"{path}: bad field magic")
        width, height = struct.unpack("<2I", fh.read(8))
        n = width * height
        dx = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(height, width)
        dy = np.frombuffer(fh.read(8 * n), dtype="<f8").reshape(height, width)
    return DeformationField(dx.copy(), dy.copy())
