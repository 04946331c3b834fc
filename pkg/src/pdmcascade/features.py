"""Shape-indexed image features: HOG patches and pixel-difference probes.

Both feature families sample the image at locations defined by the current
shape estimate, scaled so descriptors are comparable across face sizes.
Extraction is pure and deterministic: the pixel-difference probe offsets are
sampled once (seeded) when a model is trained and reused verbatim afterward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch

__all__ = [
    "GrayImage",
    "HogConfig",
    "PixelDiffConfig",
    "extract_hog_patch",
    "hog_descriptors",
    "extract_pixel_diff",
    "pixel_diff_features",
    "assemble_stage_features",
    "assembled_length",
    "hog_length",
    "face_extent",
    "HOG_WINDOW_FRACTION",
]

# Fraction of the face extent covered by a HOG patch at local_scale 1 * patch
# pixels; chosen so a 32 px patch is sampled at native resolution on a 200 px
# face.
HOG_WINDOW_FRACTION = 0.16


@dataclass(frozen=True)
class GrayImage:
    """Single-channel raster with float64 intensities in [0, 255]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float)
        if px.ndim != 2:
            raise ValueError(f"expected a 2D intensity array, got shape {px.shape}")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class HogConfig:
    """Histogram-of-oriented-gradients layout for one landmark patch."""

    patch_size: int = 32
    cell_size: int = 8
    orientation_bins: int = 9
    signed: bool = False

    def __post_init__(self):
        if self.patch_size % 2 or self.patch_size <= 0:
            raise ValueError("patch_size must be a positive even number")
        if self.patch_size % self.cell_size:
            raise ValueError("patch_size must be divisible by cell_size")
        if self.orientation_bins < 2:
            raise ValueError("need at least 2 orientation bins")


def hog_length(cfg: HogConfig) -> int:
    cells = (cfg.patch_size // cfg.cell_size) ** 2
    return cells * cfg.orientation_bins


@dataclass(frozen=True)
class PixelDiffConfig:
    """Seeded pixel-pair probes around each landmark.

    Attributes:
        pairs_per_landmark: probes per landmark.
        radius: probe radius as a fraction of the face extent.
        offsets: (n, pairs, 2, 2) array of point pairs in face-size units,
            fixed at training time and reused verbatim at fitting time.
    """

    pairs_per_landmark: int
    radius: float
    offsets: np.ndarray

    def __post_init__(self):
        offs = np.asarray(self.offsets, dtype=float)
        if offs.ndim != 4 or offs.shape[1:] != (self.pairs_per_landmark, 2, 2):
            raise ValueError(f"offsets must be (n, {self.pairs_per_landmark}, 2, 2), got {offs.shape}")
        if np.any(np.linalg.norm(offs, axis=-1) > self.radius + 1e-12):
            raise ValueError("probe offsets exceed the configured radius")
        object.__setattr__(self, "offsets", offs)

    @staticmethod
    def sample(
        n_landmarks: int,
        pairs_per_landmark: int,
        radius: float,
        rng: np.random.Generator,
    ) -> "PixelDiffConfig":
        """Draw per-landmark probe pairs uniformly inside the radius disc."""
        r = radius * np.sqrt(rng.uniform(size=(n_landmarks, pairs_per_landmark, 2)))
        phi = rng.uniform(0.0, 2.0 * np.pi, size=(n_landmarks, pairs_per_landmark, 2))
        offsets = np.stack([r * np.cos(phi), r * np.sin(phi)], axis=-1)
        return PixelDiffConfig(pairs_per_landmark, radius, offsets)


def face_extent(points: np.ndarray) -> float:
    """Face size proxy: larger bounding-box extent of the shape, floored at 1."""
    pts = np.asarray(points, dtype=float)
    extent = pts.max(axis=0) - pts.min(axis=0)
    return float(max(extent.max(), 1.0))


def _sample_bilinear(pixels: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Bilinear lookup at (x, y) positions; out-of-image reads clamp to the edge."""
    h, w = pixels.shape
    x = np.clip(coords[..., 0], 0.0, w - 1.0)
    y = np.clip(coords[..., 1], 0.0, h - 1.0)
    x0 = np.minimum(x.astype(np.intp), w - 2) if w > 1 else np.zeros_like(x, dtype=np.intp)
    y0 = np.minimum(y.astype(np.intp), h - 2) if h > 1 else np.zeros_like(y, dtype=np.intp)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = pixels[y0, x0] * (1.0 - fx) + pixels[y0, x1] * fx
    bottom = pixels[y1, x0] * (1.0 - fx) + pixels[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def _sample_nearest(pixels: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Nearest-neighbor lookup with edge clamping."""
    h, w = pixels.shape
    x = np.clip(np.rint(coords[..., 0]).astype(np.intp), 0, w - 1)
    y = np.clip(np.rint(coords[..., 1]).astype(np.intp), 0, h - 1)
    return pixels[y, x]


def _hog_descriptors_numpy(
    img: GrayImage,
    centers: np.ndarray,
    local_scale: float,
    cfg: HogConfig,
) -> np.ndarray:
    """Vectorized reference implementation of :func:`hog_descriptors`."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    p = cfg.patch_size
    offs = (np.arange(p) - (p - 1) / 2.0) * local_scale
    xs = centers[:, 0, None, None] + offs[None, None, :]
    ys = centers[:, 1, None, None] + offs[None, :, None]
    xs, ys = np.broadcast_arrays(xs, ys)
    patches = _sample_bilinear(img.pixels, np.stack([xs, ys], axis=-1))

    gy, gx = np.gradient(patches, axis=(1, 2))
    mag = np.sqrt(gx * gx + gy * gy)
    period = 2.0 * np.pi if cfg.signed else np.pi
    ang = np.arctan2(gy, gx) % period

    bins = cfg.orientation_bins
    binf = ang * (bins / period)
    b0 = np.floor(binf).astype(np.intp) % bins
    w1 = binf - np.floor(binf)
    b1 = (b0 + 1) % bins

    ncell = p // cfg.cell_size
    cell_rows = np.arange(p) // cfg.cell_size
    cell_id = (cell_rows[:, None] * ncell + cell_rows[None, :]).astype(np.intp)
    base = (
        np.arange(centers.shape[0], dtype=np.intp)[:, None, None] * (ncell * ncell)
        + cell_id[None, :, :]
    ) * bins

    length = centers.shape[0] * ncell * ncell * bins
    hist = np.bincount(
        (base + b0).ravel(), weights=(mag * (1.0 - w1)).ravel(), minlength=length
    )
    hist += np.bincount((base + b1).ravel(), weights=(mag * w1).ravel(), minlength=length)
    hist = hist.reshape(centers.shape[0], -1)

    norms = np.linalg.norm(hist, axis=1, keepdims=True)
    np.divide(hist, norms, out=hist, where=norms > 0)
    return hist


try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

if _numba is not None:

    @_numba.njit(cache=True)
    def _hog_kernel(pixels, cx, cy, offs, cell_size, bins, period):  # pragma: no cover
        n_centers = cx.shape[0]
        p = offs.shape[0]
        ncell = p // cell_size
        h, w = pixels.shape
        out = np.zeros((n_centers, ncell * ncell * bins))
        patch = np.empty((p, p))
        scale = bins / period

        for l in range(n_centers):
            for r in range(p):
                y = cy[l] + offs[r]
                if y < 0.0:
                    y = 0.0
                elif y > h - 1.0:
                    y = h - 1.0
                iy = int(y)
                if iy > h - 2:
                    iy = h - 2 if h > 1 else 0
                fy = y - iy
                y1 = iy + 1 if iy + 1 < h else h - 1
                for c in range(p):
                    x = cx[l] + offs[c]
                    if x < 0.0:
                        x = 0.0
                    elif x > w - 1.0:
                        x = w - 1.0
                    ix = int(x)
                    if ix > w - 2:
                        ix = w - 2 if w > 1 else 0
                    fx = x - ix
                    x1 = ix + 1 if ix + 1 < w else w - 1
                    top = pixels[iy, ix] * (1.0 - fx) + pixels[iy, x1] * fx
                    bottom = pixels[y1, ix] * (1.0 - fx) + pixels[y1, x1] * fx
                    patch[r, c] = top * (1.0 - fy) + bottom * fy

            for r in range(p):
                r_lo = r - 1 if r > 0 else 0
                r_hi = r + 1 if r < p - 1 else p - 1
                dy = 0.5 if 0 < r < p - 1 else 1.0
                cell_row = (r // cell_size) * ncell
                for c in range(p):
                    c_lo = c - 1 if c > 0 else 0
                    c_hi = c + 1 if c < p - 1 else p - 1
                    dx = 0.5 if 0 < c < p - 1 else 1.0
                    gx = (patch[r, c_hi] - patch[r, c_lo]) * dx
                    gy = (patch[r_hi, c] - patch[r_lo, c]) * dy
                    mag = np.sqrt(gx * gx + gy * gy)
                    ang = np.arctan2(gy, gx) % period
                    binf = ang * scale
                    b0 = int(binf)
                    w1 = binf - b0
                    if b0 >= bins:
                        b0 = 0
                        w1 = 0.0
                    b1 = b0 + 1
                    if b1 == bins:
                        b1 = 0
                    cell = (cell_row + c // cell_size) * bins
                    out[l, cell + b0] += mag * (1.0 - w1)
                    out[l, cell + b1] += mag * w1

            norm = 0.0
            for k in range(out.shape[1]):
                norm += out[l, k] * out[l, k]
            if norm > 0.0:
                norm = 1.0 / np.sqrt(norm)
                for k in range(out.shape[1]):
                    out[l, k] *= norm
        return out


def hog_descriptors(
    img: GrayImage,
    centers: np.ndarray,
    local_scale: float,
    cfg: HogConfig,
) -> np.ndarray:
    """HOG descriptors for a batch of patch centers.

    Each patch is a patch_size x patch_size grid of bilinear samples spaced
    ``local_scale`` pixels apart, centered on its landmark; out-of-image
    samples clamp to the nearest edge pixel. Gradients are central
    differences on the sampled grid (one-sided at patch borders); votes are
    magnitude-weighted and split linearly between the two nearest
    orientation bins; the concatenated cell histograms are L2-normalized per
    patch (an all-zero gradient field gives the zero vector).

    Runs through a compiled kernel when numba is available; the numpy
    fallback computes the same quantities.

    Returns:
        (len(centers), hog_length(cfg)) array.
    """
    if _numba is None:
        return _hog_descriptors_numpy(img, centers, local_scale, cfg)
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    p = cfg.patch_size
    offs = (np.arange(p) - (p - 1) / 2.0) * local_scale
    period = 2.0 * np.pi if cfg.signed else np.pi
    return _hog_kernel(
        img.pixels,
        np.ascontiguousarray(centers[:, 0]),
        np.ascontiguousarray(centers[:, 1]),
        offs,
        cfg.cell_size,
        cfg.orientation_bins,
        period,
    )


def extract_hog_patch(
    img: GrayImage,
    center: np.ndarray,
    local_scale: float,
    cfg: HogConfig,
) -> np.ndarray:
    """HOG descriptor of the single patch centered at ``center``."""
    return hog_descriptors(img, np.asarray(center, dtype=float).reshape(1, 2), local_scale, cfg)[0]


def pixel_diff_features(
    img: GrayImage,
    shape: np.ndarray,
    face_scale: float,
    cfg: PixelDiffConfig,
) -> np.ndarray:
    """Pixel-difference probes for every landmark at once.

    Probe positions are ``landmark + face_scale * offset``; intensities are
    read nearest-neighbor with edge clamping and differenced, scaled to
    [-1, 1] by the 8-bit range.

    Returns:
        (n, pairs_per_landmark) array.
    """
    pts = np.asarray(shape, dtype=float)
    if pts.shape[0] != cfg.offsets.shape[0]:
        raise DimensionMismatch(
            f"config holds offsets for {cfg.offsets.shape[0]} landmarks, shape has {pts.shape[0]}"
        )
    coords = pts[:, None, None, :] + face_scale * cfg.offsets
    values = _sample_nearest(img.pixels, coords)
    return (values[:, :, 0] - values[:, :, 1]) / 255.0


def extract_pixel_diff(
    img: GrayImage,
    shape: np.ndarray,
    landmark_index: int,
    face_scale: float,
    cfg: PixelDiffConfig,
) -> np.ndarray:
    """Pixel-difference feature vector for one landmark."""
    pts = np.asarray(shape, dtype=float)
    if not 0 <= landmark_index < pts.shape[0]:
        raise IndexError(f"landmark index {landmark_index} out of range")
    coords = pts[landmark_index] + face_scale * cfg.offsets[landmark_index]
    values = _sample_nearest(img.pixels, coords)
    return (values[:, 0] - values[:, 1]) / 255.0


def _whitened_q(q_prev: np.ndarray, eigenvalues: np.ndarray) -> np.ndarray:
    q_prev = np.asarray(q_prev, dtype=float)
    if q_prev.shape != eigenvalues.shape:
        raise DimensionMismatch(
            f"expected {eigenvalues.shape[0]} mode coefficients, got {q_prev.shape[0]}"
        )
    return q_prev / np.sqrt(eigenvalues)


def assemble_stage_features(
    img: GrayImage,
    shape: np.ndarray,
    q_prev: np.ndarray,
    config: HogConfig | PixelDiffConfig,
    eigenvalues: np.ndarray,
    face_px: float | None = None,
    use_q: bool = True,
    hog_window: float = HOG_WINDOW_FRACTION,
) -> np.ndarray:
    """Full stage feature vector for one sample.

    Concatenates the per-landmark descriptors in landmark order, then the
    previous-stage mode coefficients whitened to unit prior variance (omitted
    when ``use_q`` is off), then a constant bias entry. The length depends
    only on (n, m, config), never on image content.
    """
    pts = np.asarray(shape, dtype=float)
    if face_px is None:
        face_px = face_extent(pts)

    if isinstance(config, HogConfig):
        local_scale = face_px * hog_window / config.patch_size
        per_landmark = hog_descriptors(img, pts, local_scale, config)
    else:
        per_landmark = pixel_diff_features(img, pts, face_px, config)

    parts = [per_landmark.reshape(-1)]
    if use_q:
        parts.append(_whitened_q(q_prev, np.asarray(eigenvalues, dtype=float)))
    parts.append(np.ones(1))
    return np.concatenate(parts)


def assembled_length(config: HogConfig | PixelDiffConfig, n: int, m: int, use_q: bool = True) -> int:
    """Feature-vector length for a stage: pure function of the configuration."""
    if isinstance(config, HogConfig):
        per = hog_length(config)
    else:
        per = config.pairs_per_landmark
    return n * per + (m if use_q else 0) + 1
