"""Corpus ingestion and synthetic corpus generation.

Annotations use the plain-text landmark format common to 68-point face
corpora: a version line, a point count, and one ``x y`` pair per line inside
braces. Synthetic corpora are generated from a known shape model and rendered
so the image content genuinely encodes the landmark locations, which makes
desk-scale training and evaluation meaningful without any real footage.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, ParseError
from .features import GrayImage, face_extent
from .pdm import PdmModel, PoseParams, synthesize
from .shapes import _canonicalize_mean, as_vector

log = logging.getLogger(__name__)

__all__ = [
    "Sample",
    "parse_pts",
    "write_pts",
    "load_image",
    "load_dataset",
    "bbox_of_shape",
    "synthetic_face_pdm",
    "gaussian_blob_law",
    "generate_synthetic_corpus",
]

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Sample:
    """One dataset entry: image, ground-truth landmarks, face box, label."""

    image: GrayImage
    gt_shape: np.ndarray
    bbox: tuple[float, float, float, float]
    id: str


def parse_pts(data: bytes | str) -> np.ndarray:
    """Parse landmark annotation text into an (n, 2) array.

    Expected layout: a ``version:`` line, an ``n_points:`` line, ``{``,
    n coordinate lines, ``}``. Trailing whitespace and CRLF line ends are
    tolerated. Any malformation raises ParseError carrying the 1-based line
    number; a partial shape is never returned.
    """
    if isinstance(data, bytes):
        data = data.decode("ascii", errors="replace")
    lines = data.split("\n")

    def stripped(i: int) -> str:
        if i >= len(lines):
            raise ParseError("unexpected end of input", line=len(lines) + 1)
        return lines[i].rstrip("\r \t")

    if not stripped(0).startswith("version:"):
        raise ParseError("expected a 'version:' header", line=1)
    count_line = stripped(1)
    if not count_line.startswith("n_points:"):
        raise ParseError("expected an 'n_points:' header", line=2)
    try:
        n = int(count_line[len("n_points:"):].strip())
    except ValueError:
        raise ParseError("n_points is not an integer", line=2) from None
    if n < 1:
        raise ParseError(f"n_points must be positive, got {n}", line=2)
    if stripped(2) != "{":
        raise ParseError("expected '{'", line=3)

    points = np.empty((n, 2))
    for k in range(n):
        lineno = 4 + k
        text = stripped(lineno - 1)
        if text == "}":
            raise ParseError(f"expected {n} points, found only {k}", line=lineno)
        fields = text.split()
        if len(fields) != 2:
            raise ParseError(f"expected 'x y', got {text!r}", line=lineno)
        try:
            points[k, 0] = float(fields[0])
            points[k, 1] = float(fields[1])
        except ValueError:
            raise ParseError(f"non-numeric coordinate in {text!r}", line=lineno) from None

    closing = 4 + n
    if stripped(closing - 1) != "}":
        raise ParseError("expected '}' after the point list", line=closing)
    for extra in range(closing, len(lines)):
        if lines[extra].strip():
            raise ParseError("unexpected content after '}'", line=extra + 1)
    return points


def write_pts(points: np.ndarray, version: int = 1) -> str:
    """Render landmarks in the annotation format; exact inverse of parse_pts."""
    pts = np.asarray(points, dtype=float)
    body = "\n".join(f"{repr(float(x))} {repr(float(y))}" for x, y in pts)
    return f"version: {version}\nn_points: {pts.shape[0]}\n{{\n{body}\n}}\n"


def load_image(path) -> GrayImage:
    """Read an 8-bit grayscale or 24-bit color raster as a GrayImage.

    Color sources are reduced with the luma combination
    0.299 R + 0.587 G + 0.114 B.
    """
    from PIL import Image

    with Image.open(path) as handle:
        if handle.mode == "L":
            return GrayImage(np.asarray(handle, dtype=float))
        rgb = np.asarray(handle.convert("RGB"), dtype=float)
    return GrayImage(rgb @ LUMA_WEIGHTS)


def bbox_of_shape(points: np.ndarray, margin: float = 0.05) -> tuple[float, float, float, float]:
    """Axis-aligned box of a shape, expanded by ``margin`` on every side."""
    pts = np.asarray(points, dtype=float)
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = hi - lo
    return (
        float(lo[0] - margin * extent[0]),
        float(lo[1] - margin * extent[1]),
        float(extent[0] * (1 + 2 * margin)),
        float(extent[1] * (1 + 2 * margin)),
    )


def load_dataset(directory, pattern: str = "*.png", margin: float = 0.05) -> list[Sample]:
    """Pair image files with same-stem ``.pts`` annotations.

    Images without an annotation are skipped with a warning. Face boxes are
    derived from the ground-truth shape expanded by ``margin`` (detector
    boxes are not required).

    Raises:
        EmptyDataset: when no valid pair is found.
    """
    directory = Path(directory)
    samples = []
    for img_path in sorted(directory.glob(pattern)):
        pts_path = img_path.with_suffix(".pts")
        if not pts_path.exists():
            log.warning("skipping %s: no annotation %s", img_path.name, pts_path.name)
            continue
        shape = parse_pts(pts_path.read_bytes())
        samples.append(
            Sample(
                image=load_image(img_path),
                gt_shape=shape,
                bbox=bbox_of_shape(shape, margin),
                id=img_path.stem,
            )
        )
    if not samples:
        raise EmptyDataset(f"no (image, annotation) pairs under {directory} for {pattern!r}")
    return samples


# ---------------------------------------------------------------------------
# Synthetic corpora


def _face_template(n: int) -> np.ndarray:
    """Fixed face-like landmark layout (image y grows downward).

    For n = 68 this follows the usual markup order (jaw, brows, nose, eyes,
    mouth) with the outer eye corners at indices 36 and 45. Other landmark
    counts use a generic layout with the eyes at indices 0 and 1.
    """
    if n == 68:
        pts = []
        alpha = np.linspace(np.pi, 2 * np.pi, 17)
        pts.extend(zip(0.47 * np.cos(alpha), -0.57 * np.sin(alpha)))  # jaw
        for side in (-1.0, 1.0):  # brows
            xs = side * np.linspace(0.35, 0.10, 5)
            ys = -0.26 - 0.035 * np.sin(np.linspace(0, np.pi, 5))
            pts.extend(zip(xs, ys))
        pts.extend(zip(np.full(4, 0.0), np.linspace(-0.17, 0.10, 4)))  # nose bridge
        pts.extend(zip(np.linspace(-0.09, 0.09, 5), np.full(5, 0.155)))  # nostrils
        for cx in (-0.22, 0.22):  # eyes: hexagon, outer corner first on the left eye
            hexa = [(-0.07, 0.0), (-0.035, -0.03), (0.035, -0.03), (0.07, 0.0), (0.035, 0.03), (-0.035, 0.03)]
            if cx > 0:
                hexa = [(-x, y) for x, y in hexa]  # inner corner first on the right eye
            pts.extend((cx + dx, -0.12 + dy) for dx, dy in hexa)
        outer = np.linspace(0, 2 * np.pi, 12, endpoint=False)
        pts.extend(zip(0.16 * np.cos(outer), 0.33 + 0.075 * np.sin(outer)))  # outer lips
        inner = np.linspace(0, 2 * np.pi, 8, endpoint=False)
        pts.extend(zip(0.10 * np.cos(inner), 0.33 + 0.03 * np.sin(inner)))  # inner lips
        template = np.array(pts)
        # Keep the horizontal variance dominant: the reference-frame gauge
        # aligns the principal axis to x and must not sit on its branch point.
        template[:, 0] *= 1.25
        template[:, 1] *= 0.85
    else:
        if n < 6:
            raise ValueError("synthetic faces need at least 6 landmarks")
        head = np.array(
            [(-0.25, -0.10), (0.25, -0.10), (0.0, 0.08), (-0.15, 0.25), (0.15, 0.25)]
        )
        t = np.linspace(0.0, 1.0, n - 5)
        jaw = np.stack(
            [0.5 * np.cos(np.pi * (1 - t)), 0.18 + 0.38 * np.sin(np.pi * t) + 0.03 * np.sin(3 * np.pi * t)],
            axis=1,
        )
        template = np.vstack([head, jaw])
    template -= template.mean(axis=0)
    return template / np.linalg.norm(template)


def _similarity_tangent(mean_vec: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the similarity directions at the mean shape."""
    n = mean_vec.shape[0] // 2
    pts = mean_vec.reshape(n, 2)
    rot = np.stack([-pts[:, 1], pts[:, 0]], axis=1).reshape(-1)
    tx = np.tile([1.0, 0.0], n)
    ty = np.tile([0.0, 1.0], n)
    basis, _ = np.linalg.qr(np.stack([mean_vec, rot, tx, ty], axis=1))
    return basis


def synthetic_face_pdm(
    n_landmarks: int = 68,
    n_modes: int = 5,
    seed: int = 0,
    mode_sd: float = 0.04,
) -> PdmModel:
    """Ground-truth shape model for desk-scale experiments.

    Deformation modes are smooth polynomial fields over the template made
    orthogonal to the similarity directions (so Procrustes alignment cannot
    absorb them) and to each other. Mode standard deviations decay
    geometrically from ``mode_sd``.
    """
    rng = np.random.default_rng(seed)
    template = _canonicalize_mean(_face_template(n_landmarks))
    mean_vec = as_vector(template)
    tangent = _similarity_tangent(mean_vec)

    x, y = template[:, 0], template[:, 1]
    poly = np.stack([x, y, x * y, x**2, y**2, x**3, y**3, x**2 * y, x * y**2], axis=1)
    fields = np.zeros((2 * n_landmarks, n_modes))
    for j in range(n_modes):
        coeff = rng.standard_normal((poly.shape[1], 2))
        fields[:, j] = (poly @ coeff).reshape(-1)
    fields -= tangent @ (tangent.T @ fields)
    basis, _ = np.linalg.qr(fields)

    sd = mode_sd * 0.7 ** np.arange(n_modes)
    return PdmModel(
        n=n_landmarks,
        m=n_modes,
        mean_shape=mean_vec,
        basis=basis,
        eigenvalues=sd**2,
        variance_fraction=1.0,
    )


def gaussian_blob_law(points: np.ndarray, width: int, height: int) -> GrayImage:
    """Default synthetic renderer: one Gaussian intensity blob per landmark.

    Blob widths scale with the face extent and amplitudes vary
    deterministically with the landmark index, so local appearance both
    locates a landmark and identifies it.
    """
    pts = np.asarray(points, dtype=float)
    sigma = 0.045 * face_extent(pts)
    amplitude = 150.0 + 100.0 * (0.5 + 0.5 * np.sin(2.4 * np.arange(pts.shape[0])))

    xs = np.arange(width, dtype=float)
    ys = np.arange(height, dtype=float)
    dx = xs[None, :, None] - pts[None, None, :, 0]
    dy = ys[:, None, None] - pts[None, None, :, 1]
    field = np.einsum("hwn,n->hw", np.exp(-(dx**2 + dy**2) / (2 * sigma**2)), amplitude)
    return GrayImage(np.clip(field, 0.0, 255.0))


def generate_synthetic_corpus(
    pdm_truth: PdmModel,
    count: int,
    noise_sigma: float = 0.0,
    image_law=None,
    seed: int = 0,
    image_size: int = 96,
    face_fraction: tuple[float, float] = (0.5, 0.7),
    rotation_range: float = 0.15,
    center_jitter: float = 0.06,
    margin: float = 0.05,
) -> list[Sample]:
    """Sample a fully reproducible synthetic corpus from a truth model.

    Mode coefficients are drawn from the model's Gaussian prior (variance
    lambda_j per mode), poses are random similarities placing the face inside
    the image, and images are rendered by ``image_law`` (default: Gaussian
    blobs). Stored ground truth is the synthesized shape plus isotropic
    coordinate noise of scale ``noise_sigma``.
    """
    if count < 2:
        raise ValueError("a corpus needs at least 2 samples")
    if image_law is None:
        image_law = gaussian_blob_law
    rng = np.random.default_rng(seed)
    span = pdm_truth.reference_span()

    samples = []
    for i in range(count):
        q = rng.standard_normal(pdm_truth.m) * np.sqrt(pdm_truth.eigenvalues)
        scale = rng.uniform(*face_fraction) * image_size / span
        theta = rng.uniform(-rotation_range, rotation_range)
        cx, cy = image_size / 2 + rng.uniform(-center_jitter, center_jitter, 2) * image_size
        pose = PoseParams(scale, theta, cx, cy, q)
        true_pts = synthesize(pdm_truth, pose)
        gt = true_pts + rng.normal(0.0, noise_sigma, size=true_pts.shape) if noise_sigma > 0 else true_pts
        samples.append(
            Sample(
                image=image_law(true_pts, image_size, image_size),
                gt_shape=gt,
                bbox=bbox_of_shape(gt, margin),
                id=f"synth-{i:05d}",
            )
        )
    return samples
