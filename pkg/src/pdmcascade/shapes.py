"""Shape representation, similarity transforms, and Procrustes alignment.

A shape is an ordered set of n 2D landmarks, handled as a float64 array of
shape (n, 2). The equivalent flat vector (x1, y1, ..., xn, yn) used by the
linear shape model is produced by :func:`as_vector` / :func:`from_vector`.
All functions here are pure; nothing is mutated in place.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from .errors import DegenerateShape

__all__ = [
    "SimilarityTransform",
    "as_vector",
    "from_vector",
    "as_points",
    "validate_shape",
    "apply_transform",
    "procrustes_align_pair",
    "generalized_procrustes",
]


def as_vector(points: np.ndarray) -> np.ndarray:
    """Flatten an (n, 2) point array into the interleaved 2n vector."""
    return np.asarray(points, dtype=float).reshape(-1)


def from_vector(vec: np.ndarray) -> np.ndarray:
    """Reshape an interleaved 2n vector into an (n, 2) point array."""
    return np.asarray(vec, dtype=float).reshape(-1, 2)


def as_points(shape) -> np.ndarray:
    """Coerce any point sequence into a validated (n, 2) float array."""
    pts = np.asarray(shape, dtype=float)
    if pts.ndim == 1:
        pts = pts.reshape(-1, 2)
    validate_shape(pts)
    return pts


def validate_shape(points: np.ndarray) -> None:
    """Check the shape invariants: (n, 2) layout, n >= 3, finite coordinates."""
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValueError(f"expected an (n, 2) point array, got shape {points.shape}")
    if points.shape[0] < 3:
        raise ValueError(f"a shape needs at least 3 landmarks, got {points.shape[0]}")
    if not np.all(np.isfinite(points)):
        raise ValueError("shape contains non-finite coordinates")


@dataclass(frozen=True)
class SimilarityTransform:
    """Global similarity: scaling by s, rotation by theta, then translation.

    A point x maps to ``s * R(theta) x + (tx, ty)`` with R the standard
    counter-clockwise rotation matrix.
    """

    s: float
    theta: float
    tx: float
    ty: float

    def __post_init__(self):
        for name in ("s", "theta", "tx", "ty"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite transform field {name!r}")
        if self.s <= 0:
            raise ValueError(f"scale must be positive, got {self.s}")

    @staticmethod
    def identity() -> "SimilarityTransform":
        return SimilarityTransform(1.0, 0.0, 0.0, 0.0)

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s], [s, c]])

    def inverse(self) -> "SimilarityTransform":
        """Transform that undoes this one (composition gives the identity)."""
        c, s = math.cos(-self.theta), math.sin(-self.theta)
        inv_s = 1.0 / self.s
        tx = -inv_s * (c * self.tx - s * self.ty)
        ty = -inv_s * (s * self.tx + c * self.ty)
        return SimilarityTransform(inv_s, -self.theta, tx, ty)


def apply_transform(transform: SimilarityTransform, points: np.ndarray) -> np.ndarray:
    """Map every landmark through ``s * R(theta) x + t``."""
    pts = np.asarray(points, dtype=float)
    rotated = pts @ transform.rotation().T
    return transform.s * rotated + np.array([transform.tx, transform.ty])


def procrustes_align_pair(src: np.ndarray, dst: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity transform taking ``src`` onto ``dst``.

    Minimizes sum_i ||T(src_i) - dst_i||^2 over scale, rotation and
    translation (closed form).

    Raises:
        DegenerateShape: if all src points coincide (no scale is defined).
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape:
        raise ValueError(f"shape size mismatch: {src.shape} vs {dst.shape}")

    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    u = src - src_mean
    v = dst - dst_mean

    src_norm2 = float(np.sum(u * u))
    if src_norm2 <= 0.0:
        raise DegenerateShape("source shape has zero variance")

    # a = sum <u_i, v_i>, b = sum cross(u_i, v_i); the optimum rotation
    # maximizes a*cos(theta) + b*sin(theta).
    a = float(np.sum(u * v))
    b = float(np.sum(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]))
    theta = math.atan2(b, a)
    s = math.hypot(a, b) / src_norm2
    if s <= 0.0:
        # dst is a single point cloud orthogonal to every rotation of src;
        # fall back to a tiny positive scale to keep the transform valid.
        s = np.finfo(float).tiny

    c, sn = math.cos(theta), math.sin(theta)
    tx = dst_mean[0] - s * (c * src_mean[0] - sn * src_mean[1])
    ty = dst_mean[1] - s * (sn * src_mean[0] + c * src_mean[1])
    return SimilarityTransform(s, theta, tx, ty)


def _canonicalize_mean(points: np.ndarray) -> np.ndarray:
    """Fix the reference-frame gauge of a mean shape.

    Centers the centroid at the origin, scales to unit centered Frobenius
    norm, and rotates the first principal axis of the point cloud onto x by
    the smaller of the two candidate rotations. The axis angle comes from
    the closed-form ellipse-orientation formula, which is a continuous
    function of the points (no eigenvector sign ambiguity), so nearby point
    sets receive nearby gauges; only shapes whose principal axis lies within
    numerical noise of +-90 degrees sit on the remaining branch boundary.
    """
    pts = points - points.mean(axis=0)
    norm = np.linalg.norm(pts)
    if norm <= 0.0:
        raise DegenerateShape("mean shape has zero variance")
    pts = pts / norm

    cov = pts.T @ pts
    angle = 0.5 * math.atan2(2.0 * cov[0, 1], cov[0, 0] - cov[1, 1])
    return apply_transform(SimilarityTransform(1.0, -angle, 0.0, 0.0), pts)


def generalized_procrustes(
    shapes,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Iteratively align a set of shapes to their evolving mean.

    The returned mean is in the canonical reference frame: centered at the
    origin, unit centered norm, first principal axis along x. Each returned
    shape is the input aligned onto that mean.

    Args:
        shapes: sequence of (n, 2) arrays with a common landmark count.
        tol: stop when the mean moves by less than this between iterations.
        max_iter: iteration cap.

    Returns:
        (aligned shapes, mean shape)
    """
    shapes = [as_points(s) for s in shapes]
    if len(shapes) < 2:
        raise ValueError("generalized Procrustes needs at least 2 shapes")
    n = shapes[0].shape[0]
    for s in shapes[1:]:
        if s.shape[0] != n:
            raise ValueError("all shapes must have the same landmark count")

    mean = _canonicalize_mean(shapes[0])
    aligned = list(shapes)
    for _ in range(max_iter):
        aligned = [apply_transform(procrustes_align_pair(s, mean), s) for s in shapes]
        new_mean = _canonicalize_mean(np.mean(aligned, axis=0))
        change = np.linalg.norm(new_mean - mean)
        mean = new_mean
        if change < tol:
            break
    aligned = [apply_transform(procrustes_align_pair(s, mean), s) for s in shapes]
    return aligned, mean
