"""Point distribution model: training, synthesis, pose fitting, and the
regularized Gauss-Newton parameter update.

The model expresses a shape as a similarity transform of the mean plus a
linear combination of deformation modes:

    X_i = s * R(theta) * (mean_i + Phi_i q) + t

with pose p = (s, theta, tx, ty, q). The four rigid entries are never
penalized; each non-rigid coefficient q_j carries a Gaussian prior with
variance lambda_j (the PCA eigenvalue of its mode).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
import math

import numpy as np

from .errors import (
    DimensionMismatch,
    InsufficientData,
    RankDeficient,
    SingularHessian,
)
from .shapes import (
    SimilarityTransform,
    apply_transform,
    as_vector,
    from_vector,
    procrustes_align_pair,
)

__all__ = [
    "PdmModel",
    "PoseParams",
    "Regularizer",
    "train_pdm",
    "synthesize",
    "fit_pose",
    "jacobian",
    "gauss_newton_update",
    "prior_log_density",
]

# Hessians with a larger condition number than this are treated as singular.
CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class PdmModel:
    """Trained linear shape model.

    Attributes:
        n: landmark count.
        m: retained mode count.
        mean_shape: flat 2n vector in the canonical reference frame.
        basis: 2n x m matrix with orthonormal columns.
        eigenvalues: per-mode variances, strictly positive, non-increasing.
        variance_fraction: retained-energy target used at training time.
    """

    n: int
    m: int
    mean_shape: np.ndarray
    basis: np.ndarray
    eigenvalues: np.ndarray
    variance_fraction: float

    def mean_points(self) -> np.ndarray:
        return from_vector(self.mean_shape)

    def reference_span(self) -> float:
        """Larger bounding-box extent of the mean shape (reference units)."""
        pts = self.mean_points()
        extent = pts.max(axis=0) - pts.min(axis=0)
        return float(extent.max())


@dataclass(frozen=True)
class PoseParams:
    """Pose p = (s, theta, tx, ty, q): global similarity plus mode coefficients."""

    s: float
    theta: float
    tx: float
    ty: float
    q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        if self.s <= 0 or not all(
            math.isfinite(v) for v in (self.s, self.theta, self.tx, self.ty)
        ):
            raise ValueError(f"invalid rigid parameters (s={self.s}, theta={self.theta})")
        if not np.all(np.isfinite(self.q)):
            raise ValueError("non-finite non-rigid coefficients")

    @staticmethod
    def rest(m: int) -> "PoseParams":
        return PoseParams(1.0, 0.0, 0.0, 0.0, np.zeros(m))

    def transform(self) -> SimilarityTransform:
        return SimilarityTransform(self.s, self.theta, self.tx, self.ty)

    def as_vector(self) -> np.ndarray:
        """Stack into the (4+m) update ordering (s, theta, tx, ty, q)."""
        return np.concatenate(([self.s, self.theta, self.tx, self.ty], self.q))

    def clamped(self, eigenvalues: np.ndarray, clamp_factor: float) -> "PoseParams":
        """Limit each |q_j| to clamp_factor * sqrt(lambda_j)."""
        bound = clamp_factor * np.sqrt(eigenvalues)
        return replace(self, q=np.clip(self.q, -bound, bound))


@dataclass(frozen=True)
class Regularizer:
    """Inverse prior variances for the update: zeros on the four rigid slots."""

    diag_inv: np.ndarray
    strength: float

    def __post_init__(self):
        object.__setattr__(self, "diag_inv", np.asarray(self.diag_inv, dtype=float))
        if self.strength < 0:
            raise ValueError("regularizer strength must be non-negative")
        if np.any(self.diag_inv[:4] != 0.0):
            raise ValueError("rigid parameters must carry zero penalty")

    @staticmethod
    def from_pdm(pdm: PdmModel, strength: float = 1.0) -> "Regularizer":
        diag = np.concatenate((np.zeros(4), 1.0 / pdm.eigenvalues))
        return Regularizer(diag, strength)


def train_pdm(aligned_shapes, variance_fraction: float = 0.99) -> PdmModel:
    """PCA on Procrustes-aligned shapes.

    Picks the smallest mode count whose cumulative eigenvalue sum reaches
    ``variance_fraction`` of the total variance.

    Args:
        aligned_shapes: shapes already in a common reference frame
            (output of :func:`shapes.generalized_procrustes`).
        variance_fraction: retained-energy target in (0, 1].

    Raises:
        InsufficientData: fewer than 2 shapes.
        RankDeficient: all shapes identical (zero total variance).
    """
    if not 0.0 < variance_fraction <= 1.0:
        raise ValueError("variance_fraction must lie in (0, 1]")
    data = np.array([as_vector(s) for s in aligned_shapes])
    if data.shape[0] < 2:
        raise InsufficientData(f"need at least 2 shapes, got {data.shape[0]}")

    mean = data.mean(axis=0)
    centered = data - mean
    # Eigenvalues of the sample covariance via the SVD of the centered data.
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    eigvals = svals**2 / (data.shape[0] - 1)

    total = float(eigvals.sum())
    if total <= 0.0:
        raise RankDeficient("aligned shapes carry zero variance")

    cumulative = np.cumsum(eigvals) / total
    m = int(np.searchsorted(cumulative, variance_fraction - 1e-12) + 1)
    m = min(m, int(np.sum(eigvals > total * 1e-14)))

    return PdmModel(
        n=data.shape[1] // 2,
        m=m,
        mean_shape=mean,
        basis=vt[:m].T.copy(),
        eigenvalues=eigvals[:m].copy(),
        variance_fraction=variance_fraction,
    )


def synthesize(pdm: PdmModel, p: PoseParams) -> np.ndarray:
    """Generate the (n, 2) shape for a pose: s * R * (mean + Phi q) + t."""
    if p.q.shape[0] != pdm.m:
        raise DimensionMismatch(f"expected {pdm.m} coefficients, got {p.q.shape[0]}")
    reference = from_vector(pdm.mean_shape + pdm.basis @ p.q)
    return apply_transform(p.transform(), reference)


def fit_pose(pdm: PdmModel, shape: np.ndarray, clamp_factor: float | None = None) -> PoseParams:
    """Project a shape onto the model: recover the pose that synthesizes it.

    Alternates a closed-form similarity fit with a basis projection of the
    back-transformed residual until the coefficients settle.

    Args:
        clamp_factor: if given, each |q_j| is limited to
            clamp_factor * sqrt(lambda_j) after every projection.
    """
    shape = np.asarray(shape, dtype=float)
    if shape.shape[0] != pdm.n:
        raise DimensionMismatch(f"expected {pdm.n} landmarks, got {shape.shape[0]}")

    q = np.zeros(pdm.m)
    transform = SimilarityTransform.identity()
    for _ in range(50):
        reference = from_vector(pdm.mean_shape + pdm.basis @ q)
        transform = procrustes_align_pair(reference, shape)
        back = apply_transform(transform.inverse(), shape)
        q_new = pdm.basis.T @ (as_vector(back) - pdm.mean_shape)
        if clamp_factor is not None:
            bound = clamp_factor * np.sqrt(pdm.eigenvalues)
            q_new = np.clip(q_new, -bound, bound)
        done = np.max(np.abs(q_new - q)) < 1e-10 if pdm.m else True
        q = q_new
        if done:
            break
    return PoseParams(transform.s, transform.theta, transform.tx, transform.ty, q)


def jacobian(pdm: PdmModel, p: PoseParams) -> np.ndarray:
    """Analytic 2n x (4+m) Jacobian of :func:`synthesize` at pose p.

    Column order matches PoseParams.as_vector: scale, rotation angle, the
    two translations, then one column per mode coefficient.
    """
    reference = from_vector(pdm.mean_shape + pdm.basis @ p.q)
    c, s = math.cos(p.theta), math.sin(p.theta)
    rot = np.array([[c, -s], [s, c]])
    drot = np.array([[-s, -c], [c, -s]])

    n = pdm.n
    cols = np.empty((2 * n, 4 + pdm.m))
    cols[:, 0] = (reference @ rot.T).reshape(-1)
    cols[:, 1] = p.s * (reference @ drot.T).reshape(-1)
    cols[:, 2] = np.tile([1.0, 0.0], n)
    cols[:, 3] = np.tile([0.0, 1.0], n)
    if pdm.m:
        # d/dq_j = s * R * Phi_j applied to every landmark row-pair.
        basis_pts = pdm.basis.reshape(n, 2, pdm.m)
        rotated = np.einsum("ab,nbm->nam", rot, basis_pts)
        cols[:, 4:] = p.s * rotated.reshape(2 * n, pdm.m)
    return cols


def _solve_spd(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    eigvals = np.linalg.eigvalsh(matrix)
    smallest, largest = eigvals[0], eigvals[-1]
    if largest <= 0 or smallest <= 0 or largest / smallest > CONDITION_LIMIT:
        raise SingularHessian(
            f"Hessian condition {largest / max(smallest, np.finfo(float).tiny):.3e} "
            f"exceeds {CONDITION_LIMIT:.0e}"
        )
    return np.linalg.solve(matrix, rhs)


def gauss_newton_update(
    pdm: PdmModel,
    p: PoseParams,
    delta_x: np.ndarray,
    reg: Regularizer,
    weights: np.ndarray | None = None,
    iterations: int = 1,
    prior_center: np.ndarray | None = None,
) -> PoseParams:
    """Regularized Gauss-Newton step(s) toward ``synthesize(p) + delta_x``.

    Each iteration solves

        (strength * D + J^T W J) dp = J^T W dx - strength * D (p - center)

    where D is the regularizer diagonal (zero on the rigid slots, 1/lambda_j
    on the modes) and dx is recomputed against the fixed target after every
    parameter update. The data term therefore always pulls the synthesized
    shape toward the target; the prior shrinks the mode coefficients toward
    ``prior_center`` (the origin unless a recursive center is supplied).

    Args:
        delta_x: flat 2n shift, target minus the current synthesized shape.
        weights: per-landmark confidences (default: uniform ones).
        iterations: Gauss-Newton iterations against the fixed target.
        prior_center: m-vector the prior is centered on; None means zeros.

    Raises:
        SingularHessian: conditioning beyond CONDITION_LIMIT.
    """
    delta_x = np.asarray(delta_x, dtype=float).reshape(-1)
    if delta_x.shape[0] != 2 * pdm.n:
        raise DimensionMismatch(f"delta_x must have length {2 * pdm.n}")
    if weights is None:
        weights = np.ones(pdm.n)
    weights = np.asarray(weights, dtype=float)
    if np.any(weights <= 0):
        raise ValueError("landmark weights must be positive")
    w2 = np.repeat(weights, 2)

    center = np.zeros(4 + pdm.m)
    if prior_center is not None:
        center[4:] = np.asarray(prior_center, dtype=float)

    # The target stays fixed across iterations; for a single step the
    # residual is delta_x itself and the target never needs forming.
    target = as_vector(synthesize(pdm, p)) + delta_x if iterations > 1 else None
    for k in range(iterations):
        jac = jacobian(pdm, p)
        residual = delta_x if k == 0 else target - as_vector(synthesize(pdm, p))
        hessian = (jac.T * w2) @ jac
        hessian[np.diag_indices_from(hessian)] += reg.strength * reg.diag_inv
        gradient = jac.T @ (w2 * residual)
        gradient -= reg.strength * reg.diag_inv * (p.as_vector() - center)
        dp = _solve_spd(hessian, gradient)

        new_s = p.s + dp[0]
        if new_s <= 0:
            new_s = p.s * 0.5  # halve instead of crossing zero scale
        p = PoseParams(new_s, p.theta + dp[1], p.tx + dp[2], p.ty + dp[3], p.q + dp[4:])
    return p


def prior_log_density(pdm: PdmModel, q: np.ndarray) -> float:
    """Log of the unnormalized Gaussian mode prior: -0.5 * sum q_j^2 / lambda_j."""
    q = np.asarray(q, dtype=float)
    if q.shape[0] != pdm.m:
        raise DimensionMismatch(f"expected {pdm.m} coefficients, got {q.shape[0]}")
    return float(-0.5 * np.sum(q * q / pdm.eigenvalues))
