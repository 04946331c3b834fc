"""Cascaded training and fitting with the shape-model constraint in the loop.

Every stage runs (feature extraction -> shift regression -> regularized
Gauss-Newton projection onto the shape model), both at training time and at
fitting time, so the working shape always lies exactly on the model manifold.
The previous stage's mode coefficients feed the next stage's features, and
the per-stage feature schedule mixes fast pixel-difference forests with more
discriminative HOG ridge stages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InsufficientData, InvalidBBox
from .features import (
    GrayImage,
    HOG_WINDOW_FRACTION,
    HogConfig,
    PixelDiffConfig,
    assemble_stage_features,
    face_extent,
)
from .pdm import (
    PdmModel,
    PoseParams,
    Regularizer,
    gauss_newton_update,
    synthesize,
    train_pdm,
)
from .regressors import (
    ForestConfig,
    ForestStage,
    LinearRegressor,
    default_ridge_lambda,
    predict_forest_stage,
    predict_ridge,
    train_forest_stage,
    train_ridge,
)
from .shapes import as_vector, generalized_procrustes

__all__ = [
    "GaussNewtonSettings",
    "StageEntry",
    "StageSchedule",
    "CascadeModel",
    "FitResult",
    "hybrid_schedule",
    "forest_schedule",
    "hog_schedule",
    "named_schedule",
    "init_pose_from_bbox",
    "train_cascade",
    "fit",
]

FOREST_KIND = "pixel_diff_forest"
HOG_KIND = "hog_ridge"

# Per-stage shrink of the pixel-difference probe radius (coarse to fine).
RADIUS_SHRINK = 0.8


@dataclass(frozen=True)
class GaussNewtonSettings:
    """Constraint-projection settings for one stage."""

    strength: float = 1.0
    iterations: int = 1
    prior_center: str = "zero"  # "zero" | "recursive"
    clamp_factor: float | None = 3.0

    def __post_init__(self):
        if self.prior_center not in ("zero", "recursive"):
            raise ValueError(f"unknown prior center mode {self.prior_center!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass(frozen=True)
class StageEntry:
    """One cascade stage: feature kind, feature/regressor config, projection."""

    kind: str
    hog: HogConfig | None = None
    hog_window: float = HOG_WINDOW_FRACTION
    pixel_pairs: int = 40
    pixel_radius: float = 0.15
    forest: ForestConfig | None = None
    ridge_lambda: float | None = None
    gn: GaussNewtonSettings = field(default_factory=GaussNewtonSettings)

    def __post_init__(self):
        if self.kind == HOG_KIND:
            if self.hog is None:
                object.__setattr__(self, "hog", HogConfig())
        elif self.kind == FOREST_KIND:
            if self.forest is None:
                object.__setattr__(self, "forest", ForestConfig())
        else:
            raise ValueError(f"unknown stage kind {self.kind!r}")


@dataclass(frozen=True)
class StageSchedule:
    """Ordered stage entries plus the model-wide training switches."""

    entries: tuple
    use_q_features: bool = True
    constrained: bool = True

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        if len(self.entries) < 1:
            raise ValueError("a schedule needs at least one stage")
        if self.use_q_features and not self.constrained:
            raise ValueError(
                "mode-coefficient features require the constrained cascade "
                "(the projection is what maintains the pose state)"
            )

    def __len__(self) -> int:
        return len(self.entries)


def hybrid_schedule(
    forest_stages: int = 4,
    hog_stages: int = 3,
    use_q_features: bool = True,
    constrained: bool = True,
    gn: GaussNewtonSettings | None = None,
) -> StageSchedule:
    """Default 7-stage schedule: fast pixel-difference forests first, HOG last."""
    gn = gn or GaussNewtonSettings()
    entries = [
        StageEntry(FOREST_KIND, pixel_radius=0.15 * RADIUS_SHRINK**i, gn=gn)
        for i in range(forest_stages)
    ]
    entries += [StageEntry(HOG_KIND, gn=gn) for _ in range(hog_stages)]
    return StageSchedule(tuple(entries), use_q_features=use_q_features, constrained=constrained)


def forest_schedule(stages: int = 7, **kwargs) -> StageSchedule:
    return hybrid_schedule(forest_stages=stages, hog_stages=0, **kwargs)


def hog_schedule(stages: int = 7, **kwargs) -> StageSchedule:
    return hybrid_schedule(forest_stages=0, hog_stages=stages, **kwargs)


def named_schedule(name: str, **kwargs) -> StageSchedule:
    """Schedule factory used by the command line: hybrid7, forest7, hog7, ..."""
    for prefix, builder in (("hybrid", None), ("forest", forest_schedule), ("hog", hog_schedule)):
        if name.startswith(prefix):
            count = name[len(prefix):]
            if count and not count.isdigit():
                break
            stages = int(count) if count else 7
            if prefix == "hybrid":
                hog_stages = stages // 2
                return hybrid_schedule(stages - hog_stages, hog_stages, **kwargs)
            return builder(stages, **kwargs)
    raise ValueError(f"unknown schedule name {name!r}")


@dataclass
class CascadeModel:
    """Trained cascade: shape model, schedule, and one regressor per stage.

    ``training_curve`` holds the mean normalized training error before the
    first stage and after each stage; it is informational and not serialized.
    """

    pdm: PdmModel
    schedule: StageSchedule
    stages: list
    seed: int
    format_version: int = 1
    training_curve: list | None = None


@dataclass(frozen=True)
class FitResult:
    shape: np.ndarray
    pose: PoseParams
    per_stage_shapes: list | None = None


def init_pose_from_bbox(pdm: PdmModel, bbox) -> PoseParams:
    """Rest pose placing the mean shape inside a face box.

    Scale is fit by box width; the shape is centered on the box center.

    Raises:
        InvalidBBox: non-positive width or height.
    """
    x, y, w, h = (float(v) for v in bbox)
    if w <= 0 or h <= 0:
        raise InvalidBBox(f"bounding box must have positive extent, got {w} x {h}")
    mean = pdm.mean_points()
    lo = mean.min(axis=0)
    hi = mean.max(axis=0)
    scale = w / (hi[0] - lo[0])
    center = (lo + hi) / 2.0
    tx = x + w / 2.0 - scale * center[0]
    ty = y + h / 2.0 - scale * center[1]
    return PoseParams(scale, 0.0, tx, ty, np.zeros(pdm.m))


def _perturbed_bbox(bbox, rng: np.random.Generator):
    """Jitter a face box: +-5% translation, +-10% scale around its center."""
    x, y, w, h = bbox
    cx = x + w / 2.0 + rng.uniform(-0.05, 0.05) * w
    cy = y + h / 2.0 + rng.uniform(-0.05, 0.05) * h
    factor = 1.0 + rng.uniform(-0.10, 0.10)
    return (cx - factor * w / 2.0, cy - factor * h / 2.0, factor * w, factor * h)


def _mean_norm_error(shapes, gts) -> float:
    """Mean point distance normalized by the ground-truth box diagonal."""
    total = 0.0
    for pred, gt in zip(shapes, gts):
        extent = gt.max(axis=0) - gt.min(axis=0)
        diag = math.hypot(extent[0], extent[1])
        total += float(np.mean(np.linalg.norm(pred - gt, axis=1))) / max(diag, 1e-12)
    return total / len(shapes)


def _project_stage(pdm, pose, raw_shift, entry, q_center):
    """Constraint projection for one stage update (raw regression shift in)."""
    gn = entry.gn
    pose = gauss_newton_update(
        pdm,
        pose,
        raw_shift,
        Regularizer.from_pdm(pdm, gn.strength),
        weights=None,
        iterations=gn.iterations,
        prior_center=q_center if gn.prior_center == "recursive" else None,
    )
    if gn.clamp_factor is not None:
        pose = pose.clamped(pdm.eigenvalues, gn.clamp_factor)
    return pose


def train_cascade(
    dataset,
    schedule: StageSchedule,
    aug_count: int = 10,
    seed: int = 0,
    variance_fraction: float = 0.99,
) -> CascadeModel:
    """Train the full cascade (shape model included) from annotated samples.

    The shape model is built from the ground-truth shapes by generalized
    Procrustes alignment and PCA. Each sample is replicated ``aug_count``
    times with perturbed initial face boxes (the first replica is exact).
    Per stage: regress the residual shift from the assembled features, apply
    it, then project onto the shape model so the projected shape and its pose
    feed the next stage. All randomness flows from ``seed``.
    """
    dataset = list(dataset)
    if len(dataset) < 2:
        raise InsufficientData(f"training needs at least 2 samples, got {len(dataset)}")
    n = dataset[0].gt_shape.shape[0]
    if any(s.gt_shape.shape[0] != n for s in dataset):
        raise InsufficientData("inconsistent landmark counts across the dataset")

    aligned, _ = generalized_procrustes([s.gt_shape for s in dataset])
    pdm = train_pdm(aligned, variance_fraction)
    rng = np.random.default_rng(seed)

    images, gts, poses = [], [], []
    for sample in dataset:
        for rep in range(max(1, aug_count)):
            bbox = sample.bbox if rep == 0 else _perturbed_bbox(sample.bbox, rng)
            images.append(sample.image)
            gts.append(np.asarray(sample.gt_shape, dtype=float))
            poses.append(init_pose_from_bbox(pdm, bbox))
    shapes = [synthesize(pdm, p) for p in poses]
    n_total = len(shapes)

    curve = [_mean_norm_error(shapes, gts)]
    stages = []
    for entry in schedule.entries:
        faces = [face_extent(s) for s in shapes]
        targets = np.stack([as_vector(gt) - as_vector(s) for gt, s in zip(gts, shapes)])

        if entry.kind == HOG_KIND:
            feats = np.stack(
                [
                    assemble_stage_features(
                        images[i],
                        shapes[i],
                        poses[i].q,
                        entry.hog,
                        pdm.eigenvalues,
                        face_px=faces[i],
                        use_q=schedule.use_q_features,
                        hog_window=entry.hog_window,
                    )
                    for i in range(n_total)
                ]
            )
            lam = entry.ridge_lambda
            if lam is None:
                lam = default_ridge_lambda(feats, targets)
            stage = train_ridge(feats, targets, lam)
            predictions = predict_ridge(stage, feats)
        else:
            pixel_cfg = PixelDiffConfig.sample(n, entry.pixel_pairs, entry.pixel_radius, rng)
            stage = train_forest_stage(
                [(images[i], shapes[i], poses[i].q, targets[i]) for i in range(n_total)],
                entry.forest,
                pixel_cfg,
                entry.ridge_lambda,
                pdm.eigenvalues,
                schedule.use_q_features,
                rng,
            )
            predictions = np.stack(
                [
                    predict_forest_stage(
                        stage,
                        images[i],
                        shapes[i],
                        faces[i],
                        poses[i].q if schedule.use_q_features else None,
                    )
                    for i in range(n_total)
                ]
            )
        stages.append(stage)

        for i in range(n_total):
            if schedule.constrained:
                poses[i] = _project_stage(pdm, poses[i], predictions[i], entry, poses[i].q)
                shapes[i] = synthesize(pdm, poses[i])
            else:
                shapes[i] = shapes[i] + predictions[i].reshape(-1, 2)
        curve.append(_mean_norm_error(shapes, gts))

    return CascadeModel(
        pdm=pdm,
        schedule=schedule,
        stages=stages,
        seed=seed,
        training_curve=curve,
    )


def fit(
    model: CascadeModel,
    image: GrayImage,
    bbox,
    trace: bool = False,
    constrain: bool | None = None,
) -> FitResult:
    """Run the trained cascade on one face box.

    Args:
        trace: record the shape before the first stage and after every stage.
        constrain: override the schedule's constraint flag (False runs the
            pure regression cascade; only meaningful for models trained
            without mode-coefficient features).

    Returns:
        FitResult whose shape equals the synthesized pose exactly when the
        constraint is active.
    """
    schedule = model.schedule
    if constrain is None:
        constrain = schedule.constrained
    pdm = model.pdm

    pose = init_pose_from_bbox(pdm, bbox)
    shape = synthesize(pdm, pose)
    recorded = [shape] if trace else None

    for entry, stage in zip(schedule.entries, model.stages):
        face_px = face_extent(shape)
        if entry.kind == HOG_KIND:
            feats = assemble_stage_features(
                image,
                shape,
                pose.q,
                entry.hog,
                pdm.eigenvalues,
                face_px=face_px,
                use_q=schedule.use_q_features,
                hog_window=entry.hog_window,
            )
            shift = predict_ridge(stage, feats)
        else:
            shift = predict_forest_stage(
                stage,
                image,
                shape,
                face_px,
                pose.q if schedule.use_q_features else None,
            )

        if constrain:
            pose = _project_stage(pdm, pose, shift, entry, pose.q)
            shape = synthesize(pdm, pose)
        else:
            shape = shape + shift.reshape(-1, 2)
        if trace:
            recorded.append(shape)

    return FitResult(shape=shape, pose=pose, per_stage_shapes=recorded)
