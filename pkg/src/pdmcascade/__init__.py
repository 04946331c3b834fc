"""Cascaded landmark alignment with a point-distribution-model constraint.

Each cascade stage predicts a raw shape shift from shape-indexed image
features and projects it through a regularized Gauss-Newton update on the
shape model's pose parameters, keeping every intermediate shape on the model
manifold. The previous stage's non-rigid coefficients feed back into the
next stage's features.
"""

from .cascade import (
    CascadeModel,
    FitResult,
    GaussNewtonSettings,
    StageEntry,
    StageSchedule,
    fit,
    forest_schedule,
    hog_schedule,
    hybrid_schedule,
    init_pose_from_bbox,
    named_schedule,
    train_cascade,
)
from .dataset import (
    Sample,
    generate_synthetic_corpus,
    gaussian_blob_law,
    load_dataset,
    load_image,
    parse_pts,
    synthetic_face_pdm,
    write_pts,
)
from .errors import (
    DegenerateShape,
    DimensionMismatch,
    EmptyDataset,
    EmptyErrors,
    FormatError,
    InsufficientData,
    InvalidBBox,
    ParseError,
    PdmCascadeError,
    RankDeficient,
    SingularHessian,
    SingularSystem,
    ZeroIOD,
)
from .evaluation import (
    EvalReport,
    benchmark_fit,
    ced_curve,
    evaluate_model,
    normalized_error,
)
from .features import (
    GrayImage,
    HogConfig,
    PixelDiffConfig,
    assemble_stage_features,
    assembled_length,
    extract_hog_patch,
    extract_pixel_diff,
    hog_descriptors,
    pixel_diff_features,
)
from .model_io import load_model, save_model
from .pdm import (
    PdmModel,
    PoseParams,
    Regularizer,
    fit_pose,
    gauss_newton_update,
    jacobian,
    prior_log_density,
    synthesize,
    train_pdm,
)
from .regressors import (
    ForestConfig,
    ForestStage,
    LinearRegressor,
    predict_forest_stage,
    predict_ridge,
    train_forest_stage,
    train_ridge,
)
from .shapes import (
    SimilarityTransform,
    apply_transform,
    generalized_procrustes,
    procrustes_align_pair,
)

__version__ = "0.1.0"
