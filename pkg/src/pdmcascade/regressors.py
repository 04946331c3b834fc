"""Stage regressors mapping features to raw shape shifts.

Two kinds are provided: a dense ridge regressor over assembled feature
vectors, and a random-forest stage where per-landmark trees grown on
pixel-difference features emit binary leaf indicators that feed one global
sparse-input linear map (so cross-landmark shape correlation enters through
the joint output layer).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, InsufficientData, SingularSystem
from .features import GrayImage, PixelDiffConfig, face_extent, pixel_diff_features

__all__ = [
    "LinearRegressor",
    "ForestConfig",
    "ForestStage",
    "train_ridge",
    "predict_ridge",
    "train_forest_stage",
    "predict_forest_stage",
    "default_ridge_lambda",
]


@dataclass(frozen=True)
class LinearRegressor:
    """Dense linear map from a feature vector (bias entry last) to a 2n shift."""

    weight_matrix: np.ndarray
    ridge_lambda: float

    def __post_init__(self):
        # Fixed C layout so predictions are bit-identical across save/load.
        w = np.ascontiguousarray(self.weight_matrix, dtype=float)
        if not np.all(np.isfinite(w)):
            raise ValueError("non-finite regressor weights")
        object.__setattr__(self, "weight_matrix", w)


def default_ridge_lambda(features: np.ndarray, targets: np.ndarray) -> float:
    """Dimensionless default penalty: target variance over feature length."""
    var = float(np.var(targets))
    return max(var / features.shape[1], 1e-10)


def train_ridge(features: np.ndarray, targets: np.ndarray, ridge_lambda: float) -> LinearRegressor:
    """Ridge-regularized least squares; the trailing bias column is unpenalized.

    Minimizes ``sum_i ||W f_i - y_i||^2 + ridge_lambda ||W[:, :-1]||^2``.
    Solved through the normal equations; when the sample count is below the
    feature length (and the bias column is constant) the equivalent dual
    system is solved instead, which keeps memory proportional to N^2.

    Raises:
        SingularSystem: ridge_lambda = 0 with a rank-deficient Gram matrix.
    """
    f = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    if f.ndim != 2 or y.ndim != 2 or f.shape[0] != y.shape[0]:
        raise ValueError(f"incompatible feature/target shapes {f.shape} vs {y.shape}")
    if ridge_lambda < 0:
        raise ValueError("ridge_lambda must be non-negative")
    n_samples, d = f.shape

    if ridge_lambda == 0.0:
        gram = f.T @ f
        eigvals = np.linalg.eigvalsh(gram)
        if eigvals[0] <= eigvals[-1] * 1e-12 or eigvals[-1] <= 0:
            raise SingularSystem(
                "unregularized system is rank-deficient; use ridge_lambda > 0"
            )
        weights = np.linalg.solve(gram, f.T @ y).T
    elif n_samples < d and np.all(f[:, -1] == 1.0):
        # Dual path. The unpenalized bias is profiled out exactly by
        # centering: b = y_mean - A g_mean for the optimal A.
        g = f[:, :-1]
        g_mean = g.mean(axis=0)
        y_mean = y.mean(axis=0)
        gc = g - g_mean
        kernel = gc @ gc.T
        kernel[np.diag_indices_from(kernel)] += ridge_lambda
        alpha = np.linalg.solve(kernel, y - y_mean)
        a = (gc.T @ alpha).T
        bias = y_mean - a @ g_mean
        weights = np.hstack([a, bias[:, None]])
    else:
        gram = f.T @ f
        idx = np.diag_indices_from(gram)
        gram[idx[0][:-1], idx[1][:-1]] += ridge_lambda
        try:
            weights = np.linalg.solve(gram, f.T @ y).T
        except np.linalg.LinAlgError:
            weights = np.linalg.lstsq(gram, f.T @ y, rcond=None)[0].T
    return LinearRegressor(weight_matrix=weights, ridge_lambda=float(ridge_lambda))


def predict_ridge(model: LinearRegressor, f: np.ndarray) -> np.ndarray:
    """Apply the linear map to one feature vector or a batch of rows."""
    f = np.asarray(f, dtype=float)
    if f.shape[-1] != model.weight_matrix.shape[1]:
        raise DimensionMismatch(
            f"feature length {f.shape[-1]} != regressor width {model.weight_matrix.shape[1]}"
        )
    return f @ model.weight_matrix.T


# ---------------------------------------------------------------------------
# Random-forest stage


@dataclass(frozen=True)
class ForestConfig:
    trees_per_landmark: int = 5
    max_depth: int = 5
    candidate_splits: int = 50
    bootstrap_fraction: float = 1.0


@dataclass(frozen=True)
class ForestStage:
    """Per-landmark trees plus the global linear map over leaf indicators.

    Trees are stored as padded node arrays so routing vectorizes across all
    trees at once. ``node_left < 0`` marks a leaf; ``node_leaf`` then holds
    the leaf's dense global index in [0, leaf_count). The global map's
    columns are the leaf block, then (for q-aware stages) one column per
    mode coefficient with the prior whitening folded in, then the bias.
    """

    pixel_cfg: PixelDiffConfig
    tree_landmark: np.ndarray
    node_feature: np.ndarray
    node_threshold: np.ndarray
    node_left: np.ndarray
    node_right: np.ndarray
    node_leaf: np.ndarray
    leaf_count: int
    global_linear: np.ndarray
    trees_per_landmark: int
    max_depth: int
    use_q: bool
    n_modes: int

    @property
    def n_landmarks(self) -> int:
        return self.pixel_cfg.offsets.shape[0]

    def _transposed(self) -> np.ndarray:
        """Row-major transpose of the global map, cached for fast leaf gathers."""
        cached = getattr(self, "_gl_t", None)
        if cached is None:
            cached = np.ascontiguousarray(self.global_linear.T)
            object.__setattr__(self, "_gl_t", cached)
        return cached


def _route(stage_arrays, per_landmark_values: np.ndarray) -> np.ndarray:
    """Vectorized leaf lookup for a batch of samples.

    Args:
        per_landmark_values: (N, n_landmarks, n_features) pixel differences.

    Returns:
        (N, n_trees) global leaf indices.
    """
    tree_landmark, node_feature, node_threshold, node_left, node_right, node_leaf = stage_arrays
    n_samples = per_landmark_values.shape[0]
    n_trees = tree_landmark.shape[0]
    tree_idx = np.arange(n_trees)
    rows = np.arange(n_samples)[:, None]

    current = np.zeros((n_samples, n_trees), dtype=np.intp)
    for _ in range(node_feature.shape[1]):
        feat = node_feature[tree_idx, current]
        at_leaf = feat < 0
        if at_leaf.all():
            break
        value = per_landmark_values[rows, tree_landmark[None, :], np.maximum(feat, 0)]
        go_left = value < node_threshold[tree_idx, current]
        nxt = np.where(go_left, node_left[tree_idx, current], node_right[tree_idx, current])
        current = np.where(at_leaf, current, nxt)
    return node_leaf[tree_idx, current]


def _stage_arrays(stage: ForestStage):
    return (
        stage.tree_landmark,
        stage.node_feature,
        stage.node_threshold,
        stage.node_left,
        stage.node_right,
        stage.node_leaf,
    )


def _whiten(q: np.ndarray, eigenvalues: np.ndarray) -> np.ndarray:
    return np.asarray(q, dtype=float) / np.sqrt(eigenvalues)


def train_forest_stage(
    samples,
    cfg: ForestConfig,
    pixel_cfg: PixelDiffConfig,
    ridge_lambda: float | None,
    eigenvalues: np.ndarray,
    use_q: bool,
    rng: np.random.Generator,
) -> ForestStage:
    """Grow per-landmark forests and fit the global leaf-indicator map.

    Args:
        samples: sequence of (image, shape, q_prev, target) tuples where the
            target is the flat 2n shift to regress.
        ridge_lambda: penalty for the global map; None picks the
            dimensionless default.
        eigenvalues: mode variances used to whiten q_prev for training (the
            whitening is folded into the stored q columns afterwards).

    Each tree is grown on a bootstrap resample; node splits pick, from a
    random candidate pool, the (feature, threshold) pair maximizing variance
    reduction of that landmark's own 2D shift.
    """
    if len(samples) < 2:
        raise InsufficientData(f"forest stage needs at least 2 samples, got {len(samples)}")
    eigenvalues = np.asarray(eigenvalues, dtype=float)
    n_landmarks = pixel_cfg.offsets.shape[0]

    values = np.stack(
        [
            pixel_diff_features(img, shape, face_extent(shape), pixel_cfg)
            for img, shape, _, _ in samples
        ]
    )
    targets = np.stack([np.asarray(t, dtype=float).reshape(-1) for *_, t in samples])
    n_samples = values.shape[0]
    n_boot = max(2, int(round(cfg.bootstrap_fraction * n_samples)))

    feature, threshold, left, right = [], [], [], []
    roots, landmarks = [], []
    for landmark in range(n_landmarks):
        local_y = targets[:, 2 * landmark : 2 * landmark + 2]
        for _ in range(cfg.trees_per_landmark):
            boot = rng.integers(0, n_samples, size=n_boot)
            sub_vals = values[boot, landmark, :]
            sub_y = local_y[boot]

            def build(indices, depth):
                node = len(feature)
                feature.append(-1)
                threshold.append(0.0)
                left.append(-1)
                right.append(-1)
                if depth >= cfg.max_depth or indices.shape[0] < 2:
                    return node
                node_y = sub_y[indices]
                if np.ptp(node_y, axis=0).max() == 0.0:
                    return node
                cand_feat = rng.integers(0, sub_vals.shape[1], size=cfg.candidate_splits)
                sub = sub_vals[np.ix_(indices, cand_feat)]
                lo = sub.min(axis=0)
                hi = sub.max(axis=0)
                cand_thr = rng.uniform(lo, hi)
                mask = sub < cand_thr
                left_count = mask.sum(axis=0)
                right_count = indices.shape[0] - left_count
                valid = (left_count > 0) & (right_count > 0)
                if not valid.any():
                    return node
                total = node_y.sum(axis=0)
                left_sum = mask.T @ node_y
                right_sum = total - left_sum
                with np.errstate(divide="ignore", invalid="ignore"):
                    gain = (left_sum**2).sum(axis=1) / left_count
                    gain = gain + (right_sum**2).sum(axis=1) / right_count
                gain[~valid] = -np.inf
                best = int(np.argmax(gain))
                feature[node] = int(cand_feat[best])
                threshold[node] = float(cand_thr[best])
                go = mask[:, best]
                left[node] = build(indices[go], depth + 1)
                right[node] = build(indices[~go], depth + 1)
                return node

            roots.append(build(np.arange(n_boot), 0))
            landmarks.append(landmark)

    # Re-index every tree into fixed-width padded arrays and assign dense
    # global leaf ids in traversal order.
    n_trees = len(roots)
    roots.append(len(feature))  # sentinel: nodes of tree t live in [roots[t], roots[t+1])
    max_nodes = max(roots[t + 1] - roots[t] for t in range(n_trees))
    node_feature = np.full((n_trees, max_nodes), -1, dtype=np.int32)
    node_threshold = np.zeros((n_trees, max_nodes))
    node_left = np.full((n_trees, max_nodes), -1, dtype=np.int32)
    node_right = np.full((n_trees, max_nodes), -1, dtype=np.int32)
    node_leaf = np.full((n_trees, max_nodes), -1, dtype=np.int32)

    leaf_count = 0
    for t in range(n_trees):
        base, end = roots[t], roots[t + 1]
        for node in range(base, end):
            local = node - base
            node_feature[t, local] = feature[node]
            node_threshold[t, local] = threshold[node]
            if feature[node] >= 0:
                node_left[t, local] = left[node] - base
                node_right[t, local] = right[node] - base
            else:
                node_leaf[t, local] = leaf_count
                leaf_count += 1

    arrays = (
        np.asarray(landmarks, dtype=np.int32),
        node_feature,
        node_threshold,
        node_left,
        node_right,
        node_leaf,
    )
    leaf_ids = _route(arrays, values)
    indicators = np.zeros((n_samples, leaf_count))
    indicators[np.arange(n_samples)[:, None], leaf_ids] = 1.0

    blocks = [indicators]
    if use_q:
        q_prev = np.stack([_whiten(q, eigenvalues) for _, _, q, _ in samples])
        blocks.append(q_prev)
    blocks.append(np.ones((n_samples, 1)))
    design = np.hstack(blocks)

    if ridge_lambda is None:
        ridge_lambda = default_ridge_lambda(design, targets)
    global_linear = train_ridge(design, targets, ridge_lambda).weight_matrix.copy()
    if use_q:
        # Fold the whitening into the stored columns so prediction takes raw q.
        m = eigenvalues.shape[0]
        global_linear[:, leaf_count : leaf_count + m] /= np.sqrt(eigenvalues)[None, :]

    return ForestStage(
        pixel_cfg=pixel_cfg,
        tree_landmark=arrays[0],
        node_feature=node_feature,
        node_threshold=node_threshold,
        node_left=node_left,
        node_right=node_right,
        node_leaf=node_leaf,
        leaf_count=leaf_count,
        global_linear=global_linear,
        trees_per_landmark=cfg.trees_per_landmark,
        max_depth=cfg.max_depth,
        use_q=use_q,
        n_modes=eigenvalues.shape[0] if use_q else 0,
    )


def encode_leaves(stage: ForestStage, image: GrayImage, shape: np.ndarray, face_scale: float) -> np.ndarray:
    """Active global leaf indices for one sample (one per tree)."""
    values = pixel_diff_features(image, shape, face_scale, stage.pixel_cfg)
    return _route(_stage_arrays(stage), values[None, :, :])[0]


def predict_forest_stage(
    stage: ForestStage,
    image: GrayImage,
    shape: np.ndarray,
    face_scale: float,
    q_prev: np.ndarray | None = None,
) -> np.ndarray:
    """Predicted 2n shift: sparse accumulation of the active leaf columns.

    Stages trained with mode-coefficient features require ``q_prev`` (raw,
    unwhitened); stages trained without must be called with None.
    """
    leaves = encode_leaves(stage, image, shape, face_scale)
    columns = stage._transposed()
    # Strictly sequential accumulation in column order: bit-identical to a
    # left-to-right dense product on the densified indicator vector.
    out = np.zeros(columns.shape[1])
    for leaf in leaves:
        out += columns[leaf]
    if stage.use_q:
        if q_prev is None or np.asarray(q_prev).shape[0] != stage.n_modes:
            raise DimensionMismatch(
                f"stage was trained with {stage.n_modes} mode-coefficient features"
            )
        for k, value in enumerate(np.asarray(q_prev, dtype=float)):
            out += columns[stage.leaf_count + k] * value
    elif q_prev is not None:
        raise DimensionMismatch("stage was trained without mode-coefficient features")
    out += columns[-1]
    return out
