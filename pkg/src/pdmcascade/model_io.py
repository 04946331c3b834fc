"""Binary model files: magic "ELBC", versioned, length-prefixed sections.

Layout: 4 magic bytes, u32 format version, u64 training seed, then three
length-prefixed sections (shape model, schedule, stage regressors). Counts
are little-endian u32, floating-point arrays little-endian f64, so a round
trip reproduces bit-identical predictions. Read errors always carry the byte
offset where the problem was found and never return a partial model.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .cascade import CascadeModel, GaussNewtonSettings, StageEntry, StageSchedule
from .errors import FormatError
from .features import HogConfig, PixelDiffConfig
from .pdm import PdmModel
from .regressors import ForestConfig, ForestStage, LinearRegressor

__all__ = ["save_model", "load_model", "MAGIC", "FORMAT_VERSION"]

MAGIC = b"ELBC"
FORMAT_VERSION = 1

_KIND_CODE = {"pixel_diff_forest": 0, "hog_ridge": 1}
_KIND_NAME = {v: k for k, v in _KIND_CODE.items()}


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def u8(self, v: int):
        self.buf.write(struct.pack("<B", v))

    def u32(self, v: int):
        self.buf.write(struct.pack("<I", v))

    def i32_array(self, arr: np.ndarray):
        arr = np.ascontiguousarray(arr, dtype="<i4")
        self.u32(arr.size)
        self.buf.write(arr.tobytes())

    def f64(self, v: float):
        self.buf.write(struct.pack("<d", v))

    def f64_array(self, arr: np.ndarray):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        self.u32(arr.size)
        self.buf.write(arr.tobytes())

    def getvalue(self) -> bytes:
        return self.buf.getvalue()


class _Reader:
    def __init__(self, data: bytes, offset: int = 0):
        self.data = data
        self.pos = offset

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.data):
            raise FormatError(
                f"truncated file: need {count} bytes, {len(self.data) - self.pos} remain",
                offset=self.pos,
            )
        chunk = self.data[self.pos : self.pos + count]
        self.pos += count
        return chunk

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def i32_array(self) -> np.ndarray:
        count = self.u32()
        return np.frombuffer(self.take(4 * count), dtype="<i4").astype(np.int32)

    def f64_array(self) -> np.ndarray:
        count = self.u32()
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(float)


def _write_pdm(w: _Writer, pdm: PdmModel):
    w.u32(pdm.n)
    w.u32(pdm.m)
    w.f64_array(pdm.mean_shape)
    w.f64_array(pdm.basis.reshape(-1))
    w.f64_array(pdm.eigenvalues)
    w.f64(pdm.variance_fraction)


def _read_pdm(r: _Reader) -> PdmModel:
    n = r.u32()
    m = r.u32()
    mean = r.f64_array()
    basis = r.f64_array()
    eigvals = r.f64_array()
    vf = r.f64()
    if mean.size != 2 * n or basis.size != 2 * n * m or eigvals.size != m:
        raise FormatError("shape model arrays do not match the declared sizes", offset=r.pos)
    return PdmModel(n=n, m=m, mean_shape=mean, basis=basis.reshape(2 * n, m),
                    eigenvalues=eigvals, variance_fraction=vf)


def _write_entry(w: _Writer, entry: StageEntry):
    w.u8(_KIND_CODE[entry.kind])
    gn = entry.gn
    w.f64(gn.strength)
    w.u32(gn.iterations)
    w.u8(0 if gn.prior_center == "zero" else 1)
    w.u8(0 if gn.clamp_factor is None else 1)
    w.f64(gn.clamp_factor if gn.clamp_factor is not None else 0.0)
    w.f64(entry.ridge_lambda if entry.ridge_lambda is not None else float("nan"))
    if entry.kind == "hog_ridge":
        cfg = entry.hog
        w.u32(cfg.patch_size)
        w.u32(cfg.cell_size)
        w.u32(cfg.orientation_bins)
        w.u8(1 if cfg.signed else 0)
        w.f64(entry.hog_window)
    else:
        w.u32(entry.pixel_pairs)
        w.f64(entry.pixel_radius)
        cfg = entry.forest
        w.u32(cfg.trees_per_landmark)
        w.u32(cfg.max_depth)
        w.u32(cfg.candidate_splits)
        w.f64(cfg.bootstrap_fraction)


def _read_entry(r: _Reader) -> StageEntry:
    code = r.u8()
    if code not in _KIND_NAME:
        raise FormatError(f"unknown stage kind code {code}", offset=r.pos - 1)
    strength = r.f64()
    iterations = r.u32()
    prior_center = "zero" if r.u8() == 0 else "recursive"
    has_clamp = r.u8()
    clamp = r.f64()
    gn = GaussNewtonSettings(
        strength=strength,
        iterations=iterations,
        prior_center=prior_center,
        clamp_factor=clamp if has_clamp else None,
    )
    lam = r.f64()
    ridge_lambda = None if np.isnan(lam) else lam
    if _KIND_NAME[code] == "hog_ridge":
        patch = r.u32()
        cell = r.u32()
        bins = r.u32()
        signed = bool(r.u8())
        window = r.f64()
        return StageEntry(
            "hog_ridge",
            hog=HogConfig(patch, cell, bins, signed),
            hog_window=window,
            ridge_lambda=ridge_lambda,
            gn=gn,
        )
    pairs = r.u32()
    radius = r.f64()
    forest = ForestConfig(r.u32(), r.u32(), r.u32(), r.f64())
    return StageEntry(
        "pixel_diff_forest",
        pixel_pairs=pairs,
        pixel_radius=radius,
        forest=forest,
        ridge_lambda=ridge_lambda,
        gn=gn,
    )


def _write_schedule(w: _Writer, schedule: StageSchedule):
    w.u8(1 if schedule.use_q_features else 0)
    w.u8(1 if schedule.constrained else 0)
    w.u32(len(schedule.entries))
    for entry in schedule.entries:
        _write_entry(w, entry)


def _read_schedule(r: _Reader) -> StageSchedule:
    use_q = bool(r.u8())
    constrained = bool(r.u8())
    count = r.u32()
    return StageSchedule(
        tuple(_read_entry(r) for _ in range(count)),
        use_q_features=use_q,
        constrained=constrained,
    )


def _write_stage(w: _Writer, stage):
    if isinstance(stage, LinearRegressor):
        w.u8(1)
        rows, cols = stage.weight_matrix.shape
        w.u32(rows)
        w.u32(cols)
        w.f64(stage.ridge_lambda)
        w.f64_array(stage.weight_matrix.reshape(-1))
        return
    w.u8(0)
    cfg = stage.pixel_cfg
    w.u32(cfg.offsets.shape[0])
    w.u32(cfg.pairs_per_landmark)
    w.f64(cfg.radius)
    w.f64_array(cfg.offsets.reshape(-1))
    n_trees, max_nodes = stage.node_feature.shape
    w.u32(n_trees)
    w.u32(max_nodes)
    w.i32_array(stage.tree_landmark)
    w.i32_array(stage.node_feature.reshape(-1))
    w.f64_array(stage.node_threshold.reshape(-1))
    w.i32_array(stage.node_left.reshape(-1))
    w.i32_array(stage.node_right.reshape(-1))
    w.i32_array(stage.node_leaf.reshape(-1))
    w.u32(stage.leaf_count)
    w.u8(1 if stage.use_q else 0)
    w.u32(stage.n_modes)
    rows, cols = stage.global_linear.shape
    w.u32(rows)
    w.u32(cols)
    w.f64_array(stage.global_linear.reshape(-1))
    w.u32(stage.trees_per_landmark)
    w.u32(stage.max_depth)


def _read_stage(r: _Reader):
    code = r.u8()
    if code == 1:
        rows = r.u32()
        cols = r.u32()
        lam = r.f64()
        data = r.f64_array()
        if data.size != rows * cols:
            raise FormatError("regressor matrix size mismatch", offset=r.pos)
        return LinearRegressor(weight_matrix=data.reshape(rows, cols), ridge_lambda=lam)
    if code != 0:
        raise FormatError(f"unknown regressor code {code}", offset=r.pos - 1)
    n = r.u32()
    pairs = r.u32()
    radius = r.f64()
    offsets = r.f64_array()
    if offsets.size != n * pairs * 4:
        raise FormatError("probe offset array size mismatch", offset=r.pos)
    pixel_cfg = PixelDiffConfig(pairs, radius, offsets.reshape(n, pairs, 2, 2))
    n_trees = r.u32()
    max_nodes = r.u32()
    tree_landmark = r.i32_array()
    node_feature = r.i32_array()
    node_threshold = r.f64_array()
    node_left = r.i32_array()
    node_right = r.i32_array()
    node_leaf = r.i32_array()
    for name, arr, expect in (
        ("tree landmarks", tree_landmark, n_trees),
        ("node features", node_feature, n_trees * max_nodes),
        ("node thresholds", node_threshold, n_trees * max_nodes),
        ("node children", node_left, n_trees * max_nodes),
        ("node children", node_right, n_trees * max_nodes),
        ("leaf ids", node_leaf, n_trees * max_nodes),
    ):
        if arr.size != expect:
            raise FormatError(f"{name} array size mismatch", offset=r.pos)
    leaf_count = r.u32()
    use_q = bool(r.u8())
    n_modes = r.u32()
    rows = r.u32()
    cols = r.u32()
    matrix = r.f64_array()
    if matrix.size != rows * cols:
        raise FormatError("global map size mismatch", offset=r.pos)
    trees_per_landmark = r.u32()
    max_depth = r.u32()
    return ForestStage(
        pixel_cfg=pixel_cfg,
        tree_landmark=tree_landmark,
        node_feature=node_feature.reshape(n_trees, max_nodes),
        node_threshold=node_threshold.reshape(n_trees, max_nodes),
        node_left=node_left.reshape(n_trees, max_nodes),
        node_right=node_right.reshape(n_trees, max_nodes),
        node_leaf=node_leaf.reshape(n_trees, max_nodes),
        leaf_count=leaf_count,
        global_linear=matrix.reshape(rows, cols),
        trees_per_landmark=trees_per_landmark,
        max_depth=max_depth,
        use_q=use_q,
        n_modes=n_modes,
    )


def _section(payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + payload


def save_model(model: CascadeModel, sink) -> None:
    """Serialize a trained model to a path or binary file object."""
    head = MAGIC + struct.pack("<IQ", model.format_version, model.seed)

    pdm_w = _Writer()
    _write_pdm(pdm_w, model.pdm)
    sched_w = _Writer()
    _write_schedule(sched_w, model.schedule)
    stages_w = _Writer()
    stages_w.u32(len(model.stages))
    for stage in model.stages:
        _write_stage(stages_w, stage)

    blob = head + b"".join(_section(w.getvalue()) for w in (pdm_w, sched_w, stages_w))
    if hasattr(sink, "write"):
        sink.write(blob)
    else:
        Path(sink).write_bytes(blob)


def load_model(source) -> CascadeModel:
    """Read a model file; the inverse of :func:`save_model`.

    Raises:
        FormatError: bad magic, unsupported version, truncation, or any
            internal inconsistency; diagnostics name the byte offset.
    """
    if hasattr(source, "read"):
        data = source.read()
    else:
        data = Path(source).read_bytes()

    r = _Reader(data)
    magic = r.take(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4)
    seed = struct.unpack("<Q", r.take(8))[0]

    sections = []
    for _ in range(3):
        length = r.u32()
        start = r.pos
        r.take(length)
        sections.append((start, length))
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after the last section", offset=r.pos)

    def parse(index, fn):
        start, length = sections[index]
        sub = _Reader(data, start)
        value = fn(sub)
        if sub.pos != start + length:
            raise FormatError(
                f"section {index} declared {length} bytes but {sub.pos - start} were read",
                offset=sub.pos,
            )
        return value

    pdm = parse(0, _read_pdm)
    schedule = parse(1, _read_schedule)

    def read_stages(sub: _Reader):
        count = sub.u32()
        return [_read_stage(sub) for _ in range(count)]

    stages = parse(2, read_stages)
    if len(stages) != len(schedule.entries):
        raise FormatError(
            f"{len(stages)} stage regressors for {len(schedule.entries)} schedule entries",
            offset=sections[2][0],
        )
    return CascadeModel(
        pdm=pdm,
        schedule=schedule,
        stages=stages,
        seed=seed,
        format_version=version,
    )
