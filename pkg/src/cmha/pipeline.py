"""End-to-end registration: features, hybrid attention, matching, estimation."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from cmha.attention import HybridStack, HybridStackConfig
from cmha.embedding import EmbeddingConfig
from cmha.estimation import (
    EstimationConfig,
    LocalCandidate,
    lgr_select,
    local_transforms,
)
from cmha.geometry import PointCloud, RigidTransform, build_superpoint_set
from cmha.losses import CircleLossConfig
from cmha.matching import (
    CorrespondenceSet,
    dense_refine,
    dustbin_augment,
    feature_similarity,
    sinkhorn,
    topk_select,
)
from cmha.metrics import (
    MetricsReport,
    correspondence_inlier_ratio,
    correspondence_rmse,
    transform_errors,
)
from cmha.synth import SyntheticScene, neighbor_distance_features, project_cloud_to_grid


class PipelineStageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class PipelineConfig:
    embedding: EmbeddingConfig = EmbeddingConfig()
    estimation: EstimationConfig = EstimationConfig()
    circle: CircleLossConfig = CircleLossConfig()
    n_iters: int = 3
    n_superpoints: int = 32
    k_coarse: int = 64
    k_dense: int = 8
    l_iters: int = 50
    dustbin_logit: float = 0.0
    dense_confidence_min: float = 0.3
    lambda_weight: float = 0.5
    grid_rows: int = 8
    grid_cols: int = 8
    focal: float = 1.0
    use_image: bool = True
    use_attention: bool = True
    ir_radius: float = 0.10
    fmr_min_inlier_ratio: float = 0.05
    rr_rmse_threshold: float = 0.2
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, payload: dict) -> "PipelineConfig":
        data = dict(payload)
        for key, sub in (
            ("embedding", EmbeddingConfig),
            ("estimation", EstimationConfig),
            ("circle", CircleLossConfig),
        ):
            if key in data and isinstance(data[key], dict):
                data[key] = sub(**data[key])
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class RegistrationResult:
    transform: RigidTransform
    coarse: CorrespondenceSet
    dense: CorrespondenceSet
    candidates: list[LocalCandidate]
    model_time: float
    pose_time: float
    total_time: float


def _stage(name: str):
    """Annotate ValueErrors raised inside a pipeline stage with its name."""

    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc_type is not None and issubclass(exc_type, ValueError):
                raise PipelineStageError(name, str(exc)) from exc
            return False

    return _Ctx()


def register_pair(
    src: PointCloud, tgt: PointCloud, cfg: PipelineConfig
) -> RegistrationResult:
    """Full registration of a cloud pair; deterministic given inputs + config."""
    t_start = time.perf_counter()
    d = cfg.embedding.d

    with _stage("grouping"):
        src_feats = src.features if src.features is not None else neighbor_distance_features(src.points, d)
        tgt_feats = tgt.features if tgt.features is not None else neighbor_distance_features(tgt.points, d)
        if src_feats.shape[1] != d or tgt_feats.shape[1] != d:
            raise ValueError("feature dimension must match the embedding dimension")
        n_super = min(cfg.n_superpoints, len(src), len(tgt))
        src_super = build_superpoint_set(src.points, src_feats, n_super)
        tgt_super = build_superpoint_set(tgt.points, tgt_feats, n_super)

    with _stage("image synthesis"):
        grid = (cfg.grid_rows, cfg.grid_cols)
        src_img = project_cloud_to_grid(PointCloud(src.points, src_feats), grid, cfg.focal)
        tgt_img = project_cloud_to_grid(PointCloud(tgt.points, tgt_feats), grid, cfg.focal)
        src_img_feats = src_img.features if cfg.use_image else np.zeros_like(src_img.features)
        tgt_img_feats = tgt_img.features if cfg.use_image else np.zeros_like(tgt_img.features)

    with _stage("hybrid attention"):
        if cfg.use_attention:
            stack = HybridStack(
                HybridStackConfig(cfg.n_iters, d, cfg.embedding), cfg.seed
            )
            feats_p, feats_q = stack.forward(
                src_super,
                tgt_super,
                src_img_feats,
                src_img.pixels,
                tgt_img_feats,
                tgt_img.pixels,
            )
        else:
            feats_p, feats_q = src_super.features, tgt_super.features

    with _stage("superpoint matching"):
        scores = feature_similarity(feats_p, feats_q)
        assignment = sinkhorn(
            dustbin_augment(scores, cfg.dustbin_logit), cfg.l_iters, cfg.dustbin_logit
        )
        coarse = topk_select(assignment, cfg.k_coarse)

    with _stage("dense refinement"):
        dense = dense_refine(
            coarse,
            src_super,
            tgt_super,
            src_feats,
            tgt_feats,
            cfg.k_dense,
            cfg.l_iters,
            cfg.dustbin_logit,
            cfg.dense_confidence_min,
        )
    t_model = time.perf_counter()

    with _stage("local estimation"):
        try:
            candidates = local_transforms(dense, src.points, tgt.points, cfg.estimation)
        except ValueError:
            # every patch fell below the confidence floor; retry unfiltered so
            # sparse-overlap pairs degrade gracefully instead of aborting
            if cfg.dense_confidence_min <= 0.0:
                raise
            dense = dense_refine(
                coarse,
                src_super,
                tgt_super,
                src_feats,
                tgt_feats,
                cfg.k_dense,
                cfg.l_iters,
                cfg.dustbin_logit,
                0.0,
            )
            candidates = local_transforms(dense, src.points, tgt.points, cfg.estimation)
    with _stage("global selection"):
        transform = lgr_select(candidates, dense, src.points, tgt.points, cfg.estimation)
    t_end = time.perf_counter()

    return RegistrationResult(
        transform=transform,
        coarse=coarse,
        dense=dense,
        candidates=candidates,
        model_time=t_model - t_start,
        pose_time=t_end - t_model,
        total_time=t_end - t_start,
    )


def evaluate_scene(
    scene: SyntheticScene,
    transform: RigidTransform,
    dense: CorrespondenceSet,
    coarse: CorrespondenceSet,
    cfg: PipelineConfig,
    rr_threshold: float | None = None,
) -> MetricsReport:
    """Metrics of a predicted registration against scene ground truth."""
    threshold = cfg.rr_rmse_threshold if rr_threshold is None else rr_threshold
    rre, rte = transform_errors(transform, scene.gt)
    gt_corrs = scene.gt_correspondences
    if len(gt_corrs):
        rmse = correspondence_rmse(
            scene.src.points[gt_corrs.src_indices],
            scene.tgt.points[gt_corrs.tgt_indices],
            transform,
        )
    else:
        rmse = float("inf")
    ir = correspondence_inlier_ratio(
        dense, scene.src.points, scene.tgt.points, scene.gt, cfg.ir_radius
    ) if len(dense) else 0.0
    pir = 0.0
    if len(coarse):
        hits = scene.overlap_table[coarse.src_indices, coarse.tgt_indices] > 0
        pir = float(np.mean(hits))
    return MetricsReport(
        rre=rre,
        rte=rte,
        rmse=min(rmse, 1e12),
        inlier_ratio=ir,
        fmr=1.0 if ir >= cfg.fmr_min_inlier_ratio else 0.0,
        rr=1.0 if rmse < threshold else 0.0,
        pir=pir,
    )


@dataclass
class RunReport:
    entries: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    version: str = ""

    def to_dict(self) -> dict:
        return {
            "entries": self.entries,
            "aggregate": self.aggregate,
            "timing": self.timing,
            "config": self.config,
            "version": self.version,
        }


def build_run_report(
    entries: list[dict], cfg: PipelineConfig, version: str
) -> RunReport:
    """Aggregate per-pair entries; every aggregate is a plain mean of them."""
    def mean_of(key: str) -> float:
        return float(np.mean([e["metrics"][key] for e in entries])) if entries else 0.0

    aggregate = {
        "rr": mean_of("rr"),
        "fmr": mean_of("fmr"),
        "inlier_ratio": mean_of("inlier_ratio"),
        "rre": mean_of("rre"),
        "rte": mean_of("rte"),
        "rmse": mean_of("rmse"),
        "pir": mean_of("pir"),
    }
    timing = {
        "model": float(sum(e["timing"]["model"] for e in entries)),
        "pose": float(sum(e["timing"]["pose"] for e in entries)),
        "total": float(sum(e["timing"]["total"] for e in entries)),
    }
    return RunReport(entries, aggregate, timing, cfg.to_dict(), version)


def load_pipeline_config(path) -> PipelineConfig:
    return PipelineConfig.from_json(Path(path).read_text())
