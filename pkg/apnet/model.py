"""Сборка сети по стратегии слияния: ветки, головы, слой слияния и перенос предсказаний на исходные точки."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from apnet.aerial import continuous_pixel_coords
from apnet.branches import ABranch, PBranch
from apnet.cloud import CLASS_COUNT
from apnet.config import ExperimentConfig
from apnet.fusion import (
    FusionError,
    FusionInputs,
    extract_pixel_features,
    fuse_baseline,
    init_kernel_weights,
    kpconv_fuse,
    lift_nearest,
    make_kernel_layout,
)
from apnet.layers import ParameterStore, SegmentationHead
from apnet.losses import ClassWeights, single_head_loss, total_loss
from apnet.tensor import Value, bilinear_weights, concat

if TYPE_CHECKING:
    from apnet.pipeline import Sample

logger = logging.getLogger(__name__)

HEADS = ("a", "p", "fused")
FUSED_STRATEGIES = ("addition", "concatenation", "naive-gaf", "gaf")


@dataclass(eq=False)
class Predictions:
    """Логиты голов. ``fused`` задан в исходных точках для gaf и в барицентрах для базовых слияний."""

    a: Value | None = None
    p: Value | None = None
    fused: Value | None = None
    fused_on_original: bool = False
    clamped: int = 0

    def heads(self) -> tuple[str, ...]:
        return tuple(name for name in HEADS if getattr(self, name) is not None)

    def as_dict(self) -> dict[str, Value]:
        return {name: getattr(self, name) for name in self.heads()}


class APNet:
    def __init__(self, cfg: ExperimentConfig, class_count: int = CLASS_COUNT) -> None:
        self.cfg = cfg
        self.strategy = cfg.train.strategy
        self.class_count = class_count
        store = ParameterStore(seed=cfg.train.seed, dtype=cfg.train.dtype)
        self.dtype = store.dtype
        channels = cfg.branches.channels
        m = cfg.branches.head_layers

        self.a_branch = ABranch(store, cfg.branches) if self.strategy != "p-only" else None
        self.p_branch = PBranch(store, cfg.branches) if self.strategy != "a-only" else None
        self.head_a = SegmentationHead.build(store, "head_a", channels, class_count, m) if self.a_branch else None
        self.head_p = SegmentationHead.build(store, "head_p", channels, class_count, m) if self.p_branch else None

        self.layout = None
        self.projection = None
        self.head_fused = None
        if self.strategy in ("gaf", "naive-gaf"):
            layout = make_kernel_layout(
                cfg.fusion.kernel_points, cfg.fusion.radius, cfg.fusion.sigma, seed=cfg.train.seed
            )
            self.layout = init_kernel_weights(store, layout, 2 * channels, channels)
        if self.strategy == "concatenation":
            self.projection = store.linear("fusion.project", 2 * channels, channels)
        if self.strategy in FUSED_STRATEGIES:
            self.head_fused = SegmentationHead.build(store, "head_fused", channels, class_count, m)

        self.params = store.params
        logger.info(
            "Модель %s: %s параметров в %s тензорах",
            self.strategy,
            sum(p.size for p in self.params.values()),
            len(self.params),
        )

    def forward(self, sample: Sample, *, seed: int = 0) -> Predictions:
        cfg = self.cfg
        s = cfg.projection.pixel_size
        preds = Predictions()

        feature_map = None
        if self.a_branch is not None:
            feature_map = self.a_branch(Value(sample.raster.image().astype(self.dtype)))
            preds.a = self.head_a(feature_map)
        point_feats = None
        if self.p_branch is not None:
            point_feats = self.p_branch(sample.down, seed=seed)
            preds.p = self.head_p(point_feats)
        if self.head_fused is None:
            return preds

        pixel_feats, preds.clamped = extract_pixel_features(
            feature_map, sample.down.barycenters[:, :2], s, sample.origin
        )
        if self.strategy == "gaf":
            if sample.neighbors is None:
                raise FusionError("В примере нет списков соседей для GAF")
            inputs = FusionInputs(
                query_points=sample.cloud.positions,
                support_points=sample.down.barycenters,
                support_features=concat([pixel_feats, point_feats], axis=-1),
                neighbors=sample.neighbors,
                clamped=preds.clamped,
            )
            fused = kpconv_fuse(inputs, self.layout)
            preds.fused_on_original = True
        else:
            if self.strategy == "naive-gaf" and sample.down_neighbors is None:
                raise FusionError("В примере нет списков соседей барицентров для naive-gaf")
            fused = fuse_baseline(
                self.strategy,
                pixel_feats,
                point_feats,
                projection=self.projection,
                layout=self.layout,
                support_points=sample.down.barycenters,
                neighbors=sample.down_neighbors,
            )
        preds.fused = self.head_fused(fused)
        return preds

    def loss(self, preds: Predictions, sample: Sample, weights: ClassWeights) -> tuple[Value, dict[str, float]]:
        """Пиксельные метки учат голову A, метки барицентров голову P, исходные метки голову слияния."""
        loss_cfg = self.cfg.loss
        if self.strategy == "a-only":
            return single_head_loss(preds.a, sample.pixel_labels, weights, beta=loss_cfg.beta, name="a")
        if self.strategy == "p-only":
            return single_head_loss(preds.p, sample.down.labels, weights, beta=loss_cfg.beta, name="p")
        fused_target = sample.cloud.require_labels() if preds.fused_on_original else sample.down.labels
        return total_loss(
            preds.as_dict(),
            {"a": sample.pixel_labels, "p": sample.down.labels, "fused": fused_target},
            weights,
            alpha={"a": loss_cfg.alpha_a, "p": loss_cfg.alpha_p, "fused": loss_cfg.alpha_fused},
            beta=loss_cfg.beta,
        )


def lift_bilinear(logit_map: np.ndarray, xy: np.ndarray, s: float, origin: tuple[float, float]) -> np.ndarray:
    """Логиты пикселей в точках по четырём соседним центрам пикселей."""
    height, width, _ = logit_map.shape
    cu, cv = continuous_pixel_coords(xy, s, origin)
    rows, cols, weights, _ = bilinear_weights(cu, cv, width, height)
    return (weights[:, :, None] * logit_map[rows, cols]).sum(axis=1)


def point_predictions(preds: Predictions, sample: Sample, pixel_size: float) -> dict[str, np.ndarray]:
    """Предсказанные метки каждой головы в исходных точках примера."""
    positions = sample.cloud.positions
    out: dict[str, np.ndarray] = {}
    if preds.a is not None:
        out["a"] = lift_bilinear(preds.a.data, positions[:, :2], pixel_size, sample.origin).argmax(axis=1)
    if preds.p is not None:
        down_labels = preds.p.data.argmax(axis=1)
        out["p"] = lift_nearest(down_labels, sample.down.barycenters, positions, sample.down.grid_size)
    if preds.fused is not None:
        fused_labels = preds.fused.data.argmax(axis=1)
        if preds.fused_on_original:
            out["fused"] = fused_labels
        else:
            out["fused"] = lift_nearest(fused_labels, sample.down.barycenters, positions, sample.down.grid_size)
    return out
