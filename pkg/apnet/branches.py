"""Эталонные кодировщики веток: A-ветка по аэроснимку и P-ветка по прореженному облаку."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence

import numpy as np

from apnet.config import BranchConfig
from apnet.layers import BranchError, Conv2d, Linear, ParameterStore
from apnet.sampling import DownsampledCloud, SpatialIndex
from apnet.tensor import Value, concat, gather, max_pool2d, relu, upsample_nearest

logger = logging.getLogger(__name__)

IMAGE_CHANNELS = 3
POINT_FEATURES = 6


class ABranch:
    """Кодер–декодер из свёрток 3×3: пулинг на спуске, ближайший апсемплинг и skip-связи на подъёме.

    Ширины стадий задаёт ``a_widths``; число пулингов равно ``len(a_widths) - 1``.
    Выход: карта F^a того же размера, что и вход, с C каналами.
    """

    def __init__(self, store: ParameterStore, cfg: BranchConfig, in_channels: int = IMAGE_CHANNELS) -> None:
        widths = cfg.a_widths
        self.depth = len(widths) - 1
        self.channels = cfg.channels
        self.in_channels = in_channels
        self.encoder: list[Conv2d] = []
        cin = in_channels
        for i, width in enumerate(widths):
            self.encoder.append(store.conv(f"a.enc{i}", 3, cin, width))
            cin = width
        self.decoder: list[Conv2d] = [
            store.conv(f"a.dec{i}", 3, widths[i + 1] + widths[i], widths[i]) for i in range(self.depth)
        ]
        self.output = store.conv("a.out", 1, widths[0], cfg.channels)

    def __call__(self, image: Value) -> Value:
        if image.ndim != 3 or image.shape[-1] != self.in_channels:
            raise BranchError(f"A-ветка ожидает снимок (H, W, {self.in_channels}), получено {image.shape}")
        stride = 2**self.depth
        if image.shape[0] % stride or image.shape[1] % stride:
            raise BranchError(f"Размер снимка {image.shape[:2]} должен делиться на {stride}")

        skips: list[Value] = []
        x = image
        for i, conv in enumerate(self.encoder):
            if i > 0:
                x = max_pool2d(x, 2)
            x = relu(conv(x))
            skips.append(x)
        for i in reversed(range(self.depth)):
            x = concat([upsample_nearest(x, 2), skips[i]], axis=-1)
            x = relu(self.decoder[i](x))
        return self.output(x)


def a_branch_forward(image: Value, branch: ABranch) -> Value:
    return branch(image)


def point_features(down: DownsampledCloud) -> np.ndarray:
    """Вход P-ветки: цвет и координаты относительно центра облака."""
    centered = down.barycenters - down.barycenters.mean(axis=0)
    return np.hstack([down.colors, centered])


def neighbor_table(points: np.ndarray, support: np.ndarray, radius: float, k: int) -> np.ndarray:
    """Таблица (N, k) индексов соседей: слот 0: сама точка, затем ближайшие из support, дополнение собой."""
    n = len(points)
    table = np.repeat(np.arange(n)[:, None], k, axis=1)
    if k == 1 or support.size == 0:
        return table
    index = SpatialIndex(points[support], radius)
    lists = index.query_radius(points, radius, cap=k)
    query_ids = lists.query_ids()
    global_ids = support[lists.indices]
    keep = global_ids != query_ids
    query_ids, global_ids = query_ids[keep], global_ids[keep]
    counts = np.bincount(query_ids, minlength=n)
    rank = np.arange(len(query_ids)) - np.repeat(np.cumsum(counts) - counts, counts)
    keep = rank < k - 1
    table[query_ids[keep], 1 + rank[keep]] = global_ids[keep]
    return table


class PBranch:
    """Облегчённый кодировщик в духе RandLA: случайные опорные подмножества и max-пулинг по соседям."""

    def __init__(self, store: ParameterStore, cfg: BranchConfig, in_features: int = POINT_FEATURES) -> None:
        self.cfg = cfg
        self.channels = cfg.channels
        self.in_features = in_features
        self.dtype = store.dtype
        self.stages: list[Linear] = []
        cin = in_features
        for i, width in enumerate(cfg.p_widths):
            self.stages.append(store.linear(f"p.stage{i}", cin + 3, width))
            cin = width
        self.output = store.linear("p.out", cin, cfg.channels)

    def _support(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.cfg.p_keep_ratio >= 1.0:
            return np.arange(n)
        keep = max(1, math.ceil(self.cfg.p_keep_ratio * n))
        return np.sort(rng.choice(n, size=keep, replace=False))

    def encode(self, points: np.ndarray, features: Value, rng: np.random.Generator) -> Value:
        n = len(points)
        x = features
        for i, stage in enumerate(self.stages):
            radius = self.cfg.p_radius * 2**i
            k = self.cfg.p_neighbors
            table = neighbor_table(points, self._support(n, rng), radius, k)
            rel = (points[table] - points[:, None, :]) / radius
            grouped = gather(x, table.reshape(-1)).reshape(n, k, x.shape[-1])
            local = concat([grouped, Value(rel.astype(x.dtype))], axis=-1)
            x = relu(stage(local)).max(axis=1)
        return self.output(x)

    def __call__(
        self,
        down: DownsampledCloud,
        *,
        seed: int = 0,
        pass_seeds: Sequence[int] | None = None,
    ) -> Value:
        """F^p; при twice_forward_sum кодировщик запускается дважды с разными подмножествами и выходы складываются."""
        if len(down) == 0:
            raise BranchError("P-ветке нужен хотя бы один барицентр")
        features = point_features(down)
        if features.shape[1] != self.in_features:
            raise BranchError(f"P-ветка ожидает {self.in_features} признаков, получено {features.shape[1]}")
        x = Value(features.astype(self.dtype))
        passes = 2 if self.cfg.twice_forward_sum else 1
        if pass_seeds is None:
            pass_seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(passes)]
        if len(pass_seeds) != passes:
            raise BranchError(f"Нужно {passes} зерна проходов, получено {len(pass_seeds)}")

        out = None
        for pass_seed in pass_seeds:
            encoded = self.encode(down.barycenters, x, np.random.default_rng(pass_seed))
            out = encoded if out is None else out + encoded
        return out


def p_branch_forward(down: DownsampledCloud, branch: PBranch, *, seed: int = 0) -> Value:
    return branch(down, seed=seed)
