"""Прореживание по сетке до барицентров и пространственный индекс для поиска соседей."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from itertools import product

import numpy as np

from apnet.cloud import LabeledPointCloud

logger = logging.getLogger(__name__)

DEFAULT_GRID_SIZE = 0.2
DEFAULT_NEIGHBOR_CAP = 32

_QUERY_CHUNK = 8192


class SamplingError(Exception):
    pass


@dataclass(frozen=True, eq=False)
class DownsampledCloud:
    """P^d: по барицентру на непустую ячейку, плюс отображение исходных точек в ячейки."""

    barycenters: np.ndarray
    colors: np.ndarray
    labels: np.ndarray | None
    cell_of_original: np.ndarray
    cells: np.ndarray
    grid_size: float
    class_count: int

    def __len__(self) -> int:
        return len(self.barycenters)

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def member_counts(self) -> np.ndarray:
        return np.bincount(self.cell_of_original, minlength=len(self))

    def as_cloud(self) -> LabeledPointCloud:
        return LabeledPointCloud(self.barycenters, self.colors, self.labels, self.class_count)


def cell_indices(positions: np.ndarray, d: float) -> np.ndarray:
    """Ячейка ⌊coord/d⌋ по каждой оси; сетка привязана к началу мировых координат."""
    return np.floor(np.asarray(positions, dtype=np.float64) / d).astype(np.int64)


def grid_downsample(cloud: LabeledPointCloud, d: float = DEFAULT_GRID_SIZE) -> DownsampledCloud:
    if not d > 0:
        raise SamplingError(f"Размер ячейки должен быть положительным: {d}")
    n = len(cloud)
    if n == 0:
        return DownsampledCloud(
            barycenters=np.zeros((0, 3)),
            colors=np.zeros((0, 3)),
            labels=None if cloud.labels is None else np.zeros(0, dtype=np.int64),
            cell_of_original=np.zeros(0, dtype=np.int64),
            cells=np.zeros((0, 3), dtype=np.int64),
            grid_size=float(d),
            class_count=cloud.class_count,
        )

    cells = cell_indices(cloud.positions, d)
    unique_cells, inverse = np.unique(cells, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    n_cells = len(unique_cells)
    counts = np.bincount(inverse, minlength=n_cells).astype(np.float64)

    def cell_mean(values: np.ndarray) -> np.ndarray:
        return np.stack(
            [np.bincount(inverse, weights=values[:, axis], minlength=n_cells) for axis in range(3)],
            axis=1,
        ) / counts[:, None]

    barycenters = cell_mean(cloud.positions)
    # Среднее может выйти за крайнего члена ячейки на ulp; зажимаем, чтобы барицентр остался в ячейке.
    lo = np.full((n_cells, 3), np.inf)
    hi = np.full((n_cells, 3), -np.inf)
    np.minimum.at(lo, inverse, cloud.positions)
    np.maximum.at(hi, inverse, cloud.positions)
    barycenters = np.clip(barycenters, lo, hi)
    colors = np.clip(cell_mean(cloud.colors), 0.0, 1.0)

    labels = None
    if cloud.labels is not None:
        votes = np.bincount(
            inverse * cloud.class_count + cloud.labels,
            minlength=n_cells * cloud.class_count,
        ).reshape(n_cells, cloud.class_count)
        labels = votes.argmax(axis=1).astype(np.int64)

    logger.debug("Прореживание d=%s: %s → %s точек", d, n, n_cells)
    return DownsampledCloud(
        barycenters=barycenters,
        colors=colors,
        labels=labels,
        cell_of_original=inverse.astype(np.int64),
        cells=unique_cells,
        grid_size=float(d),
        class_count=cloud.class_count,
    )


@dataclass(frozen=True, eq=False)
class NeighborLists:
    """Списки соседей в CSR-виде: соседи запроса q лежат в indices[offsets[q]:offsets[q + 1]]."""

    offsets: np.ndarray
    indices: np.ndarray
    distances: np.ndarray
    truncated: int = 0

    def __len__(self) -> int:
        return len(self.offsets) - 1

    def of(self, query: int) -> np.ndarray:
        return self.indices[self.offsets[query] : self.offsets[query + 1]]

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def query_ids(self) -> np.ndarray:
        return np.repeat(np.arange(len(self)), self.counts())

    @classmethod
    def empty(cls, n_queries: int) -> NeighborLists:
        return cls(
            offsets=np.zeros(n_queries + 1, dtype=np.int64),
            indices=np.zeros(0, dtype=np.int64),
            distances=np.zeros(0),
        )


class SpatialIndex:
    """Хеш-сетка опорных точек; сторона ячейки обычно равна радиусу запроса."""

    def __init__(self, points: np.ndarray, cell_size: float) -> None:
        if not cell_size > 0:
            raise SamplingError(f"Сторона ячейки индекса должна быть положительной: {cell_size}")
        self.points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.cell_size = float(cell_size)
        cells = cell_indices(self.points, self.cell_size)
        # Ключ ячейки: смешанное основание по рангам занятых координат каждой оси.
        self._axes = [np.unique(cells[:, axis]) for axis in range(3)]
        keys = self._keys(cells)
        self._order = np.argsort(keys, kind="stable")
        self._sorted_keys = keys[self._order]

    def __len__(self) -> int:
        return len(self.points)

    def _keys(self, cells: np.ndarray) -> np.ndarray:
        """Ключи ячеек; ячейка, координата которой не занята ни одной опорной точкой, получает -1."""
        keys = np.zeros(len(cells), dtype=np.int64)
        inside = np.ones(len(cells), dtype=bool)
        for axis, occupied in enumerate(self._axes):
            if occupied.size == 0:
                return np.full(len(cells), -1, dtype=np.int64)
            rank = np.minimum(np.searchsorted(occupied, cells[:, axis]), occupied.size - 1)
            inside &= occupied[rank] == cells[:, axis]
            keys = keys * occupied.size + rank
        return np.where(inside, keys, -1)

    def _candidates(self, queries: np.ndarray, reach: int) -> tuple[np.ndarray, np.ndarray]:
        """Пары (запрос, опорная точка) из куба (2·reach + 1)³ ячеек вокруг ячейки запроса."""
        query_cells = cell_indices(queries, self.cell_size)
        query_ids, support_ids = [], []
        steps = range(-reach, reach + 1)
        for offset in product(steps, steps, steps):
            keys = self._keys(query_cells + np.array(offset))
            lo = np.searchsorted(self._sorted_keys, keys, side="left")
            hi = np.searchsorted(self._sorted_keys, keys, side="right")
            counts = hi - lo
            total = int(counts.sum())
            if total == 0:
                continue
            starts = np.repeat(lo - (np.cumsum(counts) - counts), counts)
            query_ids.append(np.repeat(np.arange(len(queries)), counts))
            support_ids.append(self._order[starts + np.arange(total)])
        if not query_ids:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty
        return np.concatenate(query_ids), np.concatenate(support_ids)

    def _distances(self, queries: np.ndarray, query_ids: np.ndarray, support_ids: np.ndarray) -> np.ndarray:
        diff = self.points[support_ids] - queries[query_ids]
        return np.sqrt((diff * diff).sum(axis=1))

    def query_radius(self, queries: np.ndarray, r: float, cap: int | None = None) -> NeighborLists:
        """Все опорные точки на расстоянии ≤ r, по возрастанию расстояния (равные по индексу), не больше cap."""
        if r < 0:
            raise SamplingError(f"Радиус не может быть отрицательным: {r}")
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if len(self) == 0 or len(queries) == 0:
            return NeighborLists.empty(len(queries))

        reach = max(1, math.ceil(r / self.cell_size)) if r > 0 else 0
        all_q, all_s, all_d = [], [], []
        for start in range(0, len(queries), _QUERY_CHUNK):
            chunk = queries[start : start + _QUERY_CHUNK]
            q_ids, s_ids = self._candidates(chunk, reach)
            dist = self._distances(chunk, q_ids, s_ids)
            keep = dist <= r
            all_q.append(q_ids[keep] + start)
            all_s.append(s_ids[keep])
            all_d.append(dist[keep])
        q_ids, s_ids, dist = np.concatenate(all_q), np.concatenate(all_s), np.concatenate(all_d)

        order = np.lexsort((s_ids, dist, q_ids))
        q_ids, s_ids, dist = q_ids[order], s_ids[order], dist[order]
        counts = np.bincount(q_ids, minlength=len(queries))
        truncated = 0
        if cap is not None:
            starts = np.repeat(np.cumsum(counts) - counts, counts)
            keep = np.arange(len(q_ids)) - starts < cap
            truncated = int((counts > cap).sum())
            q_ids, s_ids, dist = q_ids[keep], s_ids[keep], dist[keep]
            counts = np.minimum(counts, cap)
            if truncated:
                logger.debug("Поиск соседей r=%s: у %s запросов список обрезан до %s", r, truncated, cap)

        offsets = np.zeros(len(queries) + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        return NeighborLists(offsets=offsets, indices=s_ids.astype(np.int64), distances=dist, truncated=truncated)

    def nearest(self, queries: np.ndarray) -> np.ndarray:
        """Индекс ближайшей опорной точки для каждого запроса; при равенстве меньший индекс."""
        if len(self) == 0:
            raise SamplingError("Поиск ближайшего соседа в пустом индексе")
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        result = np.full(len(queries), -1, dtype=np.int64)
        pending = np.arange(len(queries))

        # Точки вне куба с reach ячеек дальше reach·cell_size, поэтому такой ответ точен.
        for reach in (1, 2):
            if pending.size == 0:
                break
            sub = queries[pending]
            q_ids, s_ids = self._candidates(sub, reach)
            if q_ids.size == 0:
                continue
            dist = self._distances(sub, q_ids, s_ids)
            order = np.lexsort((s_ids, dist, q_ids))
            q_ids, s_ids, dist = q_ids[order], s_ids[order], dist[order]
            first = np.ones(q_ids.size, dtype=bool)
            first[1:] = q_ids[1:] != q_ids[:-1]
            accepted = dist[first] <= reach * self.cell_size
            result[pending[q_ids[first][accepted]]] = s_ids[first][accepted]
            pending = pending[result[pending] < 0]

        for start in range(0, pending.size, 256):
            block = pending[start : start + 256]
            diff = self.points[None, :, :] - queries[block, None, :]
            result[block] = np.sqrt((diff * diff).sum(axis=2)).argmin(axis=1)
        return result


def radius_neighbors(index: SpatialIndex, query: tuple[float, float, float], r: float, cap: int | None = None) -> list[int]:
    return index.query_radius(np.asarray(query, dtype=np.float64)[None, :], r, cap).of(0).tolist()


def nearest_neighbor(index: SpatialIndex, query: tuple[float, float, float]) -> int:
    return int(index.nearest(np.asarray(query, dtype=np.float64)[None, :])[0])
