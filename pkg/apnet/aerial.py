"""Псевдо-аэроснимок: ортогональная проекция облака, достройка пустых пикселей, метки пикселей."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from apnet.cloud import IGNORE_LABEL, LabeledPointCloud

logger = logging.getLogger(__name__)

DEFAULT_SIZE = (512, 512)
DEFAULT_COMPLETION_PASSES = 2
MIN_VALID_NEIGHBOURS = 3

# Порядок обхода 8-соседей: он же порядок разрешения полных совпадений.
_NEIGHBOUR_OFFSETS = ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1))


class ProjectionError(Exception):
    pass


def _readonly(array: np.ndarray | None) -> np.ndarray | None:
    if array is not None:
        array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class AerialRaster:
    """Растр H×W: каналы цвета или признаков, метки, маска валидности и высоты.

    Пиксель (u, v) хранится в строке v и столбце u; u растёт вдоль x, v вдоль y.
    Начало координат: мировая позиция минимального угла пикселя (0, 0).
    """

    width: int
    height: int
    pixel_size: float
    origin: tuple[float, float]
    channels: np.ndarray | None
    label_plane: np.ndarray | None
    valid_mask: np.ndarray
    height_plane: np.ndarray
    class_count: int

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ProjectionError(f"Размер растра должен быть положительным: {self.width}×{self.height}")
        if not self.pixel_size > 0:
            raise ProjectionError(f"Размер пикселя должен быть положительным: {self.pixel_size}")
        shape = (self.height, self.width)
        if self.valid_mask.shape != shape or self.height_plane.shape != shape:
            raise ProjectionError("Маска валидности и плоскость высот не совпадают с размером растра")
        valid = self.valid_mask
        if self.channels is not None:
            if self.channels.shape[:2] != shape:
                raise ProjectionError(f"Каналы {self.channels.shape} не совпадают с растром {shape}")
            if not np.isfinite(self.channels[valid]).all():
                raise ProjectionError("Неконечные значения каналов в валидных пикселях")
        if self.label_plane is not None:
            if self.label_plane.shape != shape:
                raise ProjectionError("Плоскость меток не совпадает с размером растра")
            labels = self.label_plane[valid]
            if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
                raise ProjectionError("Метка валидного пикселя вне диапазона классов")
        for name in ("channels", "label_plane", "valid_mask", "height_plane"):
            _readonly(getattr(self, name))

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def valid_count(self) -> int:
        return int(self.valid_mask.sum())

    def image(self) -> np.ndarray:
        """Каналы с нулями в пустых пикселях: вход A-ветки."""
        if self.channels is None:
            raise ProjectionError("В растре нет каналов")
        return np.where(self.valid_mask[..., None], self.channels, 0.0)

    def pixel_labels(self) -> np.ndarray:
        """Метки пикселей с IGNORE_LABEL в пустых пикселях."""
        if self.label_plane is None:
            raise ProjectionError("В растре нет плоскости меток")
        return np.where(self.valid_mask, self.label_plane, IGNORE_LABEL)

    def world_center(self, u: int, v: int) -> tuple[float, float]:
        x0, y0 = self.origin
        return (u + 0.5) * self.pixel_size + x0, (v + 0.5) * self.pixel_size + y0

    def coverage(self) -> tuple[float, float]:
        return self.width * self.pixel_size, self.height * self.pixel_size


def pixel_of(point: tuple[float, float], s: float, origin: tuple[float, float] = (0.0, 0.0)) -> tuple[int, int]:
    """Квантование (u, v) = (⌊(x − x0)/s⌋, ⌊(y − y0)/s⌋); выход за растр проверяет вызывающий."""
    if not s > 0:
        raise ProjectionError(f"Размер пикселя должен быть положительным: {s}")
    x, y = point
    return math.floor((x - origin[0]) / s), math.floor((y - origin[1]) / s)


def pixel_indices(xy: np.ndarray, s: float, origin: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    if not s > 0:
        raise ProjectionError(f"Размер пикселя должен быть положительным: {s}")
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    u = np.floor((xy[:, 0] - origin[0]) / s).astype(np.int64)
    v = np.floor((xy[:, 1] - origin[1]) / s).astype(np.int64)
    return u, v


def continuous_pixel_coords(xy: np.ndarray, s: float, origin: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    """Непрерывные координаты отсчётов: центр пикселя (u, v) попадает ровно в (u, v)."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    return (xy[:, 0] - origin[0]) / s - 0.5, (xy[:, 1] - origin[1]) / s - 0.5


def _resolve_origin(cloud: LabeledPointCloud, origin: tuple[float, float] | None) -> tuple[float, float]:
    if origin is not None:
        return float(origin[0]), float(origin[1])
    if len(cloud) == 0:
        raise ProjectionError("Пустое облако: начало растра нужно задать явно")
    lo = cloud.positions[:, :2].min(axis=0)
    return float(lo[0]), float(lo[1])


def _highest_points(
    cloud: LabeledPointCloud,
    s: float,
    origin: tuple[float, float],
    size: tuple[int, int],
) -> tuple[np.ndarray, np.ndarray]:
    """Для каждого непустого пикселя: индекс самой высокой точки (при равной z более поздней)."""
    width, height = size
    u, v = pixel_indices(cloud.positions[:, :2], s, origin)
    inside = np.flatnonzero((u >= 0) & (u < width) & (v >= 0) & (v < height))
    dropped = len(cloud) - inside.size
    if dropped:
        logger.debug("Проекция: %s точек вне растра отброшено", dropped)
    flat = v[inside] * width + u[inside]
    order = np.lexsort((inside, cloud.positions[inside, 2], flat))
    flat_sorted = flat[order]
    last = np.ones(flat_sorted.size, dtype=bool)
    last[:-1] = flat_sorted[1:] != flat_sorted[:-1]
    return flat_sorted[last], inside[order[last]]


def _project(
    cloud: LabeledPointCloud,
    s: float,
    origin: tuple[float, float] | None,
    size: tuple[int, int],
    *,
    with_colors: bool,
    with_labels: bool,
) -> AerialRaster:
    if not s > 0:
        raise ProjectionError(f"Размер пикселя должен быть положительным: {s}")
    width, height = size
    if width <= 0 or height <= 0:
        raise ProjectionError(f"Размер растра должен быть положительным: {width}×{height}")
    origin = _resolve_origin(cloud, origin)
    flat, winners = _highest_points(cloud, s, origin, (width, height))

    valid = np.zeros(height * width, dtype=bool)
    valid[flat] = True
    heights = np.full(height * width, np.nan)
    heights[flat] = cloud.positions[winners, 2]

    channels = None
    if with_colors:
        channels = np.zeros((height * width, 3))
        channels[flat] = cloud.colors[winners]
        channels = channels.reshape(height, width, 3)

    labels = None
    if with_labels:
        labels = np.full(height * width, IGNORE_LABEL, dtype=np.int64)
        labels[flat] = cloud.require_labels()[winners]
        labels = labels.reshape(height, width)

    return AerialRaster(
        width=width,
        height=height,
        pixel_size=float(s),
        origin=origin,
        channels=channels,
        label_plane=labels,
        valid_mask=valid.reshape(height, width),
        height_plane=heights.reshape(height, width),
        class_count=cloud.class_count,
    )


def project_to_aerial(
    cloud: LabeledPointCloud,
    s: float,
    origin: tuple[float, float] | None = None,
    size: tuple[int, int] = DEFAULT_SIZE,
) -> AerialRaster:
    """Начальный снимок I^init: цвет (и метка, если есть) самой высокой точки пикселя."""
    return _project(cloud, s, origin, size, with_colors=True, with_labels=cloud.has_labels)


def project_labels(
    cloud: LabeledPointCloud,
    s: float,
    origin: tuple[float, float] | None = None,
    size: tuple[int, int] = DEFAULT_SIZE,
) -> AerialRaster:
    if not cloud.has_labels:
        raise ProjectionError("Для проекции меток нужны метки облака (labels required)")
    return _project(cloud, s, origin, size, with_colors=False, with_labels=True)


def _shifted(plane: np.ndarray, fill) -> np.ndarray:
    """Стек значений 8 соседей: (8, H, W, ...)."""
    height, width = plane.shape[:2]
    pad = [(1, 1), (1, 1)] + [(0, 0)] * (plane.ndim - 2)
    padded = np.pad(plane, pad, constant_values=fill)
    return np.stack(
        [padded[1 + dy : 1 + dy + height, 1 + dx : 1 + dx + width] for dy, dx in _NEIGHBOUR_OFFSETS]
    )


def _value_keys(raster: AerialRaster) -> np.ndarray:
    if raster.label_plane is not None:
        return raster.label_plane.astype(np.int64)
    rgb = np.rint(np.clip(raster.channels[..., :3], 0.0, 1.0) * 255).astype(np.int64)
    return (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]


def complete_image(raster: AerialRaster, passes: int = DEFAULT_COMPLETION_PASSES) -> AerialRaster:
    """Достройка пустых пикселей по модальному значению соседей.

    Пустой пиксель заполняется, если среди 8 соседей не меньше трёх валидных. Побеждает
    самое частое значение; при равенстве значение с самым высоким соседом, затем
    меньший индекс класса. Цвет, метка и высота копируются у этого соседа целиком.
    Обновление синхронное: проход читает только состояние предыдущего прохода.
    """
    valid = raster.valid_mask.copy()
    keys = _value_keys(raster)
    heights = raster.height_plane.copy()
    channels = None if raster.channels is None else raster.channels.copy()
    labels = None if raster.label_plane is None else raster.label_plane.copy()

    for pass_no in range(passes):
        if valid.all():
            break
        n_valid = _shifted(valid, False)
        n_keys = _shifted(np.where(valid, keys, -1), -1)
        n_heights = _shifted(np.where(valid, heights, -np.inf), -np.inf)

        candidates = ~valid & (n_valid.sum(axis=0) >= MIN_VALID_NEIGHBOURS)
        if not candidates.any():
            break

        support = ((n_keys[:, None] == n_keys[None, :]) & n_valid[None, :]).sum(axis=1)
        support = np.where(n_valid, support, -1)

        best_slot = np.zeros(valid.shape, dtype=np.int64)
        best_count, best_height, best_key = support[0], n_heights[0], n_keys[0]
        for slot in range(1, len(_NEIGHBOUR_OFFSETS)):
            count, height_, key = support[slot], n_heights[slot], n_keys[slot]
            better = (count > best_count) | (
                (count == best_count)
                & ((height_ > best_height) | ((height_ == best_height) & (key < best_key)))
            )
            best_slot = np.where(better, slot, best_slot)
            best_count = np.where(better, count, best_count)
            best_height = np.where(better, height_, best_height)
            best_key = np.where(better, key, best_key)

        rows, cols = np.nonzero(candidates)
        slots = best_slot[rows, cols]
        keys[rows, cols] = n_keys[slots, rows, cols]
        heights[rows, cols] = n_heights[slots, rows, cols]
        if channels is not None:
            channels[rows, cols] = _shifted(channels, 0.0)[slots, rows, cols]
        if labels is not None:
            labels[rows, cols] = _shifted(labels, IGNORE_LABEL)[slots, rows, cols]
        valid[rows, cols] = True
        logger.debug("Достройка, проход %s: заполнено %s пикселей", pass_no + 1, rows.size)

    return AerialRaster(
        width=raster.width,
        height=raster.height,
        pixel_size=raster.pixel_size,
        origin=raster.origin,
        channels=channels,
        label_plane=labels,
        valid_mask=valid,
        height_plane=heights,
        class_count=raster.class_count,
    )
