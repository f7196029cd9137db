"""Процедурные городские сцены с разметкой и аугментации, сохраняющие соответствие облака и снимка."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from apnet.cloud import CLASS_NAMES, BoundingRegion, LabeledPointCloud, crop
from apnet.config import SceneConfig

logger = logging.getLogger(__name__)

LABEL = {name: i for i, name in enumerate(CLASS_NAMES)}

# Базовые цвета классов (RGB в [0, 1]); к ним добавляется шум.
BASE_COLORS: dict[str, tuple[float, float, float]] = {
    "ground": (0.55, 0.47, 0.36),
    "vegetation": (0.20, 0.52, 0.18),
    "building": (0.72, 0.70, 0.68),
    "wall": (0.60, 0.45, 0.38),
    "bridge": (0.45, 0.45, 0.50),
    "parking": (0.35, 0.35, 0.38),
    "rail": (0.40, 0.30, 0.25),
    "traffic_road": (0.22, 0.22, 0.24),
    "street_furniture": (0.80, 0.62, 0.15),
    "car": (0.70, 0.12, 0.12),
    "footpath": (0.68, 0.64, 0.55),
    "bike": (0.15, 0.30, 0.70),
    "water": (0.12, 0.32, 0.55),
}

# Число объектов класса на 100 м² сцены.
_INSTANCES_PER_100M2 = {
    "building": 0.5,
    "vegetation": 1.5,
    "wall": 1.0,
    "bridge": 0.25,
    "parking": 0.3,
    "rail": 0.3,
    "traffic_road": 0.25,
    "street_furniture": 2.0,
    "car": 1.5,
    "footpath": 0.25,
    "bike": 1.0,
    "water": 0.3,
}
_FLAT_CLASSES = ("traffic_road", "footpath", "parking", "rail", "water")
_FLAT_ELEVATION = {"traffic_road": 0.02, "footpath": 0.08, "parking": 0.03, "rail": 0.15, "water": 0.0}
_TOP_UP_ATTEMPTS = 50
MIN_AREA = 2.0

Sampler = Callable[[np.random.Generator, int], np.ndarray]


class SceneGenerationError(Exception):
    pass


@dataclass(frozen=True)
class _Part:
    label: str
    area: float
    sample: Sampler


def _rect(x0: float, y0: float, x1: float, y1: float, z: float, noise: float = 0.0) -> Sampler:
    def sample(rng: np.random.Generator, n: int) -> np.ndarray:
        return np.column_stack(
            [rng.uniform(x0, x1, n), rng.uniform(y0, y1, n), z + noise * rng.standard_normal(n)]
        )

    return sample


def _box(cx: float, cy: float, z0: float, sx: float, sy: float, sz: float, yaw: float) -> Sampler:
    """Верх и четыре боковые грани повёрнутого параллелепипеда, выборка пропорционально площади."""
    faces = np.array([sx * sy, sy * sz, sy * sz, sx * sz, sx * sz])
    probs = faces / faces.sum()
    c, s = math.cos(yaw), math.sin(yaw)

    def sample(rng: np.random.Generator, n: int) -> np.ndarray:
        face = rng.choice(5, size=n, p=probs)
        a, b = rng.uniform(-0.5, 0.5, n), rng.uniform(-0.5, 0.5, n)
        lx = np.select([face == 0, face == 1, face == 2], [a * sx, np.full(n, sx / 2), np.full(n, -sx / 2)], a * sx)
        ly = np.select([face == 0, face <= 2, face == 3], [b * sy, a * sy, np.full(n, sy / 2)], np.full(n, -sy / 2))
        lz = np.where(face == 0, sz, (b + 0.5) * sz)
        return np.column_stack([cx + c * lx - s * ly, cy + s * lx + c * ly, z0 + lz])

    return sample


def _ellipsoid(center: tuple[float, float, float], radii: tuple[float, float, float]) -> Sampler:
    def sample(rng: np.random.Generator, n: int) -> np.ndarray:
        directions = rng.standard_normal((n, 3))
        directions /= np.maximum(np.linalg.norm(directions, axis=1, keepdims=True), 1e-12)
        return np.asarray(center) + directions * np.asarray(radii)

    return sample


def _ellipsoid_area(radii: tuple[float, float, float]) -> float:
    a, b, c = radii
    p = 1.6075
    return 4 * math.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)


def _cylinder(cx: float, cy: float, z0: float, radius: float, height: float) -> Sampler:
    def sample(rng: np.random.Generator, n: int) -> np.ndarray:
        theta = rng.uniform(0, 2 * math.pi, n)
        return np.column_stack(
            [cx + radius * np.cos(theta), cy + radius * np.sin(theta), z0 + rng.uniform(0, height, n)]
        )

    return sample


class _Layout:
    """Раскладка объектов сцены; берёт случайность только из своего генератора."""

    def __init__(self, params: SceneConfig, rng: np.random.Generator) -> None:
        self.params = params
        self.rng = rng
        self.area = params.area
        self.scale = min(1.0, self.area / 20.0)
        self.parts: list[_Part] = []
        self.flat_regions: list[tuple[float, float, float, float]] = []

    def _spot(self, margin: float) -> tuple[float, float]:
        margin = min(margin, self.area / 2 * 0.9)
        return tuple(self.rng.uniform(margin, self.area - margin, 2))

    def _count(self, name: str) -> int:
        if name not in self.params.classes:
            return 0
        return max(1, round(self.area * self.area / 100.0 * _INSTANCES_PER_100M2[name]))

    def add(self, label: str, area: float, sampler: Sampler) -> None:
        self.parts.append(_Part(label, area, sampler))

    def flat(self, name: str) -> None:
        a, k = self.area, self.scale
        for _ in range(self._count(name)):
            if name in ("traffic_road", "footpath", "rail"):
                width = {"traffic_road": 3.0, "footpath": 1.5, "rail": 1.4}[name] * k
                y = self.rng.uniform(0.1 * a, 0.9 * a - width)
                if self.rng.random() < 0.5:
                    region = (0.0, y, a, y + width)
                else:
                    region = (y, 0.0, y + width, a)
            else:
                sx, sy = self.rng.uniform(3.0, 6.0, 2) * k
                cx, cy = self._spot(max(sx, sy) / 2)
                region = (cx - sx / 2, cy - sy / 2, cx + sx / 2, cy + sy / 2)
            x0, y0, x1, y1 = region
            self.flat_regions.append(region)
            self.add(name, (x1 - x0) * (y1 - y0), _rect(x0, y0, x1, y1, _FLAT_ELEVATION[name], 0.005))

    def objects(self) -> None:
        k = self.scale
        for _ in range(self._count("building")):
            sx, sy = self.rng.uniform(3.0, 6.0, 2) * k
            sz = self.rng.uniform(4.0, 10.0) * k
            cx, cy = self._spot(max(sx, sy) / 2)
            yaw = self.rng.uniform(0, math.pi)
            self.add("building", sx * sy + 2 * (sx + sy) * sz, _box(cx, cy, 0.0, sx, sy, sz, yaw))
        for _ in range(self._count("wall")):
            length, height = self.rng.uniform(3.0, 6.0) * k, self.rng.uniform(1.5, 2.5) * k
            cx, cy = self._spot(length / 2)
            yaw = self.rng.uniform(0, math.pi)
            self.add("wall", 2 * length * height, _box(cx, cy, 0.0, length, 0.2 * k, height, yaw))
        for _ in range(self._count("vegetation")):
            radii = (self.rng.uniform(1.5, 2.5) * k, self.rng.uniform(1.5, 2.5) * k, self.rng.uniform(1.0, 2.0) * k)
            cx, cy = self._spot(radii[0])
            top = self.rng.uniform(3.0, 6.0) * k
            self.add("vegetation", _ellipsoid_area(radii), _ellipsoid((cx, cy, top), radii))
            self.add("vegetation", 2 * math.pi * 0.15 * k * top, _cylinder(cx, cy, 0.0, 0.15 * k, top - radii[2]))
        for _ in range(self._count("bridge")):
            length, width = 8.0 * k, 3.0 * k
            cx, cy = self._spot(length / 2)
            deck = 4.0 * k
            yaw = self.rng.uniform(0, math.pi)
            self.add("bridge", length * width, _box(cx, cy, deck, length, width, 0.3 * k, yaw))
            for side in (-1, 1):
                px = cx + side * 0.35 * length * math.cos(yaw)
                py = cy + side * 0.35 * length * math.sin(yaw)
                self.add("bridge", 2 * math.pi * 0.3 * k * deck, _cylinder(px, py, 0.0, 0.3 * k, deck))
        for _ in range(self._count("car")):
            cx, cy = self._spot(2.5 * k)
            yaw = self.rng.uniform(0, math.pi)
            self.add("car", 4.2 * 1.8 * k * k * 3, _box(cx, cy, 0.2 * k, 4.2 * k, 1.8 * k, 1.0 * k, yaw))
            self.add("car", 2.2 * 1.6 * k * k * 2, _box(cx, cy, 1.2 * k, 2.2 * k, 1.6 * k, 0.5 * k, yaw))
        for _ in range(self._count("street_furniture")):
            cx, cy = self._spot(0.5)
            height = self.rng.uniform(2.5, 4.0) * k
            self.add("street_furniture", 2 * math.pi * 0.08 * height, _cylinder(cx, cy, 0.0, 0.08, height))
        for _ in range(self._count("bike")):
            cx, cy = self._spot(1.0 * k)
            yaw = self.rng.uniform(0, math.pi)
            self.add("bike", 1.7 * 1.0 * k * k * 2, _box(cx, cy, 0.0, 1.7 * k, 0.15 * k, 1.0 * k, yaw))


def _check_feasible(params: SceneConfig) -> None:
    if params.area < MIN_AREA:
        raise SceneGenerationError(f"Сцена {params.area} м слишком мала, минимум {MIN_AREA} м")
    expected = params.area * params.area * params.density
    needed = params.min_points_per_class * len(params.classes)
    if expected < needed:
        raise SceneGenerationError(
            f"Сцена {params.area}×{params.area} м при плотности {params.density} даёт ≈{expected:.0f} точек, "
            f"а для {len(params.classes)} классов по {params.min_points_per_class} нужно {needed}"
        )


def _in_regions(xy: np.ndarray, regions: list[tuple[float, float, float, float]]) -> np.ndarray:
    inside = np.zeros(len(xy), dtype=bool)
    for x0, y0, x1, y1 in regions:
        inside |= (xy[:, 0] >= x0) & (xy[:, 0] < x1) & (xy[:, 1] >= y0) & (xy[:, 1] < y1)
    return inside


def generate_scene(seed: int, params: SceneConfig) -> LabeledPointCloud:
    """Детерминированная сцена на квадрате [0, area)².

    Раскладка объектов берётся из одного потока случайности, выборка точек из другого,
    поэтому плотность меняет число точек, но не расположение объектов.
    """
    _check_feasible(params)
    layout = _Layout(params, np.random.default_rng([seed, 0]))
    for name in _FLAT_CLASSES:
        layout.flat(name)
    layout.objects()
    rng = np.random.default_rng([seed, 1])
    window = BoundingRegion.around((0.0, 0.0), params.area)

    positions: list[np.ndarray] = []
    labels: list[np.ndarray] = []

    ground_n = round(params.area * params.area * params.density)
    ground = _rect(0.0, 0.0, params.area, params.area, 0.0, 0.02)(rng, ground_n)
    ground = ground[~_in_regions(ground[:, :2], layout.flat_regions)]
    positions.append(ground)
    labels.append(np.full(len(ground), LABEL["ground"]))

    by_class: dict[str, list[_Part]] = {}
    for part in layout.parts:
        by_class.setdefault(part.label, []).append(part)
        pts = part.sample(rng, round(part.area * params.density))
        pts = pts[window.contains(pts[:, :2])]
        positions.append(pts)
        labels.append(np.full(len(pts), LABEL[part.label]))

    label_array = np.concatenate(labels).astype(np.int64)
    for name in params.classes:
        deficit = params.min_points_per_class - int((label_array == LABEL[name]).sum())
        if deficit <= 0:
            continue
        parts = by_class.get(name) or [_Part("ground", 1.0, _rect(0.0, 0.0, params.area, params.area, 0.0, 0.02))]
        weights = np.array([p.area for p in parts])
        weights /= weights.sum()
        for _ in range(_TOP_UP_ATTEMPTS):
            part = parts[int(rng.choice(len(parts), p=weights))]
            pts = part.sample(rng, 2 * deficit)
            pts = pts[window.contains(pts[:, :2])][:deficit]
            positions.append(pts)
            labels.append(np.full(len(pts), LABEL[name]))
            deficit -= len(pts)
            if deficit <= 0:
                break
        if deficit > 0:
            raise SceneGenerationError(f"Класс {name}: не удалось набрать {params.min_points_per_class} точек")
        logger.debug("Сцена %s: класс %s дополнен до минимума", seed, name)

    pos = np.concatenate(positions)
    lab = np.concatenate(labels).astype(np.int64)
    base = np.array([BASE_COLORS[CLASS_NAMES[i]] for i in range(len(CLASS_NAMES))])
    colors = np.clip(base[lab] + params.color_noise * rng.standard_normal((len(lab), 3)), 0.0, 1.0)
    cloud = LabeledPointCloud(pos, colors, lab)
    logger.debug("Сцена %s: %s точек", seed, len(cloud))
    return crop(cloud, window)


@dataclass(frozen=True)
class AugmentParams:
    angle: float
    flip: bool
    scale: float


def draw_augment_params(seed: int) -> AugmentParams:
    rng = np.random.default_rng([seed, 2])
    return AugmentParams(
        angle=float(rng.uniform(0.0, 2 * math.pi)),
        flip=bool(rng.random() < 0.5),
        scale=float(rng.uniform(0.9, 1.1)),
    )


def augment(
    cloud: LabeledPointCloud,
    seed: int,
    *,
    angle: float | None = None,
    flip: bool | None = None,
    scale: float | None = None,
) -> tuple[LabeledPointCloud, AugmentParams]:
    """Поворот вокруг z, отражение по y и изотропное масштабирование вокруг центра охвата XY.

    Снимок для примера строится заново по аугментированному облаку, поэтому
    соответствие точек и пикселей сохраняется точно.
    """
    drawn = draw_augment_params(seed)
    params = AugmentParams(
        angle=drawn.angle if angle is None else float(angle),
        flip=drawn.flip if flip is None else bool(flip),
        scale=drawn.scale if scale is None else float(scale),
    )
    if params.angle == 0.0 and not params.flip and params.scale == 1.0:
        return cloud, params
    if len(cloud) == 0:
        return cloud, params

    xy = cloud.positions[:, :2]
    center = (xy.min(axis=0) + xy.max(axis=0)) / 2
    local = cloud.positions - np.array([center[0], center[1], 0.0])
    c, s = math.cos(params.angle), math.sin(params.angle)
    rotated = np.column_stack([c * local[:, 0] - s * local[:, 1], s * local[:, 0] + c * local[:, 1], local[:, 2]])
    if params.flip:
        rotated[:, 1] = -rotated[:, 1]
    moved = rotated * params.scale + np.array([center[0], center[1], 0.0])
    return cloud.with_positions(moved), params
