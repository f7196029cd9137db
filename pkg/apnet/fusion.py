"""Геометрическое слияние (GAF): признаки пикселей в барицентрах, конкатенация с точечными, KPConv к исходным точкам."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from apnet.aerial import continuous_pixel_coords
from apnet.layers import Linear, ParameterStore
from apnet.sampling import DownsampledCloud, NeighborLists, SpatialIndex
from apnet.tensor import Value, bilinear_sample, concat, gather, matmul, scatter_add, transpose

logger = logging.getLogger(__name__)

DEFAULT_KERNEL_POINTS = 15
DEFAULT_RADIUS = 0.5
DEFAULT_SIGMA = 0.24
REPULSION_ITERATIONS = 2000
BASELINE_STRATEGIES = ("addition", "concatenation", "naive-gaf")
_PAIR_CHUNK = 65536


class FusionError(Exception):
    pass


@dataclass(frozen=True, eq=False)
class KernelLayout:
    """Смещения K точек ядра в шаре r_conv (первая в начале координат) и радиус влияния σ."""

    offsets: np.ndarray
    sigma: float
    radius: float
    weights: Value | None = None

    def __post_init__(self) -> None:
        offsets = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 3)
        if len(offsets) < 1:
            raise FusionError("В ядре должна быть хотя бы одна точка")
        if not self.sigma > 0:
            raise FusionError(f"σ должна быть положительной: {self.sigma}")
        if np.linalg.norm(offsets, axis=1).max() > self.radius:
            raise FusionError("Точка ядра вне шара r_conv")
        if self.weights is not None and (self.weights.ndim != 3 or self.weights.shape[0] != len(offsets)):
            raise FusionError(f"Веса ядра формы {self.weights.shape} для {len(offsets)} точек")
        object.__setattr__(self, "offsets", offsets)

    @property
    def size(self) -> int:
        return len(self.offsets)

    def with_weights(self, weights: Value) -> KernelLayout:
        return KernelLayout(self.offsets, self.sigma, self.radius, weights)


def make_kernel_layout(
    k: int = DEFAULT_KERNEL_POINTS,
    r_conv: float = DEFAULT_RADIUS,
    sigma: float = DEFAULT_SIGMA,
    seed: int = 0,
    *,
    iterations: int = REPULSION_ITERATIONS,
) -> KernelLayout:
    """Точка в начале координат плюс K−1 точек, разведённых отталкиванием внутри шара r_conv.

    Энергия Σ 1/d по всем парам (включая неподвижный центр), шаг градиентного спуска
    ограничен и убывает линейно; после каждого шага точки проецируются в единичный шар.
    """
    if k < 1:
        raise FusionError(f"K должно быть не меньше 1: {k}")
    if not r_conv > 0:
        raise FusionError(f"r_conv должен быть положительным: {r_conv}")
    if k == 1:
        return KernelLayout(np.zeros((1, 3)), sigma, r_conv)

    rng = np.random.default_rng(seed)
    directions = rng.normal(size=(k - 1, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    points = directions * rng.uniform(0.2, 1.0, size=(k - 1, 1)) ** (1 / 3)

    limit = 1.0 - 1e-9
    for step in range(iterations):
        anchors = np.vstack([np.zeros((1, 3)), points])
        diff = points[:, None, :] - anchors[None, :, :]
        dist = np.linalg.norm(diff, axis=2)
        dist[np.arange(k - 1), np.arange(1, k)] = np.inf
        force = (diff / np.maximum(dist, 1e-6)[..., None] ** 3).sum(axis=1)
        move = force * 1e-3
        max_move = 0.05 * (1.0 - step / iterations) + 1e-4
        norms = np.linalg.norm(move, axis=1, keepdims=True)
        move *= np.minimum(1.0, max_move / np.maximum(norms, 1e-12))
        points = points + move
        norms = np.linalg.norm(points, axis=1, keepdims=True)
        points = np.where(norms > limit, points * (limit / norms), points)

    offsets = np.vstack([np.zeros((1, 3)), points]) * r_conv
    logger.debug("Раскладка ядра K=%s: мин. расстояние %.4f", k, min_pairwise_distance(offsets))
    return KernelLayout(offsets, sigma, r_conv)


def min_pairwise_distance(offsets: np.ndarray) -> float:
    dist = np.linalg.norm(offsets[:, None, :] - offsets[None, :, :], axis=2)
    np.fill_diagonal(dist, np.inf)
    return float(dist.min())


def init_kernel_weights(store: ParameterStore, layout: KernelLayout, cin: int, cout: int, name: str = "fusion.kernel") -> KernelLayout:
    weights = store.uniform(name, (layout.size, cin, cout), layout.size * cin)
    return layout.with_weights(weights)


def write_kernel_layout(layout: KernelLayout, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"kernel_points {layout.size}", f"sigma {layout.sigma!r}", f"r_conv {layout.radius!r}"]
    lines += [" ".join(repr(float(c)) for c in offset) for offset in layout.offsets]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_kernel_layout(path: str | Path) -> KernelLayout:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
        k = int(lines[0].split()[1])
        sigma = float(lines[1].split()[1])
        radius = float(lines[2].split()[1])
        offsets = np.array([[float(v) for v in line.split()] for line in lines[3 : 3 + k]])
    except (OSError, IndexError, ValueError) as exc:
        raise FusionError(f"Не удалось прочитать раскладку ядра {path}: {exc}") from exc
    return KernelLayout(offsets, sigma, radius)


@dataclass(frozen=True, eq=False)
class FusionInputs:
    query_points: np.ndarray
    support_points: np.ndarray
    support_features: Value
    neighbors: NeighborLists
    clamped: int = 0

    def __post_init__(self) -> None:
        if len(self.neighbors) != len(self.query_points):
            raise FusionError(f"{len(self.neighbors)} списков соседей для {len(self.query_points)} запросов")
        if self.support_features.shape[0] != len(self.support_points):
            raise FusionError(
                f"{self.support_features.shape[0]} строк признаков для {len(self.support_points)} опорных точек"
            )
        if self.neighbors.indices.size and self.neighbors.indices.max() >= len(self.support_points):
            raise FusionError("Индекс соседа вне опорного множества")


def extract_pixel_features(
    feature_map: Value,
    xy: np.ndarray,
    s: float,
    origin: tuple[float, float],
) -> tuple[Value, int]:
    """f^a в точках: билинейно по центрам пикселей; выход за растр прижимается к краю и считается."""
    cu, cv = continuous_pixel_coords(xy, s, origin)
    features, clamped = bilinear_sample(feature_map, cu, cv)
    if clamped:
        logger.debug("Билинейная выборка: %s точек вне растра прижаты к краю", clamped)
    return features, clamped


def extract_pixel_feature(feature_map: Value, point: tuple[float, float], s: float, origin: tuple[float, float]) -> Value:
    features, _ = extract_pixel_features(feature_map, np.asarray(point, dtype=np.float64)[None, :2], s, origin)
    return features[0]


def neighbor_lists(query_points: np.ndarray, support_points: np.ndarray, r_conv: float, cap: int) -> NeighborLists:
    return SpatialIndex(support_points, r_conv).query_radius(query_points, r_conv, cap)


def build_fusion_inputs(
    original: np.ndarray,
    down: DownsampledCloud,
    feature_map: Value,
    point_feats: Value,
    *,
    s: float,
    origin: tuple[float, float],
    r_conv: float = DEFAULT_RADIUS,
    cap: int = 32,
    neighbors: NeighborLists | None = None,
) -> FusionInputs:
    if point_feats.shape[0] != len(down):
        raise FusionError(f"F^p содержит {point_feats.shape[0]} строк, барицентров {len(down)}")
    if feature_map.shape[-1] != point_feats.shape[-1]:
        raise FusionError(f"Каналы веток не совпадают: {feature_map.shape[-1]} и {point_feats.shape[-1]}")
    pixel_feats, clamped = extract_pixel_features(feature_map, down.barycenters[:, :2], s, origin)
    original = np.asarray(original, dtype=np.float64).reshape(-1, 3)
    if neighbors is None:
        neighbors = neighbor_lists(original, down.barycenters, r_conv, cap)
    return FusionInputs(
        query_points=original,
        support_points=down.barycenters,
        support_features=concat([pixel_feats, point_feats], axis=-1),
        neighbors=neighbors,
        clamped=clamped,
    )


def kernel_correlations(
    query_points: np.ndarray,
    support_points: np.ndarray,
    neighbors: NeighborLists,
    layout: KernelLayout,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Ненулевые тройки (запрос, опорная, точка ядра) с весом max(0, 1 − ‖(p_l − p_k) − x_m‖/σ)."""
    query_ids = neighbors.query_ids()
    support_ids = neighbors.indices
    parts: list[tuple[np.ndarray, ...]] = []
    for start in range(0, len(support_ids), _PAIR_CHUNK):
        q = query_ids[start : start + _PAIR_CHUNK]
        s = support_ids[start : start + _PAIR_CHUNK]
        rel = support_points[s] - query_points[q]
        dist = np.sqrt(((rel[:, None, :] - layout.offsets[None, :, :]) ** 2).sum(axis=2))
        influence = np.maximum(0.0, 1.0 - dist / layout.sigma)
        pair, kernel = np.nonzero(influence > 0)
        parts.append((q[pair], s[pair], kernel, influence[pair, kernel]))
    if not parts:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty, np.zeros(0)
    return tuple(np.concatenate(column) for column in zip(*parts))


def kpconv_fuse(inputs: FusionInputs, layout: KernelLayout) -> Value:
    """f_k = Σ_l Σ_m h_lm · f_l W_m; запросы без соседей получают нулевой вектор."""
    if layout.weights is None:
        raise FusionError("У раскладки ядра нет весов")
    feats = inputs.support_features
    k, cin, cout = layout.weights.shape
    if feats.shape[-1] != cin:
        raise FusionError(f"Ширина признаков {feats.shape[-1]}, ядро ожидает {cin}")

    query_ids, support_ids, kernel, influence = kernel_correlations(
        inputs.query_points, inputs.support_points, inputs.neighbors, layout
    )
    # Сначала признаки умножаются на все W_m, потом выбираются нужные строки: опорных точек меньше, чем троек.
    projected = matmul(feats, transpose(layout.weights, (1, 0, 2)).reshape(cin, k * cout)).reshape(-1, cout)
    picked = gather(projected, support_ids * k + kernel)
    weighted = picked * Value(influence[:, None].astype(feats.dtype))
    empty = int((inputs.neighbors.counts() == 0).sum())
    if empty:
        logger.debug("KPConv: %s запросов без соседей получают нули", empty)
    return scatter_add(weighted, query_ids, len(inputs.query_points))


def fuse_baseline(
    strategy: str,
    pixel_feats: Value,
    point_feats: Value,
    *,
    projection: Linear | None = None,
    layout: KernelLayout | None = None,
    support_points: np.ndarray | None = None,
    neighbors: NeighborLists | None = None,
) -> Value:
    """Базовые слияния на уровне барицентров: addition, concatenation, naive-gaf."""
    if pixel_feats.shape != point_feats.shape:
        raise FusionError(f"Формы признаков веток не совпадают: {pixel_feats.shape} и {point_feats.shape}")
    if strategy == "addition":
        return pixel_feats + point_feats
    joined = concat([pixel_feats, point_feats], axis=-1)
    if strategy == "concatenation":
        if projection is None:
            raise FusionError("Для concatenation нужен линейный слой 2C → C")
        return projection(joined)
    if strategy == "naive-gaf":
        if layout is None or support_points is None or neighbors is None:
            raise FusionError("Для naive-gaf нужны раскладка ядра, барицентры и списки соседей")
        inputs = FusionInputs(support_points, support_points, joined, neighbors)
        return kpconv_fuse(inputs, layout)
    raise FusionError(f"Неизвестная базовая стратегия: {strategy}")


def lift_nearest(values: np.ndarray, support_points: np.ndarray, query_points: np.ndarray, cell_size: float) -> np.ndarray:
    """Копия значения ближайшей опорной точки для каждого запроса."""
    index = SpatialIndex(support_points, cell_size)
    return np.asarray(values)[index.nearest(query_points)]
