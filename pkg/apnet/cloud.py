"""Облако точек с метками: типы, чтение/запись xyzrgbl и PLY, кадрирование на патчи."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

logger = logging.getLogger(__name__)

CLASS_NAMES: tuple[str, ...] = (
    "ground",
    "vegetation",
    "building",
    "wall",
    "bridge",
    "parking",
    "rail",
    "traffic_road",
    "street_furniture",
    "car",
    "footpath",
    "bike",
    "water",
)
CLASS_COUNT = len(CLASS_NAMES)
IGNORE_LABEL = -1

CloudFormat = Literal["xyzrgbl", "ply"]

_XYZRGBL_MAGIC = "xyzrgbl"

_PLY_TYPES = {
    "char": "i1",
    "int8": "i1",
    "uchar": "u1",
    "uint8": "u1",
    "short": "i2",
    "int16": "i2",
    "ushort": "u2",
    "uint16": "u2",
    "int": "i4",
    "int32": "i4",
    "uint": "u4",
    "uint32": "u4",
    "float": "f4",
    "float32": "f4",
    "double": "f8",
    "float64": "f8",
}
_PLY_LABEL_NAMES = ("label", "class")


class CloudFormatError(Exception):
    """Файл не соответствует заявленному формату (с указанием строки или записи)."""


class CloudIOError(Exception):
    pass


class CloudError(ValueError):
    """Некорректные данные облака: размеры, координаты, цвета или метки."""


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class LabeledPointCloud:
    """Облако P: координаты в метрах, цвета в [0, 1], необязательные метки классов."""

    positions: np.ndarray
    colors: np.ndarray
    labels: np.ndarray | None = None
    class_count: int = CLASS_COUNT

    def __post_init__(self) -> None:
        positions = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        colors = np.array(self.colors, dtype=np.float64).reshape(-1, 3)
        if len(colors) != len(positions):
            raise CloudError(
                f"Число цветов ({len(colors)}) не совпадает с числом точек ({len(positions)})"
            )
        if self.class_count <= 0:
            raise CloudError(f"class_count должен быть положительным: {self.class_count}")
        bad = np.flatnonzero(~np.isfinite(positions).all(axis=1))
        if bad.size:
            raise CloudError(f"Неконечная координата у точки #{bad[0]}")
        if colors.size and (colors.min() < 0.0 or colors.max() > 1.0):
            raise CloudError("Цвета должны лежать в [0, 1]")

        labels = None
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64).reshape(-1)
            if len(labels) != len(positions):
                raise CloudError(
                    f"Число меток ({len(labels)}) не совпадает с числом точек ({len(positions)})"
                )
            bad = np.flatnonzero((labels < 0) | (labels >= self.class_count))
            if bad.size:
                raise CloudError(
                    f"Метка {labels[bad[0]]} у точки #{bad[0]} вне диапазона [0, {self.class_count})"
                )
            labels = _readonly(labels)

        object.__setattr__(self, "positions", _readonly(positions))
        object.__setattr__(self, "colors", _readonly(colors))
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise CloudError("Для операции нужны метки (labels required)")
        return self.labels

    def subset(self, selector: np.ndarray) -> LabeledPointCloud:
        """Подмножество точек по маске или индексам с сохранением порядка."""
        return LabeledPointCloud(
            positions=self.positions[selector],
            colors=self.colors[selector],
            labels=None if self.labels is None else self.labels[selector],
            class_count=self.class_count,
        )

    def with_labels(self, labels: np.ndarray | None) -> LabeledPointCloud:
        return LabeledPointCloud(self.positions, self.colors, labels, self.class_count)

    def with_positions(self, positions: np.ndarray) -> LabeledPointCloud:
        return LabeledPointCloud(positions, self.colors, self.labels, self.class_count)

    def same_as(self, other: LabeledPointCloud) -> bool:
        """Побитовое равенство всех полей."""
        if self.class_count != other.class_count or self.has_labels != other.has_labels:
            return False
        if not (
            np.array_equal(self.positions, other.positions)
            and np.array_equal(self.colors, other.colors)
        ):
            return False
        return self.labels is None or np.array_equal(self.labels, other.labels)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.require_labels(), minlength=self.class_count)


@dataclass(frozen=True)
class BoundingRegion:
    """Прямоугольник [min, max) в плоскости XY, метры."""

    min_x: float
    min_y: float
    max_x: float
    max_y: float

    def __post_init__(self) -> None:
        if not (self.min_x <= self.max_x and self.min_y <= self.max_y):
            raise CloudError(f"Некорректная область: min больше max ({self})")

    @classmethod
    def around(cls, origin: tuple[float, float], size: float) -> BoundingRegion:
        x0, y0 = origin
        return cls(x0, y0, x0 + size, y0 + size)

    @classmethod
    def of_cloud(cls, cloud: LabeledPointCloud) -> BoundingRegion:
        """Наименьшая полуоткрытая область, содержащая все точки облака."""
        if len(cloud) == 0:
            return cls(0.0, 0.0, 0.0, 0.0)
        lo = cloud.positions[:, :2].min(axis=0)
        hi = np.nextafter(cloud.positions[:, :2].max(axis=0), np.inf)
        return cls(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))

    def contains(self, xy: np.ndarray) -> np.ndarray:
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        return (
            (xy[:, 0] >= self.min_x)
            & (xy[:, 0] < self.max_x)
            & (xy[:, 1] >= self.min_y)
            & (xy[:, 1] < self.max_y)
        )


def crop(cloud: LabeledPointCloud, region: BoundingRegion) -> LabeledPointCloud:
    """Точки с min <= (x, y) < max; порядок, цвета и метки сохраняются."""
    return cloud.subset(region.contains(cloud.positions[:, :2]))


def _infer_format(path: Path) -> CloudFormat:
    return "ply" if path.suffix.lower() == ".ply" else "xyzrgbl"


def read_cloud(
    path: str | Path,
    fmt: CloudFormat | None = None,
    *,
    class_count: int = CLASS_COUNT,
) -> LabeledPointCloud:
    """Читает облако; для xyzrgbl число классов берётся из заголовка файла."""
    path = Path(path)
    fmt = fmt or _infer_format(path)
    if not path.is_file():
        raise CloudIOError(f"Файл не найден: {path}")
    try:
        if fmt == "xyzrgbl":
            cloud = _read_xyzrgbl(path)
        elif fmt == "ply":
            cloud = _read_ply(path, class_count)
        else:
            raise CloudFormatError(f"Неизвестный формат облака: {fmt}")
    except OSError as exc:
        raise CloudIOError(f"Не удалось прочитать {path}: {exc}") from exc
    logger.debug("Прочитано облако %s: %s точек", path, len(cloud))
    return cloud


def _parse_xyzrgbl_header(line: str, path: Path, lineno: int) -> tuple[int, int, bool]:
    parts = line.split()
    if len(parts) != 4 or parts[0] != _XYZRGBL_MAGIC:
        raise CloudFormatError(
            f"{path}:{lineno}: ожидался заголовок 'xyzrgbl <N> <class_count> <0|1>', получено: {line!r}"
        )
    try:
        count, class_count, has_labels = int(parts[1]), int(parts[2]), int(parts[3])
    except ValueError as exc:
        raise CloudFormatError(f"{path}:{lineno}: некорректные числа в заголовке: {line!r}") from exc
    if count < 0 or class_count <= 0 or has_labels not in (0, 1):
        raise CloudFormatError(f"{path}:{lineno}: недопустимые значения заголовка: {line!r}")
    return count, class_count, bool(has_labels)


def _read_xyzrgbl(path: Path) -> LabeledPointCloud:
    header: tuple[int, int, bool] | None = None
    values: list[list[float]] = []
    labels: list[int] = []

    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if header is None:
                header = _parse_xyzrgbl_header(line, path, lineno)
                continue

            _, class_count, has_labels = header
            record = len(values)
            parts = line.split()
            expected = 7 if has_labels else 6
            if len(parts) != expected:
                raise CloudFormatError(
                    f"{path}:{lineno}: запись #{record}: ожидалось {expected} столбцов, "
                    f"получено {len(parts)}"
                )
            try:
                row = [float(p) for p in parts[:6]]
            except ValueError as exc:
                raise CloudFormatError(f"{path}:{lineno}: запись #{record}: не число") from exc
            if not all(np.isfinite(row[:3])):
                raise CloudFormatError(f"{path}:{lineno}: запись #{record}: неконечная координата")
            if not all(0.0 <= c <= 1.0 for c in row[3:]):
                raise CloudFormatError(f"{path}:{lineno}: запись #{record}: цвет вне [0, 1]")
            if has_labels:
                try:
                    label = int(parts[6])
                except ValueError as exc:
                    raise CloudFormatError(
                        f"{path}:{lineno}: запись #{record}: метка не целое число"
                    ) from exc
                if not 0 <= label < class_count:
                    raise CloudFormatError(
                        f"{path}:{lineno}: запись #{record}: метка {label} вне диапазона "
                        f"[0, {class_count})"
                    )
                labels.append(label)
            values.append(row)

    if header is None:
        raise CloudFormatError(f"{path}: отсутствует заголовок xyzrgbl")
    count, class_count, has_labels = header
    if len(values) != count:
        raise CloudFormatError(
            f"{path}: в заголовке заявлено {count} точек, прочитано {len(values)}"
        )

    data = np.array(values, dtype=np.float64).reshape(-1, 6)
    return LabeledPointCloud(
        positions=data[:, :3],
        colors=data[:, 3:],
        labels=np.array(labels, dtype=np.int64) if has_labels else None,
        class_count=class_count,
    )


def _parse_ply_header(fh, path: Path) -> tuple[str, list[tuple[str, int, list[tuple[str, str]]]]]:
    first = fh.readline().strip()
    if first != b"ply":
        raise CloudFormatError(f"{path}:1: файл не начинается с 'ply'")

    fmt = ""
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise CloudFormatError(f"{path}: заголовок PLY не завершён end_header")
        line = raw.decode("ascii", errors="replace").strip()
        if not line or line.startswith(("comment", "obj_info")):
            continue
        if line == "end_header":
            break
        parts = line.split()
        if parts[0] == "format":
            if len(parts) != 3 or parts[1] not in ("ascii", "binary_little_endian"):
                raise CloudFormatError(f"{path}:{lineno}: неподдерживаемый формат PLY: {line!r}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise CloudFormatError(f"{path}:{lineno}: некорректный element: {line!r}")
            try:
                count = int(parts[2])
            except ValueError as exc:
                raise CloudFormatError(f"{path}:{lineno}: некорректный размер element") from exc
            elements.append((parts[1], count, []))
        elif parts[0] == "property":
            if not elements:
                raise CloudFormatError(f"{path}:{lineno}: property до element")
            if parts[1] == "list":
                if elements[-1][0] == "vertex":
                    raise CloudFormatError(f"{path}:{lineno}: списочные свойства vertex не поддерживаются")
                continue
            if len(parts) != 3 or parts[1] not in _PLY_TYPES:
                raise CloudFormatError(f"{path}:{lineno}: неизвестное свойство: {line!r}")
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
        else:
            raise CloudFormatError(f"{path}:{lineno}: неизвестная строка заголовка: {line!r}")

    if not fmt:
        raise CloudFormatError(f"{path}: в заголовке PLY нет строки format")
    if not elements or elements[0][0] != "vertex":
        raise CloudFormatError(f"{path}: первым элементом PLY должен быть vertex")
    return fmt, elements


def _read_ply(path: Path, class_count: int) -> LabeledPointCloud:
    with path.open("rb") as fh:
        fmt, elements = _parse_ply_header(fh, path)
        _, count, props = elements[0]
        names = [name for name, _ in props]
        missing = [n for n in ("x", "y", "z", "red", "green", "blue") if n not in names]
        if missing:
            raise CloudFormatError(f"{path}: в vertex нет свойств {missing}")

        dtype = np.dtype([(name, "<" + code) for name, code in props])
        if fmt == "binary_little_endian":
            payload = fh.read(count * dtype.itemsize)
            if len(payload) < count * dtype.itemsize:
                raise CloudFormatError(
                    f"{path}: запись #{len(payload) // max(dtype.itemsize, 1)}: файл обрывается"
                )
            table = np.frombuffer(payload, dtype=dtype, count=count)
        else:
            table = np.zeros(count, dtype=dtype)
            record = 0
            while record < count:
                raw = fh.readline()
                if not raw:
                    raise CloudFormatError(f"{path}: запись #{record}: файл обрывается")
                parts = raw.split()
                if not parts:
                    continue
                if len(parts) != len(props):
                    raise CloudFormatError(
                        f"{path}: запись #{record}: ожидалось {len(props)} значений, получено {len(parts)}"
                    )
                try:
                    table[record] = tuple(
                        float(p) if code.startswith("f") else int(p)
                        for p, (_, code) in zip(parts, props)
                    )
                except ValueError as exc:
                    raise CloudFormatError(f"{path}: запись #{record}: не число") from exc
                record += 1

    positions = np.stack([table[n].astype(np.float64) for n in ("x", "y", "z")], axis=1)
    bad = np.flatnonzero(~np.isfinite(positions).all(axis=1))
    if bad.size:
        raise CloudFormatError(f"{path}: запись #{bad[0]}: неконечная координата")

    channels = []
    for name in ("red", "green", "blue"):
        column = table[name]
        if np.issubdtype(column.dtype, np.integer):
            channels.append(column.astype(np.float64) / 255.0)
        else:
            channels.append(column.astype(np.float64))
    colors = np.clip(np.stack(channels, axis=1), 0.0, 1.0)

    labels = None
    label_name = next((n for n in _PLY_LABEL_NAMES if n in names), None)
    if label_name is not None:
        labels = table[label_name].astype(np.int64)
        bad = np.flatnonzero((labels < 0) | (labels >= class_count))
        if bad.size:
            raise CloudFormatError(
                f"{path}: запись #{bad[0]}: метка {labels[bad[0]]} вне диапазона [0, {class_count})"
            )

    return LabeledPointCloud(positions, colors, labels, class_count)


def write_cloud(
    cloud: LabeledPointCloud,
    path: str | Path,
    fmt: CloudFormat = "xyzrgbl",
) -> None:
    """Пишет облако в xyzrgbl; 17 значащих цифр дают точный обратный разбор."""
    if fmt != "xyzrgbl":
        raise CloudFormatError("PLY поддерживается только на чтение")
    path = Path(path)
    header = f"{_XYZRGBL_MAGIC} {len(cloud)} {cloud.class_count} {int(cloud.has_labels)}\n"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            fh.write(header)
            if len(cloud) == 0:
                return
            table = np.hstack([cloud.positions, cloud.colors])
            fmt_row = ["%.17g"] * 6
            if cloud.labels is not None:
                table = np.column_stack([table, cloud.labels])
                fmt_row.append("%d")
            np.savetxt(fh, table, fmt=fmt_row)
    except OSError as exc:
        raise CloudIOError(f"Не удалось записать {path}: {exc}") from exc
    logger.debug("Облако записано: %s (%s точек)", path, len(cloud))
