"""Выгрузка растров (PGM/PPM с заголовком, PNG) и облаков с предсказанными метками."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from apnet.aerial import AerialRaster  # noqa: E402
from apnet.cloud import CLASS_NAMES, LabeledPointCloud, write_cloud  # noqa: E402

logger = logging.getLogger(__name__)

# Цвета классов для картинок, 0..255.
CLASS_PALETTE = np.array(
    [
        (150, 110, 70),
        (40, 160, 40),
        (200, 60, 60),
        (240, 170, 60),
        (120, 120, 200),
        (170, 170, 170),
        (110, 60, 30),
        (60, 60, 60),
        (250, 230, 40),
        (230, 30, 150),
        (230, 210, 170),
        (40, 200, 230),
        (30, 80, 200),
    ],
    dtype=np.uint8,
)
NULL_COLOR = (0, 0, 0)
NULL_LABEL_GRAY = 255
HEADER_MAGIC = "apnet-raster-1"


class ExportError(Exception):
    pass


def encode_rle(mask: np.ndarray) -> list[int]:
    """Длины чередующихся серий по строкам растра; первая серия: пустые пиксели (может быть 0)."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    return runs if not flat[0] else [0, *runs]


def decode_rle(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    values = np.arange(len(runs)) % 2 == 1
    flat = np.repeat(values, runs)
    if flat.size != shape[0] * shape[1]:
        raise ExportError(f"RLE даёт {flat.size} пикселей, растр {shape[0]}×{shape[1]}")
    return flat.reshape(shape)


@dataclass(frozen=True)
class RasterHeader:
    width: int
    height: int
    pixel_size: float
    origin: tuple[float, float]
    class_count: int
    valid_runs: list[int]

    @classmethod
    def of(cls, raster: AerialRaster) -> RasterHeader:
        return cls(
            raster.width,
            raster.height,
            raster.pixel_size,
            raster.origin,
            raster.class_count,
            encode_rle(raster.valid_mask),
        )

    def valid_mask(self) -> np.ndarray:
        return decode_rle(self.valid_runs, (self.height, self.width))


def write_header(header: RasterHeader, path: Path) -> Path:
    lines = [
        HEADER_MAGIC,
        f"width {header.width}",
        f"height {header.height}",
        f"pixel_size {header.pixel_size!r}",
        f"origin {header.origin[0]!r} {header.origin[1]!r}",
        f"class_count {header.class_count}",
        "valid_rle " + " ".join(str(r) for r in header.valid_runs),
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_header(path: str | Path) -> RasterHeader:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ExportError(f"Не удалось прочитать {path}: {exc}") from exc
    if not lines or lines[0] != HEADER_MAGIC:
        raise ExportError(f"{path}: ожидался заголовок {HEADER_MAGIC}")
    fields = {}
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        fields[key] = rest.split()
    try:
        return RasterHeader(
            width=int(fields["width"][0]),
            height=int(fields["height"][0]),
            pixel_size=float(fields["pixel_size"][0]),
            origin=(float(fields["origin"][0]), float(fields["origin"][1])),
            class_count=int(fields["class_count"][0]),
            valid_runs=[int(r) for r in fields.get("valid_rle", [])],
        )
    except (KeyError, IndexError, ValueError) as exc:
        raise ExportError(f"{path}: некорректный заголовок растра: {exc}") from exc


def _write_netpbm(path: Path, magic: str, pixels: np.ndarray) -> Path:
    height, width = pixels.shape[:2]
    with path.open("wb") as fh:
        fh.write(f"{magic}\n{width} {height}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())
    return path


def color_pixels(raster: AerialRaster) -> np.ndarray:
    return np.round(raster.image() * 255).astype(np.uint8)


def label_pixels(raster: AerialRaster) -> np.ndarray:
    """Серые значения: индекс класса, пустой пиксель: 255."""
    labels = raster.pixel_labels()
    return np.where(labels >= 0, labels, NULL_LABEL_GRAY).astype(np.uint8)


def label_colors(raster: AerialRaster) -> np.ndarray:
    labels = raster.pixel_labels()
    rgb = CLASS_PALETTE[np.clip(labels, 0, len(CLASS_PALETTE) - 1)]
    rgb[labels < 0] = NULL_COLOR
    return rgb


def dump_aerial(raster: AerialRaster, out_dir: str | Path, stem: str = "aerial", *, png: bool = True) -> list[Path]:
    """PPM цвета, PGM меток, текстовый заголовок с s, началом и RLE маски, PNG для просмотра.

    Строка 0 файла соответствует v = 0, то есть минимальному y.
    """
    out = Path(out_dir)
    written: list[Path] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        written.append(write_header(RasterHeader.of(raster), out / f"{stem}.hdr"))
        if raster.channels is not None:
            written.append(_write_netpbm(out / f"{stem}_color.ppm", "P6", color_pixels(raster)))
        if raster.label_plane is not None:
            written.append(_write_netpbm(out / f"{stem}_labels.pgm", "P5", label_pixels(raster)))
            if png:
                written.append(_write_png(out / f"{stem}_labels.png", label_colors(raster)))
        if png and raster.channels is not None:
            written.append(_write_png(out / f"{stem}_color.png", color_pixels(raster)))
    except OSError as exc:
        raise ExportError(f"Не удалось записать растр в {out}: {exc}") from exc
    logger.info("Растр выгружен: %s", ", ".join(p.name for p in written))
    return written


def read_netpbm(path: str | Path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ExportError(f"Не удалось прочитать {path}: {exc}") from exc
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(data) and not data[end : end + 1].isspace():
            end += 1
        if end == pos or end == len(data):
            raise ExportError(f"{path}: заголовок Netpbm оборван")
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    try:
        magic, width, height = tokens[0].decode("ascii"), int(tokens[1]), int(tokens[2])
    except (UnicodeDecodeError, ValueError) as exc:
        raise ExportError(f"{path}: некорректный заголовок Netpbm") from exc
    depth = {"P5": 1, "P6": 3}.get(magic)
    if depth is None:
        raise ExportError(f"{path}: неподдерживаемый формат {magic}")
    if len(data) - pos < width * height * depth:
        raise ExportError(f"{path}: данных меньше, чем {width}×{height}×{depth} байт")
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height * depth, offset=pos)
    return pixels.reshape(height, width) if depth == 1 else pixels.reshape(height, width, 3)


def _write_png(path: Path, rgb: np.ndarray) -> Path:
    fig, ax = plt.subplots(figsize=(rgb.shape[1] / 100, rgb.shape[0] / 100), dpi=100)
    try:
        ax.imshow(rgb, origin="lower", interpolation="nearest")
        ax.set_axis_off()
        fig.subplots_adjust(0, 0, 1, 1)
        fig.savefig(path, dpi=100)
    finally:
        plt.close(fig)
    return path


def write_legend(path: str | Path) -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(3, 4))
    try:
        for i, name in enumerate(CLASS_NAMES):
            ax.barh(i, 1, color=CLASS_PALETTE[i] / 255)
            ax.text(1.05, i, name, va="center")
        ax.set_xlim(0, 3)
        ax.invert_yaxis()
        ax.set_axis_off()
        fig.savefig(path, bbox_inches="tight")
    finally:
        plt.close(fig)
    return path


def write_predictions(cloud: LabeledPointCloud, predicted: np.ndarray, path: str | Path) -> Path:
    """xyzrgbl, где столбец меток содержит предсказания."""
    path = Path(path)
    write_cloud(cloud.with_labels(np.asarray(predicted, dtype=np.int64)), path)
    return path
