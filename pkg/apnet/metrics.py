"""Матрица ошибок и метрики IoU / mIoU / OA, запись в CSV."""

from __future__ import annotations

import logging
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd

from apnet.cloud import CLASS_NAMES, IGNORE_LABEL

logger = logging.getLogger(__name__)

MiouMode = Literal["present", "benchmark"]


class MetricsError(Exception):
    pass


@dataclass
class ConfusionMatrix:
    """Строки: истинный класс, столбцы: предсказанный."""

    counts: np.ndarray

    @classmethod
    def empty(cls, class_count: int) -> ConfusionMatrix:
        return cls(np.zeros((class_count, class_count), dtype=np.int64))

    @classmethod
    def from_labels(cls, truth: np.ndarray, predicted: np.ndarray, class_count: int) -> ConfusionMatrix:
        truth = np.asarray(truth, dtype=np.int64).reshape(-1)
        predicted = np.asarray(predicted, dtype=np.int64).reshape(-1)
        if truth.shape != predicted.shape:
            raise MetricsError(f"Разное число меток: {truth.shape[0]} и {predicted.shape[0]}")
        keep = truth != IGNORE_LABEL
        truth, predicted = truth[keep], predicted[keep]
        for name, labels in (("истинная", truth), ("предсказанная", predicted)):
            if labels.size and (labels.min() < 0 or labels.max() >= class_count):
                raise MetricsError(f"{name} метка вне диапазона [0, {class_count})")
        counts = np.bincount(truth * class_count + predicted, minlength=class_count * class_count)
        return cls(counts.reshape(class_count, class_count).astype(np.int64))

    @property
    def class_count(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if self.counts.shape != other.counts.shape:
            raise MetricsError(f"Матрицы разного размера: {self.counts.shape} и {other.counts.shape}")
        return ConfusionMatrix(self.counts + other.counts)

    def update(self, truth: np.ndarray, predicted: np.ndarray) -> None:
        self.counts += ConfusionMatrix.from_labels(truth, predicted, self.class_count).counts

    def true_positives(self) -> np.ndarray:
        return np.diag(self.counts)

    def false_positives(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.true_positives()

    def false_negatives(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.true_positives()

    def union(self) -> np.ndarray:
        return self.true_positives() + self.false_positives() + self.false_negatives()

    def iou(self) -> np.ndarray:
        """IoU по классам; NaN там, где TP + FP + FN = 0."""
        union = self.union()
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, self.true_positives() / np.maximum(union, 1), np.nan)

    def miou(self, mode: MiouMode = "present") -> float:
        iou = self.iou()
        if mode == "benchmark":
            return float(np.nan_to_num(iou, nan=0.0).mean())
        defined = iou[~np.isnan(iou)]
        return float(defined.mean()) if defined.size else float("nan")

    def overall_accuracy(self) -> float:
        return float(self.true_positives().sum() / self.total)


@dataclass(frozen=True)
class MetricsRecord:
    iou: np.ndarray
    miou: float
    miou_benchmark: float
    oa: float
    points: int
    class_names: tuple[str, ...] = field(default=CLASS_NAMES)

    def as_row(self, **labels) -> dict:
        row = dict(labels)
        row.update(points=self.points, oa=self.oa, miou=self.miou, miou_benchmark=self.miou_benchmark)
        for name, value in zip(self.class_names, self.iou):
            row[f"iou_{name}"] = float(value)
        return row


def compute_metrics(confusion: ConfusionMatrix, class_names: tuple[str, ...] | None = None) -> MetricsRecord:
    if confusion.total == 0:
        raise MetricsError("Пустая матрица ошибок: нет оценённых точек")
    names = class_names or (
        CLASS_NAMES if confusion.class_count == len(CLASS_NAMES) else tuple(f"class{i}" for i in range(confusion.class_count))
    )
    return MetricsRecord(
        iou=confusion.iou(),
        miou=confusion.miou("present"),
        miou_benchmark=confusion.miou("benchmark"),
        oa=confusion.overall_accuracy(),
        points=confusion.total,
        class_names=tuple(names),
    )


def metrics_frame(rows: Iterable[Mapping]) -> pd.DataFrame:
    return pd.DataFrame(list(rows))


def write_metrics_csv(rows: Iterable[Mapping], path: str | Path) -> Path:
    """Плоская таблица: по строке на (эпоха, голова); числа с полной точностью."""
    path = Path(path)
    frame = metrics_frame(rows)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format="%.17g")
    except OSError as exc:
        raise MetricsError(f"Не удалось записать метрики {path}: {exc}") from exc
    logger.info("Метрики записаны: %s (%s строк)", path, len(frame))
    return path
