"""Функции потерь: взвешенная кросс-энтропия, Lovász-softmax и общая сумма по представлениям."""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from apnet.cloud import IGNORE_LABEL
from apnet.tensor import Value, gather, log_softmax, softmax

logger = logging.getLogger(__name__)

CLASS_WEIGHT_EPS = 1e-3
REPRESENTATIONS = ("a", "p", "fused")


class LossError(Exception):
    pass


@dataclass(frozen=True)
class ClassWeights:
    weights: np.ndarray
    frequencies: np.ndarray

    def __len__(self) -> int:
        return len(self.weights)


def inverse_frequency_weights(histogram: np.ndarray, eps: float = CLASS_WEIGHT_EPS) -> ClassWeights:
    """w_c = 1/(freq_c + eps); отсутствующим классам: максимум среди присутствующих; Σ w_c = N_cla."""
    histogram = np.asarray(histogram, dtype=np.float64)
    total = histogram.sum()
    if total <= 0:
        raise LossError("Гистограмма меток пуста: веса классов не определены")
    freq = histogram / total
    present = histogram > 0
    weights = np.empty_like(freq)
    weights[present] = 1.0 / (freq[present] + eps)
    weights[~present] = weights[present].max()
    weights *= len(weights) / weights.sum()
    return ClassWeights(weights=weights, frequencies=freq)


def _flatten(logits: Value, labels: np.ndarray) -> tuple[Value, np.ndarray]:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.shape[:-1] != labels.shape:
        raise LossError(f"Формы логитов {logits.shape} и меток {labels.shape} не согласованы")
    classes = logits.shape[-1]
    flat_labels = labels.reshape(-1)
    bad = (flat_labels != IGNORE_LABEL) & ((flat_labels < 0) | (flat_labels >= classes))
    if bad.any():
        raise LossError(f"Метка вне диапазона [0, {classes}): {flat_labels[bad][0]}")
    flat = logits if logits.ndim == 2 else logits.reshape(-1, classes)
    keep = np.flatnonzero(flat_labels != IGNORE_LABEL)
    if keep.size == 0:
        raise LossError("Все позиции помечены как игнорируемые")
    return gather(flat, keep), flat_labels[keep]


def wce_loss(logits: Value, labels: np.ndarray, weights: ClassWeights | np.ndarray) -> Value:
    """Среднее по неигнорируемым позициям от −w_y · log softmax(logits)_y."""
    w = weights.weights if isinstance(weights, ClassWeights) else np.asarray(weights, dtype=np.float64)
    logits, labels = _flatten(logits, labels)
    if len(w) != logits.shape[-1]:
        raise LossError(f"{len(w)} весов для {logits.shape[-1]} классов")
    log_probs = log_softmax(logits, axis=-1)
    picked = log_probs[np.arange(len(labels)), labels]
    scale = Value((w[labels] / len(labels)).astype(logits.dtype))
    return -(picked * scale).sum()


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Градиент расширения Ловаса по ошибкам, отсортированным по убыванию."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_softmax(probabilities: Value, labels: np.ndarray) -> Value:
    """Lovász-softmax по присутствующим в разметке классам.

    Ошибка класса c в точке i равна |[y_i = c] − p_ic|; при p ∈ [0, 1] это линейная
    функция p, поэтому граф обходится без модуля. Порядок сортировки берётся из
    текущих значений и считается константой.
    """
    probs, labels = _flatten(probabilities, labels)
    n, classes = probs.shape
    fg = np.zeros((n, classes))
    fg[np.arange(n), labels] = 1.0
    errors = probs * Value((1.0 - 2.0 * fg).astype(probs.dtype)) + Value(fg.astype(probs.dtype))

    present = np.flatnonzero(fg.sum(axis=0) > 0)
    grads = np.zeros((n, classes))
    for c in present:
        order = np.argsort(-errors.data[:, c], kind="stable")
        grads[order, c] = lovasz_grad(fg[order, c])
    return (errors * Value((grads / len(present)).astype(probs.dtype))).sum()


def combine_losses(terms: Sequence[tuple[float, Value, str]]) -> tuple[Value, dict[str, float]]:
    """Σ coef · term и значения отдельных слагаемых для журнала."""
    if not terms:
        raise LossError("Нет слагаемых потерь")
    total = None
    components: dict[str, float] = {}
    for coef, term, name in terms:
        components[name] = term.item()
        weighted = term * coef
        total = weighted if total is None else total + weighted
    components["total"] = total.item()
    return total, components


def total_loss(
    preds: Mapping[str, Value],
    targets: Mapping[str, np.ndarray],
    weights: ClassWeights | np.ndarray,
    *,
    alpha: Mapping[str, float] | None = None,
    beta: float = 1.0,
) -> tuple[Value, dict[str, float]]:
    """L_all = Σ α^rep · WCE^rep + β · Lovász(fused).

    Цели разные: пиксельные метки для a, метки барицентров для p, исходные метки для fused.
    """
    missing = [rep for rep in REPRESENTATIONS if rep not in preds or rep not in targets]
    if missing:
        raise LossError(f"Нет представлений: {missing}")
    alpha = {rep: 1.0 for rep in REPRESENTATIONS} | dict(alpha or {})
    terms = [(alpha[rep], wce_loss(preds[rep], targets[rep], weights), f"wce_{rep}") for rep in REPRESENTATIONS]
    terms.append((beta, lovasz_softmax(softmax(preds["fused"], axis=-1), targets["fused"]), "lovasz"))
    return combine_losses(terms)


def single_head_loss(
    logits: Value,
    labels: np.ndarray,
    weights: ClassWeights | np.ndarray,
    *,
    beta: float = 1.0,
    name: str = "fused",
) -> tuple[Value, dict[str, float]]:
    """Потери одной головы: WCE + β · Lovász (стратегии a-only, p-only и базовые слияния)."""
    return combine_losses(
        [
            (1.0, wce_loss(logits, labels, weights), f"wce_{name}"),
            (beta, lovasz_softmax(softmax(logits, axis=-1), labels), "lovasz"),
        ]
    )
