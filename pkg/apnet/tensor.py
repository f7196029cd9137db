"""Плотные массивы numpy с обратным режимом дифференцирования.

Граф строится заново на каждом прямом проходе: каждая операция создаёт новый Value,
запоминает родителей и замыкание, которое по градиенту выхода накапливает градиенты
входов. ``backward()`` обходит граф в обратном топологическом порядке.

Градиенты промежуточных узлов накапливаются: повторный ``backward`` по тому же графу
удваивает их, поэтому граф используется один раз.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ArrayLike = Any


class TensorError(Exception):
    pass


def _as_array(data: ArrayLike, dtype: np.dtype | type | None = None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if not np.issubdtype(arr.dtype, np.floating):
        return arr.astype(np.float64)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Value:
    """Узел графа: данные, градиент той же формы и ссылка на породившую операцию."""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        *,
        dtype: np.dtype | type | None = None,
        name: str = "",
    ) -> None:
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Value, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise TensorError(f"item() допустим только для одного элемента, форма {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Value:
        return Value(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, grad: np.ndarray) -> None:
        if not self.requires_grad:
            return
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise TensorError(f"Градиент формы {grad.shape} для значения формы {self.shape}")
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def _topological_order(self) -> list[Value]:
        order: list[Value] = []
        seen: set[int] = set()
        stack: list[tuple[Value, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self, grad: ArrayLike | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise TensorError(f"backward() без градиента допустим только для скаляра, форма {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise TensorError("backward() по значению, не зависящему от параметров")
        self.accumulate(np.asarray(grad))
        for node in reversed(self._topological_order()):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # --- арифметика ---

    def _lift(self, other: ArrayLike) -> Value:
        return other if isinstance(other, Value) else Value(np.asarray(other, dtype=self.dtype))

    def __add__(self, other: ArrayLike) -> Value:
        return add(self, self._lift(other))

    def __radd__(self, other: ArrayLike) -> Value:
        return add(self._lift(other), self)

    def __sub__(self, other: ArrayLike) -> Value:
        return sub(self, self._lift(other))

    def __rsub__(self, other: ArrayLike) -> Value:
        return sub(self._lift(other), self)

    def __mul__(self, other: ArrayLike) -> Value:
        return mul(self, self._lift(other))

    def __rmul__(self, other: ArrayLike) -> Value:
        return mul(self._lift(other), self)

    def __truediv__(self, other: ArrayLike) -> Value:
        return div(self, self._lift(other))

    def __rtruediv__(self, other: ArrayLike) -> Value:
        return div(self._lift(other), self)

    def __neg__(self) -> Value:
        return neg(self)

    def __pow__(self, exponent: float) -> Value:
        return power(self, exponent)

    def __matmul__(self, other: Value) -> Value:
        return matmul(self, other)

    def __getitem__(self, key) -> Value:
        return getitem(self, key)

    # --- методы-обёртки ---

    def relu(self) -> Value:
        return relu(self)

    def exp(self) -> Value:
        return exp(self)

    def log(self) -> Value:
        return log(self)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Value:
        return sum_(self, axis, keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Value:
        return mean(self, axis, keepdims)

    def max(self, axis: int) -> Value:
        return max_reduce(self, axis)

    def reshape(self, *shape: int) -> Value:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes: Sequence[int] | None = None) -> Value:
        return transpose(self, axes)

    @property
    def T(self) -> Value:
        return transpose(self)

    def softmax(self, axis: int = -1) -> Value:
        return softmax(self, axis)

    def log_softmax(self, axis: int = -1) -> Value:
        return log_softmax(self, axis)


def _node(data: np.ndarray, parents: tuple[Value, ...], backward: Callable[[np.ndarray], None]) -> Value:
    out = Value(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _broadcast_op(a: Value, b: Value, fn: Callable[[np.ndarray, np.ndarray], np.ndarray], op: str) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise TensorError(f"{op}: несовместимые формы {a.shape} и {b.shape}") from exc


def add(a: Value, b: Value) -> Value:
    data = _broadcast_op(a, b, np.add, "add")

    def backward(g: np.ndarray) -> None:
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(g, b.shape))

    return _node(data, (a, b), backward)


def sub(a: Value, b: Value) -> Value:
    data = _broadcast_op(a, b, np.subtract, "sub")

    def backward(g: np.ndarray) -> None:
        a.accumulate(_unbroadcast(g, a.shape))
        b.accumulate(_unbroadcast(-g, b.shape))

    return _node(data, (a, b), backward)


def mul(a: Value, b: Value) -> Value:
    data = _broadcast_op(a, b, np.multiply, "mul")

    def backward(g: np.ndarray) -> None:
        a.accumulate(_unbroadcast(g * b.data, a.shape))
        b.accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward)


def div(a: Value, b: Value) -> Value:
    data = _broadcast_op(a, b, np.divide, "div")

    def backward(g: np.ndarray) -> None:
        a.accumulate(_unbroadcast(g / b.data, a.shape))
        b.accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(data, (a, b), backward)


def neg(x: Value) -> Value:
    return _node(-x.data, (x,), lambda g: x.accumulate(-g))


def power(x: Value, exponent: float) -> Value:
    return _node(x.data**exponent, (x,), lambda g: x.accumulate(g * exponent * x.data ** (exponent - 1)))


def relu(x: Value) -> Value:
    return _node(np.maximum(x.data, 0), (x,), lambda g: x.accumulate(g * (x.data > 0)))


def exp(x: Value) -> Value:
    data = np.exp(x.data)
    return _node(data, (x,), lambda g: x.accumulate(g * data))


def log(x: Value) -> Value:
    return _node(np.log(x.data), (x,), lambda g: x.accumulate(g / x.data))


def matmul(a: Value, b: Value) -> Value:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul: несовместимые формы {a.shape} и {b.shape}")

    def backward(g: np.ndarray) -> None:
        a.accumulate(g @ b.data.T)
        b.accumulate(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward)


def reshape(x: Value, shape: tuple[int, ...]) -> Value:
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise TensorError(f"reshape: нельзя привести {x.shape} к {shape}") from exc
    return _node(data, (x,), lambda g: x.accumulate(g.reshape(x.shape)))


def transpose(x: Value, axes: Sequence[int] | None = None) -> Value:
    try:
        data = np.transpose(x.data, axes)
    except ValueError as exc:
        raise TensorError(f"transpose: некорректные оси {axes} для формы {x.shape}") from exc
    inverse = None if axes is None else np.argsort(axes)
    return _node(data, (x,), lambda g: x.accumulate(np.transpose(g, inverse)))


def concat(values: Sequence[Value], axis: int = -1) -> Value:
    if not values:
        raise TensorError("concat: пустой список")
    try:
        data = np.concatenate([v.data for v in values], axis=axis)
    except (ValueError, IndexError) as exc:
        shapes = [v.shape for v in values]
        raise TensorError(f"concat по оси {axis}: несовместимые формы {shapes}") from exc
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def backward(g: np.ndarray) -> None:
        for value, part in zip(values, np.split(g, bounds, axis=axis)):
            value.accumulate(part)

    return _node(data, tuple(values), backward)


def _check_indices(indices: np.ndarray, size: int, op: str) -> np.ndarray:
    indices = np.asarray(indices)
    if indices.size and not np.issubdtype(indices.dtype, np.integer):
        raise TensorError(f"{op}: индексы должны быть целыми, получено {indices.dtype}")
    indices = indices.astype(np.int64, copy=False)
    if indices.size and (indices.min() < 0 or indices.max() >= size):
        raise TensorError(f"{op}: индекс вне диапазона [0, {size}): {indices.min()}..{indices.max()}")
    return indices


def gather(x: Value, indices: ArrayLike) -> Value:
    """Строки x по индексам (ось 0)."""
    if x.ndim == 0:
        raise TensorError("gather: нужен хотя бы одномерный массив")
    indices = _check_indices(indices, x.shape[0], "gather")

    def backward(g: np.ndarray) -> None:
        dx = np.zeros_like(x.data)
        np.add.at(dx, indices, g)
        x.accumulate(dx)

    return _node(x.data[indices], (x,), backward)


def scatter_add(x: Value, indices: ArrayLike, size: int) -> Value:
    """Сумма строк x в выход из size строк: out[indices[i]] += x[i]."""
    indices = _check_indices(indices, size, "scatter_add")
    if x.ndim == 0 or indices.shape != x.shape[:1]:
        raise TensorError(f"scatter_add: {indices.shape[0] if indices.ndim else 0} индексов для {x.shape}")
    data = np.zeros((size,) + x.shape[1:], dtype=x.dtype)
    np.add.at(data, indices, x.data)
    return _node(data, (x,), lambda g: x.accumulate(g[indices]))


def getitem(x: Value, key) -> Value:
    try:
        data = x.data[key]
    except IndexError as exc:
        raise TensorError(f"Индекс {key!r} вне формы {x.shape}") from exc

    def backward(g: np.ndarray) -> None:
        dx = np.zeros_like(x.data)
        np.add.at(dx, key, g)
        x.accumulate(dx)

    return _node(np.array(data), (x,), backward)


def _normalize_axis(axis, ndim: int, op: str):
    if axis is None:
        return None
    axes = axis if isinstance(axis, tuple) else (axis,)
    normalized = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise TensorError(f"{op}: ось {axis} недопустима для размерности {ndim}")
        normalized.append(a % ndim)
    return tuple(normalized) if isinstance(axis, tuple) else normalized[0]


def _expand(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x: Value, axis=None, keepdims: bool = False) -> Value:
    axis = _normalize_axis(axis, x.ndim, "sum")
    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return _node(data, (x,), lambda g: x.accumulate(_expand(g, x.shape, axis, keepdims)))


def mean(x: Value, axis=None, keepdims: bool = False) -> Value:
    axis = _normalize_axis(axis, x.ndim, "mean")
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    if count == 0:
        raise TensorError("mean: пустой массив")
    data = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    return _node(data, (x,), lambda g: x.accumulate(_expand(g, x.shape, axis, keepdims) / count))


def max_reduce(x: Value, axis: int) -> Value:
    """Максимум по оси; градиент идёт в первый максимальный элемент."""
    axis = _normalize_axis(axis, x.ndim, "max")
    if x.shape[axis] == 0:
        raise TensorError("max: пустая ось")
    arg = np.expand_dims(x.data.argmax(axis=axis), axis)
    data = np.take_along_axis(x.data, arg, axis=axis).squeeze(axis)

    def backward(g: np.ndarray) -> None:
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, arg, np.expand_dims(g, axis), axis=axis)
        x.accumulate(dx)

    return _node(data, (x,), backward)


def softmax(x: Value, axis: int = -1) -> Value:
    axis = _normalize_axis(axis, x.ndim, "softmax")
    shifted = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    data = shifted / shifted.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        x.accumulate(data * (g - (g * data).sum(axis=axis, keepdims=True)))

    return _node(data, (x,), backward)


def log_softmax(x: Value, axis: int = -1) -> Value:
    axis = _normalize_axis(axis, x.ndim, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g: np.ndarray) -> None:
        x.accumulate(g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _node(data, (x,), backward)


# --- операции над изображениями H×W×C ---


def conv2d(x: Value, weight: Value, bias: Value | None = None) -> Value:
    """Свёртка с шагом 1 и нулевым дополнением до исходного размера; weight (kh, kw, Cin, Cout)."""
    if x.ndim != 3 or weight.ndim != 4:
        raise TensorError(f"conv2d: ожидались x (H, W, C) и weight (kh, kw, Cin, Cout), получено {x.shape}, {weight.shape}")
    kh, kw, cin, cout = weight.shape
    height, width, channels = x.shape
    if channels != cin:
        raise TensorError(f"conv2d: {channels} входных каналов, ядро ожидает {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise TensorError(f"conv2d: поддерживаются только нечётные ядра, получено {kh}×{kw}")
    if bias is not None and bias.shape != (cout,):
        raise TensorError(f"conv2d: смещение формы {bias.shape}, ожидалось ({cout},)")
    ph, pw = kh // 2, kw // 2

    padded = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    windows = sliding_window_view(padded, (kh, kw), axis=(0, 1))  # (H, W, Cin, kh, kw)
    columns = windows.transpose(0, 1, 3, 4, 2).reshape(height * width, kh * kw * cin)
    kernel = weight.data.reshape(kh * kw * cin, cout)
    data = columns @ kernel
    if bias is not None:
        data = data + bias.data
    data = data.reshape(height, width, cout)

    def backward(g: np.ndarray) -> None:
        g2 = g.reshape(height * width, cout)
        weight.accumulate((columns.T @ g2).reshape(weight.shape))
        if bias is not None:
            bias.accumulate(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ kernel.T).reshape(height, width, kh, kw, cin)
            dpadded = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    dpadded[i : i + height, j : j + width] += dcols[:, :, i, j]
            x.accumulate(dpadded[ph : ph + height, pw : pw + width])

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(data, parents, backward)


def max_pool2d(x: Value, size: int = 2) -> Value:
    if x.ndim != 3:
        raise TensorError(f"max_pool2d: ожидался (H, W, C), получено {x.shape}")
    height, width, channels = x.shape
    if height % size or width % size:
        raise TensorError(f"max_pool2d: размер {height}×{width} не делится на {size}")
    h2, w2 = height // size, width // size
    blocks = x.data.reshape(h2, size, w2, size, channels).transpose(0, 2, 4, 1, 3).reshape(h2, w2, channels, size * size)
    arg = blocks.argmax(axis=-1)[..., None]
    data = np.take_along_axis(blocks, arg, axis=-1)[..., 0]

    def backward(g: np.ndarray) -> None:
        mask = np.zeros_like(blocks)
        np.put_along_axis(mask, arg, g[..., None], axis=-1)
        dx = mask.reshape(h2, w2, channels, size, size).transpose(0, 3, 1, 4, 2).reshape(height, width, channels)
        x.accumulate(dx)

    return _node(data, (x,), backward)


def upsample_nearest(x: Value, size: int = 2) -> Value:
    if x.ndim != 3:
        raise TensorError(f"upsample_nearest: ожидался (H, W, C), получено {x.shape}")
    height, width, channels = x.shape
    data = np.repeat(np.repeat(x.data, size, axis=0), size, axis=1)

    def backward(g: np.ndarray) -> None:
        x.accumulate(g.reshape(height, size, width, size, channels).sum(axis=(1, 3)))

    return _node(data, (x,), backward)


def bilinear_weights(
    cu: ArrayLike, cv: ArrayLike, width: int, height: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Четыре отсчёта и веса билинейной интерполяции в непрерывных координатах отсчётов.

    Порядок: (u0, v0), (u1, v0), (u0, v1), (u1, v1). Координаты вне [0, W−1]×[0, H−1]
    прижимаются к краю; их число возвращается последним элементом.
    Возвращает (rows (N, 4), cols (N, 4), weights (N, 4), clamped).
    """
    cu = np.asarray(cu, dtype=np.float64).reshape(-1)
    cv = np.asarray(cv, dtype=np.float64).reshape(-1)
    clamped = int(((cu < 0) | (cu > width - 1) | (cv < 0) | (cv > height - 1)).sum())
    u = np.clip(cu, 0, width - 1)
    v = np.clip(cv, 0, height - 1)
    u0 = np.clip(np.floor(u), 0, max(width - 2, 0)).astype(np.int64)
    v0 = np.clip(np.floor(v), 0, max(height - 2, 0)).astype(np.int64)
    fu, fv = u - u0, v - v0
    u1 = np.minimum(u0 + 1, width - 1)
    v1 = np.minimum(v0 + 1, height - 1)
    rows = np.stack([v0, v0, v1, v1], axis=1)
    cols = np.stack([u0, u1, u0, u1], axis=1)
    weights = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1)
    return rows, cols, weights, clamped


def bilinear_sample(grid: Value, cu: ArrayLike, cv: ArrayLike) -> tuple[Value, int]:
    """Билинейная выборка признаков grid (H, W, C); градиент идёт только в grid."""
    if grid.ndim != 3:
        raise TensorError(f"bilinear_sample: ожидался (H, W, C), получено {grid.shape}")
    height, width, _ = grid.shape
    rows, cols, weights, clamped = bilinear_weights(cu, cv, width, height)
    weights = weights.astype(grid.dtype)
    data = (weights[:, :, None] * grid.data[rows, cols]).sum(axis=1)

    def backward(g: np.ndarray) -> None:
        dgrid = np.zeros_like(grid.data)
        np.add.at(dgrid, (rows, cols), weights[:, :, None] * g[:, None, :])
        grid.accumulate(dgrid)

    return _node(data, (grid,), backward), clamped
