"""Параметры с сидированной инициализацией и базовые слои сетей."""

from __future__ import annotations

import math
from collections.abc import Iterator
from dataclasses import dataclass

import numpy as np

from apnet.tensor import Value, conv2d, matmul, relu


class BranchError(Exception):
    pass


class ParameterStore:
    """Именованные параметры модели с воспроизводимой инициализацией.

    Веса равномерны в ±sqrt(6 / fan_in), смещения нулевые; порядок создания задаёт
    порядок выборок из генератора, поэтому одинаковый seed даёт одинаковые веса.
    """

    def __init__(self, seed: int = 0, dtype: str | np.dtype = "float64") -> None:
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Value] = {}

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def add(self, name: str, data: np.ndarray) -> Value:
        if name in self.params:
            raise BranchError(f"Параметр {name} уже существует")
        value = Value(np.asarray(data, dtype=self.dtype), requires_grad=True, name=name)
        self.params[name] = value
        return value

    def uniform(self, name: str, shape: tuple[int, ...], fan_in: int) -> Value:
        bound = math.sqrt(6.0 / fan_in)
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape: tuple[int, ...]) -> Value:
        return self.add(name, np.zeros(shape))

    def linear(self, name: str, fan_in: int, fan_out: int) -> Linear:
        return Linear(
            weight=self.uniform(f"{name}.weight", (fan_in, fan_out), fan_in),
            bias=self.zeros(f"{name}.bias", (fan_out,)),
        )

    def conv(self, name: str, kernel: int, cin: int, cout: int) -> Conv2d:
        return Conv2d(
            weight=self.uniform(f"{name}.weight", (kernel, kernel, cin, cout), kernel * kernel * cin),
            bias=self.zeros(f"{name}.bias", (cout,)),
        )

    def prefixed(self, prefix: str) -> dict[str, Value]:
        return {name: p for name, p in self.params.items() if name.startswith(prefix)}


@dataclass
class Linear:
    """Поточечный слой по последней оси: (..., in) → (..., out)."""

    weight: Value
    bias: Value

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Value) -> Value:
        if x.shape[-1] != self.fan_in:
            raise BranchError(f"Ширина входа {x.shape[-1]}, слой ожидает {self.fan_in}")
        lead = x.shape[:-1]
        flat = x if x.ndim == 2 else x.reshape(-1, self.fan_in)
        out = matmul(flat, self.weight) + self.bias
        return out if x.ndim == 2 else out.reshape(*lead, self.fan_out)


@dataclass
class Conv2d:
    weight: Value
    bias: Value

    def __call__(self, x: Value) -> Value:
        if x.ndim != 3 or x.shape[-1] != self.weight.shape[2]:
            raise BranchError(f"Вход {x.shape} не подходит свёртке {self.weight.shape}")
        return conv2d(x, self.weight, self.bias)


@dataclass
class SegmentationHead:
    """m поточечных слоёв с relu между ними; последний выдаёт N_cla логитов."""

    layers: list[Linear]

    @classmethod
    def build(cls, store: ParameterStore, name: str, channels: int, class_count: int, m: int = 2) -> SegmentationHead:
        if m < 1:
            raise BranchError(f"Голове нужен хотя бы один слой, m={m}")
        widths = [channels] * m + [class_count]
        return cls([store.linear(f"{name}.{i}", widths[i], widths[i + 1]) for i in range(m)])

    def __call__(self, features: Value) -> Value:
        x = features
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x


def segmentation_head(features: Value, head: SegmentationHead) -> Value:
    return head(features)
