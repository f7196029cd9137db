"""AdamW с разделённым затуханием весов, группами скоростей и чекпойнт apnet-ckpt-1."""

from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from apnet.tensor import Value

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "apnet-ckpt-1"


class OptimizerError(Exception):
    pass


class CheckpointError(Exception):
    pass


def group_of(name: str) -> str:
    """Группа параметра по префиксу имени: «a.», «p.», остальное: слияние и головы."""
    prefix = name.split(".", 1)[0]
    return prefix if prefix in ("a", "p") else "fusion"


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epoch_decay: float = 0.95
    group_factors: dict[str, float] = field(default_factory=lambda: {"a": 1.0, "p": 5.0, "fusion": 1.0})
    lr_scale: float = 1.0
    step: int = 0
    first_moments: dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg) -> OptimizerState:
        return cls(
            lr=cfg.lr,
            weight_decay=cfg.weight_decay,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.eps,
            epoch_decay=cfg.epoch_decay,
            group_factors={"a": 1.0, "p": cfg.p_lr_factor, "fusion": 1.0},
        )

    def group_lr(self, group: str) -> float:
        return self.lr * self.lr_scale * self.group_factors.get(group, 1.0)


def adamw_step(state: OptimizerState, params: Mapping[str, Value]) -> None:
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise OptimizerError(f"Нет градиентов у параметров: {missing[:5]}{' …' if len(missing) > 5 else ''}")

    state.step += 1
    t = state.step
    bias1 = 1.0 - state.beta1**t
    bias2 = 1.0 - state.beta2**t
    for name, param in params.items():
        grad = param.grad
        m = state.first_moments.get(name)
        if m is None or m.shape != param.shape:
            m = np.zeros_like(param.data)
            state.second_moments[name] = np.zeros_like(param.data)
        v = state.second_moments[name]
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moments[name], state.second_moments[name] = m, v

        lr = state.group_lr(group_of(name))
        param.data *= 1.0 - lr * state.weight_decay
        param.data -= (lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)).astype(param.dtype)


def epoch_end(state: OptimizerState) -> None:
    state.lr_scale *= state.epoch_decay


def zero_grad(params: Mapping[str, Value]) -> None:
    for param in params.values():
        param.zero_grad()


def _manifest_path(path: Path) -> Path:
    return path.with_suffix(".manifest")


def save_checkpoint(
    path: str | Path,
    params: Mapping[str, Value],
    *,
    meta: Mapping[str, str] | None = None,
) -> Path:
    """Пишет <path>.bin с массивами подряд и <path>.manifest с именами, формами, типами и смещениями."""
    path = Path(path).with_suffix(".bin")
    lines = [CHECKPOINT_VERSION]
    for key, value in (meta or {}).items():
        lines.append(f"meta {key} {value}")
    offset = 0
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("wb") as fh:
            for name, param in params.items():
                array = np.ascontiguousarray(param.data).reshape(param.shape)
                shape = ",".join(str(s) for s in array.shape) or "-"
                lines.append(f"param {name} {shape} {array.dtype.str} {offset} {array.nbytes}")
                fh.write(array.tobytes())
                offset += array.nbytes
        _manifest_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise CheckpointError(f"Не удалось записать чекпойнт {path}: {exc}") from exc
    logger.info("Чекпойнт сохранён: %s (%s параметров, %s байт)", path, len(params), offset)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    path = Path(path).with_suffix(".bin")
    manifest = _manifest_path(path)
    try:
        lines = manifest.read_text(encoding="utf-8").splitlines()
        payload = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"Не удалось прочитать чекпойнт {path}: {exc}") from exc
    if not lines or lines[0].strip() != CHECKPOINT_VERSION:
        raise CheckpointError(f"{manifest}: ожидалась версия {CHECKPOINT_VERSION}")

    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "meta" and len(parts) >= 3:
            meta[parts[1]] = " ".join(parts[2:])
            continue
        if parts[0] != "param" or len(parts) != 6:
            raise CheckpointError(f"{manifest}:{lineno}: некорректная строка: {line!r}")
        _, name, shape_text, dtype, offset, nbytes = parts
        shape = () if shape_text == "-" else tuple(int(s) for s in shape_text.split(","))
        offset, nbytes = int(offset), int(nbytes)
        if offset + nbytes > len(payload):
            raise CheckpointError(f"{manifest}:{lineno}: параметр {name} выходит за конец {path.name}")
        array = np.frombuffer(payload, dtype=np.dtype(dtype), count=nbytes // np.dtype(dtype).itemsize, offset=offset)
        arrays[name] = array.reshape(shape).copy()
    return arrays, meta


def restore_params(params: Mapping[str, Value], arrays: Mapping[str, np.ndarray]) -> None:
    """Копирует массивы в параметры; набор имён и формы должны совпасть."""
    if set(params) != set(arrays):
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        raise CheckpointError(f"Чекпойнт несовместим с моделью: нет {missing[:5]}, лишние {extra[:5]}")
    for name, param in params.items():
        if arrays[name].shape != param.shape:
            raise CheckpointError(f"Параметр {name}: форма {arrays[name].shape}, в модели {param.shape}")
        param.data = arrays[name].astype(param.dtype)
