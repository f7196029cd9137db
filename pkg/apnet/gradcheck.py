"""Проверка обратного прохода центральными разностями: отдельные операции, ветки, GAF и потери."""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np

from apnet import tensor as T
from apnet.branches import ABranch, PBranch
from apnet.cloud import LabeledPointCloud
from apnet.config import BranchConfig
from apnet.fusion import build_fusion_inputs, init_kernel_weights, kpconv_fuse, make_kernel_layout
from apnet.layers import ParameterStore, SegmentationHead
from apnet.losses import lovasz_softmax, wce_loss
from apnet.sampling import grid_downsample
from apnet.tensor import Value

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4

Computation = Callable[[list[Value]], Value]


class GradCheckError(Exception):
    pass


@dataclass(frozen=True)
class GradCheckReport:
    name: str
    errors: tuple[float, ...]
    tol: float

    @property
    def max_error(self) -> float:
        return max(self.errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def _evaluate(f: Computation, arrays: Sequence[np.ndarray]) -> float:
    out = f([Value(a) for a in arrays])
    value = out.item()
    if not np.isfinite(value):
        raise GradCheckError(f"Функция вернула неконечное значение {value}")
    return value


def grad_check(
    f: Computation,
    inputs: Sequence[np.ndarray],
    h: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
    *,
    name: str = "f",
) -> GradCheckReport:
    """Ошибка по каждому входу: max|a − n| / max(1, max|n|), a из обратного прохода, n из разностей."""
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    values = [Value(a.copy(), requires_grad=True) for a in arrays]
    out = f(values)
    if out.size != 1:
        raise GradCheckError(f"{name}: ожидался скаляр, получено {out.shape}")
    if not np.isfinite(out.item()):
        raise GradCheckError(f"{name}: неконечное значение {out.item()}")
    if out.requires_grad:
        out.backward()

    errors = []
    for i, array in enumerate(arrays):
        analytic = values[i].grad if values[i].grad is not None else np.zeros_like(array)
        numeric = np.zeros_like(array)
        flat = numeric.reshape(-1)
        for j in range(array.size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i].reshape(-1)[j] += h
            minus[i].reshape(-1)[j] -= h
            flat[j] = (_evaluate(f, plus) - _evaluate(f, minus)) / (2 * h)
        scale = max(1.0, float(np.abs(numeric).max(initial=0.0)))
        errors.append(float(np.abs(analytic - numeric).max(initial=0.0)) / scale)
    return GradCheckReport(name, tuple(errors), tol)


def _projected(out: Value, rng: np.random.Generator) -> Value:
    """Скаляр Σ out · R со случайным R, чтобы проверять все компоненты градиента."""
    return (out * Value(rng.normal(size=out.shape))).sum()


def _away_from_zero(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    return rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _elementwise_cases(rng: np.random.Generator) -> dict[str, tuple[Computation, list[np.ndarray]]]:
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)))
    r = rng.normal(size=shape)
    a, b = rng.normal(size=shape), rng.normal(size=(shape[1],))
    positive = rng.uniform(0.5, 2.0, size=shape)
    wrap = lambda fn: (lambda v: (fn(v) * Value(r)).sum())  # noqa: E731
    return {
        "add": (wrap(lambda v: T.add(v[0], v[1])), [a, b]),
        "sub": (wrap(lambda v: T.sub(v[0], v[1])), [a, b]),
        "mul": (wrap(lambda v: T.mul(v[0], v[1])), [a, b]),
        "div": (wrap(lambda v: T.div(v[0], v[1])), [a, positive]),
        "neg": (wrap(lambda v: T.neg(v[0])), [a]),
        "power": (wrap(lambda v: T.power(v[0], 3.0)), [a]),
        "relu": (wrap(lambda v: T.relu(v[0])), [_away_from_zero(rng, shape)]),
        "exp": (wrap(lambda v: T.exp(v[0])), [a]),
        "log": (wrap(lambda v: T.log(v[0])), [positive]),
    }


def _structural_cases(rng: np.random.Generator) -> dict[str, tuple[Computation, list[np.ndarray]]]:
    n, k, m = (int(x) for x in rng.integers(1, 5, size=3))
    a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
    idx = rng.integers(0, n, size=int(rng.integers(1, 7)))
    cube = rng.normal(size=(2, 3, 4))
    distinct = rng.permutation(n * k).reshape(n, k) + rng.uniform(0, 0.5, size=(n, k))
    return {
        "matmul": (lambda v: _projected(T.matmul(v[0], v[1]), np.random.default_rng(1)), [a, b]),
        "reshape": (lambda v: _projected(T.reshape(v[0], (k, n)), np.random.default_rng(2)), [a]),
        "transpose": (lambda v: _projected(T.transpose(v[0], (2, 0, 1)), np.random.default_rng(3)), [cube]),
        "concat": (lambda v: _projected(T.concat([v[0], v[1]], axis=0), np.random.default_rng(4)), [a, a[:1] * 2]),
        "gather": (lambda v: _projected(T.gather(v[0], idx), np.random.default_rng(5)), [a]),
        "scatter_add": (lambda v: _projected(T.scatter_add(v[0], idx % 3, 3), np.random.default_rng(6)), [rng.normal(size=(len(idx), k))]),
        "getitem": (lambda v: _projected(v[0][idx], np.random.default_rng(7)), [a]),
        "sum": (lambda v: _projected(T.sum_(v[0], axis=1), np.random.default_rng(8)), [cube]),
        "mean": (lambda v: _projected(T.mean(v[0], axis=(0, 2)), np.random.default_rng(9)), [cube]),
        "max_reduce": (lambda v: _projected(T.max_reduce(v[0], axis=1), np.random.default_rng(10)), [distinct]),
        "softmax": (lambda v: _projected(T.softmax(v[0], axis=-1), np.random.default_rng(11)), [a]),
        "log_softmax": (lambda v: _projected(T.log_softmax(v[0], axis=-1), np.random.default_rng(12)), [a]),
    }


def _image_cases(rng: np.random.Generator) -> dict[str, tuple[Computation, list[np.ndarray]]]:
    h, w = 2 * int(rng.integers(1, 3)), 2 * int(rng.integers(1, 3))
    cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    image = rng.normal(size=(h, w, cin))
    weight = rng.normal(size=(3, 3, cin, cout))
    bias = rng.normal(size=(cout,))
    distinct = rng.permutation(h * w * cin).reshape(h, w, cin) + rng.uniform(0, 0.5, size=(h, w, cin))
    cu = rng.uniform(-0.7, w - 0.3, size=5)
    cv = rng.uniform(-0.7, h - 0.3, size=5)
    return {
        "conv2d": (lambda v: _projected(T.conv2d(v[0], v[1], v[2]), np.random.default_rng(13)), [image, weight, bias]),
        "max_pool2d": (lambda v: _projected(T.max_pool2d(v[0], 2), np.random.default_rng(14)), [distinct]),
        "upsample_nearest": (lambda v: _projected(T.upsample_nearest(v[0], 2), np.random.default_rng(15)), [image]),
        "bilinear_sample": (
            lambda v: _projected(T.bilinear_sample(v[0], cu, cv)[0], np.random.default_rng(16)),
            [image],
        ),
    }


def _tiny_branch_config() -> BranchConfig:
    return BranchConfig(
        channels=3,
        a_widths=(2, 3),
        p_widths=(3,),
        p_neighbors=3,
        p_radius=0.6,
        p_keep_ratio=0.5,
        twice_forward_sum=True,
        head_layers=2,
    )


def _toy_cloud(rng: np.random.Generator, n: int = 10) -> LabeledPointCloud:
    positions = rng.uniform(0.0, 1.2, size=(n, 3))
    positions[:, 2] *= 0.3
    return LabeledPointCloud(positions, rng.uniform(0, 1, size=(n, 3)), rng.integers(0, 3, size=n), 3)


def _network_cases(rng: np.random.Generator) -> dict[str, tuple[Computation, list[np.ndarray]]]:
    cfg = _tiny_branch_config()
    seed = int(rng.integers(0, 2**31))
    store = ParameterStore(seed=seed)
    a_branch = ABranch(store, cfg)
    p_branch = PBranch(store, cfg)
    head = SegmentationHead.build(store, "head", cfg.channels, 4, cfg.head_layers)
    image = rng.uniform(0, 1, size=(4, 4, 3))
    down = grid_downsample(_toy_cloud(rng), 0.3)

    def a_loss(v: list[Value]) -> Value:
        a_branch.encoder[0].weight = v[1]
        return _projected(a_branch(v[0]), np.random.default_rng(17))

    def p_loss(v: list[Value]) -> Value:
        p_branch.stages[0].weight = v[0]
        p_branch.output.weight = v[1]
        return _projected(p_branch(down, seed=seed), np.random.default_rng(18))

    def head_loss(v: list[Value]) -> Value:
        head.layers[0].weight = v[1]
        return _projected(head(v[0]), np.random.default_rng(19))

    return {
        "a_branch": (a_loss, [image, store.params["a.enc0.weight"].data.copy()]),
        "p_branch": (p_loss, [store.params["p.stage0.weight"].data.copy(), store.params["p.out.weight"].data.copy()]),
        "segmentation_head": (head_loss, [rng.normal(size=(5, cfg.channels)), store.params["head.0.weight"].data.copy()]),
    }


def _gaf_case(rng: np.random.Generator) -> dict[str, tuple[Computation, list[np.ndarray]]]:
    cloud = _toy_cloud(rng)
    down = grid_downsample(cloud, 0.3)
    channels = 2
    store = ParameterStore(seed=int(rng.integers(0, 2**31)))
    layout = init_kernel_weights(store, make_kernel_layout(4, 0.5, 0.3, seed=0, iterations=200), 2 * channels, channels)
    feature_map = rng.normal(size=(8, 8, channels))
    point_feats = rng.normal(size=(len(down), channels))

    def gaf_loss(v: list[Value]) -> Value:
        inputs = build_fusion_inputs(cloud.positions, down, v[0], v[1], s=0.16, origin=(0.0, 0.0), r_conv=0.5, cap=16)
        return _projected(kpconv_fuse(inputs, layout.with_weights(v[2])), np.random.default_rng(20))

    return {"gaf": (gaf_loss, [feature_map, point_feats, layout.weights.data.copy()])}


def _loss_cases(rng: np.random.Generator) -> dict[str, tuple[Computation, list[np.ndarray]]]:
    n, classes = int(rng.integers(2, 9)), int(rng.integers(2, 5))
    logits = rng.normal(size=(n, classes))
    labels = rng.integers(0, classes, size=n)
    weights = rng.uniform(0.5, 2.0, size=classes)
    return {
        "wce": (lambda v: wce_loss(v[0], labels, weights), [logits]),
        "lovasz_softmax": (lambda v: lovasz_softmax(T.softmax(v[0], axis=-1), labels), [logits]),
    }


CASE_GROUPS = (_elementwise_cases, _structural_cases, _image_cases, _network_cases, _gaf_case, _loss_cases)


def run_grad_check_suite(
    trials: int = 100,
    seed: int = 0,
    *,
    h: float = DEFAULT_STEP,
    tol: float = DEFAULT_TOL,
    only: Sequence[str] | None = None,
) -> list[GradCheckReport]:
    """Худший результат по испытаниям для каждой проверки."""
    rng = np.random.default_rng(seed)
    worst: dict[str, GradCheckReport] = {}
    for trial in range(trials):
        for group in CASE_GROUPS:
            for name, (f, inputs) in group(rng).items():
                if only and name not in only:
                    continue
                report = grad_check(f, inputs, h, tol, name=name)
                if name not in worst or report.max_error > worst[name].max_error:
                    worst[name] = report
        logger.debug("Проверка градиентов: испытание %s/%s", trial + 1, trials)
    for report in worst.values():
        level = logging.INFO if report.passed else logging.WARNING
        logger.log(level, "%s: макс. ошибка %.3e (порог %.0e)", report.name, report.max_error, report.tol)
    return list(worst.values())
