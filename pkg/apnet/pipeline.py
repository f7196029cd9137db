"""Подготовка примеров, цикл обучения, оценка и абляция стратегий слияния."""

from __future__ import annotations

import logging
import queue
import threading
from collections.abc import Callable, Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from apnet.aerial import AerialRaster, ProjectionError, complete_image, project_to_aerial
from apnet.cloud import IGNORE_LABEL, BoundingRegion, LabeledPointCloud, crop
from apnet.config import FUSION_STRATEGIES, ExperimentConfig, apply_overrides, save_config, settings
from apnet.fusion import neighbor_lists, write_kernel_layout
from apnet.losses import ClassWeights, inverse_frequency_weights
from apnet.metrics import ConfusionMatrix, MetricsRecord, compute_metrics, write_metrics_csv
from apnet.model import APNet, point_predictions
from apnet.optim import (
    CheckpointError,
    OptimizerState,
    adamw_step,
    epoch_end,
    load_checkpoint,
    restore_params,
    save_checkpoint,
    zero_grad,
)
from apnet.sampling import DownsampledCloud, NeighborLists, grid_downsample
from apnet.scene import augment, generate_scene

logger = logging.getLogger(__name__)

VAL_SEED_OFFSET = 5000
SEED_STRIDE = 10000
CHECKPOINT_NAME = "checkpoint"
METRICS_NAME = "metrics.csv"
CONFIG_NAME = "config.ini"
KERNEL_LAYOUT_NAME = "kernel_layout.txt"


class TrainingDivergedError(Exception):
    def __init__(self, batch_seed: int, components: dict[str, float]) -> None:
        self.batch_seed = batch_seed
        self.components = components
        parts = ", ".join(f"{name}={value!r}" for name, value in components.items())
        super().__init__(f"Неконечная функция потерь на примере seed={batch_seed}: {parts}")


class AblationError(Exception):
    pass


@dataclass(frozen=True, eq=False)
class Sample:
    """Один обучающий пример: облако в окне растра, достроенный снимок и прореженное облако."""

    cloud: LabeledPointCloud
    raster: AerialRaster
    pixel_labels: np.ndarray | None
    down: DownsampledCloud
    origin: tuple[float, float]
    seed: int = 0
    neighbors: NeighborLists | None = None
    down_neighbors: NeighborLists | None = None


def raster_origin(cloud: LabeledPointCloud, cfg: ExperimentConfig) -> tuple[float, float]:
    """Окно растра центрируется на охвате облака по XY."""
    if len(cloud) == 0:
        raise ProjectionError("Пустое облако: окно растра не определено")
    s = cfg.projection.pixel_size
    xy = cloud.positions[:, :2]
    center = (xy.min(axis=0) + xy.max(axis=0)) / 2
    return (
        float(center[0] - cfg.projection.width * s / 2),
        float(center[1] - cfg.projection.height * s / 2),
    )


def prepare_sample(
    cloud: LabeledPointCloud,
    cfg: ExperimentConfig,
    *,
    origin: tuple[float, float] | None = None,
    seed: int = 0,
) -> Sample:
    proj = cfg.projection
    s = proj.pixel_size
    origin = raster_origin(cloud, cfg) if origin is None else origin
    window = BoundingRegion(origin[0], origin[1], origin[0] + proj.width * s, origin[1] + proj.height * s)
    cropped = crop(cloud, window)
    if len(cropped) == 0:
        raise ProjectionError(f"В окне растра {window} нет точек")

    raster = complete_image(project_to_aerial(cropped, s, origin, (proj.width, proj.height)), proj.completion_passes)
    pixel_labels = raster.pixel_labels() if cropped.has_labels else None
    down = grid_downsample(cropped, cfg.sampling.grid_size)

    strategy = cfg.train.strategy
    neighbors = down_neighbors = None
    if strategy == "gaf":
        neighbors = neighbor_lists(cropped.positions, down.barycenters, cfg.fusion.radius, cfg.sampling.neighbor_cap)
    elif strategy == "naive-gaf":
        down_neighbors = neighbor_lists(down.barycenters, down.barycenters, cfg.fusion.radius, cfg.sampling.neighbor_cap)
    for lists in (neighbors, down_neighbors):
        if lists is not None and lists.truncated:
            logger.debug("Пример %s: у %s запросов соседей больше лимита %s", seed, lists.truncated, cfg.sampling.neighbor_cap)

    return Sample(
        cloud=cropped,
        raster=raster,
        pixel_labels=pixel_labels,
        down=down,
        origin=origin,
        seed=seed,
        neighbors=neighbors,
        down_neighbors=down_neighbors,
    )


def train_seeds(cfg: ExperimentConfig, seed: int | None = None) -> list[int]:
    base = (cfg.train.seed if seed is None else seed) * SEED_STRIDE
    return [base + i for i in range(cfg.train.train_scenes)]


def val_seeds(cfg: ExperimentConfig, seed: int | None = None) -> list[int]:
    base = (cfg.train.seed if seed is None else seed) * SEED_STRIDE + VAL_SEED_OFFSET
    return [base + j for j in range(cfg.train.val_scenes)]


def augment_seed(scene_seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([scene_seed, epoch]).generate_state(1)[0])


class SamplePrefetcher:
    """Готовит примеры заранее в фоновом потоке, очередь ограничена ``size``.

    При ``workers <= 1`` примеры строятся в вызывающем потоке. Порядок выдачи в обоих
    режимах совпадает с порядком заданий.
    """

    _DONE = object()

    def __init__(
        self,
        jobs: Iterable[Any],
        build: Callable[[Any], Sample],
        *,
        workers: int = 1,
        size: int = 2,
    ) -> None:
        self.jobs = list(jobs)
        self.build = build
        self.workers = workers
        self.size = max(1, size)

    def __iter__(self) -> Iterator[tuple[Any, Sample]]:
        if self.workers <= 1:
            for job in self.jobs:
                yield job, self.build(job)
            return

        out: queue.Queue = queue.Queue(maxsize=self.size)
        stop = threading.Event()

        def produce() -> None:
            try:
                for job in self.jobs:
                    if stop.is_set():
                        return
                    out.put((job, self.build(job)))
            except Exception as exc:  # noqa: BLE001 - передаём ошибку потребителю
                out.put(exc)
            finally:
                out.put(self._DONE)

        thread = threading.Thread(target=produce, name="apnet-prefetch", daemon=True)
        thread.start()
        try:
            while True:
                item = out.get()
                if item is self._DONE:
                    break
                if isinstance(item, Exception):
                    raise item
                yield item
        finally:
            stop.set()
            while thread.is_alive():
                try:
                    out.get_nowait()
                except queue.Empty:
                    thread.join(timeout=0.05)


def evaluate_model(model: APNet, samples: Iterable[Sample]) -> dict[str, MetricsRecord]:
    confusion: dict[str, ConfusionMatrix] = {}
    s = model.cfg.projection.pixel_size
    for sample in samples:
        truth = sample.cloud.require_labels()
        preds = model.forward(sample, seed=sample.seed)
        for head, predicted in point_predictions(preds, sample, s).items():
            confusion.setdefault(head, ConfusionMatrix.empty(model.class_count)).update(truth, predicted)
    return {head: compute_metrics(matrix) for head, matrix in confusion.items()}


@dataclass(eq=False)
class TrainResult:
    out_dir: Path
    checkpoint: Path
    metrics_path: Path
    config_path: Path
    kernel_layout_path: Path | None
    rows: list[dict[str, Any]]
    final: dict[str, MetricsRecord]
    model: APNet = field(repr=False)


def _class_weights(scenes: Iterable[LabeledPointCloud], cfg: ExperimentConfig) -> ClassWeights:
    histogram = sum(scene.label_histogram() for scene in scenes)
    return inverse_frequency_weights(histogram, cfg.loss.class_weight_eps)


def train(cfg: ExperimentConfig, *, out_dir: str | Path | None = None) -> TrainResult:
    """Обучение по эпохам: аугментация, проекция, обе ветки, слияние, потери, шаг AdamW."""
    out = Path(out_dir) if out_dir is not None else cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    config_path = save_config(cfg, out / CONFIG_NAME)

    model = APNet(cfg)
    state = OptimizerState.from_config(cfg.optim)
    scenes = {seed: generate_scene(seed, cfg.scene) for seed in train_seeds(cfg)}
    weights = _class_weights(scenes.values(), cfg)
    val_samples = [prepare_sample(generate_scene(seed, cfg.scene), cfg, seed=seed) for seed in val_seeds(cfg)]
    logger.info(
        "Обучение %s: %s сцен обучения, %s сцен проверки, %s эпох",
        cfg.train.strategy,
        len(scenes),
        len(val_samples),
        cfg.train.epochs,
    )

    def build(job: tuple[int, int]) -> Sample:
        scene_seed, sample_seed = job
        cloud = scenes[scene_seed]
        if cfg.train.augment:
            cloud, _ = augment(cloud, sample_seed)
        return prepare_sample(cloud, cfg, seed=sample_seed)

    rows: list[dict[str, Any]] = []
    final: dict[str, MetricsRecord] = {}
    for epoch in range(1, cfg.train.epochs + 1):
        order = np.random.default_rng([cfg.train.seed, epoch]).permutation(list(scenes))
        jobs = [(int(scene_seed), augment_seed(int(scene_seed), epoch)) for scene_seed in order]
        sums: dict[str, float] = {}
        batch: list[tuple[tuple[int, int], Sample]] = []
        prefetcher = SamplePrefetcher(jobs, build, workers=settings.workers, size=settings.prefetch)
        for item in prefetcher:
            batch.append(item)
            if len(batch) == cfg.train.batch_size:
                _train_batch(model, state, batch, weights, sums)
                batch = []
        if batch:
            _train_batch(model, state, batch, weights, sums)
        epoch_end(state)

        losses = {f"loss_{name}": value / len(jobs) for name, value in sums.items()}
        final = evaluate_model(model, val_samples)
        for head, record in final.items():
            rows.append(record.as_row(epoch=epoch, head=head, **losses))
        summary = ", ".join(f"{head}: mIoU {record.miou:.4f} OA {record.oa:.4f}" for head, record in final.items())
        logger.info("Эпоха %s/%s: loss %.5f; %s", epoch, cfg.train.epochs, losses.get("loss_total", float("nan")), summary)

    metrics_path = write_metrics_csv(rows, out / METRICS_NAME)
    meta = {
        "strategy": cfg.train.strategy,
        "seed": str(cfg.train.seed),
        "epochs": str(cfg.train.epochs),
        "class_count": str(model.class_count),
        "dtype": cfg.train.dtype,
    }
    layout_path = None
    if model.layout is not None:
        layout_path = write_kernel_layout(model.layout, out / KERNEL_LAYOUT_NAME)
        meta["kernel_layout"] = layout_path.name
    checkpoint = save_checkpoint(out / CHECKPOINT_NAME, model.params, meta=meta)
    logger.info("Результаты обучения в %s", out)
    return TrainResult(out, checkpoint, metrics_path, config_path, layout_path, rows, final, model)


def _train_batch(
    model: APNet,
    state: OptimizerState,
    batch: Sequence[tuple[tuple[int, int], Sample]],
    weights: ClassWeights,
    sums: dict[str, float],
) -> None:
    zero_grad(model.params)
    clamped = 0
    for (_, sample_seed), sample in batch:
        preds = model.forward(sample, seed=sample_seed)
        clamped += preds.clamped
        loss, components = model.loss(preds, sample, weights)
        if not all(np.isfinite(value) for value in components.values()):
            raise TrainingDivergedError(sample_seed, components)
        (loss * (1.0 / len(batch))).backward()
        for name, value in components.items():
            sums[name] = sums.get(name, 0.0) + value
    if clamped:
        logger.info("Пакет: %s барицентров вне растра, выборка прижата к краю", clamped)
    adamw_step(state, model.params)


def load_model(checkpoint: str | Path, cfg: ExperimentConfig) -> APNet:
    arrays, meta = load_checkpoint(checkpoint)
    strategy = meta.get("strategy")
    if strategy is not None and strategy != cfg.train.strategy:
        raise CheckpointError(f"Чекпойнт обучен для стратегии {strategy}, в конфиге {cfg.train.strategy}")
    model = APNet(cfg)
    restore_params(model.params, arrays)
    return model


def evaluate(
    checkpoint: str | Path,
    cfg: ExperimentConfig,
    split_seed: int | None = None,
    *,
    predictions_dir: str | Path | None = None,
) -> dict[str, MetricsRecord]:
    """Метрики голов на проверочных сценах; при ``predictions_dir`` пишет облака с предсказанными метками."""
    model = load_model(checkpoint, cfg)
    samples = [prepare_sample(generate_scene(seed, cfg.scene), cfg, seed=seed) for seed in val_seeds(cfg, split_seed)]
    records = evaluate_model(model, samples)
    if predictions_dir is not None:
        from apnet.export import write_predictions

        for sample in samples:
            preds = model.forward(sample, seed=sample.seed)
            labels = point_predictions(preds, sample, cfg.projection.pixel_size)
            for head, predicted in labels.items():
                write_predictions(sample.cloud, predicted, Path(predictions_dir) / f"scene{sample.seed}_{head}.xyzrgbl")
    for head, record in records.items():
        logger.info("Оценка %s: mIoU %.4f, OA %.4f, точек %s", head, record.miou, record.oa, record.points)
    return records


def primary_head(strategy: str) -> str:
    return {"a-only": "a", "p-only": "p"}.get(strategy, "fused")


def ablate(
    cfg: ExperimentConfig,
    strategies: Sequence[str],
    seeds: Sequence[int],
    *,
    out_dir: str | Path | None = None,
    xlsx: bool = False,
) -> pd.DataFrame:
    """Таблица сравнения стратегий: OA и mIoU, среднее и размах по зёрнам."""
    if not strategies:
        raise AblationError("Нужна хотя бы одна стратегия")
    if not seeds:
        raise AblationError("Нужно хотя бы одно зерно")
    duplicates = sorted({s for s in strategies if list(strategies).count(s) > 1})
    if duplicates:
        raise AblationError(f"Стратегии повторяются: {duplicates}")
    if len(set(seeds)) != len(seeds):
        raise AblationError(f"Зёрна повторяются: {list(seeds)}")
    unknown = [s for s in strategies if s not in FUSION_STRATEGIES]
    if unknown:
        raise AblationError(f"Неизвестные стратегии: {unknown}")

    out = Path(out_dir) if out_dir is not None else cfg.output_dir()
    runs: list[dict[str, Any]] = []
    for strategy in (s for s in FUSION_STRATEGIES if s in strategies):
        for seed in seeds:
            run_cfg = apply_overrides(cfg, seed=int(seed), strategy=strategy)
            result = train(run_cfg, out_dir=out / strategy / f"seed{seed}")
            head = primary_head(strategy)
            record = result.final[head]
            runs.append({"strategy": strategy, "seed": int(seed), "head": head, "oa": record.oa, "miou": record.miou})
            logger.info("Абляция %s seed=%s: mIoU %.4f, OA %.4f", strategy, seed, record.miou, record.oa)

    frame = pd.DataFrame(runs)
    table = (
        frame.groupby("strategy", sort=False)
        .agg(
            head=("head", "first"),
            runs=("seed", "count"),
            oa_mean=("oa", "mean"),
            oa_min=("oa", "min"),
            oa_max=("oa", "max"),
            miou_mean=("miou", "mean"),
            miou_min=("miou", "min"),
            miou_max=("miou", "max"),
        )
        .reset_index()
    )
    try:
        out.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out / "ablation_runs.csv", index=False, float_format="%.17g")
        table.to_csv(out / "ablation.csv", index=False, float_format="%.17g")
        if xlsx:
            table.to_excel(out / "ablation.xlsx", index=False, engine="openpyxl")
    except OSError as exc:
        raise AblationError(f"Не удалось записать таблицу абляции в {out}: {exc}") from exc
    logger.info("Таблица абляции: %s", out / "ablation.csv")
    return table


def stitch_patches(n_points: int, patches: Iterable[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Сшивка предсказаний патчей в метки блока: при перекрытии побеждает последний патч."""
    labels = np.full(n_points, IGNORE_LABEL, dtype=np.int64)
    for indices, predicted in patches:
        indices = np.asarray(indices, dtype=np.int64)
        predicted = np.asarray(predicted, dtype=np.int64)
        if indices.shape != predicted.shape:
            raise ValueError(f"Патч: {indices.shape[0]} индексов и {predicted.shape[0]} меток")
        labels[indices] = predicted
    return labels
