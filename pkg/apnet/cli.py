"""Командная строка: генерация сцен, проекция, прореживание, обучение, оценка, абляция и проверка градиентов."""

from __future__ import annotations

import argparse
import logging
from pathlib import Path

from apnet.aerial import ProjectionError, complete_image, project_to_aerial
from apnet.cloud import CloudError, CloudFormatError, CloudIOError, read_cloud, write_cloud
from apnet.config import FUSION_STRATEGIES, PROFILES, ConfigError, ExperimentConfig, apply_overrides, load_config, settings
from apnet.export import ExportError, dump_aerial, write_legend
from apnet.fusion import FusionError
from apnet.gradcheck import GradCheckError, run_grad_check_suite
from apnet.layers import BranchError
from apnet.logs import setup_logging
from apnet.losses import LossError
from apnet.metrics import MetricsError, write_metrics_csv
from apnet.optim import CheckpointError, OptimizerError
from apnet.pipeline import AblationError, TrainingDivergedError, ablate, evaluate, raster_origin, train
from apnet.sampling import SamplingError, grid_downsample
from apnet.scene import SceneGenerationError, generate_scene
from apnet.tensor import TensorError

logger = logging.getLogger(__name__)

HANDLED_ERRORS = (
    AblationError,
    BranchError,
    CheckpointError,
    CloudError,
    CloudFormatError,
    CloudIOError,
    ConfigError,
    ExportError,
    FusionError,
    GradCheckError,
    LossError,
    MetricsError,
    OptimizerError,
    ProjectionError,
    SamplingError,
    SceneGenerationError,
    TensorError,
    TrainingDivergedError,
)


def _csv(value: str) -> list[str]:
    return [part.strip() for part in value.split(",") if part.strip()]


def _int_csv(value: str) -> list[int]:
    try:
        return [int(part) for part in _csv(value)]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"ожидался список целых через запятую: {value}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="INI-файл эксперимента")
    common.add_argument("--seed", type=int, default=None, help="Главное зерно (переопределяет [train] seed)")
    common.add_argument("--out", type=Path, default=None, help=f"Каталог результатов. По умолчанию: {settings.output_dir}")
    common.add_argument("--strategy", choices=FUSION_STRATEGIES, default=None, help="Стратегия слияния")
    common.add_argument("--profile", choices=sorted(PROFILES), default="small", help="Профиль значений по умолчанию")

    parser = argparse.ArgumentParser(
        prog="apnet",
        description="Сегментация облаков точек двумя ветками (аэроснимок и точки) с геометрическим слиянием",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Примеры использования:
  python -m apnet generate --seed 3                 # сцена в runs/scene3.xyzrgbl
  python -m apnet train --profile small --seed 0    # обучение GAF на синтетических сценах
  python -m apnet evaluate --checkpoint runs/checkpoint.bin
  python -m apnet ablate --seeds 0,1,2 --xlsx       # таблица стратегий слияния
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", parents=[common], help="Сгенерировать размеченную сцену")
    gen.add_argument("--output", type=Path, default=None, help="Файл xyzrgbl")

    proj = sub.add_parser("project", parents=[common], help="Построить аэроснимок облака из файла")
    proj.add_argument("input", type=Path)

    down = sub.add_parser("downsample", parents=[common], help="Прореживание облака по сетке")
    down.add_argument("input", type=Path)
    down.add_argument("--grid", type=float, default=None, help="Размер ячейки, м")

    sub.add_parser("train", parents=[common], help="Обучение")

    ev = sub.add_parser("evaluate", parents=[common], help="Оценка чекпойнта на проверочных сценах")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--split-seed", type=int, default=None)
    ev.add_argument("--predictions", action="store_true", help="Записать облака с предсказанными метками")

    ab = sub.add_parser("ablate", parents=[common], help="Сравнение стратегий слияния")
    ab.add_argument("--strategies", type=_csv, default=list(FUSION_STRATEGIES))
    ab.add_argument("--seeds", type=_int_csv, default=[0, 1, 2])
    ab.add_argument("--xlsx", action="store_true", help="Дополнительно сохранить таблицу в Excel")

    dump = sub.add_parser("dump-aerial", parents=[common], help="Выгрузить растры сгенерированной сцены")
    dump.add_argument("--raw", action="store_true", help="Без достройки пустых пикселей")

    grad = sub.add_parser("grad-check", parents=[common], help="Проверка градиентов центральными разностями")
    grad.add_argument("--trials", type=int, default=100)
    grad.add_argument("--only", type=_csv, default=None, help="Имена проверок через запятую")
    return parser


def _config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config, profile=args.profile)
    return apply_overrides(
        cfg,
        seed=args.seed,
        strategy=args.strategy,
        output_dir=str(args.out) if args.out is not None else None,
    )


def _cmd_generate(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    seed = cfg.train.seed
    cloud = generate_scene(seed, cfg.scene)
    path = args.output or cfg.output_dir() / f"scene{seed}.xyzrgbl"
    write_cloud(cloud, path)
    logger.info("Сцена %s: %s точек → %s", seed, len(cloud), path)
    return 0


def _cmd_project(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    cloud = read_cloud(args.input)
    proj = cfg.projection
    origin = raster_origin(cloud, cfg)
    initial = project_to_aerial(cloud, proj.pixel_size, origin, (proj.width, proj.height))
    completed = complete_image(initial, proj.completion_passes)
    out = cfg.output_dir()
    dump_aerial(initial, out, f"{args.input.stem}_init")
    dump_aerial(completed, out, args.input.stem)
    logger.info("Валидных пикселей: %s → %s из %s", initial.valid_count, completed.valid_count, proj.width * proj.height)
    return 0


def _cmd_downsample(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    cloud = read_cloud(args.input)
    d = args.grid if args.grid is not None else cfg.sampling.grid_size
    down = grid_downsample(cloud, d)
    path = cfg.output_dir() / f"{args.input.stem}_d{d:g}.xyzrgbl"
    write_cloud(down.as_cloud(), path)
    logger.info("Прореживание %s: %s → %s точек, %s", args.input.name, len(cloud), len(down), path)
    return 0


def _cmd_train(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    result = train(cfg)
    logger.info("Чекпойнт: %s; метрики: %s", result.checkpoint, result.metrics_path)
    return 0


def _cmd_evaluate(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    out = cfg.output_dir()
    records = evaluate(
        args.checkpoint,
        cfg,
        args.split_seed,
        predictions_dir=out / "predictions" if args.predictions else None,
    )
    split = cfg.train.seed if args.split_seed is None else args.split_seed
    write_metrics_csv([record.as_row(head=head, split_seed=split) for head, record in records.items()], out / "evaluation.csv")
    return 0


def _cmd_ablate(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    table = ablate(cfg, args.strategies, args.seeds, out_dir=cfg.output_dir(), xlsx=args.xlsx)
    logger.info("Абляция:\n%s", table.to_string(index=False))
    return 0


def _cmd_dump_aerial(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    cloud = generate_scene(cfg.train.seed, cfg.scene)
    proj = cfg.projection
    raster = project_to_aerial(cloud, proj.pixel_size, raster_origin(cloud, cfg), (proj.width, proj.height))
    if not args.raw:
        raster = complete_image(raster, proj.completion_passes)
    out = cfg.output_dir()
    dump_aerial(raster, out, f"scene{cfg.train.seed}")
    write_legend(out / "legend.png")
    return 0


def _cmd_grad_check(args: argparse.Namespace, cfg: ExperimentConfig) -> int:
    reports = run_grad_check_suite(args.trials, cfg.train.seed, only=args.only)
    failed = [r for r in reports if not r.passed]
    if failed:
        logger.error("Проверка градиентов не пройдена: %s", ", ".join(f"{r.name} ({r.max_error:.2e})" for r in failed))
        return 1
    logger.info("Проверка градиентов пройдена: %s проверок", len(reports))
    return 0


COMMANDS = {
    "generate": _cmd_generate,
    "project": _cmd_project,
    "downsample": _cmd_downsample,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
    "dump-aerial": _cmd_dump_aerial,
    "grad-check": _cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(settings)
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except HANDLED_ERRORS as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return 1
