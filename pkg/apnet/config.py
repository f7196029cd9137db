from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Any, Literal

from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from apnet.cloud import CLASS_NAMES
from apnet.paths import default_output_dir, load_env_file

load_env_file()


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    return int(raw)


@dataclass(frozen=True)
class Settings:
    output_dir: Path
    log_level: str
    log_dir: Path | None
    workers: int
    prefetch: int

    @classmethod
    def from_env(cls) -> Settings:
        output = os.getenv("APNET_OUTPUT_DIR")
        log_dir = os.getenv("APNET_LOG_DIR")
        return cls(
            output_dir=Path(output) if output else default_output_dir(),
            log_level=(os.getenv("APNET_LOG_LEVEL") or "INFO").upper(),
            log_dir=Path(log_dir) if log_dir else None,
            workers=max(1, _env_int("APNET_WORKERS", 1)),
            prefetch=max(1, _env_int("APNET_PREFETCH", 2)),
        )


settings = Settings.from_env()


# --- Конфигурация эксперимента ---

FusionStrategy = Literal["gaf", "naive-gaf", "addition", "concatenation", "a-only", "p-only"]
# Порядок строк в таблице абляции.
FUSION_STRATEGIES: tuple[str, ...] = ("a-only", "p-only", "addition", "concatenation", "naive-gaf", "gaf")
ProfileName = Literal["small", "full-scale"]


class ConfigError(Exception):
    pass


def _split_csv(value: Any) -> Any:
    if isinstance(value, str):
        return tuple(part.strip() for part in value.split(",") if part.strip())
    return value


CsvNames = Annotated[tuple[str, ...], BeforeValidator(_split_csv)]
CsvWidths = Annotated[tuple[int, ...], BeforeValidator(_split_csv)]


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class SceneConfig(_Section):
    area: float = Field(20.48, gt=0, description="Сторона квадратной сцены, м")
    density: float = Field(24.0, gt=0, description="Точек на м² поверхности")
    classes: CsvNames = CLASS_NAMES
    min_points_per_class: int = Field(20, ge=1)
    color_noise: float = Field(0.04, ge=0, le=0.5)

    @field_validator("classes")
    @classmethod
    def _known_classes(cls, value: tuple[str, ...]) -> tuple[str, ...]:
        unknown = [name for name in value if name not in CLASS_NAMES]
        if unknown:
            raise ValueError(f"неизвестные классы: {unknown}")
        if len(set(value)) != len(value):
            raise ValueError("классы повторяются")
        if not value:
            raise ValueError("нужен хотя бы один класс")
        return value


class ProjectionConfig(_Section):
    pixel_size: float = Field(0.16, gt=0)
    width: int = Field(128, gt=0)
    height: int = Field(128, gt=0)
    completion_passes: int = Field(2, ge=0)


class SamplingConfig(_Section):
    grid_size: float = Field(0.2, gt=0)
    neighbor_cap: int = Field(32, ge=1)


class FusionConfig(_Section):
    radius: float = Field(0.5, gt=0, description="r_conv, м")
    sigma: float = Field(0.24, gt=0, description="Радиус влияния точки ядра, м")
    kernel_points: int = Field(15, ge=1)


class BranchConfig(_Section):
    channels: int = Field(32, ge=1, description="C: общая ширина выходов обеих веток")
    a_widths: CsvWidths = (16, 32, 64)
    p_widths: CsvWidths = (16, 32)
    p_neighbors: int = Field(16, ge=1)
    p_radius: float = Field(0.4, gt=0)
    p_keep_ratio: float = Field(0.5, gt=0, le=1)
    twice_forward_sum: bool = True
    head_layers: int = Field(2, ge=1)

    @field_validator("a_widths", "p_widths")
    @classmethod
    def _positive_widths(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if not value or any(w <= 0 for w in value):
            raise ValueError("ширины стадий должны быть положительными и непустыми")
        return value

    @property
    def a_depth(self) -> int:
        return len(self.a_widths) - 1


class LossConfig(_Section):
    alpha_a: float = Field(1.0, ge=0)
    alpha_p: float = Field(1.0, ge=0)
    alpha_fused: float = Field(1.0, ge=0)
    beta: float = Field(1.0, ge=0)
    class_weight_eps: float = Field(1e-3, gt=0)


class OptimConfig(_Section):
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    p_lr_factor: float = Field(5.0, gt=0)
    epoch_decay: float = Field(0.95, gt=0, le=1)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class TrainConfig(_Section):
    seed: int = Field(0, ge=0)
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(4, ge=1)
    train_scenes: int = Field(8, ge=1, le=5000)
    val_scenes: int = Field(2, ge=1, le=5000)
    strategy: FusionStrategy = "gaf"
    dtype: Literal["float32", "float64"] = "float32"
    augment: bool = True
    output_dir: str = ""


class ExperimentConfig(_Section):
    scene: SceneConfig = SceneConfig()
    projection: ProjectionConfig = ProjectionConfig()
    sampling: SamplingConfig = SamplingConfig()
    fusion: FusionConfig = FusionConfig()
    branches: BranchConfig = BranchConfig()
    loss: LossConfig = LossConfig()
    optim: OptimConfig = OptimConfig()
    train: TrainConfig = TrainConfig()

    @model_validator(mode="after")
    def _raster_fits_encoder(self) -> ExperimentConfig:
        stride = 2 ** self.branches.a_depth
        if self.projection.width % stride or self.projection.height % stride:
            raise ValueError(
                f"размер растра {self.projection.width}×{self.projection.height} "
                f"должен делиться на {stride} (глубина A-ветки {self.branches.a_depth})"
            )
        return self

    def output_dir(self) -> Path:
        return Path(self.train.output_dir) if self.train.output_dir else settings.output_dir


PROFILES: dict[str, dict[str, dict[str, Any]]] = {
    "small": {
        "scene": {"area": 20.48, "density": 24.0},
        "projection": {"pixel_size": 0.16, "width": 128, "height": 128},
        "branches": {"channels": 32},
        "train": {"batch_size": 4, "epochs": 30},
    },
    "full-scale": {
        "scene": {"area": 20.48, "density": 48.0},
        "projection": {"pixel_size": 0.04, "width": 512, "height": 512},
        "branches": {"channels": 128},
        "train": {"batch_size": 4, "epochs": 30},
    },
}


def _merge(base: dict[str, dict[str, Any]], extra: dict[str, dict[str, Any]]) -> dict[str, dict[str, Any]]:
    merged = {section: dict(values) for section, values in base.items()}
    for section, values in extra.items():
        merged.setdefault(section, {}).update(values)
    return merged


def build_config(
    values: dict[str, dict[str, Any]] | None = None,
    *,
    profile: ProfileName | None = None,
) -> ExperimentConfig:
    """Собирает конфиг: профиль, затем значения по секциям; ошибки: ConfigError."""
    merged: dict[str, dict[str, Any]] = {}
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"Неизвестный профиль: {profile}")
        merged = _merge(merged, PROFILES[profile])
    merged = _merge(merged, values or {})
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(f"Некорректная конфигурация:\n{exc}") from exc


def apply_overrides(cfg: ExperimentConfig, **overrides: Any) -> ExperimentConfig:
    """Переопределения из CLI: seed, strategy, output_dir попадают в секцию [train]."""
    train = {key: value for key, value in overrides.items() if value is not None}
    if not train:
        return cfg
    data = cfg.model_dump()
    data["train"].update(train)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"Некорректное переопределение {train}:\n{exc}") from exc


def load_config(path: str | Path | None = None, *, profile: ProfileName | None = "small") -> ExperimentConfig:
    values: dict[str, dict[str, Any]] = {}
    if path is not None:
        path = Path(path)
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with path.open("r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"Не удалось прочитать конфиг {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"Ошибка разбора конфига {path}: {exc}") from exc
        known = set(ExperimentConfig.model_fields)
        for section in parser.sections():
            if section not in known:
                raise ConfigError(f"{path}: неизвестная секция [{section}]")
            values[section] = dict(parser.items(section))
    return build_config(values, profile=profile)


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_format_value(v) for v in value)
    return str(value)


def save_config(cfg: ExperimentConfig, path: str | Path) -> Path:
    """Снимок конфига в том же INI-формате; load_config(save_config(cfg)) == cfg."""
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    for section, values in cfg.model_dump().items():
        parser[section] = {key: _format_value(value) for key, value in values.items()}
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            parser.write(fh)
    except OSError as exc:
        raise ConfigError(f"Не удалось записать конфиг {path}: {exc}") from exc
    return path
