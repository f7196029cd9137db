"""Корень проекта, .env и каталог запусков."""

from __future__ import annotations

from pathlib import Path

from dotenv import load_dotenv

PROJECT_ROOT = Path(__file__).resolve().parent.parent
ENV_FILE = PROJECT_ROOT / ".env"
RUNS_DIRNAME = "runs"


def default_output_dir() -> Path:
    """Каталог для чекпойнтов, метрик и дампов, если APNET_OUTPUT_DIR не задан."""
    return PROJECT_ROOT / RUNS_DIRNAME


def load_env_file(env_file: Path = ENV_FILE) -> bool:
    """Подхватывает .env проекта; уже заданные переменные окружения не перезаписываются."""
    return load_dotenv(env_file if env_file.is_file() else None)
