from __future__ import annotations

import logging
from logging.handlers import RotatingFileHandler

from apnet.config import Settings

_LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


def setup_logging(settings: Settings) -> None:
    root = logging.getLogger()
    root.setLevel(getattr(logging, settings.log_level, logging.INFO))
    formatter = logging.Formatter(_LOG_FORMAT)

    # Повторный вызов (тесты CLI) не должен дублировать вывод.
    for handler in list(root.handlers):
        if getattr(handler, "_apnet", False):
            root.removeHandler(handler)
            handler.close()

    console = logging.StreamHandler()
    console.setFormatter(formatter)
    console._apnet = True
    root.addHandler(console)

    if settings.log_dir is not None:
        settings.log_dir.mkdir(parents=True, exist_ok=True)
        file_handler = RotatingFileHandler(
            settings.log_dir / "apnet.log",
            maxBytes=5_000_000,
            backupCount=3,
            encoding="utf-8",
        )
        file_handler.setFormatter(formatter)
        file_handler._apnet = True
        root.addHandler(file_handler)
