from __future__ import annotations

import numpy as np
import pytest

from apnet.cloud import LabeledPointCloud
from apnet.config import ExperimentConfig, build_config


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="Запускать долгие приёмочные прогоны")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: долгий прогон, только с --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="нужен --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


TINY_VALUES = {
    "scene": {
        "area": 2.56,
        "density": 48.0,
        "classes": ("ground", "building", "vegetation"),
        "min_points_per_class": 10,
    },
    "projection": {"pixel_size": 0.16, "width": 16, "height": 16},
    "fusion": {"kernel_points": 4, "radius": 0.5, "sigma": 0.3},
    "sampling": {"neighbor_cap": 8},
    "branches": {
        "channels": 4,
        "a_widths": (4, 8),
        "p_widths": (4,),
        "p_neighbors": 4,
        "p_radius": 0.4,
    },
    "train": {"epochs": 1, "batch_size": 2, "train_scenes": 2, "val_scenes": 1},
}


def tiny_config(**train) -> ExperimentConfig:
    values = {section: dict(v) for section, v in TINY_VALUES.items()}
    values["train"].update(train)
    return build_config(values)


@pytest.fixture
def tiny_cfg() -> ExperimentConfig:
    return tiny_config()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


def random_cloud(
    rng: np.random.Generator,
    n: int,
    *,
    extent: float = 2.0,
    class_count: int = 3,
    labels: bool = True,
) -> LabeledPointCloud:
    positions = rng.uniform(0.0, extent, size=(n, 3))
    colors = rng.uniform(0.0, 1.0, size=(n, 3))
    return LabeledPointCloud(
        positions,
        colors,
        rng.integers(0, class_count, size=n) if labels else None,
        class_count,
    )
