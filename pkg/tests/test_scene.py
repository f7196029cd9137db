import math

import numpy as np
import pytest

from apnet.cloud import CLASS_NAMES
from apnet.config import SceneConfig
from apnet.scene import LABEL, SceneGenerationError, augment, draw_augment_params, generate_scene

from conftest import random_cloud

FIVE_CLASSES = ("ground", "building", "vegetation", "car", "traffic_road")


class TestGenerateScene:
    def test_deterministic(self):
        params = SceneConfig(area=6.0, density=20.0)
        a, b = generate_scene(3, params), generate_scene(3, params)
        assert a.same_as(b)

    def test_different_seeds_differ(self):
        params = SceneConfig(area=6.0, density=20.0)
        assert not generate_scene(1, params).same_as(generate_scene(2, params))

    def test_requested_classes_meet_minimum(self):
        params = SceneConfig(area=10.0, density=10.0, classes=FIVE_CLASSES, min_points_per_class=20)
        for seed in range(3):
            histogram = generate_scene(seed, params).label_histogram()
            for name in FIVE_CLASSES:
                assert histogram[LABEL[name]] >= 20, (seed, name)

    def test_points_inside_window(self):
        params = SceneConfig(area=8.0, density=15.0)
        cloud = generate_scene(0, params)
        assert cloud.positions[:, :2].min() >= 0.0
        assert cloud.positions[:, :2].max() < 8.0
        assert cloud.colors.min() >= 0.0 and cloud.colors.max() <= 1.0
        assert cloud.class_count == len(CLASS_NAMES)

    def test_density_scales_point_count(self):
        for seed in range(5):
            single = len(generate_scene(seed, SceneConfig(area=20.48, density=12.0)))
            double = len(generate_scene(seed, SceneConfig(area=20.48, density=24.0)))
            assert 0.9 * 2 * single <= double <= 1.1 * 2 * single, (seed, single, double)

    def test_tiny_scene(self):
        params = SceneConfig(area=2.56, density=48.0, classes=("ground", "building", "vegetation"), min_points_per_class=10)
        histogram = generate_scene(0, params).label_histogram()
        assert all(histogram[LABEL[name]] >= 10 for name in ("ground", "building", "vegetation"))

    def test_area_too_small(self):
        with pytest.raises(SceneGenerationError):
            generate_scene(0, SceneConfig(area=1.0, density=100.0))

    def test_density_too_low_for_classes(self):
        with pytest.raises(SceneGenerationError):
            generate_scene(0, SceneConfig(area=3.0, density=1.0, min_points_per_class=20))


class TestAugment:
    def test_identity(self, rng):
        cloud = random_cloud(rng, 50)
        out, params = augment(cloud, 7, angle=0.0, flip=False, scale=1.0)
        assert out.same_as(cloud)
        assert params.scale == 1.0

    def test_similarity_transform(self, rng):
        cloud = random_cloud(rng, 200, extent=5.0)
        out, params = augment(cloud, 11)
        i, j = rng.integers(0, 200, size=(2, 100))
        before = np.linalg.norm(cloud.positions[i] - cloud.positions[j], axis=1)
        after = np.linalg.norm(out.positions[i] - out.positions[j], axis=1)
        np.testing.assert_allclose(after, params.scale * before, rtol=1e-12, atol=1e-12)

    def test_flip_is_involution(self, rng):
        cloud = random_cloud(rng, 40)
        once, _ = augment(cloud, 0, angle=0.0, flip=True, scale=1.0)
        twice, _ = augment(once, 0, angle=0.0, flip=True, scale=1.0)
        np.testing.assert_allclose(twice.positions, cloud.positions, atol=1e-12)
        assert not np.allclose(once.positions[:, 1], cloud.positions[:, 1])

    def test_labels_and_colors_kept(self, rng):
        cloud = random_cloud(rng, 30)
        out, _ = augment(cloud, 5)
        np.testing.assert_array_equal(out.labels, cloud.labels)
        np.testing.assert_array_equal(out.colors, cloud.colors)

    def test_scale_about_xy_center(self, rng):
        cloud = random_cloud(rng, 30)
        out, _ = augment(cloud, 0, angle=0.0, flip=False, scale=2.0)
        center = (cloud.positions[:, :2].min(axis=0) + cloud.positions[:, :2].max(axis=0)) / 2
        new_center = (out.positions[:, :2].min(axis=0) + out.positions[:, :2].max(axis=0)) / 2
        np.testing.assert_allclose(new_center, center, atol=1e-12)
        np.testing.assert_allclose(out.positions[:, 2], 2.0 * cloud.positions[:, 2])

    def test_drawn_parameters(self):
        for seed in range(20):
            params = draw_augment_params(seed)
            assert 0.0 <= params.angle < 2 * math.pi
            assert 0.9 <= params.scale <= 1.1
        assert draw_augment_params(4) == draw_augment_params(4)
