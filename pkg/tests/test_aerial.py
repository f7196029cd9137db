from __future__ import annotations

import numpy as np
import pytest

from apnet.aerial import (
    ProjectionError,
    complete_image,
    continuous_pixel_coords,
    pixel_indices,
    pixel_of,
    project_labels,
    project_to_aerial,
)
from apnet.cloud import IGNORE_LABEL, LabeledPointCloud

from conftest import random_cloud


def _cloud(points, labels=None, class_count=13):
    points = np.asarray(points, dtype=np.float64)
    colors = np.full((len(points), 3), 0.5)
    return LabeledPointCloud(points, colors, labels, class_count)


def _grid_cloud(mask: np.ndarray, labels: np.ndarray) -> LabeledPointCloud:
    """Одна точка в центре каждого пикселя, где mask истинна; s = 1, начало (0, 0)."""
    v, u = np.nonzero(mask)
    points = np.column_stack([u + 0.5, v + 0.5, np.zeros(len(u))])
    return _cloud(points, labels[v, u])


class TestProjection:
    def test_origin_point_maps_to_first_pixel(self):
        raster = project_to_aerial(_cloud([[0.0, 0.0, 5.0]]), 0.04, (0.0, 0.0), (4, 4))
        assert raster.valid_mask[0, 0]
        assert raster.valid_count == 1
        assert raster.height_plane[0, 0] == 5.0

    def test_quantization_example(self):
        assert pixel_of((0.85, 1.23), 0.04) == (21, 30)

    def test_highest_point_wins(self):
        cloud = _cloud([[1.00, 1.00, 2.0], [1.01, 1.01, 7.0]], labels=[4, 9])
        raster = project_to_aerial(cloud, 0.04, (0.0, 0.0), (32, 32))
        assert pixel_of((1.00, 1.00), 0.04) == pixel_of((1.01, 1.01), 0.04) == (25, 25)
        assert raster.label_plane[25, 25] == 9
        assert raster.valid_count == 1

    def test_equal_height_later_point_wins(self):
        cloud = _cloud([[0.1, 0.1, 1.0], [0.2, 0.2, 1.0]], labels=[1, 2])
        raster = project_to_aerial(cloud, 1.0, (0.0, 0.0), (2, 2))
        assert raster.label_plane[0, 0] == 2

    def test_points_outside_are_dropped(self):
        cloud = _cloud([[-0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [2.5, 0.5, 0.0]])
        raster = project_to_aerial(cloud, 1.0, (0.0, 0.0), (2, 2))
        assert raster.valid_count == 1

    def test_null_pixels_carry_ignore_label(self):
        raster = project_to_aerial(_cloud([[0.5, 0.5, 0.0]], labels=[3]), 1.0, (0.0, 0.0), (2, 2))
        labels = raster.pixel_labels()
        assert labels[0, 0] == 3
        assert (labels[~raster.valid_mask] == IGNORE_LABEL).all()
        assert np.isnan(raster.height_plane[~raster.valid_mask]).all()

    def test_non_positive_pixel_size(self):
        with pytest.raises(ProjectionError):
            project_to_aerial(_cloud([[0, 0, 0]]), 0.0, (0.0, 0.0), (2, 2))

    def test_labels_required_for_label_projection(self):
        with pytest.raises(ProjectionError, match="labels required"):
            project_labels(_cloud([[0, 0, 0]]), 1.0, (0.0, 0.0), (2, 2))

    def test_empty_cloud_needs_origin(self):
        empty = _cloud(np.zeros((0, 3)))
        assert project_to_aerial(empty, 1.0, (0.0, 0.0), (3, 3)).valid_count == 0
        with pytest.raises(ProjectionError):
            project_to_aerial(empty, 1.0, None, (3, 3))

    def test_quantization_and_reprojection_consistent(self, rng):
        for _ in range(1000):
            s = float(rng.uniform(0.01, 1.0))
            origin = tuple(rng.uniform(-50, 50, size=2))
            xy = np.asarray(origin) + rng.uniform(0, 100 * s, size=2)
            u, v = pixel_of(tuple(xy), s, origin)
            raster = project_to_aerial(_cloud([[xy[0], xy[1], 0.0]]), s, origin, (100, 100))
            center = raster.world_center(u, v)
            assert pixel_of(center, s, origin) == (u, v)
            assert abs(center[0] - xy[0]) <= s / 2 + 1e-9 and abs(center[1] - xy[1]) <= s / 2 + 1e-9

    def test_vectorized_indices_match_scalar(self, rng):
        xy = rng.uniform(-3, 3, size=(200, 2))
        u, v = pixel_indices(xy, 0.07, (-1.0, 0.5))
        for i in range(len(xy)):
            assert (u[i], v[i]) == pixel_of(tuple(xy[i]), 0.07, (-1.0, 0.5))

    def test_pixel_center_has_integer_continuous_coords(self):
        raster = project_to_aerial(_cloud([[0.5, 0.5, 0.0]]), 0.25, (0.0, 0.0), (8, 8))
        cu, cv = continuous_pixel_coords(np.array([raster.world_center(3, 5)]), 0.25, (0.0, 0.0))
        np.testing.assert_allclose([cu[0], cv[0]], [3.0, 5.0], atol=1e-12)


class TestCompletion:
    def test_fully_valid_raster_unchanged(self, rng):
        mask = np.ones((4, 4), dtype=bool)
        raster = project_to_aerial(_grid_cloud(mask, rng.integers(0, 5, (4, 4))), 1.0, (0.0, 0.0), (4, 4))
        done = complete_image(raster, passes=5)
        np.testing.assert_array_equal(done.label_plane, raster.label_plane)
        np.testing.assert_array_equal(done.channels, raster.channels)

    def test_constant_neighbourhood_fills_center(self):
        mask = np.ones((3, 3), dtype=bool)
        mask[1, 1] = False
        raster = project_to_aerial(_grid_cloud(mask, np.full((3, 3), 3)), 1.0, (0.0, 0.0), (3, 3))
        done = complete_image(raster, passes=1)
        assert done.valid_mask[1, 1]
        assert done.label_plane[1, 1] == 3

    def test_modal_value_chosen(self):
        mask = np.ones((3, 3), dtype=bool)
        mask[1, 1] = False
        labels = np.array([[1, 1, 1], [2, 0, 2], [1, 2, 1]])
        raster = project_to_aerial(_grid_cloud(mask, labels), 1.0, (0.0, 0.0), (3, 3))
        assert complete_image(raster, 1).label_plane[1, 1] == 1

    def test_fewer_than_three_neighbours_stays_null(self):
        mask = np.zeros((3, 3), dtype=bool)
        mask[0, 0] = mask[0, 1] = True
        raster = project_to_aerial(_grid_cloud(mask, np.zeros((3, 3), dtype=int)), 1.0, (0.0, 0.0), (3, 3))
        assert not complete_image(raster, 1).valid_mask[1, 1]

    def test_zero_passes_is_identity(self, rng):
        cloud = random_cloud(rng, 10, extent=8.0)
        raster = project_to_aerial(cloud, 1.0, (0.0, 0.0), (8, 8))
        done = complete_image(raster, 0)
        np.testing.assert_array_equal(done.valid_mask, raster.valid_mask)

    def test_monotone_and_valid_pixels_immutable(self, rng):
        for _ in range(1000):
            cloud = random_cloud(rng, int(rng.integers(1, 40)), extent=8.0, class_count=4)
            raster = project_to_aerial(cloud, 1.0, (0.0, 0.0), (8, 8))
            previous = raster
            for passes in (1, 2, 3):
                done = complete_image(raster, passes)
                assert (done.valid_mask >= previous.valid_mask).all()
                valid = raster.valid_mask
                np.testing.assert_array_equal(done.label_plane[valid], raster.label_plane[valid])
                np.testing.assert_array_equal(done.channels[valid], raster.channels[valid])
                np.testing.assert_array_equal(done.height_plane[valid], raster.height_plane[valid])
                previous = done

    def test_synchronous_pass(self):
        # Полоса из трёх валидных столбцов слева: за один проход заполняется только соседний столбец.
        mask = np.zeros((5, 6), dtype=bool)
        mask[:, :3] = True
        raster = project_to_aerial(_grid_cloud(mask, np.ones((5, 6), dtype=int)), 1.0, (0.0, 0.0), (6, 5))
        once = complete_image(raster, 1)
        assert once.valid_mask[1:4, 3].all()
        assert not once.valid_mask[:, 4].any()

    def test_colors_completed_without_labels(self):
        mask = np.ones((3, 3), dtype=bool)
        mask[1, 1] = False
        cloud = _grid_cloud(mask, np.zeros((3, 3), dtype=int)).with_labels(None)
        raster = project_to_aerial(cloud, 1.0, (0.0, 0.0), (3, 3))
        done = complete_image(raster, 1)
        assert done.label_plane is None
        np.testing.assert_array_equal(done.channels[1, 1], [0.5, 0.5, 0.5])
