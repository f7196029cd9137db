import numpy as np
import pytest

from apnet.cloud import LabeledPointCloud
from apnet.fusion import (
    FusionError,
    FusionInputs,
    KernelLayout,
    build_fusion_inputs,
    extract_pixel_feature,
    extract_pixel_features,
    fuse_baseline,
    init_kernel_weights,
    kpconv_fuse,
    lift_nearest,
    make_kernel_layout,
    min_pairwise_distance,
    neighbor_lists,
    read_kernel_layout,
    write_kernel_layout,
)
from apnet.gradcheck import run_grad_check_suite
from apnet.layers import ParameterStore
from apnet.sampling import NeighborLists, SpatialIndex, grid_downsample
from apnet.tensor import Value


def _identity_layout(channels: int) -> KernelLayout:
    weights = Value(np.eye(channels)[None, :, :])
    return KernelLayout(np.zeros((1, 3)), sigma=0.3, radius=0.5, weights=weights)


def _random_layout(rng, cin, cout, k=4):
    store = ParameterStore(seed=int(rng.integers(0, 1000)))
    return init_kernel_weights(store, make_kernel_layout(k, 0.5, 0.3, seed=0, iterations=200), cin, cout)


def _inputs(query, support, features, r=0.5, cap=16):
    return FusionInputs(query, support, Value(features), neighbor_lists(query, support, r, cap))


class TestPixelFeatures:
    def test_pixel_center_gives_pixel_feature(self, rng):
        grid = rng.normal(size=(4, 5, 3))
        s, origin = 0.04, (1.0, 2.0)
        point = (1.0 + 2.5 * s, 2.0 + 1.5 * s)
        np.testing.assert_allclose(extract_pixel_feature(Value(grid), point, s, origin).data, grid[1, 2])

    def test_midpoint_of_neighbours(self):
        grid = np.zeros((2, 2, 1))
        grid[:, 1] = 1.0
        out = extract_pixel_feature(Value(grid), (1.0 * 0.1, 0.5 * 0.1), 0.1, (0.0, 0.0))
        assert out.data[0] == pytest.approx(0.5)

    def test_known_weights(self):
        grid = np.zeros((4, 4, 1))
        grid[2, 1], grid[2, 2], grid[3, 1], grid[3, 2] = 1.0, 10.0, 100.0, 1000.0
        s = 0.1
        # непрерывная координата (1.25, 2.5)
        out = extract_pixel_feature(Value(grid), ((1.25 + 0.5) * s, (2.5 + 0.5) * s), s, (0.0, 0.0))
        assert out.data[0] == pytest.approx(0.375 + 1.25 + 37.5 + 125.0)

    def test_outside_points_are_counted(self, rng):
        grid = Value(rng.normal(size=(4, 4, 2)))
        _, clamped = extract_pixel_features(grid, np.array([[-1.0, 0.0], [0.1, 0.1], [5.0, 5.0]]), 0.1, (0.0, 0.0))
        assert clamped == 2


class TestBuildFusionInputs:
    def test_singleton(self):
        cloud = LabeledPointCloud(np.array([[0.05, 0.05, 0.0]]), np.zeros((1, 3)), np.array([0]), 3)
        down = grid_downsample(cloud, 0.2)
        inputs = build_fusion_inputs(
            cloud.positions, down, Value(np.ones((2, 2, 3))), Value(np.ones((1, 3))), s=0.1, origin=(0.0, 0.0)
        )
        assert len(inputs.neighbors) == 1
        np.testing.assert_array_equal(inputs.neighbors.of(0), [0])
        assert inputs.support_features.shape == (1, 6)

    def test_far_query_has_empty_list(self, rng):
        cloud = LabeledPointCloud(rng.uniform(0, 1, size=(20, 3)), np.zeros((20, 3)), None, 3)
        down = grid_downsample(cloud, 0.2)
        query = np.vstack([cloud.positions, [[10.0, 10.0, 0.0]]])
        inputs = build_fusion_inputs(
            query, down, Value(np.zeros((8, 8, 2))), Value(np.zeros((len(down), 2))), s=0.16, origin=(0.0, 0.0)
        )
        assert inputs.neighbors.counts()[-1] == 0

    def test_channel_mismatch(self, rng):
        cloud = LabeledPointCloud(rng.uniform(0, 1, size=(5, 3)), np.zeros((5, 3)), None, 3)
        down = grid_downsample(cloud, 0.2)
        with pytest.raises(FusionError):
            build_fusion_inputs(
                cloud.positions, down, Value(np.zeros((4, 4, 3))), Value(np.zeros((len(down), 2))), s=0.1, origin=(0.0, 0.0)
            )
        with pytest.raises(FusionError):
            build_fusion_inputs(
                cloud.positions, down, Value(np.zeros((4, 4, 2))), Value(np.zeros((len(down) + 1, 2))), s=0.1, origin=(0.0, 0.0)
            )


class TestKPConvFuse:
    def test_identity_configuration(self, rng):
        feature = rng.normal(size=(1, 3))
        point = np.array([[0.2, 0.3, 0.1]])
        out = kpconv_fuse(_inputs(point, point, feature), _identity_layout(3))
        np.testing.assert_allclose(out.data, feature)

    def test_empty_neighbourhood_gives_zeros(self, rng):
        support = rng.uniform(0, 1, size=(10, 3))
        query = np.array([[20.0, 20.0, 0.0]])
        out = kpconv_fuse(_inputs(query, support, rng.normal(size=(10, 4))), _random_layout(rng, 4, 2))
        np.testing.assert_array_equal(out.data, np.zeros((1, 2)))

    def test_translation_is_exact(self, rng):
        # двоичные дроби: сдвиг на 10 не вносит округления
        support = rng.integers(0, 64, size=(40, 3)) / 64.0
        query = rng.integers(0, 64, size=(15, 3)) / 64.0
        features = rng.normal(size=(40, 4))
        layout = _random_layout(rng, 4, 3)
        shift = np.array([10.0, 10.0, 0.0])
        out = kpconv_fuse(_inputs(query, support, features), layout).data
        moved = kpconv_fuse(_inputs(query + shift, support + shift, features), layout).data
        np.testing.assert_array_equal(out, moved)

    def test_linear_in_features(self, rng):
        support = rng.uniform(0, 1, size=(30, 3))
        query = rng.uniform(0, 1, size=(12, 3))
        f1, f2 = rng.normal(size=(30, 4)), rng.normal(size=(30, 4))
        layout = _random_layout(rng, 4, 3)
        combined = kpconv_fuse(_inputs(query, support, 2.0 * f1 - 3.0 * f2), layout).data
        separate = 2.0 * kpconv_fuse(_inputs(query, support, f1), layout).data - 3.0 * kpconv_fuse(
            _inputs(query, support, f2), layout
        ).data
        np.testing.assert_allclose(combined, separate, atol=1e-10)

    def test_needs_weights(self, rng):
        point = np.zeros((1, 3))
        with pytest.raises(FusionError):
            kpconv_fuse(_inputs(point, point, np.ones((1, 2))), make_kernel_layout(1))

    def test_width_mismatch(self, rng):
        point = np.zeros((1, 3))
        with pytest.raises(FusionError):
            kpconv_fuse(_inputs(point, point, np.ones((1, 2))), _identity_layout(3))

    def test_inputs_validated(self):
        point = np.zeros((1, 3))
        with pytest.raises(FusionError):
            FusionInputs(point, point, Value(np.ones((2, 2))), NeighborLists.empty(1))
        with pytest.raises(FusionError):
            FusionInputs(point, point, Value(np.ones((1, 2))), NeighborLists.empty(2))

    def test_gradient(self):
        reports = run_grad_check_suite(trials=2, seed=5, only=["gaf"])
        assert reports and all(r.passed for r in reports), [(r.name, r.max_error) for r in reports]


class TestBaselines:
    def test_addition_identity(self, rng):
        fa = Value(rng.normal(size=(6, 4)))
        out = fuse_baseline("addition", fa, Value(np.zeros((6, 4))))
        np.testing.assert_array_equal(out.data, fa.data)

    def test_concatenation_width(self, rng):
        projection = ParameterStore().linear("fusion.project", 8, 4)
        out = fuse_baseline("concatenation", Value(rng.normal(size=(6, 4))), Value(rng.normal(size=(6, 4))), projection=projection)
        assert out.shape == (6, 4)

    def test_concatenation_needs_projection(self, rng):
        with pytest.raises(FusionError):
            fuse_baseline("concatenation", Value(np.zeros((2, 4))), Value(np.zeros((2, 4))))

    def test_unknown_strategy(self):
        with pytest.raises(FusionError):
            fuse_baseline("gaf", Value(np.zeros((2, 4))), Value(np.zeros((2, 4))))

    def test_shape_mismatch(self):
        with pytest.raises(FusionError):
            fuse_baseline("addition", Value(np.zeros((2, 4))), Value(np.zeros((3, 4))))

    def test_naive_equals_full_when_every_point_is_a_barycenter(self, rng):
        lattice = np.array([[i * 0.25 + 0.03, j * 0.25 + 0.03, 0.03] for i in range(5) for j in range(5)])
        positions = lattice[rng.permutation(len(lattice))]
        cloud = LabeledPointCloud(positions, rng.uniform(size=(25, 3)), None, 3)
        down = grid_downsample(cloud, 0.1)
        assert len(down) == len(cloud)

        channels, s, origin = 3, 0.16, (0.0, 0.0)
        feature_map = Value(rng.normal(size=(8, 8, channels)))
        point_feats = Value(rng.normal(size=(len(down), channels)))
        layout = _random_layout(rng, 2 * channels, channels)

        full = kpconv_fuse(
            build_fusion_inputs(cloud.positions, down, feature_map, point_feats, s=s, origin=origin, r_conv=0.5, cap=32),
            layout,
        ).data
        pixel_feats, _ = extract_pixel_features(feature_map, down.barycenters[:, :2], s, origin)
        naive = fuse_baseline(
            "naive-gaf",
            pixel_feats,
            point_feats,
            layout=layout,
            support_points=down.barycenters,
            neighbors=neighbor_lists(down.barycenters, down.barycenters, 0.5, 32),
        ).data
        np.testing.assert_allclose(full, naive[down.cell_of_original], rtol=0, atol=1e-12)

    def test_naive_needs_neighbours(self):
        with pytest.raises(FusionError):
            fuse_baseline("naive-gaf", Value(np.zeros((2, 4))), Value(np.zeros((2, 4))))


class TestKernelLayout:
    def test_single_point(self):
        layout = make_kernel_layout(1, 0.5, 0.24, seed=0)
        np.testing.assert_array_equal(layout.offsets, np.zeros((1, 3)))

    def test_offsets_within_radius(self):
        layout = make_kernel_layout(15, 0.5, 0.24, seed=3)
        assert layout.size == 15
        assert np.linalg.norm(layout.offsets, axis=1).max() <= 0.5
        np.testing.assert_array_equal(layout.offsets[0], np.zeros(3))

    def test_points_spread_out(self):
        layout = make_kernel_layout(15, 0.5, 0.24, seed=0)
        assert min_pairwise_distance(layout.offsets) > 0.3 * 0.5

    def test_deterministic(self):
        np.testing.assert_array_equal(make_kernel_layout(6, seed=2).offsets, make_kernel_layout(6, seed=2).offsets)

    def test_invalid(self):
        with pytest.raises(FusionError):
            make_kernel_layout(0)
        with pytest.raises(FusionError):
            KernelLayout(np.array([[1.0, 0.0, 0.0]]), sigma=0.2, radius=0.5)
        with pytest.raises(FusionError):
            KernelLayout(np.zeros((1, 3)), sigma=0.0, radius=0.5)

    def test_write_read(self, tmp_path):
        layout = make_kernel_layout(5, 0.5, 0.24, seed=1, iterations=100)
        loaded = read_kernel_layout(write_kernel_layout(layout, tmp_path / "kernel_layout.txt"))
        np.testing.assert_array_equal(loaded.offsets, layout.offsets)
        assert loaded.sigma == layout.sigma
        assert loaded.radius == layout.radius

    def test_read_broken_file(self, tmp_path):
        path = tmp_path / "broken.txt"
        path.write_text("kernel_points x\n")
        with pytest.raises(FusionError):
            read_kernel_layout(path)


class TestLiftNearest:
    def test_matches_linear_scan(self, rng):
        support = rng.uniform(0, 2, size=(200, 3))
        query = rng.uniform(0, 2, size=(1000, 3))
        values = rng.integers(0, 13, size=200)
        lifted = lift_nearest(values, support, query, 0.2)
        dist = np.sqrt(((query[:, None, :] - support[None, :, :]) ** 2).sum(axis=2))
        np.testing.assert_array_equal(lifted, values[dist.argmin(axis=1)])

    def test_index_reuse(self, rng):
        support = rng.uniform(0, 1, size=(30, 3))
        index = SpatialIndex(support, 0.2)
        np.testing.assert_array_equal(lift_nearest(np.arange(30), support, support, 0.2), index.nearest(support))
