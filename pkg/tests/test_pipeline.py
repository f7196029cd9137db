import numpy as np
import pandas as pd
import pytest

from apnet.aerial import ProjectionError
from apnet.cloud import CLASS_COUNT, IGNORE_LABEL, read_cloud
from apnet.config import build_config
from apnet.metrics import ConfusionMatrix
from apnet.model import APNet, Predictions, lift_bilinear, point_predictions
from apnet.optim import CheckpointError
from apnet.pipeline import (
    AblationError,
    SamplePrefetcher,
    TrainingDivergedError,
    ablate,
    augment_seed,
    evaluate,
    load_model,
    prepare_sample,
    primary_head,
    raster_origin,
    stitch_patches,
    train,
    train_seeds,
    val_seeds,
)
from apnet.scene import generate_scene
from apnet.tensor import Value

from conftest import random_cloud, tiny_config


@pytest.fixture
def tiny_scene(tiny_cfg):
    return generate_scene(0, tiny_cfg.scene)


class TestPrepareSample:
    def test_gaf_sample(self, tiny_cfg, tiny_scene):
        sample = prepare_sample(tiny_scene, tiny_cfg, seed=3)
        proj = tiny_cfg.projection
        assert sample.raster.width == proj.width and sample.raster.height == proj.height
        assert sample.pixel_labels.shape == (proj.height, proj.width)
        assert len(sample.cloud) == len(tiny_scene)
        assert len(sample.neighbors) == len(sample.cloud)
        assert sample.down_neighbors is None
        assert (sample.neighbors.counts() > 0).all()
        assert sample.seed == 3

    def test_naive_gaf_sample(self, tiny_scene):
        cfg = tiny_config(strategy="naive-gaf")
        sample = prepare_sample(tiny_scene, cfg)
        assert sample.neighbors is None
        assert len(sample.down_neighbors) == len(sample.down)

    def test_baseline_sample_has_no_lists(self, tiny_scene):
        sample = prepare_sample(tiny_scene, tiny_config(strategy="addition"))
        assert sample.neighbors is None and sample.down_neighbors is None

    def test_window_is_centred(self, tiny_cfg, tiny_scene):
        x0, y0 = raster_origin(tiny_scene, tiny_cfg)
        xy = tiny_scene.positions[:, :2]
        size = tiny_cfg.projection.width * tiny_cfg.projection.pixel_size
        assert x0 + size / 2 == pytest.approx((xy[:, 0].min() + xy[:, 0].max()) / 2)
        assert y0 + size / 2 == pytest.approx((xy[:, 1].min() + xy[:, 1].max()) / 2)

    def test_points_outside_window_are_dropped(self, tiny_cfg, rng):
        cloud = random_cloud(rng, 300, extent=6.0)
        sample = prepare_sample(cloud, tiny_cfg)
        assert 0 < len(sample.cloud) < len(cloud)

    def test_empty_window(self, tiny_cfg, rng):
        with pytest.raises(ProjectionError):
            prepare_sample(random_cloud(rng, 10), tiny_cfg, origin=(100.0, 100.0))


class TestSeeds:
    def test_disjoint_splits(self):
        cfg = tiny_config(seed=2, train_scenes=3, val_scenes=2)
        assert train_seeds(cfg) == [20000, 20001, 20002]
        assert val_seeds(cfg) == [25000, 25001]
        assert val_seeds(cfg, seed=4) == [45000, 45001]

    def test_augment_seed(self):
        assert augment_seed(5, 1) == augment_seed(5, 1)
        assert augment_seed(5, 1) != augment_seed(5, 2)


class TestPrefetcher:
    @pytest.mark.parametrize("workers", [1, 3])
    def test_order_preserved(self, workers):
        out = list(SamplePrefetcher(range(10), lambda job: job * job, workers=workers, size=2))
        assert out == [(j, j * j) for j in range(10)]

    def test_error_reaches_consumer(self):
        def build(job):
            if job == 3:
                raise ProjectionError("boom")
            return job

        with pytest.raises(ProjectionError):
            list(SamplePrefetcher(range(6), build, workers=2))

    def test_early_stop(self):
        it = iter(SamplePrefetcher(range(100), lambda job: job, workers=2, size=1))
        assert next(it) == (0, 0)
        it.close()


class TestModel:
    @pytest.mark.parametrize("strategy", ["gaf", "naive-gaf", "addition", "concatenation", "a-only", "p-only"])
    def test_forward_heads(self, strategy, tiny_scene):
        cfg = tiny_config(strategy=strategy)
        sample = prepare_sample(tiny_scene, cfg)
        model = APNet(cfg)
        preds = model.forward(sample)
        expected = {"a-only": ("a",), "p-only": ("p",)}.get(strategy, ("a", "p", "fused"))
        assert preds.heads() == expected
        if preds.fused is not None:
            rows = len(sample.cloud) if strategy == "gaf" else len(sample.down)
            assert preds.fused.shape == (rows, CLASS_COUNT)
        loss, components = model.loss(preds, sample, _uniform_weights())
        assert np.isfinite(loss.item())
        assert components["total"] == pytest.approx(loss.item())

    def test_parameter_groups(self):
        names = set(APNet(tiny_config(strategy="gaf")).params)
        assert any(n.startswith("a.") for n in names)
        assert any(n.startswith("p.") for n in names)
        assert "fusion.kernel" in names
        assert not any(n.startswith("a.") for n in APNet(tiny_config(strategy="p-only")).params)

    def test_same_seed_same_weights(self):
        a, b = APNet(tiny_config(seed=4)), APNet(tiny_config(seed=4))
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


def _uniform_weights():
    from apnet.losses import inverse_frequency_weights

    return inverse_frequency_weights(np.ones(CLASS_COUNT))


class TestPointPredictions:
    def test_oracle_logits_give_perfect_iou(self, tiny_cfg, tiny_scene):
        sample = prepare_sample(tiny_scene, tiny_cfg)
        truth = sample.cloud.require_labels()
        preds = Predictions(fused=Value(10.0 * np.eye(CLASS_COUNT)[truth]), fused_on_original=True)
        predicted = point_predictions(preds, sample, tiny_cfg.projection.pixel_size)["fused"]
        iou = ConfusionMatrix.from_labels(truth, predicted, CLASS_COUNT).iou()
        defined = iou[~np.isnan(iou)]
        assert defined.size > 0 and np.all(defined == 1.0)

    def test_pixel_center_takes_pixel_argmax(self, rng):
        logit_map = rng.normal(size=(6, 5, 4))
        s, origin = 0.2, (1.0, -1.0)
        v, u = np.meshgrid(np.arange(6), np.arange(5), indexing="ij")
        xy = np.column_stack([origin[0] + (u.ravel() + 0.5) * s, origin[1] + (v.ravel() + 0.5) * s])
        lifted = lift_bilinear(logit_map, xy, s, origin).argmax(axis=1)
        np.testing.assert_array_equal(lifted, logit_map.reshape(-1, 4).argmax(axis=1))

    def test_p_head_copies_nearest_barycenter(self, rng):
        cfg = tiny_config(strategy="p-only")
        cloud = random_cloud(rng, 1000, extent=2.5, class_count=CLASS_COUNT)
        sample = prepare_sample(cloud, cfg)
        logits = rng.normal(size=(len(sample.down), CLASS_COUNT))
        predicted = point_predictions(Predictions(p=Value(logits)), sample, cfg.projection.pixel_size)["p"]

        bary = sample.down.barycenters
        dist = np.sqrt(((sample.cloud.positions[:, None, :] - bary[None, :, :]) ** 2).sum(axis=2))
        np.testing.assert_array_equal(predicted, logits.argmax(axis=1)[dist.argmin(axis=1)])

    def test_baseline_fused_is_lifted(self, tiny_scene):
        cfg = tiny_config(strategy="addition")
        sample = prepare_sample(tiny_scene, cfg)
        preds = APNet(cfg).forward(sample)
        labels = point_predictions(preds, sample, cfg.projection.pixel_size)
        assert all(len(v) == len(sample.cloud) for v in labels.values())


class TestStitch:
    def test_last_patch_wins(self):
        labels = stitch_patches(5, [(np.array([0, 1, 2]), np.array([1, 1, 1])), (np.array([2, 3]), np.array([4, 4]))])
        np.testing.assert_array_equal(labels, [1, 1, 4, 4, IGNORE_LABEL])

    def test_mismatched_patch(self):
        with pytest.raises(ValueError):
            stitch_patches(3, [(np.array([0, 1]), np.array([1]))])


class TestTrain:
    def test_smoke(self, tmp_path):
        result = train(tiny_config(), out_dir=tmp_path)
        assert result.checkpoint.exists()
        assert result.checkpoint.with_suffix(".manifest").exists()
        assert result.metrics_path.exists()
        assert result.config_path.exists()
        assert result.kernel_layout_path is not None and result.kernel_layout_path.exists()
        frame = pd.read_csv(result.metrics_path)
        assert list(frame["head"]) == ["a", "p", "fused"]
        assert np.isfinite(frame["loss_total"]).all()
        assert set(result.final) == {"a", "p", "fused"}

    def test_deterministic(self, tmp_path):
        first = train(tiny_config(), out_dir=tmp_path / "one")
        second = train(tiny_config(), out_dir=tmp_path / "two")
        assert first.metrics_path.read_bytes() == second.metrics_path.read_bytes()
        assert first.checkpoint.read_bytes() == second.checkpoint.read_bytes()

    def test_evaluate_reproduces_final_metrics(self, tmp_path):
        cfg = tiny_config(strategy="naive-gaf")
        result = train(cfg, out_dir=tmp_path)
        records = evaluate(result.checkpoint, cfg, predictions_dir=tmp_path / "pred")
        for head, record in result.final.items():
            assert records[head].miou == result.final[head].miou
            assert records[head].oa == result.final[head].oa
        written = read_cloud(tmp_path / "pred" / f"scene{val_seeds(cfg)[0]}_fused.xyzrgbl")
        assert written.has_labels

    def test_checkpoint_strategy_mismatch(self, tmp_path):
        result = train(tiny_config(strategy="a-only"), out_dir=tmp_path)
        with pytest.raises(CheckpointError):
            load_model(result.checkpoint, tiny_config(strategy="gaf"))

    def test_divergence_is_reported(self, tmp_path, monkeypatch):
        monkeypatch.setattr(APNet, "loss", lambda self, preds, sample, weights: (Value(np.nan), {"total": float("nan")}))
        with pytest.raises(TrainingDivergedError) as info:
            train(tiny_config(), out_dir=tmp_path)
        assert np.isnan(info.value.components["total"])

    @pytest.mark.slow
    def test_loss_decreases_over_thirty_epochs(self, tmp_path):
        result = train(tiny_config(epochs=30), out_dir=tmp_path)
        frame = pd.read_csv(result.metrics_path)
        losses = frame.groupby("epoch")["loss_total"].first()
        assert losses[30] < losses[1]


class TestAblate:
    def test_validation(self, tiny_cfg, tmp_path):
        with pytest.raises(AblationError):
            ablate(tiny_cfg, ["gaf", "gaf"], [0], out_dir=tmp_path)
        with pytest.raises(AblationError):
            ablate(tiny_cfg, [], [0], out_dir=tmp_path)
        with pytest.raises(AblationError):
            ablate(tiny_cfg, ["gaf"], [1, 1], out_dir=tmp_path)
        with pytest.raises(AblationError):
            ablate(tiny_cfg, ["late"], [0], out_dir=tmp_path)

    def test_single_run_matches_evaluate(self, tiny_cfg, tmp_path):
        table = ablate(tiny_cfg, ["p-only"], [0], out_dir=tmp_path)
        assert len(table) == 1
        row = table.iloc[0]
        assert row["strategy"] == "p-only" and row["head"] == "p" and row["runs"] == 1

        cfg = tiny_config(strategy="p-only", seed=0)
        records = evaluate(tmp_path / "p-only" / "seed0" / "checkpoint.bin", cfg)
        assert row["miou_mean"] == pytest.approx(records["p"].miou)
        assert row["oa_min"] == row["oa_max"] == pytest.approx(records["p"].oa)
        assert (tmp_path / "ablation.csv").exists()
        assert (tmp_path / "ablation_runs.csv").exists()

    def test_primary_heads(self):
        assert primary_head("a-only") == "a"
        assert primary_head("p-only") == "p"
        assert primary_head("gaf") == "fused"

    @pytest.mark.slow
    def test_full_ablation_orderings(self, tmp_path):
        # mIoU хранится долей, один пункт равен 0.01.
        cfg = build_config(profile="small")
        strategies = ["a-only", "p-only", "addition", "concatenation", "naive-gaf", "gaf"]
        table = ablate(cfg, strategies, [0, 1, 2], out_dir=tmp_path, xlsx=True)
        assert list(table["strategy"]) == strategies
        assert (tmp_path / "ablation.xlsx").exists()

        miou = dict(zip(table["strategy"], table["miou_mean"]))
        assert miou["gaf"] >= miou["naive-gaf"]
        assert miou["gaf"] >= miou["concatenation"]
        assert miou["gaf"] - miou["addition"] >= 0.005
        assert miou["gaf"] - miou["a-only"] >= 0.01
        assert miou["gaf"] - miou["p-only"] >= 0.01

        runs = pd.read_csv(tmp_path / "ablation_runs.csv").pivot(index="seed", columns="strategy", values="miou")
        for branch in ("a-only", "p-only"):
            assert (runs["gaf"] - runs[branch] >= -0.005).all(), branch
