import json
import math
import os
import tempfile

import pytest

import coopdet


@pytest.fixture(scope="module")
def tiny_config():
    return json.dumps(
        {
            "model": {
                "grid": {"x_min": -6.4, "x_max": 6.4, "y_min": -3.2, "y_max": 3.2, "cell": 0.8},
                "pillar_channels": 4,
                "backbone_widths": [4, 8],
                "backbone_strides": [2, 1],
                "feature_dim": 8,
                "window": {"sizes": [2, 4], "heads": [2, 1], "head_dims": [4, 8]},
                "groups": {"small_heads": 2, "small_dim": 4, "large_heads": 1, "large_dim": 8},
                "aspp_branch_channels": 4,
                "se_reduction": 2,
                "precision": "f64",
            },
            "train": {"epochs": 2, "batch_size": 2, "seed": 3},
            "scene": {
                "n_agents": 2,
                "counts": {"pedestrian": 1, "car": 2, "truck": 0},
                "region": {"x_min": -6.4, "x_max": 6.4, "y_min": -3.2, "y_max": 3.2},
                "sensor": {"base_rate": 80.0},
                "clutter_points": 10,
                "placement_retries": 2000,
            },
            "n_scenes": 4,
        }
    )


def test_rotated_iou_matches_known_values():
    a = coopdet.Box3D(0, 0, 0, 1, 1, 1, 0.0)
    b = coopdet.Box3D(0.5, 0, 0, 1, 1, 1, 0.0)
    assert coopdet.bev_iou_rotated(a, a) == pytest.approx(1.0)
    assert coopdet.bev_iou_rotated(a, b) == pytest.approx(1.0 / 3.0)
    assert coopdet.iou3d(a, b) == pytest.approx(1.0 / 3.0)


def test_softmax_rows_sum_to_one():
    out = coopdet.softmax([1.0, 2.0, 3.0])
    assert sum(out) == pytest.approx(1.0, abs=1e-12)
    assert out[2] == pytest.approx(0.66524, abs=1e-4)


def test_nms_keeps_the_higher_scored_box():
    a = coopdet.Box3D(0, 0, 0.8, 4, 2, 1.6, 0.0, "car", 0.9)
    b = coopdet.Box3D(0.5, 0, 0.8, 4, 2, 1.6, 0.0, "car", 0.7)
    kept = coopdet.nms([a, b], 0.15)
    assert len(kept) == 1
    assert kept[0].score == pytest.approx(0.9)


def test_dataset_roundtrip_and_determinism(tiny_config):
    with tempfile.TemporaryDirectory() as tmp:
        p1 = os.path.join(tmp, "a.ndjson")
        p2 = os.path.join(tmp, "b.ndjson")
        n1 = coopdet.generate_dataset(tiny_config, p1, seed=5)
        n2 = coopdet.generate_dataset(tiny_config, p2, seed=5)
        assert n1 == n2 == 4
        with open(p1, "rb") as fa, open(p2, "rb") as fb:
            assert fa.read() == fb.read()
        assert coopdet.dataset_size(p1) == 4
        gt = coopdet.dataset_ground_truth(p1, 0)
        assert len(gt) == 3
        assert {b.cls for b in gt} == {"pedestrian", "car"}


def test_model_detects_and_saves(tiny_config):
    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "data.ndjson")
        coopdet.generate_dataset(tiny_config, data, seed=11)
        model = coopdet.Model(tiny_config, seed=1)
        assert model.param_count() > 0
        dets = model.detect(data, 0)
        assert all(d.score >= 0.1 for d in dets)
        ckpt = os.path.join(tmp, "model.json")
        model.save(ckpt)
        again = coopdet.Model.load(ckpt)
        dets2 = again.detect(data, 0)
        assert len(dets) == len(dets2)
        for x, y in zip(dets, dets2):
            assert x.cx == y.cx and x.score == y.score


def test_train_reduces_loss_and_evaluates(tiny_config):
    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "data.ndjson")
        coopdet.generate_dataset(tiny_config, data, seed=21)
        ckpt = os.path.join(tmp, "ckpt.json")
        losses = coopdet.train(tiny_config, data, ckpt)
        assert len(losses) == 2
        assert losses[-1] < losses[0]
        assert all(math.isfinite(v) for v in losses)

        model = coopdet.Model.load(ckpt)
        dets = [model.detect(data, i) for i in range(coopdet.dataset_size(data))]
        gts = [coopdet.dataset_ground_truth(data, i) for i in range(coopdet.dataset_size(data))]
        report = coopdet.evaluate_report(dets, gts)
        assert set(report["classes"].keys()) == {"pedestrian", "car", "truck"}
        assert report["thresholds"] == [0.3, 0.5]
        assert set(report["ranges"].keys()) == {"0-30", "30-60", "60-100"}


def test_bench_csv_header():
    csv = coopdet.bench_attention([8], window=4, dim=4, reps=1)
    assert csv.splitlines()[0] == "size,mode,macs,median_ms"
    assert len(csv.splitlines()) == 3
