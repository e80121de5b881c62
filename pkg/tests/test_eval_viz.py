"""Probing, top-k accuracy, CAM, overlays, and reports."""
import json
import math

import numpy as np
import pytest
import torch

from mtvssl.errors import ConfigError, ModelError
from mtvssl.eval_viz import (
    CamMap,
    ProbeResult,
    cam_from_feature_map,
    cam_heatmap,
    emit_report,
    eval_clip,
    extract_representation,
    finetune_probe,
    linear_probe,
    overlay_name,
    probe_videos,
    render_overlay,
    topk_accuracy,
    train_cam_probe,
    video_representations,
)
from mtvssl.model import ModelConfig, build_model
from mtvssl.video_data import SceneConfig, generate_corpus

SCENE = SceneConfig(frame_count=20, height=24, width=24)
MODEL = ModelConfig(
    encoder_channels=(4, 8),
    embed_dim=16,
    hidden_dim=16,
    proj_dim=8,
    seg_classes=4,
    seg_height=8,
    seg_width=8,
    decoder_grid=4,
    decoder_channels=8,
)


@pytest.fixture(scope="module")
def corpus():
    train = generate_corpus(SCENE, videos_per_action=3, seed=1, split="train")
    test = generate_corpus(SCENE, videos_per_action=1, seed=1, split="test")
    return train, test


# ---------------------------------------------------------------------------
# topk_accuracy
# ---------------------------------------------------------------------------


def test_topk_one_hot_scores():
    labels = np.array([0, 1, 2, 3])
    scores = np.eye(4)
    assert topk_accuracy(scores, labels, 1) == 1.0


def test_topk_fractional():
    scores = np.array([[1, 0], [1, 0], [1, 0], [0, 1]], dtype=float)
    labels = np.array([0, 1, 1, 0])
    assert topk_accuracy(scores, labels, 1) == 0.25


def test_topk_tie_break_prefers_smallest_class():
    scores = np.zeros((3, 4))
    labels = np.zeros(3, dtype=int)
    assert topk_accuracy(scores, labels, 1) == 1.0
    labels = np.full(3, 3)
    assert topk_accuracy(scores, labels, 1) == 0.0


def test_topk_monotone_in_k():
    rng = np.random.default_rng(0)
    scores = rng.normal(size=(50, 6))
    labels = rng.integers(6, size=50)
    accs = [topk_accuracy(scores, labels, k) for k in range(1, 7)]
    assert all(b >= a for a, b in zip(accs, accs[1:]))
    assert accs[-1] == 1.0


def test_topk_k_too_large():
    with pytest.raises(ValueError):
        topk_accuracy(np.zeros((2, 3)), np.zeros(2, dtype=int), 4)


# ---------------------------------------------------------------------------
# representations
# ---------------------------------------------------------------------------


def test_extract_representation_dimensions():
    x = torch.rand(2, 3, 4, 24, 24)
    full = build_model(MODEL, "full", seed=0)
    assert extract_representation(full, x).shape == (2, 32)
    no_kd = build_model(MODEL, "no_kd", seed=0)
    assert extract_representation(no_kd, x).shape == (2, 16)
    ti = build_model(MODEL, "task_independent", seed=0)
    rep = extract_representation(ti, x)
    assert rep.shape == (2, 32)
    assert torch.equal(rep[:, :16], rep[:, 16:])  # shared encoder -> equal halves


def test_extract_representation_deterministic():
    x = torch.rand(1, 3, 4, 24, 24)
    model = build_model(MODEL, "full", seed=0)
    assert torch.equal(extract_representation(model, x), extract_representation(model, x))


def test_eval_clip_is_centered_and_deterministic(corpus):
    train, _ = corpus
    clip_a = eval_clip(train[0], 4, (24, 24))
    clip_b = eval_clip(train[0], 4, (24, 24))
    assert clip_a.speed == 1
    assert clip_a.frame_indices == (8, 9, 10, 11)
    assert np.array_equal(clip_a.frames, clip_b.frames)


# ---------------------------------------------------------------------------
# linear probe
# ---------------------------------------------------------------------------


def test_probe_on_one_hot_representations_is_perfect():
    rng = np.random.default_rng(0)
    labels = rng.integers(4, size=80)
    feats = np.eye(4)[labels]
    result = linear_probe(feats, labels, feats[:20], labels[:20], num_classes=4)
    assert result.acc_at_1 == 1.0
    assert result.acc_at_5 == 1.0  # top-5 saturates with 4 classes


def test_probe_random_label_control_within_binomial_bounds():
    # binomial oracle: with random features/labels, acc@1 should sit near
    # 1/num_classes within 3 sigma at the test-set size
    rng = np.random.default_rng(42)
    num_classes, n_train, n_test = 4, 400, 400
    feats = rng.normal(size=(n_train + n_test, 16))
    labels = rng.integers(num_classes, size=n_train + n_test)
    result = linear_probe(
        feats[:n_train], labels[:n_train], feats[n_train:], labels[n_train:], num_classes
    )
    p = 1.0 / num_classes
    sigma = math.sqrt(p * (1 - p) / n_test)
    assert abs(result.acc_at_1 - p) <= 3 * sigma


def test_probe_acc5_is_one_when_classes_at_most_five():
    rng = np.random.default_rng(1)
    labels = rng.integers(3, size=60)
    feats = rng.normal(size=(60, 8))
    result = linear_probe(feats, labels, feats, labels, num_classes=3)
    assert result.acc_at_5 == 1.0


def test_probe_missing_class_rejected():
    feats = np.random.default_rng(0).normal(size=(10, 4))
    labels = np.zeros(10, dtype=int)
    with pytest.raises(ConfigError, match="missing"):
        linear_probe(feats, labels, feats, labels, num_classes=2)


def test_probe_determinism_given_seed():
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(120, 8))
    labels = rng.integers(3, size=120)
    a = linear_probe(feats, labels, feats, labels, 3, seed=7)
    b = linear_probe(feats, labels, feats, labels, 3, seed=7)
    assert a.acc_at_1 == b.acc_at_1 and a.acc_at_5 == b.acc_at_5


def test_probe_videos_end_to_end(corpus):
    train, test = corpus
    model = build_model(MODEL, "full", seed=0)
    result = probe_videos(model, train, test, clip_len=4, out_size=(24, 24), max_iter=50)
    result.validate()
    assert result.num_classes == 8
    assert set(result.per_class_accuracy) == set(range(8))


def test_probe_videos_rejects_split_overlap(corpus):
    train, _ = corpus
    model = build_model(MODEL, "full", seed=0)
    with pytest.raises(ConfigError, match="overlap"):
        probe_videos(model, train, train[:2], clip_len=4, out_size=(24, 24))


def test_finetune_probe_runs(corpus):
    train, test = corpus
    model = build_model(MODEL, "full", seed=0)
    result = finetune_probe(model, train, test, 4, (24, 24), epochs=2, lr=1e-3)
    result.validate()


def test_probe_result_invariant():
    with pytest.raises(ConfigError):
        ProbeResult("full", 0.9, 0.5, {}, 0, 4).validate()


# ---------------------------------------------------------------------------
# CAM
# ---------------------------------------------------------------------------


def test_cam_uniform_feature_map_gives_uniform_heat():
    fmap = np.ones((8, 2, 4, 4))
    weights = np.ones(8)
    heat = cam_from_feature_map(fmap, weights, (24, 24))
    assert heat.shape == (24, 24)
    assert np.allclose(heat, 1.0)


def test_cam_scale_invariance():
    rng = np.random.default_rng(0)
    fmap = rng.normal(size=(8, 2, 4, 4))
    weights = rng.normal(size=8)
    base = cam_from_feature_map(fmap, weights, (24, 24))
    assert np.array_equal(base, cam_from_feature_map(fmap * 8.0, weights, (24, 24)))
    assert np.allclose(base, cam_from_feature_map(fmap * 10.0, weights, (24, 24)), atol=1e-12)


def test_cam_range_and_max_normalization():
    rng = np.random.default_rng(5)
    for _ in range(10):
        fmap = rng.normal(size=(8, 2, 4, 4))
        weights = rng.normal(size=8)
        heat = cam_from_feature_map(fmap, weights, (24, 24))
        assert heat.min() >= 0.0 and heat.max() <= 1.0
        if (heat > 0).any():
            assert heat.max() == pytest.approx(1.0, abs=1e-12)


def test_cam_heatmap_end_to_end(corpus):
    train, test = corpus
    model = build_model(MODEL, "full", seed=0)
    weights = train_cam_probe(model, train, 4, (24, 24), max_iter=50)
    assert weights.shape == (8, MODEL.encoder_channels[-1])
    clip = eval_clip(test[0], 4, (24, 24))
    cam = cam_heatmap(model, weights, clip, test[0].action_label)
    assert cam.heat.shape == (24, 24)
    assert cam.video_id == test[0].video_id
    with pytest.raises(ModelError):
        cam_heatmap(model, weights, clip, 99)


def test_cam_weight_dimension_mismatch():
    with pytest.raises(ModelError):
        cam_from_feature_map(np.ones((8, 1, 2, 2)), np.ones(5), (8, 8))


# ---------------------------------------------------------------------------
# overlays and reports
# ---------------------------------------------------------------------------


def test_render_overlay_writes_png(tmp_path, corpus):
    _, test = corpus
    clip = eval_clip(test[0], 4, (24, 24))
    cam = CamMap(heat=np.linspace(0, 1, 24 * 24).reshape(24, 24), class_id=2,
                 video_id=test[0].video_id, frame_index=9)
    path = render_overlay(clip.frames[2], cam, tmp_path / overlay_name(cam))
    from PIL import Image

    with Image.open(path) as img:
        assert img.size == (24, 24)
        assert img.mode == "RGB"
    assert path.name == f"{test[0].video_id}_f9_c2.png"


def test_render_overlay_rejects_size_mismatch(tmp_path):
    cam = CamMap(heat=np.zeros((8, 8)), class_id=0, video_id="v", frame_index=0)
    with pytest.raises(ModelError):
        render_overlay(np.zeros((9, 9, 3)), cam, tmp_path / "x.png")


def test_emit_report_round_trip(tmp_path):
    results = [
        ProbeResult("full", 0.9, 1.0, {0: 1.0}, seed, 4) for seed in (0, 1, 2)
    ] + [ProbeResult("no_kd", 0.7, 0.95, {0: 0.7}, seed, 4) for seed in (0, 1, 2)]
    report = emit_report(results, tmp_path, reference={"rows": {"full": {"acc1": 80.4}}})
    csv_lines = (tmp_path / "probe_report.csv").read_text().strip().splitlines()
    assert csv_lines[0] == "variant,seed,acc1,acc5"
    assert len(csv_lines) == 1 + 6  # header + variants x seeds
    loaded = json.loads((tmp_path / "probe_report.json").read_text())
    assert loaded == report
    assert loaded["reference_full_scale"]["rows"]["full"]["acc1"] == 80.4
    assert json.loads(json.dumps(loaded)) == loaded
