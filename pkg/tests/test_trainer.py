"""Training-step mechanics, gradient isolation, determinism, and resume."""
import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from mtvssl.errors import ConfigError, TrainingDivergedError
from mtvssl.losses import LossConfig, appearance_loss, kd_loss, motion_loss
from mtvssl.model import ModelConfig, build_model
from mtvssl.teacher import TeacherSpec, build_teacher
from mtvssl.trainer import (
    TrainConfig,
    clips_to_tensor,
    init_state,
    load_train_state,
    pretrain,
    pretrain_step,
    run_ablation_suite,
    save_train_state,
)
from mtvssl.video_data import (
    AugmentConfig,
    SceneConfig,
    generate_corpus,
    make_training_sample,
)

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
LOSS = LossConfig(queue_capacity=16)
AUGMENT = AugmentConfig(out_height=24, out_width=24)
TRAIN = TrainConfig(
    epochs=2,
    batch_size=4,
    base_lr=0.05,
    lr_milestones=(1,),
    speeds=(1, 2),
    clip_len=4,
    snapshot_interval=2,
    seed=0,
)
TEACHER = TeacherSpec(kind="oracle", class_count=4, out_height=8, out_width=8)


@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(SCENE, videos_per_action=1, seed=0, split="train")


def _batch(corpus, size=4, seed=0):
    return [
        make_training_sample(corpus[i % len(corpus)], (1, 2), 4, AUGMENT, seed + i)
        for i in range(size)
    ]


# ---------------------------------------------------------------------------
# pretrain_step
# ---------------------------------------------------------------------------


def test_step_metrics_schema(corpus):
    state = init_state(MODEL, LOSS, TRAIN)
    teacher = build_teacher(TEACHER)
    metrics = pretrain_step(state, _batch(corpus), teacher, LOSS, TRAIN)
    assert set(metrics) == {"step", "l_kd", "l_m", "l_a", "total", "lr"}
    assert metrics["step"] == 1
    assert all(np.isfinite(v) for v in metrics.values())


def test_no_kd_variant_reports_zero_kd(corpus):
    cfg = replace(TRAIN, variant="no_kd")
    state = init_state(MODEL, LOSS, cfg)
    assert state.model.decoder is None
    metrics = pretrain_step(state, _batch(corpus), None, LOSS, cfg)
    assert metrics["l_kd"] == 0.0


def test_zero_weights_leave_parameters_unchanged(corpus):
    zero = LossConfig(weight_kd=0.0, weight_motion=0.0, weight_appearance=0.0)
    state = init_state(MODEL, zero, TRAIN)
    before = {k: v.clone() for k, v in state.model.named_parameters()}
    pretrain_step(state, _batch(corpus), build_teacher(TEACHER), zero, TRAIN)
    for k, v in state.model.named_parameters():
        assert torch.equal(v, before[k]), k


def test_queue_grows_by_batch_each_step(corpus):
    state = init_state(MODEL, LOSS, TRAIN)
    teacher = build_teacher(TEACHER)
    for step in range(1, 7):
        pretrain_step(state, _batch(corpus, seed=step * 100), teacher, LOSS, TRAIN)
        assert len(state.queue) == min(step * 4, LOSS.queue_capacity)


def test_momentum_params_stay_out_of_optimizer(corpus):
    state = init_state(MODEL, LOSS, TRAIN)
    optimizer_params = {id(p) for g in state.optimizer.param_groups for p in g["params"]}
    for p in state.momentum.parameters():
        assert id(p) not in optimizer_params
        assert not p.requires_grad


def test_teacher_required_for_kd_variants(corpus):
    state = init_state(MODEL, LOSS, TRAIN)
    with pytest.raises(ConfigError):
        pretrain_step(state, _batch(corpus), None, LOSS, TRAIN)


def test_non_finite_loss_aborts_with_batch_ids(corpus):
    state = init_state(MODEL, LOSS, TRAIN)
    with torch.no_grad():
        for p in state.model.parameters():
            p.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError) as err:
        pretrain_step(state, _batch(corpus), build_teacher(TEACHER), LOSS, TRAIN)
    assert len(err.value.batch_ids) == 4


# ---------------------------------------------------------------------------
# Gradient isolation (task-dependence)
# ---------------------------------------------------------------------------


def _branch_losses(model, momentum, queue, batch, teacher):
    feat = model.features(clips_to_tensor([s.anchor for s in batch]))
    z_c = model.contrast_from_features(feat)
    m_anchor = model.project_motion(z_c)
    m_pos = model.project_motion(
        model.encode_contrastive(clips_to_tensor([s.speed_positive for s in batch]))
    )
    m_neg = model.project_motion(
        model.encode_contrastive(clips_to_tensor([s.speed_negative for s in batch]))
    )
    l_m = motion_loss(m_anchor, m_pos, m_neg, 0.15)
    a_anchor = model.project_appearance(z_c)
    keys = momentum.embed(clips_to_tensor([s.appearance_positive for s in batch]))
    l_a = appearance_loss(a_anchor, keys, queue.snapshot(), 0.1)
    z_h = model.prior_from_features(feat)
    teacher_maps = torch.from_numpy(
        np.stack([teacher.parse(s.teacher_frame, s.teacher_context) for s in batch])
    ).float()
    l_kd = kd_loss(teacher_maps, model.decode_parsing(z_h))
    return l_kd, l_m, l_a


def _grad_norms(loss, groups):
    out = {}
    for name, params in groups.items():
        grads = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
        out[name] = sum(float(g.norm()) for g in grads if g is not None)
    return out


def test_gradient_isolation_full_variant(corpus):
    state = init_state(MODEL, LOSS, TRAIN)
    teacher = build_teacher(TEACHER)
    state.queue.push(torch.nn.functional.normalize(torch.randn(8, 8), dim=-1))
    groups = state.model.parameter_groups()
    for trial in range(3):
        batch = _batch(corpus, seed=trial * 31)
        l_kd, l_m, l_a = _branch_losses(state.model, state.momentum, state.queue, batch, teacher)
        kd_norms = _grad_norms(l_kd, groups)
        assert kd_norms["contrast_encoder"] == 0.0
        assert kd_norms["motion_head"] == 0.0
        assert kd_norms["appearance_head"] == 0.0
        assert kd_norms["low_level"] > 0.0
        assert kd_norms["prior_encoder"] > 0.0
        contrast_norms = _grad_norms(l_m + l_a, groups)
        assert contrast_norms["prior_encoder"] == 0.0
        assert contrast_norms["decoder"] == 0.0
        assert contrast_norms["low_level"] > 0.0


def test_shared_encoder_gets_both_gradients_in_ti_variant(corpus):
    cfg = replace(TRAIN, variant="task_independent")
    state = init_state(MODEL, LOSS, cfg)
    teacher = build_teacher(TEACHER)
    state.queue.push(torch.nn.functional.normalize(torch.randn(8, 8), dim=-1))
    groups = state.model.parameter_groups()
    assert "prior_encoder" not in groups  # shared instance listed once
    batch = _batch(corpus, seed=5)
    l_kd, l_m, l_a = _branch_losses(state.model, state.momentum, state.queue, batch, teacher)
    kd_norms = _grad_norms(l_kd, groups)
    contrast_norms = _grad_norms(l_m + l_a, groups)
    assert kd_norms["contrast_encoder"] > 0.0
    assert contrast_norms["contrast_encoder"] > 0.0


# ---------------------------------------------------------------------------
# pretrain runs
# ---------------------------------------------------------------------------


def test_pretrain_smoke_and_snapshotting(tmp_path, corpus):
    result = pretrain(corpus, MODEL, LOSS, TRAIN, AUGMENT, TEACHER, tmp_path,
                      resolved_config={"model": {}, "seed": 0})
    assert result.steps == 4  # 8 videos / batch 4 * 2 epochs
    assert result.checkpoint_path.is_file()
    snapshots = sorted(tmp_path.glob("ckpt_step*.ckpt"))
    assert snapshots, "interval snapshots expected"
    lines = [json.loads(l) for l in open(result.metrics_path)]
    assert [m["step"] for m in lines] == [1, 2, 3, 4]
    assert set(lines[0]) == {"step", "l_kd", "l_m", "l_a", "total", "lr", "wall_time_s"}
    assert (tmp_path / "resolved_config.json").is_file()


def test_pretrain_rerun_is_bit_identical(tmp_path, corpus):
    a = pretrain(corpus, MODEL, LOSS, TRAIN, AUGMENT, TEACHER, tmp_path / "a")
    b = pretrain(corpus, MODEL, LOSS, TRAIN, AUGMENT, TEACHER, tmp_path / "b")
    la = [json.loads(l) for l in open(a.metrics_path)]
    lb = [json.loads(l) for l in open(b.metrics_path)]
    for ma, mb in zip(la, lb):
        for key in ("step", "l_kd", "l_m", "l_a", "total", "lr"):
            assert ma[key] == mb[key]


def test_resume_continues_without_gaps(tmp_path, corpus):
    cfg = replace(TRAIN, epochs=4, snapshot_interval=5)
    full = pretrain(corpus, MODEL, LOSS, cfg, AUGMENT, TEACHER, tmp_path / "full")
    full_lines = [json.loads(l) for l in open(full.metrics_path)]
    resume_cfg = replace(cfg, resume_from=str(tmp_path / "full" / "ckpt_step000005.ckpt"))
    resumed = pretrain(corpus, MODEL, LOSS, resume_cfg, AUGMENT, TEACHER, tmp_path / "resumed")
    resumed_lines = [json.loads(l) for l in open(resumed.metrics_path)]
    assert [m["step"] for m in resumed_lines] == [6, 7, 8]
    for ref, got in zip(full_lines[5:], resumed_lines):
        assert got["total"] == ref["total"]
        assert got["l_kd"] == ref["l_kd"]


def test_save_load_train_state_round_trip(tmp_path, corpus):
    state = init_state(MODEL, LOSS, TRAIN)
    teacher = build_teacher(TEACHER)
    for step in range(3):
        pretrain_step(state, _batch(corpus, seed=step), teacher, LOSS, TRAIN)
    path = save_train_state(tmp_path / "s.ckpt", state, TRAIN, {"seed": 0})
    restored = load_train_state(path, MODEL, LOSS, TRAIN)
    assert restored.step == state.step
    for (ka, va), (kb, vb) in zip(
        state.model.state_dict().items(), restored.model.state_dict().items()
    ):
        assert ka == kb and torch.equal(va, vb)
    assert torch.equal(state.queue.snapshot(), restored.queue.snapshot())
    assert restored.rng.bit_generator.state == state.rng.bit_generator.state


def test_variant_mismatch_on_resume(tmp_path, corpus):
    state = init_state(MODEL, LOSS, TRAIN)
    path = save_train_state(tmp_path / "s.ckpt", state, TRAIN, None)
    from mtvssl.errors import CheckpointError

    with pytest.raises(CheckpointError, match="variant"):
        load_train_state(path, MODEL, LOSS, replace(TRAIN, variant="no_kd"))


def test_ablation_suite_report_shape(tmp_path, corpus):
    test_videos = generate_corpus(SCENE, videos_per_action=1, seed=0, split="test")
    cfg = replace(TRAIN, epochs=1)
    report = run_ablation_suite(
        corpus, test_videos, MODEL, LOSS, cfg, AUGMENT, TEACHER, tmp_path,
        resolved_config={"trainer": {"variant": "full"}}, probe_max_iter=50,
    )
    assert {r["variant"] for r in report["results"]} == {"full", "no_kd", "task_independent"}
    for row in report["results"]:
        assert 0.0 <= row["acc1"] <= row["acc5"] <= 1.0
    ref = report["reference_full_scale"]["rows"]
    assert ref["full"]["acc1"] == 80.4 and ref["no_kd"]["acc1"] == 77.6
    assert ref["task_independent"]["acc1"] == 79.3
    for variant in ("full", "no_kd", "task_independent"):
        assert (tmp_path / variant / "ckpt_final.ckpt").is_file()
    assert (tmp_path / "ablation_report.txt").is_file()
    assert (tmp_path / "probe_report.csv").is_file()


def test_ablation_variants_share_initial_stem(corpus):
    full = init_state(MODEL, LOSS, replace(TRAIN, variant="full"))
    no_kd = init_state(MODEL, LOSS, replace(TRAIN, variant="no_kd"))
    ti = init_state(MODEL, LOSS, replace(TRAIN, variant="task_independent"))
    for a, b, c in zip(
        full.model.low_level.parameters(),
        no_kd.model.low_level.parameters(),
        ti.model.low_level.parameters(),
    ):
        assert torch.equal(a, b) and torch.equal(a, c)


def test_train_config_validation():
    TrainConfig().validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1).validate()
    with pytest.raises(ConfigError):
        TrainConfig(variant="bogus").validate()
    with pytest.raises(ConfigError):
        TrainConfig(speeds=(2, 2)).validate()
    with pytest.raises(ConfigError):
        TrainConfig(base_lr=0.0).validate()
