"""Generator, sampling, augmentation, and ingestion contracts."""
import numpy as np
import pytest

from mtvssl.errors import DataError
from mtvssl.video_data import (
    AugmentConfig,
    SceneConfig,
    augment,
    augment_with_record,
    apply_geometric,
    generate_corpus,
    generate_synthetic_video,
    load_frame_directory,
    make_training_sample,
    middle_frame,
    resample_class_map,
    sample_clip,
    write_frame_directory,
)

SCENE = SceneConfig()


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


def test_generator_places_all_classes_in_frame_zero():
    video = generate_synthetic_video(SCENE, action=0, seed=7)
    assert sorted(np.unique(video.parsing_gt[0])) == [0, 1, 2, 3]


def test_generator_is_deterministic():
    a = generate_synthetic_video(SCENE, 0, 7)
    b = generate_synthetic_video(SCENE, 0, 7)
    assert np.array_equal(a.frames, b.frames)
    assert np.array_equal(a.parsing_gt, b.parsing_gt)


def test_actions_share_frame_zero_but_diverge_later():
    # pixel-diff oracle: render both actions and compare frames directly
    a = generate_synthetic_video(SCENE, 0, 7)
    b = generate_synthetic_video(SCENE, 1, 7)
    assert np.array_equal(a.frames[0], b.frames[0])
    diffs = [
        int(np.any(a.frames[k] != b.frames[k])) for k in range(1, SCENE.frame_count)
    ]
    assert sum(diffs) > 0


@pytest.mark.parametrize("action", range(8))
def test_every_action_pattern_renders(action):
    video = generate_synthetic_video(SCENE, action, seed=3)
    assert video.frames.shape == (SCENE.frame_count, 32, 32, 3)
    assert video.frames.min() >= 0.0 and video.frames.max() <= 1.0
    # background is always present
    assert all((video.parsing_gt[f] == 0).any() for f in range(SCENE.frame_count))
    assert video.parsing_gt.max() < SCENE.num_part_classes


def test_generator_rejects_bad_action_and_tiny_resolution():
    with pytest.raises(DataError):
        generate_synthetic_video(SCENE, action=8, seed=0)
    tiny = SceneConfig(height=10, width=10)
    with pytest.raises(DataError):
        generate_synthetic_video(tiny, action=0, seed=0)


def test_generate_corpus_unique_ids_and_labels():
    videos = generate_corpus(SCENE, videos_per_action=2, seed=0, split="train")
    assert len(videos) == 16
    assert len({v.video_id for v in videos}) == 16
    assert sorted({v.action_label for v in videos}) == list(range(8))


# ---------------------------------------------------------------------------
# Clip sampling
# ---------------------------------------------------------------------------


def _video(frames=16):
    scene = SceneConfig(frame_count=frames)
    return generate_synthetic_video(scene, 0, 1)


def test_sample_clip_stride_arithmetic():
    video = _video(16)
    clip = sample_clip(video, speed=2, length=4, start=3)
    assert clip.frame_indices == (3, 5, 7, 9)
    assert clip.speed == 2
    clip = sample_clip(video, speed=1, length=4, start=0)
    assert clip.frame_indices == (0, 1, 2, 3)


def test_sample_clip_boundary_enumeration():
    # boundary oracle: every start is valid iff the last index stays in range
    video = _video(16)
    for start in range(20):
        last = start + 3 * 4
        if last < 16:
            clip = sample_clip(video, speed=4, length=4, start=start)
            assert clip.frame_indices[-1] == last
        else:
            with pytest.raises(DataError):
                sample_clip(video, speed=4, length=4, start=start)


def test_sample_clip_frames_match_source():
    video = _video(16)
    clip = sample_clip(video, speed=3, length=3, start=2)
    for pos, idx in enumerate(clip.frame_indices):
        assert np.array_equal(clip.frames[pos], video.frames[idx])


def test_clip_indices_form_arithmetic_progression():
    video = _video(32)
    rng = np.random.default_rng(0)
    for _ in range(50):
        speed = int(rng.integers(1, 5))
        length = int(rng.integers(1, 6))
        max_start = video.frame_count - (length - 1) * speed
        start = int(rng.integers(max_start))
        clip = sample_clip(video, speed, length, start)
        steps = np.diff(clip.frame_indices)
        assert (steps == speed).all() if len(steps) else True


@pytest.mark.parametrize("length,expected", [(16, 8), (1, 0), (5, 2)])
def test_middle_frame_position(length, expected):
    video = _video(32)
    clip = sample_clip(video, 1, length, 0)
    frame = middle_frame(clip)
    assert np.array_equal(frame.pixels, clip.frames[expected])


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def test_identity_augmentation_is_exact():
    video = _video(16)
    clip = sample_clip(video, 1, 4, 0)
    cfg = AugmentConfig.identity(32, 32)
    out = augment(clip, cfg, seed=0)
    assert np.array_equal(out.frames, clip.frames)
    assert out.frame_indices == clip.frame_indices


def test_identity_augmentation_center_crops():
    video = _video(16)
    clip = sample_clip(video, 1, 4, 0)
    out = augment(clip, AugmentConfig.identity(24, 24), seed=0)
    assert np.array_equal(out.frames, clip.frames[:, 4:28, 4:28, :])


def test_augment_is_seed_deterministic():
    video = _video(16)
    clip = sample_clip(video, 1, 4, 0)
    cfg = AugmentConfig()
    a = augment(clip, cfg, seed=123)
    b = augment(clip, cfg, seed=123)
    assert np.array_equal(a.frames, b.frames)


def test_different_seeds_give_different_outputs():
    # collision oracle: over 100 seed pairs no two outputs should match
    video = _video(16)
    clip = sample_clip(video, 1, 4, 0)
    cfg = AugmentConfig()
    collisions = 0
    for k in range(100):
        a = augment(clip, cfg, seed=2 * k)
        b = augment(clip, cfg, seed=2 * k + 1)
        collisions += int(np.array_equal(a.frames, b.frames))
    assert collisions == 0


def test_augment_preserves_shape_and_range():
    video = _video(16)
    clip = sample_clip(video, 2, 4, 1)
    cfg = AugmentConfig(brightness=(0.3, 1.9), contrast=(0.3, 1.9), saturation=(0.0, 2.0))
    for seed in range(20):
        out = augment(clip, cfg, seed=seed)
        assert out.frames.shape == (4, 32, 32, 3)
        assert out.frames.min() >= 0.0 and out.frames.max() <= 1.0
        assert out.speed == clip.speed


def test_same_geometry_for_all_frames_of_a_clip():
    video = _video(16)
    clip = sample_clip(video, 1, 4, 0)
    jitter_free = AugmentConfig(
        brightness=(1.0, 1.0), contrast=(1.0, 1.0), saturation=(1.0, 1.0)
    )
    out, geom = augment_with_record(clip, jitter_free, seed=9)
    manual = apply_geometric(clip.frames, geom)
    assert np.array_equal(out.frames, manual)


def test_degenerate_crop_rejected():
    video = _video(16)
    clip = sample_clip(video, 1, 4, 0)
    with pytest.raises(DataError):
        augment(clip, AugmentConfig(crop_scale=(0.0, 0.0)), seed=0)
    with pytest.raises(DataError):
        augment(clip, AugmentConfig(crop_scale=None, out_height=64, out_width=64), seed=0)


def test_resample_class_map_identity_and_flip():
    class_map = np.arange(16, dtype=np.uint8).reshape(4, 4)
    out = resample_class_map(class_map, None, (4, 4))
    assert np.array_equal(out, class_map)
    from mtvssl.video_data import GeometricAugment

    geom = GeometricAugment(0, 0, 4, 4, 4, 4, 4, 4, flip=True)
    flipped = resample_class_map(class_map, geom, (4, 4))
    assert np.array_equal(flipped, class_map[:, ::-1])


# ---------------------------------------------------------------------------
# Training samples
# ---------------------------------------------------------------------------


def test_training_sample_speed_contract():
    video = generate_synthetic_video(SCENE, 2, 5)
    sample = make_training_sample(video, (1, 2), 8, AugmentConfig(), seed=0)
    assert sample.speed_positive.speed == sample.anchor.speed
    assert sample.speed_negative.speed != sample.anchor.speed
    ids = {
        sample.anchor.source_id,
        sample.speed_positive.source_id,
        sample.speed_negative.source_id,
        sample.appearance_positive.source_id,
    }
    assert ids == {video.video_id}


def test_training_sample_exhaustive_speed_check():
    # enumeration oracle over 1000 seeded samples
    video = generate_synthetic_video(SCENE, 0, 11)
    cfg = AugmentConfig()
    for seed in range(1000):
        sample = make_training_sample(video, (1, 2, 4), 8, cfg, seed=seed)
        assert sample.speed_negative.speed != sample.anchor.speed
        assert sample.speed_positive.frame_indices[0] != sample.anchor.frame_indices[0]


def test_training_sample_single_alternative_speed():
    video = generate_synthetic_video(SCENE, 0, 3)
    for seed in range(50):
        sample = make_training_sample(video, (1, 2), 8, AugmentConfig(), seed=seed)
        if sample.anchor.speed == 1:
            assert sample.speed_negative.speed == 2
        else:
            assert sample.speed_negative.speed == 1


def test_training_sample_teacher_alignment():
    # the teacher frame must be the anchor's middle source frame with only
    # the anchor's geometric transform applied
    video = generate_synthetic_video(SCENE, 1, 9)
    sample = make_training_sample(video, (1, 2), 6, AugmentConfig(), seed=4)
    ctx = sample.teacher_context
    assert ctx.video_id == video.video_id
    assert ctx.frame_index == sample.anchor.frame_indices[3]
    expected = apply_geometric(video.frames[ctx.frame_index][None], ctx.geometry)[0]
    assert np.array_equal(sample.teacher_frame.pixels, expected)
    assert np.array_equal(ctx.parsing_map, video.parsing_gt[ctx.frame_index])


def test_training_sample_video_too_short():
    short = SceneConfig(frame_count=10)
    video = generate_synthetic_video(short, 0, 0)
    with pytest.raises(DataError):
        make_training_sample(video, (1, 4), 8, AugmentConfig(), seed=0)


# ---------------------------------------------------------------------------
# Frame-directory round trip
# ---------------------------------------------------------------------------


def test_frame_directory_round_trip(tmp_path):
    scene = SceneConfig(frame_count=6)
    videos = [generate_synthetic_video(scene, a, 1) for a in (0, 1)]
    manifest = write_frame_directory(videos, tmp_path)
    loaded = load_frame_directory(tmp_path, manifest.name)
    assert [v.video_id for v in loaded] == [v.video_id for v in videos]
    for orig, back in zip(videos, loaded):
        assert back.action_label == orig.action_label
        assert back.frames.shape == orig.frames.shape
        # 8-bit quantization bounds the reconstruction error
        assert np.abs(back.frames - orig.frames).max() <= 0.5 / 255.0 + 1e-6
        assert np.array_equal(back.parsing_gt, orig.parsing_gt)


def test_manifest_errors_carry_video_id(tmp_path):
    (tmp_path / "manifest.tsv").write_text("vid_a\t0\tnope/frame_*.png\n")
    with pytest.raises(DataError, match="vid_a"):
        load_frame_directory(tmp_path, "manifest.tsv")


def test_malformed_manifest_line(tmp_path):
    (tmp_path / "manifest.tsv").write_text("only_two\tfields\n")
    with pytest.raises(DataError, match="line 1"):
        load_frame_directory(tmp_path, "manifest.tsv")


def test_non_integer_label(tmp_path):
    (tmp_path / "manifest.tsv").write_text("vid\tnot_a_number\tvid/*.png\n")
    with pytest.raises(DataError, match="vid"):
        load_frame_directory(tmp_path, "manifest.tsv")


def test_inconsistent_resolution_reported(tmp_path):
    from PIL import Image

    vdir = tmp_path / "vid"
    vdir.mkdir()
    Image.new("RGB", (8, 8)).save(vdir / "frame_0.png")
    Image.new("RGB", (9, 9)).save(vdir / "frame_1.png")
    (tmp_path / "manifest.tsv").write_text("vid\t0\tvid/frame_*.png\n")
    with pytest.raises(DataError, match="resolution"):
        load_frame_directory(tmp_path, "manifest.tsv")


def test_frames_sorted_by_numeric_index(tmp_path):
    from PIL import Image

    vdir = tmp_path / "vid"
    vdir.mkdir()
    # write out of lexicographic order: frame_10 < frame_9 lexicographically
    for idx, shade in ((9, 90), (10, 100), (2, 20)):
        Image.new("RGB", (4, 4), (shade, shade, shade)).save(vdir / f"frame_{idx}.png")
    (tmp_path / "manifest.tsv").write_text("vid\t0\tvid/frame_*.png\n")
    video = load_frame_directory(tmp_path, "manifest.tsv")[0]
    shades = [int(round(video.frames[f, 0, 0, 0] * 255)) for f in range(3)]
    assert shades == [20, 90, 100]
