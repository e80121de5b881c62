"""Synthetic action videos, playback-speed clip sampling, and augmentation.

The synthetic generator renders an articulated stick-figure actor whose body
parts carry distinct colors mapped one-to-one onto parsing classes
``1..C-1`` (class 0 is background), so exact per-pixel parsing ground truth
comes for free. Actions are defined purely by motion pattern; appearance is
shared across actions so motion is the only class-discriminative signal.

Frame-directory datasets use a tab-separated manifest, one record per line::

    video_id<TAB>label<TAB>frame_glob[<TAB>parsing_glob]

Frames are 8-bit RGB images; parsing maps are single-channel 8-bit images
whose pixel value is the class index.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError
from .seeding import derive_rng, derive_seed

logger = logging.getLogger(__name__)

# Fixed part palette: class index 1..4 -> RGB in [0, 1]. Distinct by design so
# the color->class mapping stays bijective for the oracle teacher.
_PART_COLORS = np.array(
    [
        [0.78, 0.24, 0.24],  # 1: torso
        [0.93, 0.79, 0.62],  # 2: head
        [0.24, 0.42, 0.86],  # 3: arms
        [0.28, 0.67, 0.34],  # 4: legs
    ],
    dtype=np.float32,
)

MOTION_PATTERNS = (
    "slide_horizontal",
    "slide_vertical",
    "sway_horizontal",
    "sway_vertical",
    "swing_limbs",
    "pulse_scale",
    "orbit",
    "zigzag",
)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneConfig:
    """Parameters of the synthetic corpus generator."""

    num_actions: int = 8
    num_part_classes: int = 4  # includes background class 0
    frame_count: int = 40
    height: int = 32
    width: int = 32
    actor_scale: float = 0.42  # actor height as a fraction of min(H, W)
    motion_period: float = 16.0  # frames per motion cycle
    motion_amplitude: float = 0.15  # travel range as a fraction of min(H, W)
    background_range: tuple[float, float] = (0.08, 0.22)
    brightness_range: tuple[float, float] = (0.90, 1.10)

    def validate(self) -> None:
        if self.num_actions < 2:
            raise DataError("num_actions must be >= 2")
        if self.num_actions > len(MOTION_PATTERNS):
            raise DataError(
                f"num_actions={self.num_actions} exceeds the "
                f"{len(MOTION_PATTERNS)} available motion patterns"
            )
        if not 2 <= self.num_part_classes <= 1 + len(_PART_COLORS):
            raise DataError(
                "num_part_classes must be in [2, 5] (background plus 1..4 parts)"
            )
        if self.frame_count < 2:
            raise DataError("frame_count must be >= 2")
        _actor_metrics(self)  # raises DataError if the actor cannot be placed


@dataclass
class SourceVideo:
    """A full-length source video, optionally with per-frame parsing maps."""

    frames: np.ndarray  # (F, H, W, 3) float32 in [0, 1]
    parsing_gt: np.ndarray | None  # (F, H, W) uint8 class indices, or None
    action_label: int
    video_id: str

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def validate(self) -> None:
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise DataError(f"{self.video_id}: frames must be (F, H, W, 3)")
        if self.parsing_gt is not None and self.parsing_gt.shape[0] != self.frame_count:
            raise DataError(f"{self.video_id}: parsing_gt length != frame count")


@dataclass(frozen=True)
class VideoClip:
    """Fixed-length clip sampled from a source video at an integer stride."""

    frames: np.ndarray  # (T, H_c, W_c, 3) float32 in [0, 1]
    source_id: str
    frame_indices: tuple[int, ...]
    speed: int

    @property
    def clip_len(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class Frame:
    """One frame extracted from a clip."""

    pixels: np.ndarray  # (H, W, 3) float32
    clip_source: str


@dataclass(frozen=True)
class GeometricAugment:
    """Crop box + flip applied identically to every frame of one clip.

    The box is in source-frame pixels; the output is resampled to
    ``(out_h, out_w)``. Recording this lets a teacher map produced for the
    un-augmented frame be moved into the augmented crop's coordinates.
    """

    top: int
    left: int
    crop_h: int
    crop_w: int
    src_h: int
    src_w: int
    out_h: int
    out_w: int
    flip: bool


@dataclass(frozen=True)
class ColorJitter:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0


@dataclass(frozen=True)
class AugmentConfig:
    """Clip augmentation: random resized crop, horizontal flip, color jitter.

    ``crop_scale=None`` disables the random crop and takes a deterministic
    center crop of the output size instead (the evaluation transform).
    Zero-width jitter ranges and ``flip_prob=0`` make the whole transform an
    exact identity apart from that center crop.
    """

    out_height: int = 32
    out_width: int = 32
    crop_scale: tuple[float, float] | None = (0.6, 1.0)
    crop_aspect: tuple[float, float] = (0.75, 4.0 / 3.0)
    flip_prob: float = 0.5
    brightness: tuple[float, float] = (0.8, 1.2)
    contrast: tuple[float, float] = (0.8, 1.2)
    saturation: tuple[float, float] = (0.8, 1.2)

    @classmethod
    def identity(cls, height: int, width: int) -> "AugmentConfig":
        return cls(
            out_height=height,
            out_width=width,
            crop_scale=None,
            flip_prob=0.0,
            brightness=(1.0, 1.0),
            contrast=(1.0, 1.0),
            saturation=(1.0, 1.0),
        )

    def validate(self, src_h: int, src_w: int) -> None:
        if self.out_height < 1 or self.out_width < 1:
            raise DataError("augment output size must be positive")
        if self.crop_scale is None:
            if self.out_height > src_h or self.out_width > src_w:
                raise DataError(
                    f"center crop {self.out_height}x{self.out_width} exceeds "
                    f"source {src_h}x{src_w}"
                )
        else:
            lo, hi = self.crop_scale
            if not 0.0 < lo <= hi <= 1.0:
                raise DataError(f"degenerate crop scale range {self.crop_scale}")
            if min(src_h, src_w) * math.sqrt(lo) < 1.0:
                raise DataError("crop scale range yields sub-pixel crops")
        for name in ("brightness", "contrast", "saturation"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise DataError(f"invalid {name} jitter range ({lo}, {hi})")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise DataError("flip_prob must be in [0, 1]")


@dataclass(frozen=True)
class TeacherContext:
    """Everything a teacher may need to produce a map aligned with a clip."""

    video_id: str
    frame_index: int
    parsing_map: np.ndarray | None  # (H, W) class indices at source resolution
    geometry: GeometricAugment | None


@dataclass(frozen=True)
class TrainingSample:
    """One anchor clip with its motion/appearance counterparts.

    * ``speed_positive``: same source, same playback speed, different start.
    * ``speed_negative``: same source, different playback speed.
    * ``appearance_positive``: the anchor's frame window under an independent
      augmentation.
    * ``teacher_frame``: the anchor's middle frame with only the anchor's
      geometric transform applied (no color jitter), plus the context needed
      to bring a teacher map into the same coordinates.
    """

    anchor: VideoClip
    speed_positive: VideoClip
    speed_negative: VideoClip
    appearance_positive: VideoClip
    teacher_frame: Frame
    teacher_context: TeacherContext


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


def _actor_metrics(scene: SceneConfig) -> dict:
    """Pixel-space actor geometry; raises if the frame cannot hold the actor."""
    base = min(scene.height, scene.width)
    u = scene.actor_scale * base
    if u < 6.0:
        raise DataError(
            f"resolution too small to place actor: unit size {u:.1f}px < 6px "
            f"(min dimension {base})"
        )
    half_w = 0.45 * u  # arms extended
    half_h = 0.62 * u  # head top to leg tip
    amp = scene.motion_amplitude * base
    slack_x = scene.width / 2.0 - half_w - 1.0
    slack_y = scene.height / 2.0 - half_h - 1.0
    if slack_x < 0 or slack_y < 0:
        raise DataError(
            f"resolution too small to place actor: extent ({half_w:.1f}, "
            f"{half_h:.1f})px does not fit {scene.height}x{scene.width}"
        )
    return {"unit": u, "amp": amp, "slack_x": slack_x, "slack_y": slack_y}


def _bar_mask(yy, xx, y0, x0, dy, dx, length, half_th):
    ry = yy - y0
    rx = xx - x0
    along = ry * dy + rx * dx
    across = np.abs(rx * dy - ry * dx)
    return (along >= 0.0) & (along <= length) & (across <= half_th)


def _actor_class_map(
    scene: SceneConfig, cx: float, cy: float, scale: float, swing: float
) -> np.ndarray:
    """Render the actor's per-pixel class map at one pose (painter order)."""
    h, w = scene.height, scene.width
    u = scene.actor_scale * min(h, w) * scale
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy += 0.5
    xx += 0.5
    out = np.zeros((h, w), dtype=np.uint8)
    parts = scene.num_part_classes - 1

    torso_hw, torso_hh = 0.11 * u, 0.21 * u
    head_r = 0.15 * u
    arm_len, arm_th = 0.34 * u, max(0.05 * u, 0.6)
    leg_len, leg_th = 0.40 * u, max(0.06 * u, 0.6)

    if parts >= 4:  # legs
        for side in (-1.0, 1.0):
            hip_x = cx + side * 0.06 * u
            hip_y = cy + torso_hh * 0.9
            ang = side * 0.12
            mask = _bar_mask(yy, xx, hip_y, hip_x, math.cos(ang), math.sin(ang), leg_len, leg_th)
            out[mask] = 4
    if parts >= 3:  # arms, swinging antisymmetrically
        for side in (-1.0, 1.0):
            sh_x = cx + side * torso_hw
            sh_y = cy - torso_hh * 0.7
            ang = 0.5 + side * swing
            dy, dx = math.cos(ang), side * math.sin(ang)
            mask = _bar_mask(yy, xx, sh_y, sh_x, dy, dx, arm_len, arm_th)
            out[mask] = 3
    # torso
    mask = (np.abs(xx - cx) <= torso_hw) & (np.abs(yy - cy) <= torso_hh)
    out[mask] = 1
    if parts >= 2:  # head
        head_y = cy - torso_hh - 1.1 * head_r
        mask = (yy - head_y) ** 2 + (xx - cx) ** 2 <= head_r**2
        out[mask] = 2
    return out


def _triangle(t: np.ndarray, half_period: float, amp: float) -> np.ndarray:
    """Triangle wave: zero at t=0, linear slope, reflecting at +/-amp."""
    return (2.0 * amp / math.pi) * np.arcsin(np.sin(math.pi * t / (2.0 * half_period)))


def _motion_series(
    action: int, frame_count: int, period: float, amp: float, direction: float, aux: float
):
    """Per-frame (dx, dy, swing, scale); all patterns start at the rest pose."""
    t = np.arange(frame_count, dtype=np.float64)
    omega = 2.0 * math.pi / period
    dx = np.zeros(frame_count)
    dy = np.zeros(frame_count)
    swing = np.zeros(frame_count)
    scale = np.ones(frame_count)
    pattern = MOTION_PATTERNS[action]
    if pattern == "slide_horizontal":
        dx = direction * _triangle(t, period / 2.0, amp)
    elif pattern == "slide_vertical":
        dy = direction * _triangle(t, period / 2.0, amp)
    elif pattern == "sway_horizontal":
        dx = direction * amp * np.sin(omega * t)
    elif pattern == "sway_vertical":
        dy = direction * amp * np.sin(omega * t)
    elif pattern == "swing_limbs":
        swing = direction * 0.55 * np.sin(omega * t)
    elif pattern == "pulse_scale":
        scale = 1.0 + direction * 0.30 * np.sin(omega * t)
    elif pattern == "orbit":
        r = amp / 2.0
        dx = direction * r * np.sin(omega * t)
        dy = r * (1.0 - np.cos(omega * t))
    elif pattern == "zigzag":
        p1 = period / 2.0
        p2 = p1 * (0.45 + 0.2 * aux)
        dx = direction * _triangle(t, p1, 0.8 * amp)
        dy = _triangle(t, p2, 0.6 * amp)
    else:  # pragma: no cover - exhaustive by construction
        raise DataError(f"unknown motion pattern {pattern!r}")
    return dx, dy, swing, scale


def generate_synthetic_video(scene: SceneConfig, action: int, seed: int) -> SourceVideo:
    """Render one actor video with exact parsing ground truth.

    Deterministic given ``(scene, action, seed)``. All per-video randomness
    (base pose, shading, motion latents) is drawn before the action pattern
    is applied, so two actions rendered from the same seed share frame 0.
    """
    if not 0 <= action < scene.num_actions:
        raise DataError(f"action index {action} outside [0, {scene.num_actions})")
    metrics = _actor_metrics(scene)
    rng = derive_rng("synthetic-video", seed)

    bg = rng.uniform(*scene.background_range)
    brightness = rng.uniform(*scene.brightness_range)
    cx0 = scene.width / 2.0 + rng.uniform(-metrics["slack_x"], metrics["slack_x"])
    cy0 = scene.height / 2.0 + rng.uniform(-metrics["slack_y"], metrics["slack_y"])
    direction = 1.0 if rng.integers(2) == 1 else -1.0
    period = scene.motion_period * rng.uniform(0.85, 1.15)
    amp = metrics["amp"] * rng.uniform(0.75, 1.0)
    aux = rng.uniform(0.0, 1.0)

    dx, dy, swing, scale = _motion_series(
        action, scene.frame_count, period, amp, direction, aux
    )

    colors = np.empty((scene.num_part_classes, 3), dtype=np.float32)
    colors[0] = bg
    colors[1:] = np.clip(_PART_COLORS[: scene.num_part_classes - 1] * brightness, 0.0, 1.0)

    parsing = np.empty((scene.frame_count, scene.height, scene.width), dtype=np.uint8)
    for f in range(scene.frame_count):
        parsing[f] = _actor_class_map(scene, cx0 + dx[f], cy0 + dy[f], scale[f], swing[f])
    frames = colors[parsing]

    return SourceVideo(
        frames=frames,
        parsing_gt=parsing,
        action_label=action,
        video_id=f"synthetic-a{action}-s{seed}",
    )


def generate_corpus(
    scene: SceneConfig, videos_per_action: int, seed: int, split: str = "train"
) -> list[SourceVideo]:
    """Generate ``num_actions * videos_per_action`` videos with derived seeds."""
    videos = []
    for action in range(scene.num_actions):
        for i in range(videos_per_action):
            vid_seed = derive_seed(seed, split, action, i)
            videos.append(generate_synthetic_video(scene, action, vid_seed))
    return videos


# ---------------------------------------------------------------------------
# Clip sampling
# ---------------------------------------------------------------------------


def sample_clip(video: SourceVideo, speed: int, length: int, start: int) -> VideoClip:
    """Take ``length`` frames starting at ``start`` with stride ``speed``."""
    if speed < 1:
        raise DataError(f"speed must be >= 1, got {speed}")
    if length < 1:
        raise DataError(f"clip length must be >= 1, got {length}")
    last = start + (length - 1) * speed
    if start < 0 or last >= video.frame_count:
        raise DataError(
            f"{video.video_id}: sampling window [{start}, {last}] outside "
            f"[0, {video.frame_count})"
        )
    indices = tuple(range(start, last + 1, speed))
    return VideoClip(
        frames=video.frames[list(indices)].copy(),
        source_id=video.video_id,
        frame_indices=indices,
        speed=speed,
    )


def middle_frame(clip: VideoClip) -> Frame:
    """Frame at clip position floor(T/2)."""
    if clip.clip_len < 1:
        raise DataError("empty clip has no middle frame")
    return Frame(pixels=clip.frames[clip.clip_len // 2], clip_source=clip.source_id)


def middle_position(length: int) -> int:
    return length // 2


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def _resample_grid(geom: GeometricAugment) -> tuple[np.ndarray, np.ndarray]:
    """Source-coordinate sample points for each output pixel center."""
    ys = geom.top + (np.arange(geom.out_h, dtype=np.float64) + 0.5) * geom.crop_h / geom.out_h - 0.5
    xs = geom.left + (np.arange(geom.out_w, dtype=np.float64) + 0.5) * geom.crop_w / geom.out_w - 0.5
    if geom.flip:
        xs = xs[::-1].copy()
    return ys, xs


def apply_geometric(frames: np.ndarray, geom: GeometricAugment) -> np.ndarray:
    """Crop/resize/flip frames ``(T, H, W, 3)`` with bilinear resampling.

    When the box covers the whole frame at identical output size and no flip
    is set, the output is a bit-exact copy.
    """
    ys, xs = _resample_grid(geom)
    h, w = frames.shape[1], frames.shape[2]
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :, None]

    rows0 = frames[:, y0]
    rows1 = frames[:, y1]
    top = rows0[:, :, x0] * (1.0 - wx) + rows0[:, :, x1] * wx
    bot = rows1[:, :, x0] * (1.0 - wx) + rows1[:, :, x1] * wx
    out = top * (1.0 - wy) + bot * wy
    return out.astype(frames.dtype, copy=False)


def resample_class_map(
    class_map: np.ndarray, geom: GeometricAugment | None, out_size: tuple[int, int]
) -> np.ndarray:
    """Nearest-neighbor crop/flip/resize of an integer class map."""
    h, w = class_map.shape
    if geom is None:
        geom = GeometricAugment(0, 0, h, w, h, w, out_size[0], out_size[1], False)
    else:
        geom = replace(geom, out_h=out_size[0], out_w=out_size[1])
    ys, xs = _resample_grid(geom)
    yi = np.clip(np.floor(ys + 0.5).astype(np.int64), 0, h - 1)
    xi = np.clip(np.floor(xs + 0.5).astype(np.int64), 0, w - 1)
    return class_map[np.ix_(yi, xi)]


def _draw_geometric(rng: np.random.Generator, src_h: int, src_w: int, cfg: AugmentConfig) -> GeometricAugment:
    if cfg.crop_scale is None:
        ch, cw = cfg.out_height, cfg.out_width
        top = (src_h - ch) // 2
        left = (src_w - cw) // 2
        flip = bool(rng.random() < cfg.flip_prob)
        return GeometricAugment(top, left, ch, cw, src_h, src_w, cfg.out_height, cfg.out_width, flip)
    area = src_h * src_w
    ch = cw = 0
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_scale)
        log_lo, log_hi = math.log(cfg.crop_aspect[0]), math.log(cfg.crop_aspect[1])
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < ch <= src_h and 0 < cw <= src_w:
            break
    else:  # fall back to the largest centered square
        ch = cw = min(src_h, src_w)
    top = int(rng.integers(0, src_h - ch + 1))
    left = int(rng.integers(0, src_w - cw + 1))
    flip = bool(rng.random() < cfg.flip_prob)
    return GeometricAugment(top, left, ch, cw, src_h, src_w, cfg.out_height, cfg.out_width, flip)


def _draw_color(rng: np.random.Generator, cfg: AugmentConfig) -> ColorJitter:
    return ColorJitter(
        brightness=float(rng.uniform(*cfg.brightness)),
        contrast=float(rng.uniform(*cfg.contrast)),
        saturation=float(rng.uniform(*cfg.saturation)),
    )


def apply_color(frames: np.ndarray, jitter: ColorJitter) -> np.ndarray:
    """Brightness, contrast, saturation (in that order), then clamp to [0, 1].

    Factors exactly equal to 1.0 are skipped so the identity configuration is
    bit-exact.
    """
    out = frames
    if jitter.brightness != 1.0:
        out = out * jitter.brightness
    if jitter.contrast != 1.0:
        gray_mean = np.float32(
            (out[..., 0] * 0.299 + out[..., 1] * 0.587 + out[..., 2] * 0.114).mean()
        )
        out = gray_mean + (out - gray_mean) * jitter.contrast
    if jitter.saturation != 1.0:
        gray = (out[..., 0] * 0.299 + out[..., 1] * 0.587 + out[..., 2] * 0.114)[..., None]
        out = gray + (out - gray) * jitter.saturation
    if out is frames:
        return frames.copy()
    return np.clip(out, 0.0, 1.0).astype(np.float32, copy=False)


def augment_with_record(
    clip: VideoClip, cfg: AugmentConfig, seed: int
) -> tuple[VideoClip, GeometricAugment]:
    """Augment a clip and return the geometric transform that was applied."""
    src_h, src_w = clip.frames.shape[1], clip.frames.shape[2]
    cfg.validate(src_h, src_w)
    rng = derive_rng("augment", seed)
    geom = _draw_geometric(rng, src_h, src_w, cfg)
    jitter = _draw_color(rng, cfg)
    frames = apply_color(apply_geometric(clip.frames, geom), jitter)
    return (
        VideoClip(
            frames=frames,
            source_id=clip.source_id,
            frame_indices=clip.frame_indices,
            speed=clip.speed,
        ),
        geom,
    )


def augment(clip: VideoClip, cfg: AugmentConfig, seed: int) -> VideoClip:
    """Seed-deterministic clip augmentation (same transform for all frames)."""
    return augment_with_record(clip, cfg, seed)[0]


# ---------------------------------------------------------------------------
# Training samples
# ---------------------------------------------------------------------------


def _num_starts(video: SourceVideo, speed: int, length: int) -> int:
    return video.frame_count - (length - 1) * speed


def make_training_sample(
    video: SourceVideo,
    speeds: Sequence[int],
    clip_len: int,
    augment_cfg: AugmentConfig,
    seed: int,
) -> TrainingSample:
    """Draw anchor/positive/negative clips for one pre-training example."""
    speeds = tuple(sorted(set(int(s) for s in speeds)))
    if len(speeds) < 2:
        raise DataError(f"need at least two distinct speeds, got {speeds}")
    for s in speeds:
        if _num_starts(video, s, clip_len) < 2:
            raise DataError(
                f"{video.video_id}: too short ({video.frame_count} frames) for "
                f"speed {s} x length {clip_len} with two distinct starts"
            )
    rng = derive_rng("sample", seed)
    anchor_speed = int(speeds[rng.integers(len(speeds))])
    n_anchor = _num_starts(video, anchor_speed, clip_len)
    anchor_start = int(rng.integers(n_anchor))
    pos_start = int(rng.integers(n_anchor - 1))
    if pos_start >= anchor_start:
        pos_start += 1
    others = tuple(s for s in speeds if s != anchor_speed)
    neg_speed = int(others[rng.integers(len(others))])
    neg_start = int(rng.integers(_num_starts(video, neg_speed, clip_len)))

    raw_anchor = sample_clip(video, anchor_speed, clip_len, anchor_start)
    raw_pos = sample_clip(video, anchor_speed, clip_len, pos_start)
    raw_neg = sample_clip(video, neg_speed, clip_len, neg_start)

    anchor, geom = augment_with_record(raw_anchor, augment_cfg, derive_seed(seed, "anchor"))
    speed_positive = augment(raw_pos, augment_cfg, derive_seed(seed, "speed+"))
    speed_negative = augment(raw_neg, augment_cfg, derive_seed(seed, "speed-"))
    appearance_positive = augment(raw_anchor, augment_cfg, derive_seed(seed, "appearance+"))

    mid_src_index = raw_anchor.frame_indices[middle_position(clip_len)]
    raw_mid = video.frames[mid_src_index][None]
    teacher_pixels = apply_geometric(raw_mid, geom)[0]
    context = TeacherContext(
        video_id=video.video_id,
        frame_index=mid_src_index,
        parsing_map=None if video.parsing_gt is None else video.parsing_gt[mid_src_index],
        geometry=geom,
    )
    return TrainingSample(
        anchor=anchor,
        speed_positive=speed_positive,
        speed_negative=speed_negative,
        appearance_positive=appearance_positive,
        teacher_frame=Frame(pixels=teacher_pixels, clip_source=video.video_id),
        teacher_context=context,
    )


# ---------------------------------------------------------------------------
# Frame-directory ingestion / export
# ---------------------------------------------------------------------------


def _numeric_key(path: Path, video_id: str) -> int:
    groups = re.findall(r"\d+", path.stem)
    if not groups:
        raise DataError(f"{video_id}: frame file {path.name!r} has no numeric index")
    return int(groups[-1])


def _load_image(path: Path, mode: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        return np.asarray(img.convert(mode))


def load_frame_directory(path: str | Path, manifest: str | Path) -> list[SourceVideo]:
    """Load videos described by a manifest of frame globs (see module docs)."""
    root = Path(path)
    manifest_path = root / manifest if not Path(manifest).is_absolute() else Path(manifest)
    if not manifest_path.is_file():
        raise DataError(f"manifest not found: {manifest_path}")
    videos: list[SourceVideo] = []
    for lineno, raw in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) not in (3, 4):
            raise DataError(
                f"malformed manifest line {lineno}: expected 3 or 4 tab-separated "
                f"fields, got {len(fields)}"
            )
        video_id, label_text, frame_glob = fields[0], fields[1], fields[2]
        parsing_glob = fields[3] if len(fields) == 4 else None
        try:
            label = int(label_text)
        except ValueError:
            raise DataError(f"{video_id}: non-integer label {label_text!r}") from None

        frame_paths = sorted(root.glob(frame_glob), key=lambda p: _numeric_key(p, video_id))
        if not frame_paths:
            raise DataError(f"{video_id}: no frames match {frame_glob!r} under {root}")
        frames = []
        for p in frame_paths:
            arr = _load_image(p, "RGB").astype(np.float32) / 255.0
            if frames and arr.shape != frames[0].shape:
                raise DataError(
                    f"{video_id}: inconsistent frame resolution {arr.shape[:2]} in "
                    f"{p.name} (expected {frames[0].shape[:2]})"
                )
            frames.append(arr)
        parsing = None
        if parsing_glob is not None:
            parsing_paths = sorted(root.glob(parsing_glob), key=lambda p: _numeric_key(p, video_id))
            if len(parsing_paths) != len(frame_paths):
                raise DataError(
                    f"{video_id}: {len(parsing_paths)} parsing maps for "
                    f"{len(frame_paths)} frames"
                )
            maps = [_load_image(p, "L").astype(np.uint8) for p in parsing_paths]
            if any(m.shape != frames[0].shape[:2] for m in maps):
                raise DataError(f"{video_id}: parsing map resolution differs from frames")
            parsing = np.stack(maps)
        video = SourceVideo(
            frames=np.stack(frames),
            parsing_gt=parsing,
            action_label=label,
            video_id=video_id,
        )
        video.validate()
        videos.append(video)
    logger.info("loaded %d videos from %s", len(videos), manifest_path)
    return videos


def write_frame_directory(
    videos: Sequence[SourceVideo], out_dir: str | Path, manifest_name: str = "manifest.tsv"
) -> Path:
    """Write videos as PNG frame folders plus a loader-compatible manifest."""
    from PIL import Image

    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for video in videos:
        vdir = root / video.video_id
        vdir.mkdir(parents=True, exist_ok=True)
        for f in range(video.frame_count):
            img = Image.fromarray(
                np.clip(np.rint(video.frames[f] * 255.0), 0, 255).astype(np.uint8)
            )
            img.save(vdir / f"frame_{f:05d}.png")
        record = [video.video_id, str(video.action_label), f"{video.video_id}/frame_*.png"]
        if video.parsing_gt is not None:
            for f in range(video.frame_count):
                Image.fromarray(video.parsing_gt[f], mode="L").save(
                    vdir / f"parsing_{f:05d}.png"
                )
            record.append(f"{video.video_id}/parsing_*.png")
        lines.append("\t".join(record))
    manifest_path = root / manifest_name
    manifest_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest_path
