"""Downstream evaluation (linear probe, top-k accuracy) and CAM heatmaps.

The primary desk-scale metric is a linear probe: a multinomial logistic
regression trained on frozen clip representations. A fine-tune mode (all
weights trainable) exists behind a flag for protocol parity. CAM heatmaps
project a linear classifier's class weights onto the last shared-encoder
feature map, mean-pool over time, ReLU, upsample, and max-normalize.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, ModelError
from .model import MultiTaskModel, VARIANT_NO_KD, concat_representation
from .video_data import (
    GeometricAugment,
    SourceVideo,
    VideoClip,
    apply_geometric,
    resample_class_map,
    sample_clip,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ProbeResult:
    variant: str
    acc_at_1: float
    acc_at_5: float
    per_class_accuracy: dict[int, float]
    seed: int
    num_classes: int

    def validate(self) -> None:
        if not 0.0 <= self.acc_at_1 <= self.acc_at_5 <= 1.0:
            raise ConfigError("accuracies must satisfy 0 <= acc@1 <= acc@5 <= 1")


@dataclass(frozen=True)
class CamMap:
    heat: np.ndarray  # (H, W) in [0, 1]
    class_id: int
    video_id: str
    frame_index: int


# ---------------------------------------------------------------------------
# Representations
# ---------------------------------------------------------------------------


def extract_representation(model: MultiTaskModel, clips: torch.Tensor) -> torch.Tensor:
    """Final clip representation: [prior || contrastive], or the contrastive
    embedding alone when the parsing branch does not exist."""
    model.eval()
    with torch.no_grad():
        feat = model.features(clips)
        z_contrast = model.contrast_from_features(feat)
        if model.variant == VARIANT_NO_KD:
            return z_contrast
        z_prior = model.prior_from_features(feat)
        return concat_representation(z_prior, z_contrast)


def eval_clip(video: SourceVideo, clip_len: int, out_size: tuple[int, int]) -> VideoClip:
    """Deterministic evaluation view: centered speed-1 window, center crop."""
    start = max(0, (video.frame_count - clip_len) // 2)
    clip = sample_clip(video, 1, clip_len, start)
    h, w = clip.frames.shape[1], clip.frames.shape[2]
    geom = GeometricAugment(
        top=(h - out_size[0]) // 2,
        left=(w - out_size[1]) // 2,
        crop_h=out_size[0],
        crop_w=out_size[1],
        src_h=h,
        src_w=w,
        out_h=out_size[0],
        out_w=out_size[1],
        flip=False,
    )
    return VideoClip(
        frames=apply_geometric(clip.frames, geom),
        source_id=clip.source_id,
        frame_indices=clip.frame_indices,
        speed=clip.speed,
    )


def video_representations(
    model: MultiTaskModel,
    videos: Sequence[SourceVideo],
    clip_len: int,
    out_size: tuple[int, int],
    batch_size: int = 32,
) -> tuple[np.ndarray, np.ndarray]:
    """(features, labels) for one evaluation clip per video."""
    feats = []
    labels = []
    for lo in range(0, len(videos), batch_size):
        chunk = videos[lo : lo + batch_size]
        clips = [eval_clip(v, clip_len, out_size) for v in chunk]
        x = torch.from_numpy(np.stack([c.frames for c in clips])).permute(0, 4, 1, 2, 3).float()
        feats.append(extract_representation(model, x).numpy())
        labels.extend(v.action_label for v in chunk)
    return np.concatenate(feats), np.asarray(labels, dtype=np.int64)


def pooled_feature_activations(
    model: MultiTaskModel,
    videos: Sequence[SourceVideo],
    clip_len: int,
    out_size: tuple[int, int],
    batch_size: int = 32,
) -> tuple[np.ndarray, np.ndarray]:
    """Globally average-pooled shared-encoder activations (the CAM probe input)."""
    model.eval()
    feats = []
    labels = []
    with torch.no_grad():
        for lo in range(0, len(videos), batch_size):
            chunk = videos[lo : lo + batch_size]
            clips = [eval_clip(v, clip_len, out_size) for v in chunk]
            x = torch.from_numpy(np.stack([c.frames for c in clips])).permute(0, 4, 1, 2, 3).float()
            fmap = model.features(x)
            feats.append(fmap.mean(dim=(2, 3, 4)).numpy())
            labels.extend(v.action_label for v in chunk)
    return np.concatenate(feats), np.asarray(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# Probing
# ---------------------------------------------------------------------------


def topk_accuracy(scores: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of samples whose label is among the k best scores.

    Ties are broken toward the smallest class index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError(f"scores must be (n, C) matching labels, got {scores.shape}")
    if k > scores.shape[1]:
        raise ValueError(f"k={k} exceeds {scores.shape[1]} classes")
    order = np.argsort(-scores, axis=1, kind="stable")  # stable: smallest index wins ties
    hits = (order[:, :k] == labels[:, None]).any(axis=1)
    return float(hits.mean())


def _class_scores(clf, feats: np.ndarray, num_classes: int) -> np.ndarray:
    raw = clf.decision_function(feats)
    if raw.ndim == 1:  # binary case
        raw = np.stack([-raw, raw], axis=1)
    scores = np.full((feats.shape[0], num_classes), -np.inf)
    for col, cls in enumerate(clf.classes_):
        scores[:, int(cls)] = raw[:, col]
    return scores


def linear_probe(
    train_feats: np.ndarray,
    train_labels: np.ndarray,
    test_feats: np.ndarray,
    test_labels: np.ndarray,
    num_classes: int,
    seed: int = 0,
    max_iter: int = 300,
    l2_reg: float = 1.0,
    variant: str = "full",
) -> ProbeResult:
    """Multinomial logistic regression on frozen features, fixed iteration
    budget; reports top-1 / top-5 accuracy on the test split."""
    from sklearn.linear_model import LogisticRegression

    present = set(int(c) for c in np.unique(train_labels))
    missing = sorted(set(range(num_classes)) - present)
    if missing:
        raise ConfigError(f"classes missing from the train split: {missing}")
    clf = LogisticRegression(max_iter=max_iter, C=l2_reg, random_state=seed)
    clf.fit(train_feats, train_labels)
    scores = _class_scores(clf, test_feats, num_classes)
    acc1 = topk_accuracy(scores, test_labels, 1)
    acc5 = topk_accuracy(scores, test_labels, min(5, num_classes))
    preds = np.argmax(scores, axis=1)
    per_class = {}
    for cls in range(num_classes):
        mask = test_labels == cls
        if mask.any():
            per_class[cls] = float((preds[mask] == cls).mean())
    result = ProbeResult(
        variant=variant,
        acc_at_1=acc1,
        acc_at_5=acc5,
        per_class_accuracy=per_class,
        seed=seed,
        num_classes=num_classes,
    )
    result.validate()
    return result


def probe_videos(
    model: MultiTaskModel,
    train_videos: Sequence[SourceVideo],
    test_videos: Sequence[SourceVideo],
    clip_len: int,
    out_size: tuple[int, int],
    seed: int = 0,
    max_iter: int = 300,
    l2_reg: float = 1.0,
    variant: str | None = None,
) -> ProbeResult:
    """Representation extraction plus linear probe, end to end."""
    train_ids = {v.video_id for v in train_videos}
    overlap = [v.video_id for v in test_videos if v.video_id in train_ids]
    if overlap:
        raise ConfigError(f"train/test video ids overlap: {overlap[:3]}")
    num_classes = max(v.action_label for v in list(train_videos) + list(test_videos)) + 1
    if num_classes < 2:
        raise ConfigError("probing needs at least 2 classes")
    train_x, train_y = video_representations(model, train_videos, clip_len, out_size)
    test_x, test_y = video_representations(model, test_videos, clip_len, out_size)
    return linear_probe(
        train_x,
        train_y,
        test_x,
        test_y,
        num_classes,
        seed=seed,
        max_iter=max_iter,
        l2_reg=l2_reg,
        variant=variant or model.variant,
    )


def finetune_probe(
    model: MultiTaskModel,
    train_videos: Sequence[SourceVideo],
    test_videos: Sequence[SourceVideo],
    clip_len: int,
    out_size: tuple[int, int],
    seed: int = 0,
    epochs: int = 5,
    lr: float = 1e-3,
    variant: str | None = None,
) -> ProbeResult:
    """Fine-tune mode: linear head plus unfrozen backbone at a small LR."""
    num_classes = max(v.action_label for v in list(train_videos) + list(test_videos)) + 1
    rep_dim = (
        model.config.embed_dim if model.variant == VARIANT_NO_KD else 2 * model.config.embed_dim
    )
    gen = torch.Generator().manual_seed(seed)
    head = torch.nn.Linear(rep_dim, num_classes)
    with torch.no_grad():
        head.weight.normal_(0.0, 0.01, generator=gen)
        head.bias.zero_()
    opt = torch.optim.SGD(
        list(model.parameters()) + list(head.parameters()), lr=lr, momentum=0.9
    )
    clips = [eval_clip(v, clip_len, out_size) for v in train_videos]
    x = torch.from_numpy(np.stack([c.frames for c in clips])).permute(0, 4, 1, 2, 3).float()
    y = torch.tensor([v.action_label for v in train_videos])
    model.train()
    for _ in range(epochs):
        feat = model.features(x)
        z_c = model.contrast_from_features(feat)
        rep = (
            z_c
            if model.variant == VARIANT_NO_KD
            else concat_representation(model.prior_from_features(feat), z_c)
        )
        loss = torch.nn.functional.cross_entropy(head(rep), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    test_x, test_y = video_representations(model, test_videos, clip_len, out_size)
    with torch.no_grad():
        scores = head(torch.from_numpy(test_x).float()).numpy()
    acc1 = topk_accuracy(scores, test_y, 1)
    acc5 = topk_accuracy(scores, test_y, min(5, num_classes))
    preds = np.argmax(scores, axis=1)
    per_class = {
        cls: float((preds[test_y == cls] == cls).mean())
        for cls in range(num_classes)
        if (test_y == cls).any()
    }
    return ProbeResult(
        variant=variant or model.variant,
        acc_at_1=acc1,
        acc_at_5=acc5,
        per_class_accuracy=per_class,
        seed=seed,
        num_classes=num_classes,
    )


# ---------------------------------------------------------------------------
# CAM
# ---------------------------------------------------------------------------


def _resize_bilinear_2d(arr: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    h, w = arr.shape
    geom_ys = (np.arange(out_size[0], dtype=np.float64) + 0.5) * h / out_size[0] - 0.5
    geom_xs = (np.arange(out_size[1], dtype=np.float64) + 0.5) * w / out_size[1] - 0.5
    y0 = np.clip(np.floor(geom_ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(geom_xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(geom_ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(geom_xs - x0, 0.0, 1.0)[None, :]
    top = arr[np.ix_(y0, x0)] * (1 - wx) + arr[np.ix_(y0, x1)] * wx
    bot = arr[np.ix_(y1, x0)] * (1 - wx) + arr[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy


def cam_from_feature_map(
    feature_map: np.ndarray, class_weights: np.ndarray, out_size: tuple[int, int]
) -> np.ndarray:
    """Weight channels, mean over time, ReLU, upsample, max-normalize.

    ``feature_map``: (C_f, T', H', W'); ``class_weights``: (C_f,).
    """
    if feature_map.shape[0] != class_weights.shape[0]:
        raise ModelError(
            f"feature channels {feature_map.shape[0]} != probe weights {class_weights.shape[0]}"
        )
    weighted = np.tensordot(class_weights, feature_map, axes=(0, 0))  # (T', H', W')
    heat = np.maximum(weighted.mean(axis=0), 0.0)
    heat = np.maximum(_resize_bilinear_2d(heat, out_size), 0.0)
    peak = heat.max()
    if peak > 0:
        heat = heat / peak
    return heat.astype(np.float64)


def cam_heatmap(
    model: MultiTaskModel,
    probe_weights: np.ndarray,
    clip: VideoClip,
    class_id: int,
) -> CamMap:
    """CAM for one clip and class, at the clip's spatial resolution."""
    probe_weights = np.asarray(probe_weights)
    if class_id < 0 or class_id >= probe_weights.shape[0]:
        raise ModelError(f"class id {class_id} outside probe weight rows {probe_weights.shape[0]}")
    model.eval()
    x = torch.from_numpy(clip.frames[None]).permute(0, 4, 1, 2, 3).float()
    with torch.no_grad():
        fmap = model.features(x)[0].numpy()
    out_size = (clip.frames.shape[1], clip.frames.shape[2])
    heat = cam_from_feature_map(fmap, probe_weights[class_id], out_size)
    return CamMap(
        heat=heat,
        class_id=class_id,
        video_id=clip.source_id,
        frame_index=clip.frame_indices[len(clip.frame_indices) // 2],
    )


def train_cam_probe(
    model: MultiTaskModel,
    train_videos: Sequence[SourceVideo],
    clip_len: int,
    out_size: tuple[int, int],
    seed: int = 0,
    max_iter: int = 300,
) -> np.ndarray:
    """Linear classifier on pooled feature-map activations; returns its
    (num_classes, C_f) weight matrix for CAM projection."""
    from sklearn.linear_model import LogisticRegression

    feats, labels = pooled_feature_activations(model, train_videos, clip_len, out_size)
    clf = LogisticRegression(max_iter=max_iter, random_state=seed)
    clf.fit(feats, labels)
    num_classes = int(labels.max()) + 1
    weights = np.zeros((num_classes, feats.shape[1]))
    coef = clf.coef_
    if coef.shape[0] == 1 and num_classes == 2:  # binary: one row, symmetric
        weights[int(clf.classes_[1])] = coef[0]
        weights[int(clf.classes_[0])] = -coef[0]
    else:
        for row, cls in enumerate(clf.classes_):
            weights[int(cls)] = coef[row]
    return weights


def cam_focus_fraction(
    model: MultiTaskModel,
    probe_weights: np.ndarray,
    videos: Sequence[SourceVideo],
    clip_len: int,
    out_size: tuple[int, int],
) -> dict:
    """Fraction of clips whose mean CAM heat on actor pixels exceeds the mean
    heat on background pixels (actor mask = parsing ground truth > 0)."""
    focused = 0
    total = 0
    details = []
    for video in videos:
        if video.parsing_gt is None:
            continue
        clip = eval_clip(video, clip_len, out_size)
        cam = cam_heatmap(model, probe_weights, clip, video.action_label)
        mid_idx = clip.frame_indices[len(clip.frame_indices) // 2]
        h, w = video.frames.shape[1], video.frames.shape[2]
        geom = GeometricAugment(
            top=(h - out_size[0]) // 2,
            left=(w - out_size[1]) // 2,
            crop_h=out_size[0],
            crop_w=out_size[1],
            src_h=h,
            src_w=w,
            out_h=out_size[0],
            out_w=out_size[1],
            flip=False,
        )
        mask = resample_class_map(video.parsing_gt[mid_idx], geom, out_size) > 0
        if not mask.any() or mask.all():
            continue
        actor_heat = float(cam.heat[mask].mean())
        bg_heat = float(cam.heat[~mask].mean())
        focused += int(actor_heat > bg_heat)
        total += 1
        details.append(
            {"video_id": video.video_id, "actor_heat": actor_heat, "background_heat": bg_heat}
        )
    fraction = focused / total if total else 0.0
    return {"focused": focused, "total": total, "fraction": fraction, "details": details}


# ---------------------------------------------------------------------------
# Rendering and reports
# ---------------------------------------------------------------------------


def _heat_palette(heat: np.ndarray) -> np.ndarray:
    """Black -> red -> yellow -> white ramp, (H, W, 3) floats."""
    r = np.clip(heat * 3.0, 0.0, 1.0)
    g = np.clip(heat * 3.0 - 1.0, 0.0, 1.0)
    b = np.clip(heat * 3.0 - 2.0, 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


def render_overlay(frame: np.ndarray, cam: CamMap, out_path: str | Path, alpha: float = 0.5) -> Path:
    """Alpha-blend the heatmap over a frame and write an 8-bit RGB PNG."""
    from PIL import Image

    if frame.shape[:2] != cam.heat.shape:
        raise ModelError(f"frame {frame.shape[:2]} and heatmap {cam.heat.shape} sizes differ")
    blend = (1.0 - alpha) * frame + alpha * _heat_palette(cam.heat)
    img = np.clip(np.rint(blend * 255.0), 0, 255).astype(np.uint8)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(out_path)
    return out_path


def overlay_name(cam: CamMap) -> str:
    return f"{cam.video_id}_f{cam.frame_index}_c{cam.class_id}.png"


def emit_report(
    results: Sequence[ProbeResult], out_dir: str | Path, reference: dict | None = None
) -> dict:
    """Write probe results as CSV (variant,seed,acc1,acc5) and mirrored JSON."""
    out_root = Path(out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    rows = [
        {"variant": r.variant, "seed": r.seed, "acc1": r.acc_at_1, "acc5": r.acc_at_5}
        for r in results
    ]
    csv_path = out_root / "probe_report.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["variant", "seed", "acc1", "acc5"])
        writer.writeheader()
        writer.writerows(rows)
    report = {"results": rows}
    if reference is not None:
        report["reference_full_scale"] = reference
    json_path = out_root / "probe_report.json"
    json_path.write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("wrote %s and %s", csv_path, json_path)
    return report
