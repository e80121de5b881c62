"""Human-parsing teacher abstraction with three interchangeable backends.

* ``oracle``: reads synthetic ground truth and emits softened one-hot maps.
* ``file``: serves maps precomputed by an external parser, resampled into the
  clip's augmented coordinates.
* ``stub``: a frozen random network, for pipeline tests with no ground truth.

All backends return class-probability maps of shape ``(C, H_s, W_s)`` whose
per-pixel class vectors sum to one.

Probability-map file format ("PMAP"): magic bytes ``PMAP``, one format
version byte, then ``H_s``, ``W_s``, ``C`` as little-endian uint32, then
``H_s * W_s * C`` little-endian float32 values in row-major (row, column,
class) order. Class-index maps may instead be stored as single-channel 8-bit
images and are converted to softened one-hot on load.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import TeacherError
from .seeding import derive_seed
from .video_data import Frame, GeometricAugment, TeacherContext, resample_class_map

logger = logging.getLogger(__name__)

PMAP_MAGIC = b"PMAP"
PMAP_VERSION = 1

TEACHER_KINDS = ("oracle", "file", "stub")


@dataclass(frozen=True)
class TeacherSpec:
    kind: str = "oracle"
    class_count: int = 4
    out_height: int = 16
    out_width: int = 16
    softening: float = 0.1  # probability mass moved off the true class
    manifest: str | None = None  # file kind only
    stub_seed: int = 0

    def validate(self) -> None:
        if self.kind not in TEACHER_KINDS:
            raise TeacherError(f"unknown teacher kind {self.kind!r}")
        if self.class_count < 2:
            raise TeacherError("class_count must be >= 2")
        if not 0.0 <= self.softening < 1.0:
            raise TeacherError("softening must be in [0, 1)")
        if self.kind == "file" and not self.manifest:
            raise TeacherError("file teacher requires a manifest path")


def check_prob_map(probs: np.ndarray, class_count: int, tol: float = 1e-4) -> None:
    if probs.ndim != 3 or probs.shape[0] != class_count:
        raise TeacherError(
            f"probability map must be (C={class_count}, H, W), got {probs.shape}"
        )
    if np.any(probs < -tol):
        raise TeacherError("probability map has negative entries")
    sums = probs.sum(axis=0)
    if np.max(np.abs(sums - 1.0)) > tol:
        raise TeacherError("probability map class sums deviate from 1")


def soften_one_hot(class_map: np.ndarray, class_count: int, softening: float) -> np.ndarray:
    """One-hot with probability ``1 - softening`` on the true class and
    ``softening / (C - 1)`` elsewhere."""
    if class_map.max(initial=0) >= class_count:
        raise TeacherError(
            f"class index {int(class_map.max())} out of range for C={class_count}"
        )
    off = softening / (class_count - 1)
    probs = np.full((class_count,) + class_map.shape, off, dtype=np.float32)
    rows, cols = np.indices(class_map.shape)
    probs[class_map.astype(np.int64), rows, cols] = np.float32(1.0 - softening)
    return probs


def resample_prob_map(
    probs: np.ndarray,
    geometry: GeometricAugment | None,
    out_size: tuple[int, int],
) -> np.ndarray:
    """Bilinear crop/flip/resize of a (C, H, W) probability map, renormalized.

    The crop box in ``geometry`` is expressed in source-frame pixels; when the
    stored map has a different resolution the box is scaled proportionally.
    """
    c, h, w = probs.shape
    if geometry is None:
        top, left, crop_h, crop_w, flip = 0.0, 0.0, float(h), float(w), False
    else:
        sy = h / geometry.src_h
        sx = w / geometry.src_w
        top, left = geometry.top * sy, geometry.left * sx
        crop_h, crop_w = geometry.crop_h * sy, geometry.crop_w * sx
        flip = geometry.flip
    out_h, out_w = out_size
    ys = top + (np.arange(out_h, dtype=np.float64) + 0.5) * crop_h / out_h - 0.5
    xs = left + (np.arange(out_w, dtype=np.float64) + 0.5) * crop_w / out_w - 0.5
    if flip:
        xs = xs[::-1].copy()
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    rows0 = probs[:, y0]
    rows1 = probs[:, y1]
    top_interp = rows0[:, :, x0] * (1.0 - wx) + rows0[:, :, x1] * wx
    bot_interp = rows1[:, :, x0] * (1.0 - wx) + rows1[:, :, x1] * wx
    out = top_interp * (1.0 - wy) + bot_interp * wy
    sums = out.sum(axis=0, keepdims=True)
    out = out / np.maximum(sums, 1e-12)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class OracleTeacher:
    """Exact teacher for synthetic videos: softened ground-truth parsing."""

    def __init__(self, spec: TeacherSpec):
        spec.validate()
        self.spec = spec
        self.class_count = spec.class_count

    def parse(self, frame: Frame, context: TeacherContext) -> np.ndarray:
        if context is None or context.parsing_map is None:
            raise TeacherError(
                f"oracle teacher requires ground-truth parsing for "
                f"{getattr(context, 'video_id', frame.clip_source)}"
            )
        class_map = resample_class_map(
            context.parsing_map, context.geometry, (self.spec.out_height, self.spec.out_width)
        )
        probs = soften_one_hot(class_map, self.class_count, self.spec.softening)
        check_prob_map(probs, self.class_count)
        return probs


class StubTeacher:
    """Frozen random conv net over the frame; deterministic per input."""

    def __init__(self, spec: TeacherSpec):
        spec.validate()
        self.spec = spec
        self.class_count = spec.class_count
        gen = torch.Generator().manual_seed(derive_seed("stub-teacher", spec.stub_seed) & 0x7FFFFFFF)
        self._net = nn.Sequential(
            nn.Conv2d(3, 8, kernel_size=3, padding=1),
            nn.ReLU(),
            nn.Conv2d(8, spec.class_count, kernel_size=3, padding=1),
        )
        for p in self._net.parameters():
            with torch.no_grad():
                p.normal_(0.0, 0.5, generator=gen)
            p.requires_grad_(False)
        self._net.eval()

    def parse(self, frame: Frame, context: TeacherContext | None = None) -> np.ndarray:
        pixels = np.asarray(frame.pixels, dtype=np.float32)
        x = torch.from_numpy(pixels).permute(2, 0, 1).unsqueeze(0)
        x = torch.nn.functional.interpolate(
            x, size=(self.spec.out_height, self.spec.out_width), mode="bilinear", align_corners=False
        )
        with torch.no_grad():
            logits = self._net(x)
            probs = torch.softmax(logits, dim=1)[0]
        out = probs.numpy().astype(np.float32)
        check_prob_map(out, self.class_count)
        return out


class FileTeacher:
    """Serves precomputed maps keyed by video id from a manifest.

    Manifest: JSON ``{"class_count": C, "maps": {video_id: relative_path}}``.
    ``*.pmap`` entries are probability maps (bilinear resample + renormalize);
    anything else is opened as a single-channel class-index image (nearest
    resample, then softened one-hot).
    """

    def __init__(self, spec: TeacherSpec):
        spec.validate()
        self.spec = spec
        manifest_path = Path(spec.manifest)
        if not manifest_path.is_file():
            raise TeacherError(f"teacher manifest not found: {manifest_path}")
        try:
            doc = json.loads(manifest_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise TeacherError(f"teacher manifest is not valid JSON: {exc}") from None
        if "class_count" not in doc or "maps" not in doc:
            raise TeacherError("teacher manifest must declare class_count and maps")
        self.class_count = int(doc["class_count"])
        if self.class_count < 2:
            raise TeacherError("manifest class_count must be >= 2")
        self._root = manifest_path.parent
        self._files = {str(k): str(v) for k, v in doc["maps"].items()}
        self._cache: dict[str, np.ndarray | tuple] = {}

    def _load(self, video_id: str):
        if video_id in self._cache:
            return self._cache[video_id]
        rel = self._files.get(video_id)
        if rel is None:
            raise TeacherError(f"no precomputed map for video {video_id!r}")
        path = self._root / rel
        if not path.is_file():
            raise TeacherError(f"{video_id}: map file missing: {path}")
        if path.suffix == ".pmap":
            probs = read_pmap(path)
            if probs.shape[0] != self.class_count:
                raise TeacherError(
                    f"{video_id}: map has {probs.shape[0]} classes, manifest "
                    f"declares {self.class_count}"
                )
            entry = ("prob", probs)
        else:
            from PIL import Image

            with Image.open(path) as img:
                class_map = np.asarray(img.convert("L"), dtype=np.uint8)
            entry = ("class", class_map)
        self._cache[video_id] = entry
        return entry

    def parse(self, frame: Frame, context: TeacherContext) -> np.ndarray:
        if context is None:
            raise TeacherError("file teacher requires a context with a video id")
        kind, data = self._load(context.video_id)
        out_size = (self.spec.out_height, self.spec.out_width)
        if kind == "prob":
            probs = resample_prob_map(data, context.geometry, out_size)
        else:
            class_map = resample_class_map(data, context.geometry, out_size)
            probs = soften_one_hot(class_map, self.class_count, self.spec.softening)
        if probs.shape != (self.class_count, *out_size):
            raise TeacherError(
                f"{context.video_id}: resampled map shape {probs.shape} does not "
                f"match ({self.class_count}, {out_size[0]}, {out_size[1]})"
            )
        check_prob_map(probs, self.class_count)
        return probs


def build_teacher(spec: TeacherSpec):
    spec.validate()
    if spec.kind == "oracle":
        return OracleTeacher(spec)
    if spec.kind == "stub":
        return StubTeacher(spec)
    return FileTeacher(spec)


# ---------------------------------------------------------------------------
# PMAP file io and offline export
# ---------------------------------------------------------------------------


def write_pmap(path: str | Path, probs: np.ndarray) -> Path:
    """Write a (C, H, W) probability map in the PMAP layout."""
    path = Path(path)
    c, h, w = probs.shape
    hwc = np.ascontiguousarray(np.transpose(probs, (1, 2, 0)), dtype="<f4")
    with open(path, "wb") as f:
        f.write(PMAP_MAGIC)
        f.write(struct.pack("<B", PMAP_VERSION))
        f.write(struct.pack("<III", h, w, c))
        f.write(hwc.tobytes(order="C"))
    return path


def read_pmap(path: str | Path) -> np.ndarray:
    """Read a PMAP file back as a (C, H, W) float32 array."""
    path = Path(path)
    data = path.read_bytes()
    header = 4 + 1 + 12
    if len(data) < header:
        raise TeacherError(f"{path}: truncated PMAP header")
    if data[:4] != PMAP_MAGIC:
        raise TeacherError(f"{path}: bad magic {data[:4]!r}")
    version = data[4]
    if version != PMAP_VERSION:
        raise TeacherError(f"{path}: unsupported PMAP version {version}")
    h, w, c = struct.unpack("<III", data[5:17])
    expected = header + 4 * h * w * c
    if len(data) != expected:
        raise TeacherError(f"{path}: expected {expected} bytes, found {len(data)}")
    hwc = np.frombuffer(data, dtype="<f4", offset=header).reshape(h, w, c)
    return np.ascontiguousarray(np.transpose(hwc, (2, 0, 1)))


def export_maps(videos, teacher, out_dir: str | Path) -> Path:
    """Run the teacher on every video's middle frame and write PMAP files plus
    a manifest usable by :class:`FileTeacher`. Per-item failures are collected
    and reported together."""
    out_root = Path(out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    maps = {}
    failures = []
    for video in videos:
        try:
            mid = video.frame_count // 2
            frame = Frame(pixels=video.frames[mid], clip_source=video.video_id)
            context = TeacherContext(
                video_id=video.video_id,
                frame_index=mid,
                parsing_map=None if video.parsing_gt is None else video.parsing_gt[mid],
                geometry=None,
            )
            probs = teacher.parse(frame, context)
            rel = f"{video.video_id}.pmap"
            write_pmap(out_root / rel, probs)
            maps[video.video_id] = rel
        except (TeacherError, OSError) as exc:
            failures.append(f"{video.video_id}: {exc}")
    manifest = {"class_count": teacher.class_count, "maps": maps}
    manifest_path = out_root / "teacher_manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    if failures:
        raise TeacherError(
            f"failed to export {len(failures)} map(s): " + "; ".join(failures[:5])
        )
    logger.info("exported %d teacher maps to %s", len(maps), out_root)
    return manifest_path
