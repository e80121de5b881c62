"""Training objectives and the negative-embedding queue.

Three losses are combined into a weighted total:

* distillation: cross-entropy between teacher and student parsing maps,
  averaged over spatial locations (the student-independent entropy offset
  makes its gradients equal to those of the KL divergence);
* motion: margin ranking on cosine similarities, requiring the same-speed
  similarity to beat the different-speed similarity by a margin;
* appearance: InfoNCE over one positive key and a FIFO queue of negatives,
  computed with max-subtraction for numerical stability.

Similarity ``d`` is cosine similarity throughout: both contrastive terms
reward larger ``d`` for positives, which only reads consistently if ``d`` is
a similarity rather than a distance.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError

LOG_EPS = 1e-12
NORM_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    # Defaults are tuned for the desk-scale synthetic corpus (~200 instances):
    # the queue stays smaller than the corpus so same-video collisions among
    # negatives are rare, and the InfoNCE weight is kept low enough that its
    # gradients do not drown the margin-ranking task on the shared trunk.
    margin: float = 0.15
    temperature: float = 0.1
    weight_kd: float = 1.0
    weight_motion: float = 1.0
    weight_appearance: float = 0.1
    queue_capacity: int = 32

    def validate(self) -> None:
        if not 0.0 < self.margin <= 2.0:
            raise ConfigError(
                f"margin must be in (0, 2] (cosine gaps are bounded by 2), got {self.margin}"
            )
        if self.temperature <= 0.0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        weights = (self.weight_kd, self.weight_motion, self.weight_appearance)
        if any(w < 0 for w in weights):
            raise ConfigError("loss weights must be non-negative")
        if all(w == 0 for w in weights):
            raise ConfigError("at least one loss weight must be positive")
        if self.queue_capacity < 1:
            raise ConfigError("queue_capacity must be >= 1")


def similarity(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last axis, epsilon-guarded."""
    if u.shape[-1] != v.shape[-1]:
        raise ValueError(f"dimension mismatch: {u.shape[-1]} vs {v.shape[-1]}")
    u = F.normalize(u, dim=-1, eps=NORM_EPS)
    v = F.normalize(v, dim=-1, eps=NORM_EPS)
    return (u * v).sum(dim=-1)


def _check_prob_maps(teacher: torch.Tensor, student: torch.Tensor) -> None:
    if teacher.shape != student.shape:
        raise ValueError(f"map shape mismatch: {tuple(teacher.shape)} vs {tuple(student.shape)}")
    if teacher.dim() not in (3, 4):
        raise ValueError("maps must be (C, H, W) or (B, C, H, W)")
    class_dim = 0 if teacher.dim() == 3 else 1
    for name, m in (("teacher", teacher), ("student", student)):
        sums = m.sum(dim=class_dim)
        if torch.max(torch.abs(sums - 1.0)).item() > 1e-4:
            raise ValueError(f"{name} map is not softmax-normalized over classes")


def kd_loss(teacher_map: torch.Tensor, student_map: torch.Tensor) -> torch.Tensor:
    """- (1/N) * sum_{i,j} sum_c T(i,j,c) * log S(i,j,c), N = spatial locations.

    Accepts (C, H, W) maps or batches (B, C, H, W); batches are averaged.
    """
    _check_prob_maps(teacher_map, student_map)
    if teacher_map.dim() == 3:
        teacher_map = teacher_map.unsqueeze(0)
        student_map = student_map.unsqueeze(0)
    log_student = torch.log(torch.clamp(student_map, min=LOG_EPS))
    per_pixel = -(teacher_map * log_student).sum(dim=1)  # (B, H, W)
    return per_pixel.mean(dim=(1, 2)).mean()


def motion_loss(
    anchor: torch.Tensor,
    positive: torch.Tensor,
    negative: torch.Tensor,
    margin: float,
) -> torch.Tensor:
    """max(0, margin - (d+ - d-)) on cosine similarities; batches averaged."""
    d_pos = similarity(anchor, positive)
    d_neg = similarity(anchor, negative)
    return torch.clamp(margin - (d_pos - d_neg), min=0.0).mean()


def infonce_from_similarities(
    pos_sim: torch.Tensor, neg_sims: torch.Tensor, temperature: float
) -> torch.Tensor:
    """-log( e^{d+/t} / (e^{d+/t} + sum_n e^{d_n^-/t}) ), stabilized.

    ``pos_sim``: (B,) and ``neg_sims``: (B, K). Adding any constant to all
    similarities leaves the value unchanged.
    """
    if temperature <= 0.0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if neg_sims.dim() != 2 or neg_sims.shape[0] != pos_sim.shape[0]:
        raise ValueError(f"negatives must be (B, K), got {tuple(neg_sims.shape)}")
    logits = torch.cat([pos_sim.unsqueeze(1), neg_sims], dim=1) / temperature
    return (torch.logsumexp(logits, dim=1) - logits[:, 0]).mean()


def appearance_loss(
    anchor: torch.Tensor,
    positive: torch.Tensor,
    negatives: torch.Tensor,
    temperature: float,
) -> torch.Tensor:
    """InfoNCE with the queue snapshot ``negatives`` of shape (K, D)."""
    if negatives.dim() != 2 or negatives.shape[0] < 1:
        raise ValueError("appearance loss requires a non-empty (K, D) negative set")
    if anchor.dim() == 1:
        anchor = anchor.unsqueeze(0)
        positive = positive.unsqueeze(0)
    if anchor.shape[-1] != negatives.shape[-1]:
        raise ValueError(
            f"dimension mismatch: embeddings {anchor.shape[-1]}, negatives {negatives.shape[-1]}"
        )
    pos_sim = similarity(anchor, positive)
    anchor_n = F.normalize(anchor, dim=-1, eps=NORM_EPS)
    neg_n = F.normalize(negatives, dim=-1, eps=NORM_EPS)
    neg_sims = anchor_n @ neg_n.T
    return infonce_from_similarities(pos_sim, neg_sims, temperature)


def total_loss(l_kd, l_motion, l_appearance, config: LossConfig):
    """Weighted sum exactly as configured."""
    return (
        config.weight_kd * l_kd
        + config.weight_motion * l_motion
        + config.weight_appearance * l_appearance
    )


class NegativeQueue:
    """FIFO store of at most ``capacity`` unit-norm embeddings.

    ``snapshot`` returns entries in eviction order (oldest first). Pushes of
    single vectors or batches are supported; once full, the oldest entries
    are overwritten.
    """

    def __init__(self, capacity: int, dim: int, dtype: torch.dtype = torch.float32):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        if dim < 1:
            raise ValueError("queue dim must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self._buffer = torch.zeros(capacity, dim, dtype=dtype)
        self._size = 0
        self._cursor = 0

    def __len__(self) -> int:
        return self._size

    def push(self, embeddings: torch.Tensor) -> None:
        emb = embeddings.detach()
        if emb.dim() == 1:
            emb = emb.unsqueeze(0)
        if emb.dim() != 2 or emb.shape[1] != self.dim:
            raise ValueError(f"expected (*, {self.dim}) embeddings, got {tuple(embeddings.shape)}")
        norms = emb.norm(dim=1)
        if torch.max(torch.abs(norms - 1.0)).item() > 1e-3:
            raise ValueError("queue entries must be unit-norm")
        for row in emb.to(self._buffer.dtype):
            self._buffer[self._cursor] = row
            self._cursor = (self._cursor + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def snapshot(self) -> torch.Tensor:
        if self._size < self.capacity:
            return self._buffer[: self._size].clone()
        return torch.cat([self._buffer[self._cursor :], self._buffer[: self._cursor]]).clone()

    def snapshot_raw(self):
        """Raw ring buffer (capacity, dim) for serialization; pairs with
        ``load_state`` and the cursor/size from ``state()``."""
        return self._buffer.clone().numpy()

    def state(self) -> dict:
        return {"size": self._size, "cursor": self._cursor, "capacity": self.capacity, "dim": self.dim}

    def load_state(self, buffer: torch.Tensor, size: int, cursor: int) -> None:
        if tuple(buffer.shape) != (self.capacity, self.dim):
            raise ValueError(
                f"queue buffer shape {tuple(buffer.shape)} does not match "
                f"({self.capacity}, {self.dim})"
            )
        self._buffer = buffer.to(self._buffer.dtype).clone()
        self._size = int(size)
        self._cursor = int(cursor)
