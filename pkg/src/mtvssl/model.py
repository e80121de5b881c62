"""Trainable networks: shared 3D-conv stem, branch encoders, decoder, heads.

A single low-level encoder feeds two branches. The parsing branch runs its
own high-level encoder and a decoder that emits a softmax segmentation map;
the contrastive branch runs a second high-level encoder and two projection
heads (motion, appearance). Three wiring variants exist:

* ``full``          - separate high-level encoders per branch.
* ``no_kd``         - parsing branch removed entirely.
* ``task_independent`` - one high-level encoder shared by the decoder and
  both projection heads (the representation-sharing control).
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ModelError
from .seeding import derive_seed

VARIANT_FULL = "full"
VARIANT_NO_KD = "no_kd"
VARIANT_TASK_INDEPENDENT = "task_independent"
VARIANTS = (VARIANT_FULL, VARIANT_NO_KD, VARIANT_TASK_INDEPENDENT)

NORMALIZE_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    encoder_channels: tuple[int, ...] = (8, 16, 32)  # also the f_l/h split depth
    embed_dim: int = 128
    hidden_dim: int = 128
    proj_dim: int = 64
    seg_classes: int = 4
    seg_height: int = 16
    seg_width: int = 16
    decoder_grid: int = 4
    decoder_channels: int = 32

    def validate(self) -> None:
        if not self.encoder_channels:
            raise ModelError("encoder_channels must be non-empty")
        if min(self.embed_dim, self.hidden_dim, self.proj_dim) < 1:
            raise ModelError("embedding dimensions must be positive")
        if self.seg_classes < 2:
            raise ModelError("seg_classes must be >= 2")
        for size in (self.seg_height, self.seg_width):
            ratio = size / self.decoder_grid
            if ratio < 1 or 2 ** int(round(math.log2(ratio))) != ratio:
                raise ModelError(
                    f"decoder output {self.seg_height}x{self.seg_width} must be "
                    f"decoder_grid={self.decoder_grid} times a power of two"
                )
        if self.seg_height // self.decoder_grid != self.seg_width // self.decoder_grid:
            raise ModelError("decoder upsampling factor must match on both axes")


class SharedLowLevelEncoder(nn.Module):
    """3D conv stack shared by both branches; downsamples space and time.

    Inputs are standardized per clip and channel before the convolutions so
    the (large, nearly constant) background does not dominate every feature.
    The convolutions carry no bias: standardized background is ~zero, so
    bias-free ReLU stages map all-background regions to exactly zero features,
    which keeps feature maps (and CAM projections) localized on the actor.
    """

    STANDARDIZE_EPS = 1e-5

    def __init__(self, in_channels: int, channels: tuple[int, ...]):
        super().__init__()
        layers = []
        prev = in_channels
        for i, ch in enumerate(channels):
            stride = (1, 2, 2) if i == 0 else (2, 2, 2)
            layers.append(
                nn.Conv3d(prev, ch, kernel_size=3, stride=stride, padding=1, bias=False)
            )
            layers.append(nn.ReLU(inplace=True))
            prev = ch
        self.body = nn.Sequential(*layers)
        self.out_channels = prev

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 5 or x.shape[1] != self.body[0].in_channels:
            raise ModelError(
                f"expected clips (B, {self.body[0].in_channels}, T, H, W), got {tuple(x.shape)}"
            )
        mean = x.mean(dim=(2, 3, 4), keepdim=True)
        std = x.std(dim=(2, 3, 4), keepdim=True, unbiased=False)
        return self.body((x - mean) / (std + self.STANDARDIZE_EPS))


class HighLevelEncoder(nn.Module):
    """Global average pool over the feature map, then a 2-layer perceptron.

    The hidden BatchNorm keeps per-dimension variance alive; without it the
    ranking task tends to collapse onto a zero-gradient saddle where all
    clips embed to one direction.
    """

    def __init__(self, in_channels: int, hidden_dim: int, embed_dim: int, branch: str):
        super().__init__()
        self.branch = branch
        self.fc1 = nn.Linear(in_channels, hidden_dim)
        self.bn1 = nn.BatchNorm1d(hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, embed_dim)

    def forward(self, feature_map: torch.Tensor) -> torch.Tensor:
        pooled = feature_map.mean(dim=(2, 3, 4))
        return self.fc2(F.relu(self.bn1(self.fc1(pooled))))


class ParsingDecoder(nn.Module):
    """Embedding -> coarse grid -> transposed-conv upsampling -> softmax map."""

    def __init__(self, embed_dim: int, classes: int, grid: int, channels: int, out_size: tuple[int, int]):
        super().__init__()
        self.grid = grid
        self.channels = channels
        self.out_size = out_size
        self.fc = nn.Linear(embed_dim, channels * grid * grid)
        ups = []
        steps = int(round(math.log2(out_size[0] / grid)))
        for _ in range(steps):
            ups.append(nn.ConvTranspose2d(channels, channels, kernel_size=4, stride=2, padding=1))
            ups.append(nn.ReLU(inplace=True))
        self.upsample = nn.Sequential(*ups)
        self.head = nn.Conv2d(channels, classes, kernel_size=3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.fc(z)).view(-1, self.channels, self.grid, self.grid)
        x = self.head(self.upsample(x))
        return torch.softmax(x, dim=1)


class ProjectionHead(nn.Module):
    """2-layer perceptron onto the unit sphere."""

    def __init__(self, embed_dim: int, proj_dim: int, head: str):
        super().__init__()
        self.head = head
        self.fc1 = nn.Linear(embed_dim, embed_dim)
        self.bn1 = nn.BatchNorm1d(embed_dim)
        self.fc2 = nn.Linear(embed_dim, proj_dim)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        out = self.fc2(F.relu(self.bn1(self.fc1(z))))
        return F.normalize(out, dim=-1, eps=NORMALIZE_EPS)


class MultiTaskModel(nn.Module):
    """The full two-branch network for one wiring variant."""

    def __init__(self, config: ModelConfig, variant: str):
        super().__init__()
        if variant not in VARIANTS:
            raise ModelError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        config.validate()
        self.config = config
        self.variant = variant

        self.low_level = SharedLowLevelEncoder(config.in_channels, tuple(config.encoder_channels))
        feature_ch = self.low_level.out_channels
        self.contrast_encoder = HighLevelEncoder(
            feature_ch, config.hidden_dim, config.embed_dim, branch="contrastive"
        )
        if variant == VARIANT_NO_KD:
            self.prior_encoder = None
            self.decoder = None
        else:
            if variant == VARIANT_TASK_INDEPENDENT:
                self.prior_encoder = self.contrast_encoder
            else:
                self.prior_encoder = HighLevelEncoder(
                    feature_ch, config.hidden_dim, config.embed_dim, branch="prior"
                )
            self.decoder = ParsingDecoder(
                config.embed_dim,
                config.seg_classes,
                config.decoder_grid,
                config.decoder_channels,
                (config.seg_height, config.seg_width),
            )
        self.motion_head = ProjectionHead(config.embed_dim, config.proj_dim, head="motion")
        self.appearance_head = ProjectionHead(config.embed_dim, config.proj_dim, head="appearance")

    # -- forward pieces -----------------------------------------------------

    def features(self, clips: torch.Tensor) -> torch.Tensor:
        return self.low_level(clips)

    def prior_from_features(self, feature_map: torch.Tensor) -> torch.Tensor:
        if self.prior_encoder is None:
            raise ModelError(f"variant {self.variant!r} has no parsing branch")
        return self.prior_encoder(feature_map)

    def contrast_from_features(self, feature_map: torch.Tensor) -> torch.Tensor:
        return self.contrast_encoder(feature_map)

    def encode_prior(self, clips: torch.Tensor) -> torch.Tensor:
        return self.prior_from_features(self.features(clips))

    def encode_contrastive(self, clips: torch.Tensor) -> torch.Tensor:
        return self.contrast_from_features(self.features(clips))

    def decode_parsing(self, z_prior: torch.Tensor) -> torch.Tensor:
        if self.decoder is None:
            raise ModelError(f"variant {self.variant!r} has no parsing decoder")
        return self.decoder(z_prior)

    def project_motion(self, z_contrast: torch.Tensor) -> torch.Tensor:
        return self.motion_head(z_contrast)

    def project_appearance(self, z_contrast: torch.Tensor) -> torch.Tensor:
        return self.appearance_head(z_contrast)

    # -- bookkeeping ----------------------------------------------------------

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Parameters keyed by component, with shared modules listed once."""
        groups = {"low_level": list(self.low_level.parameters())}
        groups["contrast_encoder"] = list(self.contrast_encoder.parameters())
        if self.prior_encoder is not None and self.prior_encoder is not self.contrast_encoder:
            groups["prior_encoder"] = list(self.prior_encoder.parameters())
        if self.decoder is not None:
            groups["decoder"] = list(self.decoder.parameters())
        groups["motion_head"] = list(self.motion_head.parameters())
        groups["appearance_head"] = list(self.appearance_head.parameters())
        return groups


def concat_representation(z_prior: torch.Tensor | None, z_contrast: torch.Tensor | None) -> torch.Tensor:
    """Final clip representation: prior embedding first, contrastive second."""
    if z_prior is None or z_contrast is None:
        raise ModelError("both branch embeddings are required for concatenation")
    return torch.cat([z_prior, z_contrast], dim=-1)


def momentum_update(student: nn.Module, shadow: nn.Module, momentum: float) -> None:
    """shadow <- momentum * shadow + (1 - momentum) * student, elementwise."""
    if not 0.0 <= momentum <= 1.0:
        raise ModelError(f"momentum must be in [0, 1], got {momentum}")
    student_params = dict(student.named_parameters())
    shadow_params = dict(shadow.named_parameters())
    if student_params.keys() != shadow_params.keys():
        raise ModelError("student/shadow parameter names do not match")
    with torch.no_grad():
        for name, sp in student_params.items():
            tp = shadow_params[name]
            if tp.shape != sp.shape:
                raise ModelError(f"shape mismatch for {name}: {tp.shape} vs {sp.shape}")
            tp.mul_(momentum).add_(sp, alpha=1.0 - momentum)


class MomentumEncoders(nn.Module):
    """Slow-moving shadow of (low-level encoder, contrastive encoder,
    appearance head); produces the key embeddings fed to the negative queue.
    Never receives gradient."""

    def __init__(self, model: MultiTaskModel):
        super().__init__()
        self.low_level = copy.deepcopy(model.low_level)
        self.contrast_encoder = copy.deepcopy(model.contrast_encoder)
        self.appearance_head = copy.deepcopy(model.appearance_head)
        for p in self.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def embed(self, clips: torch.Tensor) -> torch.Tensor:
        return self.appearance_head(self.contrast_encoder(self.low_level(clips)))

    @torch.no_grad()
    def update(self, model: MultiTaskModel, momentum: float) -> None:
        momentum_update(model.low_level, self.low_level, momentum)
        momentum_update(model.contrast_encoder, self.contrast_encoder, momentum)
        momentum_update(model.appearance_head, self.appearance_head, momentum)


def seeded_init_(module: nn.Module, seed: int) -> None:
    """Re-initialize parameters from a dedicated generator (He-style fan-in
    scaling for weights, zeros for biases). Keeps initialization independent
    of global RNG state and of which sibling modules exist."""
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFF)
    for name, param in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        with torch.no_grad():
            if param.dim() <= 1:
                if name.endswith(".weight") or name == "weight":  # norm-layer scale
                    param.fill_(1.0)
                else:
                    param.zero_()
            else:
                fan_in = param.shape[1] * math.prod(param.shape[2:])
                std = math.sqrt(2.0 / max(fan_in, 1))
                param.normal_(0.0, std, generator=gen)


def build_model(config: ModelConfig, variant: str, seed: int) -> MultiTaskModel:
    """Construct and deterministically initialize one variant.

    Each component draws from its own derived seed, so the shared low-level
    encoder (and every other component present) starts from identical weights
    across variants built with the same seed.
    """
    model = MultiTaskModel(config, variant)
    seeded_init_(model.low_level, derive_seed(seed, "low_level"))
    seeded_init_(model.contrast_encoder, derive_seed(seed, "contrast_encoder"))
    if model.prior_encoder is not None and model.prior_encoder is not model.contrast_encoder:
        seeded_init_(model.prior_encoder, derive_seed(seed, "prior_encoder"))
    if model.decoder is not None:
        seeded_init_(model.decoder, derive_seed(seed, "decoder"))
    seeded_init_(model.motion_head, derive_seed(seed, "motion_head"))
    seeded_init_(model.appearance_head, derive_seed(seed, "appearance_head"))
    return model


def build_momentum(model: MultiTaskModel) -> MomentumEncoders:
    return MomentumEncoders(model)
