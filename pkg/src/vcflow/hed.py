"""Explicit decoding heads, their losses, and the progressive weight schedule.

The ventral tokens drive caption generation and category classification,
the early tokens drive binary segmentation, and the dorsal tokens are
expanded along a frame axis and regressed onto blurred-video latents.
Each loss weight follows a cyclic 1 -> 10 -> 1 schedule over its own
offset window so no single task dominates an epoch.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import HedWeights, ScheduleSpec
from .errors import (
    BadBatchIndex,
    LabelOutOfRange,
    NegativeWeight,
    NonBinaryMask,
    ShapeMismatch,
    TokenOutOfVocab,
    UntrainedHeads,
)

LOSS_NAMES = ("caption", "cls", "seg", "motion")


def progressive_weight(epoch: int, batch: int, spec: ScheduleSpec) -> float:
    """Cyclic loss weight: 1 at the window edges, peaking at 10 mid-period.

    Outside the active window [start, start + period) the weight is
    exactly 1; inside, w = 1 + 9 * |sin(pi * C / T)| where C counts batches
    since the window opened and T is the batch count of a full period.
    """
    spec.validate()
    if epoch < 0 or batch < 0:
        raise BadBatchIndex("epoch and batch must be nonnegative")
    if batch >= spec.batches_per_epoch:
        raise BadBatchIndex(
            f"batch {batch} outside epoch of {spec.batches_per_epoch} batches"
        )
    if not spec.start_epoch <= epoch < spec.start_epoch + spec.period_epochs:
        return 1.0
    c = (epoch - spec.start_epoch) * spec.batches_per_epoch + batch
    return 1.0 + 9.0 * abs(math.sin(math.pi * c / spec.total_batches))


def default_schedules(period_epochs: int, batches_per_epoch: int
                      ) -> dict[str, ScheduleSpec]:
    """One schedule per head, with staggered start offsets of k*P/4."""
    return {
        name: ScheduleSpec(
            start_epoch=round(k * period_epochs / 4),
            period_epochs=period_epochs,
            batches_per_epoch=batches_per_epoch,
        )
        for k, name in enumerate(LOSS_NAMES)
    }


class CaptionHead(nn.Module):
    """Teacher-forced autoregressive token head over pooled ventral tokens."""

    def __init__(self, c_clip: int, vocab_size: int, max_len: int,
                 hidden: int = 32, use_bias: bool = True):
        super().__init__()
        self.vocab_size = vocab_size
        self.token_embed = nn.Embedding(vocab_size, hidden)
        self.start = nn.Parameter(torch.zeros(hidden))
        self.pos = nn.Parameter(torch.zeros(max_len, hidden))
        self.ctx = nn.Linear(c_clip, hidden, bias=use_bias)
        self.mlp = nn.Sequential(
            nn.Linear(hidden, hidden, bias=use_bias),
            nn.GELU(),
            nn.Linear(hidden, vocab_size, bias=use_bias),
        )

    def forward(self, context: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """context (B, S, C), tokens (B, T) -> logits (B, S, T, vocab)."""
        b, t = tokens.shape
        prev = self.token_embed(tokens[:, :-1]) if t > 1 else tokens.new_zeros(
            (b, 0, self.start.shape[0]), dtype=self.start.dtype
        )
        inputs = torch.cat([self.start.expand(b, 1, -1), prev], dim=1) + self.pos[:t]
        hidden = inputs[:, None] + self.ctx(context)[:, :, None]
        return self.mlp(hidden)


def caption_loss(f_ventral: torch.Tensor, caption_tokens: torch.Tensor,
                 caption_lens: torch.Tensor, head: CaptionHead) -> torch.Tensor:
    """Mean per-token cross-entropy under teacher forcing; pads are masked."""
    if caption_tokens.min() < 0 or caption_tokens.max() >= head.vocab_size:
        raise TokenOutOfVocab(
            f"caption ids must lie in [0, {head.vocab_size})"
        )
    logits = head(f_ventral.mean(dim=-2), caption_tokens.long())
    b, s, t, vocab = logits.shape
    targets = caption_tokens.long()[:, None, :].expand(b, s, t)
    losses = F.cross_entropy(
        logits.reshape(-1, vocab), targets.reshape(-1), reduction="none"
    ).reshape(b, s, t)
    mask = (
        torch.arange(t)[None, :] < caption_lens[:, None]
    )[:, None, :].expand(b, s, t)
    return losses[mask].mean()


class ClassificationHead(nn.Module):
    def __init__(self, c_clip: int, k_cls: int, use_bias: bool = True):
        super().__init__()
        self.linear = nn.Linear(c_clip, k_cls, bias=use_bias)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.linear(pooled)


def cls_loss(f_ventral: torch.Tensor, class_label: torch.Tensor,
             head: ClassificationHead) -> torch.Tensor:
    """Softmax cross-entropy over categories from mean-pooled ventral tokens."""
    k = head.linear.out_features
    if class_label.min() < 0 or class_label.max() >= k:
        raise LabelOutOfRange(f"class labels must lie in [0, {k})")
    logits = head(f_ventral.mean(dim=-2))
    b, s = logits.shape[:2]
    targets = class_label.long()[:, None].expand(b, s)
    return F.cross_entropy(logits.reshape(-1, k), targets.reshape(-1))


class SegmentationHead(nn.Module):
    """Convolution-free token-to-grid projection emitting per-pixel logits."""

    def __init__(self, l_clip: int, c_clip: int, seg_size: int,
                 use_bias: bool = True):
        super().__init__()
        self.seg_size = seg_size
        self.linear = nn.Linear(l_clip * c_clip, seg_size * seg_size, bias=use_bias)

    def forward(self, f_early: torch.Tensor) -> torch.Tensor:
        flat = f_early.reshape(*f_early.shape[:-2], -1)
        return self.linear(flat).reshape(
            *f_early.shape[:-2], self.seg_size, self.seg_size
        )


def seg_loss(f_early: torch.Tensor, seg_mask: torch.Tensor,
             head: SegmentationHead) -> torch.Tensor:
    """Per-pixel binary cross-entropy against the stimulus mask."""
    mask = seg_mask.to(f_early.dtype)
    if not torch.logical_or(mask == 0, mask == 1).all():
        raise NonBinaryMask("segmentation mask must be strictly 0/1")
    logits = head(f_early)
    b, s = logits.shape[:2]
    target = mask[:, None].expand(b, s, *mask.shape[-2:])
    return F.binary_cross_entropy_with_logits(logits, target)


class MotionProjector(nn.Module):
    """Per-frame learned channel maps expanding tokens along a frame axis.

    Initialized to identity so a single frame reproduces the input.
    """

    def __init__(self, frame_count: int, c_clip: int):
        super().__init__()
        if frame_count < 1:
            raise ShapeMismatch("frame_count must be >= 1")
        self.frame_count = frame_count
        eye = torch.eye(c_clip).expand(frame_count, c_clip, c_clip)
        self.weight = nn.Parameter(eye.clone())
        self.bias = nn.Parameter(torch.zeros(frame_count, c_clip))

    def forward(self, f_dorsal: torch.Tensor) -> torch.Tensor:
        """(B, S, L, C) -> (B, F, S, L, C)."""
        if f_dorsal.dim() != 4:
            raise ShapeMismatch("expected (B, S, L, C) dorsal tokens")
        out = torch.einsum("bslc,fdc->bfsld", f_dorsal, self.weight)
        return out + self.bias[None, :, None, None, :]


def motion_project(f_dorsal: torch.Tensor, projector: MotionProjector) -> torch.Tensor:
    return projector(f_dorsal)


class LatentHead(nn.Module):
    """Flattened tokens -> blurred-video latent grid, applied per frame.

    One hidden layer gives the head enough capacity to place moving
    content; a purely linear map can only interpolate around a static
    template.
    """

    def __init__(self, l_clip: int, c_clip: int, latent_channels: int,
                 latent_size: int, hidden: int = 128, use_bias: bool = True):
        super().__init__()
        self.latent_shape = (latent_channels, latent_size, latent_size)
        self.net = nn.Sequential(
            nn.Linear(l_clip * c_clip, hidden, bias=use_bias),
            nn.GELU(),
            nn.Linear(hidden, latent_channels * latent_size * latent_size,
                      bias=use_bias),
        )

    def forward(self, f_frames: torch.Tensor) -> torch.Tensor:
        """(B, F, S, L, C) -> (B, F, S, C_lat, h, w)."""
        flat = f_frames.reshape(*f_frames.shape[:-2], -1)
        return self.net(flat).reshape(*f_frames.shape[:-2], *self.latent_shape)


def motion_loss(f_dorsal_frames: torch.Tensor, blurry_latent: torch.Tensor,
                head: LatentHead) -> torch.Tensor:
    """Mean squared error between projected frame features and VAE latents."""
    pred = head(f_dorsal_frames)  # (B, F, S, C_lat, h, w)
    if blurry_latent.shape[0] != pred.shape[0] or blurry_latent.shape[1:] != (
        pred.shape[1], *pred.shape[3:]
    ):
        raise ShapeMismatch(
            f"latent targets {tuple(blurry_latent.shape)} do not match "
            f"predictions {tuple(pred.shape)}"
        )
    target = blurry_latent[:, :, None].expand_as(pred)
    return ((pred - target) ** 2).mean()


def hed_total(losses: dict[str, torch.Tensor], weights: HedWeights,
              schedules: dict[str, ScheduleSpec], epoch: int, batch: int):
    """Schedule-modulated weighted sum; returns (total, per-loss weights)."""
    lam = {
        "caption": weights.lambda_caption,
        "cls": weights.lambda_cls,
        "seg": weights.lambda_seg,
        "motion": weights.lambda_motion,
    }
    if min(lam.values()) < 0:
        raise NegativeWeight("loss weights must be nonnegative")
    total = 0.0
    applied: dict[str, float] = {}
    for name in LOSS_NAMES:
        w = progressive_weight(epoch, batch, schedules[name])
        applied[name] = w
        total = total + lam[name] * w * losses[name]
    return total, applied


class HedModel(nn.Module):
    """All four heads plus the frame projector and a persisted trained flag."""

    def __init__(self, l_clip: int, c_clip: int, vocab_size: int, max_len: int,
                 k_cls: int, seg_size: int, frame_count: int,
                 latent_channels: int, latent_size: int, caption_dim: int = 32,
                 use_bias: bool = True):
        super().__init__()
        self.caption = CaptionHead(c_clip, vocab_size, max_len, caption_dim, use_bias)
        self.cls = ClassificationHead(c_clip, k_cls, use_bias)
        self.seg = SegmentationHead(l_clip, c_clip, seg_size, use_bias)
        self.projector = MotionProjector(frame_count, c_clip)
        self.latent = LatentHead(l_clip, c_clip, latent_channels, latent_size,
                                 use_bias=use_bias)
        self.register_buffer("trained_flag", torch.zeros(1))

    @property
    def is_trained(self) -> bool:
        return bool(self.trained_flag.item() > 0)

    def mark_trained(self) -> None:
        self.trained_flag.fill_(1.0)

    def predict_latents(self, f_dorsal_frames: torch.Tensor) -> torch.Tensor:
        return self.latent(f_dorsal_frames)

    def reconstruct(self, f_ventral: torch.Tensor, f_early: torch.Tensor,
                    f_dorsal_frames: torch.Tensor, vae) -> np.ndarray:
        """Decode predicted latents into (B, S, F, H, W, 1) grayscale clips.

        f_ventral and f_early ride along for interface completeness; the
        pixel path runs through the dorsal frame latents and the fixed VAE
        stub inverse.
        """
        if not self.is_trained:
            raise UntrainedHeads("decode heads have not been trained")
        with torch.no_grad():
            latents = self.predict_latents(f_dorsal_frames)
        latents_np = latents.detach().double().numpy()  # (B, F, S, C, h, w)
        frames = vae.decode(np.moveaxis(latents_np, 1, 2))  # (B, S, F, H, W)
        return frames[..., None]
