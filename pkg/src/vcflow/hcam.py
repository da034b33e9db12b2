"""Hierarchical alignment module: encoders, prior transform, fusion, losses.

A full-brain encoder maps the packed surface image to a latent vector; one
encoder per stream (early / ventral / dorsal) maps its voxel group into
the same latent space. A residual token-mixing prior lifts the brain
latent into stimulus-embedding token space, cross-attention fuses each
stream with those tokens, and bidirectional mixed-sample contrastive
losses align everything with the stimulus embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import BadPermIndex, ShapeMismatch, ZeroNormRow

STREAMS = ("early", "ventral", "dorsal")


@dataclass
class MixSpec:
    """Mixing recipe for one contrastive batch.

    perm may repeat indices (each row picks an arbitrary partner); lam are
    the convex mixing coefficients; temperature scales the logits.
    """

    perm: torch.Tensor
    lam: torch.Tensor
    temperature: float

    def validate(self, n: int) -> None:
        if self.perm.shape != (n,) or self.lam.shape != (n,):
            raise BadPermIndex(f"spec sized for {self.perm.shape[0]}, batch is {n}")
        if self.perm.numel() and (self.perm.min() < 0 or self.perm.max() >= n):
            raise BadPermIndex("perm entries must lie in [0, batch)")
        if self.lam.numel() and (self.lam.min() < 0 or self.lam.max() > 1):
            raise BadPermIndex("lambda entries must lie in [0, 1]")
        if not self.temperature > 0:
            raise BadPermIndex("temperature must be positive")


def sample_mix_spec(n: int, temperature: float, rng: np.random.Generator,
                    beta_a: float = 0.15, beta_b: float = 0.15,
                    dtype: torch.dtype = torch.float32) -> MixSpec:
    perm = torch.from_numpy(rng.integers(0, n, size=n))
    lam = torch.from_numpy(rng.beta(beta_a, beta_b, size=n)).to(dtype)
    return MixSpec(perm=perm, lam=lam, temperature=temperature)


def identity_mix_spec(n: int, temperature: float,
                      dtype: torch.dtype = torch.float32) -> MixSpec:
    return MixSpec(perm=torch.arange(n), lam=torch.ones(n, dtype=dtype),
                   temperature=temperature)


def mixco_mix(y: torch.Tensor, spec: MixSpec) -> torch.Tensor:
    """Row c becomes lam_c * y[c] + (1 - lam_c) * y[perm[c]]."""
    spec.validate(y.shape[0])
    lam = spec.lam.to(y.dtype).view(-1, *([1] * (y.dim() - 1)))
    return lam * y + (1 - lam) * y[spec.perm]


def _normalize_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=1)
    if norms.numel() and norms.min() < 1e-12:
        raise ZeroNormRow(f"{what} contains a zero-norm row")
    return x / norms[:, None]


def bimixco_loss(e_mixed: torch.Tensor, e_target: torch.Tensor,
                 spec: MixSpec) -> torch.Tensor:
    """Bidirectional mixed-sample contrastive loss over cosine logits.

    Four terms: mixed->target rows weighted by lam at the identity column
    and by (1 - lam) at the partner column, plus the two transposed terms,
    the last summing over every row whose partner is the anchor column.
    """
    if e_mixed.shape != e_target.shape or e_mixed.dim() != 2:
        raise ShapeMismatch(
            f"expected matching 2-D embeddings, got {tuple(e_mixed.shape)} "
            f"vs {tuple(e_target.shape)}"
        )
    n = e_mixed.shape[0]
    spec.validate(n)
    lam = spec.lam.to(e_mixed.dtype)
    perm = spec.perm
    logits = _normalize_rows(e_mixed, "e_mixed") @ _normalize_rows(
        e_target, "e_target"
    ).T / spec.temperature
    ls_row = F.log_softmax(logits, dim=1)
    ls_col = F.log_softmax(logits, dim=0)
    idx = torch.arange(n)
    term1 = (lam * ls_row[idx, idx]).sum()
    term2 = ((1 - lam) * ls_row[idx, perm]).sum()
    term3 = (lam * ls_col[idx, idx]).sum()
    term4 = ((1 - lam[perm]) * ls_col[idx, perm]).sum()
    return -(term1 + term2 + term3 + term4) / (2 * n)


def prior_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and target embedding tokens."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prior shapes differ: {tuple(pred.shape)} vs "
                            f"{tuple(target.shape)}")
    return ((pred - target) ** 2).mean()


def pool_tokens(f: torch.Tensor) -> torch.Tensor:
    """Mean over the token axis of (..., L, C), flattened to (rows, C)."""
    pooled = f.mean(dim=-2)
    return pooled.reshape(-1, pooled.shape[-1])


def hierarchical_align_loss(f_early: torch.Tensor, f_ventral: torch.Tensor,
                            f_brain: torch.Tensor, clip_low: torch.Tensor,
                            clip_high: torch.Tensor, spec: MixSpec) -> torch.Tensor:
    """Contrastive alignment of the fused streams with stimulus embeddings.

    Early-stream tokens align to the low-layer embedding; ventral and brain
    tokens align to the final-layer embedding. Targets shaped (B, L, C) are
    broadcast over the subject axis before pooling.
    """
    subjects = f_early.shape[1]

    def expand(target: torch.Tensor) -> torch.Tensor:
        if target.dim() == 3:
            target = target[:, None].expand(-1, subjects, -1, -1)
        return target

    loss = bimixco_loss(pool_tokens(f_early), pool_tokens(expand(clip_low)), spec)
    loss = loss + bimixco_loss(pool_tokens(f_ventral), pool_tokens(expand(clip_high)), spec)
    loss = loss + bimixco_loss(pool_tokens(f_brain), pool_tokens(expand(clip_high)), spec)
    return loss


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, use_bias: bool = True):
        super().__init__()
        if d_model % n_heads:
            raise ShapeMismatch("n_heads must divide d_model")
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model, bias=use_bias)
        self.proj = nn.Linear(d_model, d_model, bias=use_bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        *lead, tokens, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        head = d // self.n_heads

        def heads(t):
            return t.reshape(*lead, tokens, self.n_heads, head).transpose(-3, -2)

        q, k, v = heads(q), heads(k), heads(v)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(head), dim=-1)
        out = (attn @ v).transpose(-3, -2).reshape(*lead, tokens, d)
        return self.proj(out)


class EncoderBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int, mlp_ratio: int, use_bias: bool):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model, bias=use_bias)
        self.attn = SelfAttention(d_model, n_heads, use_bias)
        self.norm2 = nn.LayerNorm(d_model, bias=use_bias)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, mlp_ratio * d_model, bias=use_bias),
            nn.GELU(),
            nn.Linear(mlp_ratio * d_model, d_model, bias=use_bias),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class BrainEncoder(nn.Module):
    """Patch-token transformer over the packed surface image -> latent vector."""

    def __init__(self, h_input: int, w_input: int, d_latent: int,
                 patch_size: int = 8, n_layers: int = 2, n_heads: int = 2,
                 mlp_ratio: int = 2, use_bias: bool = True):
        super().__init__()
        if h_input % patch_size or w_input % patch_size:
            raise ShapeMismatch("patch_size must divide the input grid")
        self.h_input, self.w_input, self.patch_size = h_input, w_input, patch_size
        n_tokens = (h_input // patch_size) * (w_input // patch_size)
        self.patch_proj = nn.Linear(patch_size * patch_size, d_latent, bias=use_bias)
        self.pos = nn.Parameter(torch.zeros(n_tokens, d_latent))
        self.blocks = nn.ModuleList(
            EncoderBlock(d_latent, n_heads, mlp_ratio, use_bias)
            for _ in range(n_layers)
        )
        self.out = nn.Linear(d_latent, d_latent, bias=use_bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2:] != (self.h_input, self.w_input):
            raise ShapeMismatch(
                f"expected {self.h_input}x{self.w_input} grid, got {tuple(x.shape[-2:])}"
            )
        lead = x.shape[:-2]
        p = self.patch_size
        gh, gw = self.h_input // p, self.w_input // p
        patches = (
            x.reshape(*lead, gh, p, gw, p)
            .transpose(-3, -2)
            .reshape(*lead, gh * gw, p * p)
        )
        tokens = self.patch_proj(patches) + self.pos
        for block in self.blocks:
            tokens = block(tokens)
        return self.out(tokens.mean(dim=-2))


class StreamEncoder(nn.Module):
    """Voxel-group MLP into the shared latent space."""

    def __init__(self, v_group: int, d_latent: int, hidden: int = 64,
                 use_bias: bool = True):
        super().__init__()
        self.v_group = v_group
        self.net = nn.Sequential(
            nn.Linear(v_group, hidden, bias=use_bias),
            nn.GELU(),
            nn.Linear(hidden, d_latent, bias=use_bias),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.v_group:
            raise ShapeMismatch(f"expected {self.v_group} voxels, got {x.shape[-1]}")
        return self.net(x)


class PriorNetwork(nn.Module):
    """Residual token-mixing transform from the brain latent to token space."""

    def __init__(self, d_latent: int, l_clip: int, c_clip: int,
                 n_blocks: int = 2, use_bias: bool = True):
        super().__init__()
        self.l_clip, self.c_clip = l_clip, c_clip
        self.lift = nn.Linear(d_latent, l_clip * c_clip, bias=use_bias)
        self.token_mix = nn.ModuleList(
            nn.Linear(l_clip, l_clip, bias=False) for _ in range(n_blocks)
        )
        self.channel_mix = nn.ModuleList(
            nn.Linear(c_clip, c_clip, bias=use_bias) for _ in range(n_blocks)
        )

    def forward(self, e_brain: torch.Tensor) -> torch.Tensor:
        tokens = self.lift(e_brain).reshape(*e_brain.shape[:-1], self.l_clip, self.c_clip)
        for tok, ch in zip(self.token_mix, self.channel_mix):
            mixed = tok(tokens.transpose(-1, -2)).transpose(-1, -2)
            tokens = tokens + ch(torch.tanh(mixed))
        return tokens


class CrossAttentionFuser(nn.Module):
    """Queries from brain tokens, keys/values projected from a stream latent."""

    def __init__(self, d_latent: int, c_clip: int, attn_dim: int = 16,
                 n_kv_tokens: int = 4, use_bias: bool = True):
        super().__init__()
        self.attn_dim, self.n_kv = attn_dim, n_kv_tokens
        self.q = nn.Linear(c_clip, attn_dim, bias=use_bias)
        self.kv = nn.Linear(d_latent, 2 * n_kv_tokens * attn_dim, bias=use_bias)
        self.out = nn.Linear(attn_dim, c_clip, bias=use_bias)

    def forward(self, e_stream: torch.Tensor, f_brain: torch.Tensor,
                return_weights: bool = False):
        if e_stream.shape[:-1] != f_brain.shape[:-2]:
            raise ShapeMismatch("stream latent and brain tokens disagree on batch shape")
        q = self.q(f_brain)  # (..., L, A)
        kv = self.kv(e_stream).reshape(*e_stream.shape[:-1], self.n_kv, 2, self.attn_dim)
        k, v = kv[..., 0, :], kv[..., 1, :]
        weights = torch.softmax(
            q @ k.transpose(-1, -2) / math.sqrt(self.attn_dim), dim=-1
        )
        fused = self.out(weights @ v)
        return (fused, weights) if return_weights else fused


@dataclass
class HierarchicalEmbeddings:
    """The four latent vectors and their fused token-space forms."""

    e_brain: torch.Tensor
    e_early: torch.Tensor
    e_ventral: torch.Tensor
    e_dorsal: torch.Tensor
    f_brain: torch.Tensor
    f_early: torch.Tensor
    f_ventral: torch.Tensor
    f_dorsal: torch.Tensor

    def validate(self) -> None:
        d = self.e_brain.shape[-1]
        for name in ("e_early", "e_ventral", "e_dorsal"):
            if getattr(self, name).shape[-1] != d:
                raise ShapeMismatch(f"{name} disagrees on latent width")
        token_shape = self.f_brain.shape[-2:]
        for name in ("f_early", "f_ventral", "f_dorsal"):
            if getattr(self, name).shape[-2:] != token_shape:
                raise ShapeMismatch(f"{name} disagrees on token shape")
        for name in ("e_brain", "e_early", "e_ventral", "e_dorsal",
                     "f_brain", "f_early", "f_ventral", "f_dorsal"):
            if not torch.isfinite(getattr(self, name)).all():
                raise ShapeMismatch(f"{name} contains non-finite values")


class HcamModel(nn.Module):
    """Bundles the brain encoder, stream encoders, prior and fusers."""

    def __init__(self, h_input: int, w_input: int, group_sizes: dict[str, int],
                 d_latent: int, l_clip: int, c_clip: int, patch_size: int = 8,
                 vit_layers: int = 2, vit_heads: int = 2, mlp_ratio: int = 2,
                 stream_hidden: int = 64, prior_blocks: int = 2,
                 attn_dim: int = 16, n_kv_tokens: int = 4, use_bias: bool = True):
        super().__init__()
        self.brain = BrainEncoder(h_input, w_input, d_latent, patch_size,
                                  vit_layers, vit_heads, mlp_ratio, use_bias)
        self.streams = nn.ModuleDict({
            s: StreamEncoder(group_sizes[s], d_latent, stream_hidden, use_bias)
            for s in STREAMS
        })
        self.prior = PriorNetwork(d_latent, l_clip, c_clip, prior_blocks, use_bias)
        self.fusers = nn.ModuleDict({
            s: CrossAttentionFuser(d_latent, c_clip, attn_dim, n_kv_tokens, use_bias)
            for s in STREAMS
        })

    def encode_brain(self, x_input: torch.Tensor) -> torch.Tensor:
        return self.brain(x_input)

    def encode_stream(self, x_group: torch.Tensor, stream: str) -> torch.Tensor:
        return self.streams[stream](x_group)

    def forward(self, x_input: torch.Tensor, x_groups: dict[str, torch.Tensor],
                f_brain_override: torch.Tensor | None = None) -> HierarchicalEmbeddings:
        e_brain = self.encode_brain(x_input)
        e = {s: self.encode_stream(x_groups[s], s) for s in STREAMS}
        f_brain = self.prior(e_brain)
        fusion_source = f_brain if f_brain_override is None else f_brain_override
        f = {s: self.fusers[s](e[s], fusion_source) for s in STREAMS}
        return HierarchicalEmbeddings(
            e_brain=e_brain, e_early=e["early"], e_ventral=e["ventral"],
            e_dorsal=e["dorsal"], f_brain=f_brain, f_early=f["early"],
            f_ventral=f["ventral"], f_dorsal=f["dorsal"],
        )
