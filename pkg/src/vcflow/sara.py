"""Subject-agnostic redistribution adapter and its training objectives.

Learned register tokens are appended to the semantic token sequence, a
residual self-attention block (identity at init) mixes the expanded
sequence, and the split back into original/appended groups yields the
semantic tokens and the subject tokens. Three losses shape the split:
contrastive alignment of semantic tokens with stimulus embeddings, a
moving-window cross-subject InfoNCE, and a subject-identity cross-entropy
on the register outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .config import SaraWeights
from .errors import (
    LabelOutOfRange,
    NegativeWeight,
    ShapeMismatch,
    SingleSubject,
    ZeroNormRow,
)
from .hcam import MixSpec, bimixco_loss, pool_tokens


@dataclass
class RedistributionOutput:
    t_sem: torch.Tensor   # (B, S, L, C)
    t_subj: torch.Tensor  # (B, S, L_redis, C)

    def validate(self, l_tokens: int, l_redis: int) -> None:
        if self.t_sem.shape[-2] != l_tokens:
            raise ShapeMismatch("t_sem token count must equal the input token count")
        if self.t_subj.shape[-2] != l_redis:
            raise ShapeMismatch("t_subj token count must equal the register count")
        if not (torch.isfinite(self.t_sem).all() and torch.isfinite(self.t_subj).all()):
            raise ShapeMismatch("redistribution produced non-finite tokens")


def expand_tokens(f: torch.Tensor, registers: torch.Tensor) -> torch.Tensor:
    """Append broadcast register tokens along the token axis."""
    if registers.dim() != 2 or registers.shape[0] < 1:
        raise ShapeMismatch("registers must be a (L_redis, C) array with L_redis >= 1")
    if f.shape[-1] != registers.shape[-1]:
        raise ShapeMismatch(
            f"channel mismatch: tokens have {f.shape[-1]}, registers {registers.shape[-1]}"
        )
    expanded = registers.expand(*f.shape[:-2], *registers.shape)
    return torch.cat([f, expanded], dim=-2)


class RedistributionAdapter(nn.Module):
    """Token expansion plus a residual mixing block, split into two groups.

    The attention and MLP output projections start at zero, so a fresh
    adapter is the identity: semantic tokens equal the inputs and subject
    tokens equal the registers.
    """

    def __init__(self, l_tokens: int, c_clip: int, l_redis: int = 4,
                 mlp_ratio: int = 2, use_bias: bool = True):
        super().__init__()
        self.l_tokens, self.l_redis = l_tokens, l_redis
        self.registers = nn.Parameter(torch.randn(l_redis, c_clip) * 0.02)
        self.norm1 = nn.LayerNorm(c_clip, bias=use_bias)
        self.q = nn.Linear(c_clip, c_clip, bias=use_bias)
        self.k = nn.Linear(c_clip, c_clip, bias=use_bias)
        self.v = nn.Linear(c_clip, c_clip, bias=use_bias)
        self.attn_out = nn.Linear(c_clip, c_clip, bias=use_bias)
        self.norm2 = nn.LayerNorm(c_clip, bias=use_bias)
        self.mlp_in = nn.Linear(c_clip, mlp_ratio * c_clip, bias=use_bias)
        self.mlp_out = nn.Linear(mlp_ratio * c_clip, c_clip, bias=use_bias)
        for layer in (self.attn_out, self.mlp_out):
            nn.init.zeros_(layer.weight)
            if layer.bias is not None:
                nn.init.zeros_(layer.bias)

    def expand(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[-2] != self.l_tokens:
            raise ShapeMismatch(f"expected {self.l_tokens} tokens, got {f.shape[-2]}")
        return expand_tokens(f, self.registers)

    def redistribute(self, f_exp: torch.Tensor) -> RedistributionOutput:
        total = self.l_tokens + self.l_redis
        if f_exp.shape[-2] != total:
            raise ShapeMismatch(f"expected {total} expanded tokens, got {f_exp.shape[-2]}")
        x = self.norm1(f_exp)
        scale = x.shape[-1] ** 0.5
        weights = torch.softmax(self.q(x) @ self.k(x).transpose(-1, -2) / scale, dim=-1)
        f_exp = f_exp + self.attn_out(weights @ self.v(x))
        f_exp = f_exp + self.mlp_out(F.gelu(self.mlp_in(self.norm2(f_exp))))
        out = RedistributionOutput(
            t_sem=f_exp[..., : self.l_tokens, :],
            t_subj=f_exp[..., self.l_tokens :, :],
        )
        out.validate(self.l_tokens, self.l_redis)
        return out

    def forward(self, f: torch.Tensor) -> RedistributionOutput:
        return self.redistribute(self.expand(f))


class SubjectClassifier(nn.Module):
    """Linear readout from pooled subject tokens to subject logits."""

    def __init__(self, c_clip: int, n_subjects: int):
        super().__init__()
        self.linear = nn.Linear(c_clip, n_subjects)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.linear(pooled)


def align_loss(t_sem: torch.Tensor, f_clip: torch.Tensor, spec: MixSpec) -> torch.Tensor:
    """Contrastive alignment of semantic tokens with stimulus embeddings.

    Both tensors are mean-pooled over tokens and flattened so the contrast
    batch runs over every (batch, subject) element.
    """
    if t_sem.shape != f_clip.shape:
        raise ShapeMismatch(
            f"token shapes differ: {tuple(t_sem.shape)} vs {tuple(f_clip.shape)}"
        )
    return bimixco_loss(pool_tokens(t_sem), pool_tokens(f_clip), spec)


def generic_loss_terms(t_sem: torch.Tensor, tau_g: float) -> list[torch.Tensor]:
    """The 2(S-1) directional InfoNCE terms over adjacent subject pairs."""
    if t_sem.dim() != 4:
        raise ShapeMismatch("expected (B, S, L, C) semantic tokens")
    subjects = t_sem.shape[1]
    if subjects < 2:
        raise SingleSubject("cross-subject loss needs at least two subjects")
    if not tau_g > 0:
        raise NegativeWeight("tau_g must be positive")
    pooled = t_sem.mean(dim=2)  # (B, S, C)
    norms = pooled.norm(dim=-1)
    if norms.min() < 1e-12:
        raise ZeroNormRow("pooled semantic tokens contain a zero-norm row")
    normed = pooled / norms[..., None]

    def info_nce(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        logits = a @ b.T / tau_g
        labels = torch.arange(a.shape[0])
        return F.cross_entropy(logits, labels)

    terms: list[torch.Tensor] = []
    for i in range(1, subjects):
        a, b = normed[:, i - 1], normed[:, i]
        terms.append(info_nce(a, b))
        terms.append(info_nce(b, a))
    return terms


def generic_loss(t_sem: torch.Tensor, tau_g: float) -> torch.Tensor:
    """Moving-window symmetric InfoNCE across adjacent subjects."""
    terms = generic_loss_terms(t_sem, tau_g)
    return torch.stack(terms).sum() / len(terms)


def subject_loss(t_subj: torch.Tensor, subject_labels: torch.Tensor,
                 classifier: SubjectClassifier) -> torch.Tensor:
    """Cross-entropy of the subject classifier on pooled subject tokens."""
    if t_subj.dim() != 4:
        raise ShapeMismatch("expected (B, S, L_redis, C) subject tokens")
    if subject_labels.shape != t_subj.shape[:2]:
        raise ShapeMismatch("subject labels must be shaped (B, S)")
    n_classes = classifier.linear.out_features
    if subject_labels.numel() and (
        subject_labels.min() < 0 or subject_labels.max() >= n_classes
    ):
        raise LabelOutOfRange(f"subject labels must lie in [0, {n_classes})")
    logits = classifier(t_subj.mean(dim=2))
    return F.cross_entropy(
        logits.reshape(-1, n_classes), subject_labels.reshape(-1).long()
    )


def sara_total(align: torch.Tensor | float, subj: torch.Tensor | float,
               generic: torch.Tensor | float, w: SaraWeights):
    """Weighted combination of the three adapter objectives."""
    if min(w.lambda_align, w.lambda_subj, w.lambda_generic) < 0:
        raise NegativeWeight("loss weights must be nonnegative")
    return w.lambda_align * align + w.lambda_subj * subj + w.lambda_generic * generic
