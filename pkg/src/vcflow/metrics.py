"""Reconstruction evaluation: trial-based classification, SSIM, PSNR, CLIP-pcc.

The N-way top-K protocol draws fresh distractor labels per (sample,
repeat) from counter-based RNG streams, so reports are bit-identical for
a given seed no matter how samples are scheduled. Pseudo-labels come from
the stub classifier applied to the ground-truth content, mirroring the
predicted-versus-ground-truth trial comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import FORMAT_VERSION, TrialConfig
from .errors import (
    NWayExceedsClasses,
    PairingMismatch,
    ShapeMismatch,
    SingleFrame,
    UnsupportedVersion,
    ZeroNormRow,
)

PSNR_CAP_DB = 100.0
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5


def _trial_rng(seed: int, sample: int, repeat: int, n_way: int,
               stream_tag: int) -> np.random.Generator:
    bitgen = np.random.Philox(
        counter=[repeat, sample, n_way, 0],
        key=[seed & 0xFFFFFFFFFFFFFFFF, stream_tag],
    )
    return np.random.Generator(bitgen)


def nway_topk_trial(scores: np.ndarray, gt_label: int, n_way: int, top_k: int,
                    rng: np.random.Generator) -> bool:
    """One trial: draw distractors, rank candidates, check the top-K set."""
    k_cls = scores.shape[0]
    others = rng.choice(k_cls - 1, size=n_way - 1, replace=False)
    others[others >= gt_label] += 1
    candidates = np.concatenate([[gt_label], others])
    # stable rank: descending score, ties broken by ascending label index
    order = np.lexsort((candidates, -scores[candidates]))
    return gt_label in candidates[order[:top_k]]


def nway_topk_accuracy(pred_class_probs: np.ndarray, gt_labels: np.ndarray,
                       cfg: TrialConfig, stream_tag: int = 0,
                       return_per_sample: bool = False):
    """Mean accuracy of the repeated N-way top-K identification protocol."""
    cfg.validate()
    probs = np.asarray(pred_class_probs, dtype=np.float64)
    labels = np.asarray(gt_labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ShapeMismatch("need (N, K) scores and (N,) labels")
    k_cls = probs.shape[1]
    if cfg.n_way > k_cls:
        raise NWayExceedsClasses(f"{cfg.n_way}-way task needs >= {cfg.n_way} classes")
    if labels.size and (labels.min() < 0 or labels.max() >= k_cls):
        raise ShapeMismatch("labels outside the class range")
    per_sample = np.empty(probs.shape[0])
    for i in range(probs.shape[0]):
        hits = 0
        for r in range(cfg.repeats):
            rng = _trial_rng(cfg.rng_seed, i, r, cfg.n_way, stream_tag)
            hits += nway_topk_trial(probs[i], int(labels[i]), cfg.n_way,
                                    cfg.top_k, rng)
        per_sample[i] = hits / cfg.repeats
    accuracy = float(per_sample.mean()) if per_sample.size else 0.0
    return (accuracy, per_sample) if return_per_sample else accuracy


def _gaussian_window(size: int = _SSIM_WINDOW, sigma: float = _SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    window = np.outer(g, g)
    return window / window.sum()


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Windowed structural similarity (Gaussian 11x11, sigma 1.5)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeMismatch(f"need equal 2-D images, got {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ShapeMismatch("data_range must be positive")
    if min(a.shape) < _SSIM_WINDOW:
        raise ShapeMismatch(f"images must be at least {_SSIM_WINDOW} pixels per side")
    window = _gaussian_window()
    win = (_SSIM_WINDOW, _SSIM_WINDOW)

    def stats(x: np.ndarray) -> np.ndarray:
        views = np.lib.stride_tricks.sliding_window_view(x, win)
        return np.einsum("ijkl,kl->ij", views, window)

    mu_a, mu_b = stats(a), stats(b)
    var_a = stats(a * a) - mu_a**2
    var_b = stats(b * b) - mu_b**2
    cov = stats(a * b) - mu_a * mu_b
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )
    return float(score.mean())


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 1.0,
         cap_db: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB, capped for (near-)identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape mismatch: {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ShapeMismatch("data_range must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap_db
    return min(cap_db, 10.0 * math.log10(data_range**2 / mse))


def clip_pcc(frame_embeddings: np.ndarray) -> float:
    """Mean cosine similarity between embeddings of adjacent frames."""
    emb = np.asarray(frame_embeddings, dtype=np.float64)
    if emb.ndim != 2:
        raise ShapeMismatch("expected (F, C) frame embeddings")
    if emb.shape[0] < 2:
        raise SingleFrame("need at least two frames")
    norms = np.linalg.norm(emb, axis=1)
    if norms.min() < 1e-12:
        raise ZeroNormRow("frame embedding with zero norm")
    unit = emb / norms[:, None]
    return float(np.sum(unit[:-1] * unit[1:], axis=1).mean())


@dataclass
class SampleRow:
    sample_id: int
    gt_frame_label: int
    gt_video_label: int
    frame_50way: float
    frame_2way: float
    ssim: float
    psnr: float
    video_50way: float
    video_2way: float
    clip_pcc: float


@dataclass
class MetricsReport:
    """Aggregate scores plus the per-sample breakdown table."""

    frame_50way: float
    frame_2way: float
    ssim: float
    psnr: float
    video_50way: float
    video_2way: float
    clip_pcc: float
    per_sample: list[SampleRow] = field(default_factory=list)

    SCALARS = ("frame_50way", "frame_2way", "ssim", "psnr",
               "video_50way", "video_2way", "clip_pcc")

    def validate(self) -> None:
        for name in ("frame_50way", "frame_2way", "video_50way", "video_2way"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ShapeMismatch(f"{name} outside [0, 1]")
        if not -1.0 <= self.ssim <= 1.0:
            raise ShapeMismatch("ssim outside [-1, 1]")
        if not -1.0 <= self.clip_pcc <= 1.0:
            raise ShapeMismatch("clip_pcc outside [-1, 1]")

    def to_text(self) -> str:
        lines = [f"format_version = {FORMAT_VERSION}"]
        lines += [f"{name} = {getattr(self, name)!r}" for name in self.SCALARS]
        for row in self.per_sample:
            fields = [f"sample {row.sample_id}",
                      f"gt_frame_label={row.gt_frame_label}",
                      f"gt_video_label={row.gt_video_label}"]
            for name in ("frame_50way", "frame_2way", "ssim", "psnr",
                         "video_50way", "video_2way", "clip_pcc"):
                fields.append(f"{name}={getattr(row, name)!r}")
            lines.append(" ".join(fields))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        scalars: dict[str, float] = {}
        rows: list[SampleRow] = []
        for line in text.splitlines():
            stripped = line.strip()
            if not stripped:
                continue
            if stripped.startswith("sample "):
                parts = stripped.split()
                values: dict[str, str] = {}
                for item in parts[2:]:
                    key, _, val = item.partition("=")
                    values[key] = val
                rows.append(SampleRow(
                    sample_id=int(parts[1]),
                    gt_frame_label=int(values["gt_frame_label"]),
                    gt_video_label=int(values["gt_video_label"]),
                    **{k: float(values[k]) for k in
                       ("frame_50way", "frame_2way", "ssim", "psnr",
                        "video_50way", "video_2way", "clip_pcc")},
                ))
            elif "=" in stripped:
                key, _, val = stripped.partition("=")
                key = key.strip()
                if key == "format_version":
                    if int(val) != FORMAT_VERSION:
                        raise UnsupportedVersion(f"report version {val.strip()}")
                    continue
                scalars[key] = float(val)
        report = cls(per_sample=rows, **{k: scalars[k] for k in cls.SCALARS})
        return report


def build_report(recon_clips: np.ndarray, gt_clips: np.ndarray, embedder,
                 classifier, cfg: TrialConfig, sample_ids: np.ndarray | None = None,
                 shuffled_pairing: bool = False) -> MetricsReport:
    """Score reconstructed clips against their ground-truth counterparts.

    Clips are (N, F, H, W) in [0, 1]. Pseudo-labels are the classifier's
    top predictions on the ground-truth keyframe / clip; trials test
    whether the reconstruction ranks that label among its top-K.
    """
    recon = np.asarray(recon_clips, dtype=np.float64)
    gt = np.asarray(gt_clips, dtype=np.float64)
    if recon.shape != gt.shape or recon.ndim != 4:
        raise PairingMismatch(
            f"paired clip stacks must match: {recon.shape} vs {gt.shape}"
        )
    n, frames = recon.shape[:2]
    if shuffled_pairing and n > 1:
        gt = np.roll(gt, max(1, n // 2), axis=0)
    if sample_ids is None:
        sample_ids = np.arange(n)

    key = frames // 2
    gt_frame_probs = classifier.frame_probs(gt[:, key])
    recon_frame_probs = classifier.frame_probs(recon[:, key])
    gt_frame_labels = np.argmax(gt_frame_probs, axis=1)
    gt_video_probs = classifier.video_probs(gt)
    recon_video_probs = classifier.video_probs(recon)
    gt_video_labels = np.argmax(gt_video_probs, axis=1)

    def protocol(probs, labels, n_way, tag):
        trial = TrialConfig(n_way=n_way, top_k=cfg.top_k, repeats=cfg.repeats,
                            rng_seed=cfg.rng_seed)
        return nway_topk_accuracy(probs, labels, trial, stream_tag=tag,
                                  return_per_sample=True)

    frame_50, frame_50_ps = protocol(recon_frame_probs, gt_frame_labels, 50, 0)
    frame_2, frame_2_ps = protocol(recon_frame_probs, gt_frame_labels, 2, 0)
    video_50, video_50_ps = protocol(recon_video_probs, gt_video_labels, 50, 1)
    video_2, video_2_ps = protocol(recon_video_probs, gt_video_labels, 2, 1)

    ssim_ps = np.array([
        np.mean([ssim(recon[i, f], gt[i, f]) for f in range(frames)])
        for i in range(n)
    ])
    psnr_ps = np.array([
        np.mean([psnr(recon[i, f], gt[i, f]) for f in range(frames)])
        for i in range(n)
    ])
    pcc_ps = np.array([clip_pcc(embedder.pooled_centered(recon[i])) for i in range(n)])

    rows = [
        SampleRow(
            sample_id=int(sample_ids[i]),
            gt_frame_label=int(gt_frame_labels[i]),
            gt_video_label=int(gt_video_labels[i]),
            frame_50way=float(frame_50_ps[i]),
            frame_2way=float(frame_2_ps[i]),
            ssim=float(ssim_ps[i]),
            psnr=float(psnr_ps[i]),
            video_50way=float(video_50_ps[i]),
            video_2way=float(video_2_ps[i]),
            clip_pcc=float(pcc_ps[i]),
        )
        for i in range(n)
    ]
    report = MetricsReport(
        frame_50way=frame_50, frame_2way=frame_2,
        ssim=float(ssim_ps.mean()), psnr=float(psnr_ps.mean()),
        video_50way=video_50, video_2way=video_2,
        clip_pcc=float(pcc_ps.mean()), per_sample=rows,
    )
    report.validate()
    return report


def report_table(report: MetricsReport) -> str:
    """Seven-column human-readable table, frame metrics first."""
    headers = ("frame-50way", "frame-2way", "SSIM", "PSNR(dB)",
               "video-50way", "video-2way", "CLIP-pcc")
    values = (
        f"{report.frame_50way:.4f}", f"{report.frame_2way:.4f}",
        f"{report.ssim:.4f}", f"{report.psnr:.4f}",
        f"{report.video_50way:.4f}", f"{report.video_2way:.4f}",
        f"{report.clip_pcc:.4f}",
    )
    widths = [max(len(h), len(v)) for h, v in zip(headers, values)]
    head = "  ".join(h.rjust(w) for h, w in zip(headers, widths))
    body = "  ".join(v.rjust(w) for v, w in zip(values, widths))
    return head + "\n" + body + "\n"
