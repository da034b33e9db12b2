"""Synthetic dataset with planted cross-subject structure, plus manifest IO.

Every stimulus draws a semantic factor; each subject owns a fixed
orthogonal voxel transform and a subject factor. Voxels are the subject
transform applied to a structured projection of the semantic factor
(low-frequency pattern in early-vision voxels, a category code in ventral
voxels, a motion code in dorsal voxels) plus a subject bias and optional
noise. All stimulus-side targets are deterministic functions of the
semantic factor, so decodability is guaranteed by construction and every
file is reproducible byte-for-byte from the spec.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import preprocess, stubs, tensorio
from .config import (
    FORMAT_VERSION,
    SynthSpec,
    apply_overrides,
    flatten_config,
    format_flat_text,
    parse_flat_text,
)
from .errors import BadRatios, ConfigError, IOFailure, UnsupportedVersion

PAD_ID, BOS_ID, EOS_ID = 0, 1, 2

# spawn-key tags for the generator's RNG streams
_TAG_PROJECTIONS = 100
_TAG_SUBJECT = 200
_TAG_FACTORS = 300
_TAG_NOISE = 301
_TAG_RUN_NOISE = 302
_TAG_PROBE = 500

_N_PROBE = 160

_TENSOR_KEYS = (
    "voxels", "surface", "clips", "clip_low", "clip_high", "video_embed",
    "captions", "caption_lens", "labels", "seg_masks", "blurry_latent",
    "factors", "subject_ids", "stimulus_ids",
)
_PER_STIMULUS = (
    "voxels", "surface", "clips", "clip_low", "clip_high", "video_embed",
    "captions", "caption_lens", "labels", "seg_masks", "blurry_latent",
    "factors", "stimulus_ids", "raw_runs",
)


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


@dataclass(eq=False)
class Dataset:
    """In-memory view of a dataset directory."""

    spec: SynthSpec
    atlas: dict[str, list[int]]
    layout: np.ndarray
    voxels: np.ndarray          # (N, S, V)
    surface: np.ndarray         # (N, S, H, W)
    clips: np.ndarray           # (N, F, I, I) ground-truth grayscale video
    clip_low: np.ndarray        # (N, L, C)
    clip_high: np.ndarray       # (N, L, C)
    video_embed: np.ndarray     # (N, L, C)
    captions: np.ndarray        # (N, T_cap) int32, PAD-padded
    caption_lens: np.ndarray    # (N,)
    labels: np.ndarray          # (N,)
    seg_masks: np.ndarray       # (N, Hs, Ws) uint8
    blurry_latent: np.ndarray   # (N, F, C_lat, h, w)
    factors: np.ndarray         # (N, semantic_dim) planted semantic factors
    subject_ids: np.ndarray     # (S,)
    stimulus_ids: np.ndarray    # (N,)
    raw_runs: np.ndarray | None = None  # (N, S, R, T, V)

    @property
    def n_stimuli(self) -> int:
        return self.voxels.shape[0]

    @property
    def n_subjects(self) -> int:
        return self.voxels.shape[1]

    def subject_subset(self, subject_positions: list[int]) -> "Dataset":
        """Slice the subject axis, e.g. for leave-one-subject-out runs."""
        sel = list(subject_positions)
        return replace(
            self,
            voxels=self.voxels[:, sel],
            surface=self.surface[:, sel],
            subject_ids=self.subject_ids[sel],
            raw_runs=None if self.raw_runs is None else self.raw_runs[:, sel],
        )

    def stimulus_subset(self, indices: np.ndarray) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        updates = {
            name: getattr(self, name)[idx]
            for name in _PER_STIMULUS
            if getattr(self, name) is not None
        }
        return replace(self, **updates)


def synthetic_atlas(n_voxels: int) -> dict[str, list[int]]:
    """Contiguous voxel blocks over every region either scheme can request."""
    labels = preprocess.ALL_ATLAS_LABELS
    if n_voxels < len(labels):
        raise ConfigError(
            f"need at least {len(labels)} voxels to cover {len(labels)} regions"
        )
    base, extra = divmod(n_voxels, len(labels))
    table: dict[str, list[int]] = {}
    cursor = 0
    for i, label in enumerate(labels):
        count = base + (1 if i < extra else 0)
        table[label] = list(range(cursor, cursor + count))
        cursor += count
    return table


def _probe_clips(spec: SynthSpec, n_probe: int = _N_PROBE) -> np.ndarray:
    """Fixed probe clips drawn from the same rendering distribution.

    Used only to calibrate the stub embedder/classifier statistics; the
    probe stream is independent of the stimuli actually emitted.
    """
    rng = _rng(spec.seed, _TAG_PROBE)
    z = rng.normal(0, 1, (n_probe, spec.semantic_dim))
    labels = rng.integers(0, spec.k_cls, n_probe).astype(np.int32)
    motion = _motion_params(spec, z, rng)
    return _render_clips(spec, z, labels, motion)


def make_embedder(spec: SynthSpec, n_layers: int = 8, low_layer: int = 2
                  ) -> stubs.StimulusEmbedder:
    embedder = stubs.StimulusEmbedder(
        spec.img_size, spec.l_clip, spec.c_clip,
        n_layers=n_layers, low_layer=low_layer, seed=spec.seed,
    )
    probe = _probe_clips(spec)
    embedder.pooled_center = embedder.pooled(probe).mean(axis=(0, 1))
    return embedder


def make_vae(spec: SynthSpec) -> stubs.VaeStub:
    return stubs.VaeStub(spec.img_size, spec.latent_channels, spec.latent_size,
                         seed=spec.seed)


def make_classifier(spec: SynthSpec, embedder: stubs.StimulusEmbedder | None = None
                    ) -> stubs.StubClassifier:
    if embedder is None:
        embedder = make_embedder(spec)
    classifier = stubs.StubClassifier(embedder, spec.k_cls, seed=spec.seed)
    probe = _probe_clips(spec)
    pooled = classifier._pooled(probe)  # (M, F, C), through the input blur
    classifier.calibrate(pooled[:, probe.shape[1] // 2], pooled.mean(axis=1))
    return classifier


def _render_clips(spec: SynthSpec, z: np.ndarray, labels: np.ndarray,
                  motion: dict[str, np.ndarray]) -> np.ndarray:
    """(N, F, I, I) moving-blob clips; class sets the background level."""
    n, size, frames = z.shape[0], spec.img_size, spec.frame_count
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    t = np.arange(frames, dtype=np.float64) - (frames - 1) / 2.0
    center = (size - 1) / 2.0
    px = center + motion["pos0"][:, None, 0] + motion["vel"][:, None, 0] * t  # (N, F)
    py = center + motion["pos0"][:, None, 1] + motion["vel"][:, None, 1] * t
    sigma = motion["size"][:, None, None, None]
    d2 = (xs - px[..., None, None]) ** 2 + (ys - py[..., None, None]) ** 2
    blob = 0.6 * np.exp(-d2 / (2.0 * sigma**2))
    bg = 0.15 + 0.5 * (labels.astype(np.float64) + 0.5) / spec.k_cls
    return np.clip(bg[:, None, None, None] + blob, 0.0, 1.0)


def _render_seg_masks(spec: SynthSpec, motion: dict[str, np.ndarray]) -> np.ndarray:
    """Keyframe blob support on the segmentation grid."""
    n = motion["pos0"].shape[0]
    hs = spec.seg_size
    scale = spec.img_size / hs
    ys, xs = (np.mgrid[0:hs, 0:hs].astype(np.float64) + 0.5) * scale - 0.5
    center = (spec.img_size - 1) / 2.0
    key_t = (spec.frame_count - 1) // 2 - (spec.frame_count - 1) / 2.0
    px = center + motion["pos0"][:, 0] + motion["vel"][:, 0] * key_t
    py = center + motion["pos0"][:, 1] + motion["vel"][:, 1] * key_t
    sigma = motion["size"][:, None, None]
    d2 = (xs - px[:, None, None]) ** 2 + (ys - py[:, None, None]) ** 2
    intensity = np.exp(-d2 / (2.0 * sigma**2))
    return (intensity > 0.2).astype(np.uint8)


def _captions(spec: SynthSpec, labels: np.ndarray, motion: dict[str, np.ndarray]
              ) -> tuple[np.ndarray, np.ndarray]:
    n = labels.shape[0]
    n_words = spec.vocab_size - 3
    if n_words < 1:
        raise ConfigError("vocab_size must be at least 4")
    angle = np.arctan2(motion["vel"][:, 1], motion["vel"][:, 0])
    buckets = ((angle + math.pi) / (2 * math.pi) * 8).astype(np.int64) % 8
    tokens = np.full((n, spec.max_caption_len), PAD_ID, dtype=np.int32)
    tokens[:, 0] = BOS_ID
    tokens[:, 1] = 3 + labels % n_words
    tokens[:, 2] = 3 + (labels * 7 + 1) % n_words
    tokens[:, 3] = 3 + buckets % n_words
    tokens[:, 4] = EOS_ID
    lens = np.full(n, 5, dtype=np.int32)
    return tokens, lens


def _motion_params(spec: SynthSpec, z: np.ndarray, rng: np.random.Generator
                   ) -> dict[str, np.ndarray]:
    # blob size is fixed so image brightness carries category, not motion
    sem = spec.semantic_dim
    p_vel = rng.normal(0, 1 / math.sqrt(sem), (2, sem))
    p_pos = rng.normal(0, 1 / math.sqrt(sem), (2, sem))
    vel = 1.2 * np.tanh(z @ p_vel.T)
    pos0 = 6.0 * np.tanh(z @ p_pos.T)
    size = np.full(z.shape[0], 4.0)
    return {"vel": vel, "pos0": pos0, "size": size}


def _voxel_patterns(spec: SynthSpec, z: np.ndarray, labels: np.ndarray,
                    motion: dict[str, np.ndarray], scheme: preprocess.RoiScheme,
                    rng: np.random.Generator) -> np.ndarray:
    """Structured semantic projection into voxel space, (N, V)."""
    n, sem = z.shape
    pattern = np.zeros((n, spec.n_voxels), dtype=np.float64)

    early = scheme.group_indices("early")
    n_modes = min(6, early.size)
    pos = (np.arange(early.size) + 0.5) / early.size
    basis = np.cos(np.pi * np.outer(pos, np.arange(1, n_modes + 1)))  # low-frequency
    w_early = rng.normal(0, 1 / math.sqrt(sem), (n_modes, sem))
    pattern[:, early] = (z @ w_early.T) @ basis.T

    ventral = scheme.group_indices("ventral")
    codes = rng.normal(0, 1, (spec.k_cls, ventral.size))
    # equal-norm codes: category must not be readable from voxel energy alone
    codes *= 0.8 * math.sqrt(ventral.size) / np.linalg.norm(codes, axis=1, keepdims=True)
    w_ventral = rng.normal(0, 1 / math.sqrt(sem), (ventral.size, sem))
    pattern[:, ventral] = codes[labels] + 0.6 * (z @ w_ventral.T)

    dorsal = scheme.group_indices("dorsal")
    speed = np.linalg.norm(motion["vel"], axis=1, keepdims=True)
    feats = np.concatenate([motion["vel"], speed], axis=1)
    basis_d = rng.normal(0, 1 / math.sqrt(feats.shape[1]), (dorsal.size, feats.shape[1]))
    pattern[:, dorsal] = feats @ basis_d.T

    return pattern


def _subject_transform(atlas: dict[str, list[int]], n_voxels: int,
                       rng: np.random.Generator, strength: float) -> np.ndarray:
    """Random orthogonal voxel transform, block-diagonal over atlas regions.

    Each region gets the orthogonalization of I + strength * G, a random
    rotation concentrated near identity. Voxel-for-voxel correspondence
    across subjects is perturbed inside every region while region
    membership and coarse topography survive, mirroring surface-aligned
    recordings: areas line up, fine-grained patterns do not. strength 0 is
    the identity; large strength approaches a fully random rotation.
    """
    transform = np.zeros((n_voxels, n_voxels))
    covered = np.zeros(n_voxels, dtype=bool)
    for indices in atlas.values():
        idx = np.asarray(indices, dtype=np.int64)
        gauss = rng.normal(0, 1, (idx.size, idx.size))
        q, r = np.linalg.qr(np.eye(idx.size) + strength * gauss)
        transform[np.ix_(idx, idx)] = q * np.sign(np.diag(r))
        covered[idx] = True
    transform[np.diag_indices(n_voxels)] += (~covered).astype(np.float64)
    return transform


def generate(spec: SynthSpec, out_dir: str | Path) -> Path:
    """Write a full synthetic dataset; returns the manifest path."""
    spec.validate()
    if spec.seed < 0:
        raise ConfigError("generate needs a resolved (nonnegative) seed")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = spec.seed

    atlas = synthetic_atlas(spec.n_voxels)
    scheme = preprocess.load_roi_scheme("A", atlas, spec.n_voxels)
    layout = preprocess.default_layout(spec.n_voxels, spec.h_input, spec.w_input)

    proj_rng = _rng(seed, _TAG_PROJECTIONS)
    z = _rng(seed, _TAG_FACTORS).normal(0, 1, (spec.n_samples, spec.semantic_dim))
    w_label = proj_rng.normal(0, 1, (spec.k_cls, spec.semantic_dim))
    labels = np.argmax(z @ w_label.T, axis=1).astype(np.int32)
    motion = _motion_params(spec, z, proj_rng)

    clips = _render_clips(spec, z, labels, motion)
    seg_masks = _render_seg_masks(spec, motion)
    captions, caption_lens = _captions(spec, labels, motion)

    embedder = make_embedder(spec)
    vae = make_vae(spec)
    keyframes = clips[:, spec.frame_count // 2]
    clip_low = embedder.embed_low(keyframes)
    clip_high = embedder.embed_high(keyframes)
    video_embed = embedder.embed_high(clips).mean(axis=1)
    blurry_latent = vae.encode(stubs.gaussian_blur(clips, sigma=2.0))

    pattern = _voxel_patterns(spec, z, labels, motion, scheme, proj_rng)
    voxels = np.empty((spec.n_samples, spec.n_subjects, spec.n_voxels))
    for s in range(spec.n_subjects):
        sub_rng = _rng(seed, _TAG_SUBJECT, s)
        transform = _subject_transform(atlas, spec.n_voxels, sub_rng,
                                       spec.subject_mix_strength)
        mixing = sub_rng.normal(0, 1 / math.sqrt(spec.subject_dim),
                                (spec.n_voxels, spec.subject_dim))
        z_subj = sub_rng.normal(0, 1, spec.subject_dim)
        bias = spec.subject_bias_scale * (mixing @ z_subj)
        voxels[:, s] = pattern @ transform.T + bias
    if spec.noise_sigma > 0:
        voxels += spec.noise_sigma * _rng(seed, _TAG_NOISE).normal(
            0, 1, voxels.shape
        )

    surface = np.zeros((spec.n_samples, spec.n_subjects, spec.h_input, spec.w_input))
    surface[:, :, layout[:, 0], layout[:, 1]] = voxels

    arrays: dict[str, np.ndarray] = {
        "voxels": voxels,
        "surface": surface,
        "clips": clips,
        "clip_low": clip_low,
        "clip_high": clip_high,
        "video_embed": video_embed,
        "captions": captions,
        "caption_lens": caption_lens,
        "labels": labels,
        "seg_masks": seg_masks,
        "blurry_latent": blurry_latent,
        "factors": z,
        "subject_ids": np.arange(spec.n_subjects, dtype=np.int32),
        "stimulus_ids": np.arange(spec.n_samples, dtype=np.int32),
    }

    if spec.emit_raw:
        delay_frames = int(round(spec.delay_seconds / spec.tr_seconds))
        if spec.run_frames <= delay_frames:
            raise ConfigError("run_frames must exceed the hemodynamic delay in frames")
        runs = spec.run_noise_sigma * _rng(seed, _TAG_RUN_NOISE).normal(
            0, 1,
            (spec.n_samples, spec.n_subjects, spec.runs_per_stimulus,
             spec.run_frames, spec.n_voxels),
        )
        runs[:, :, :, delay_frames, :] += voxels[:, :, None, :]
        arrays["raw_runs"] = runs

    preprocess.write_atlas_table(out / "atlas.txt", atlas)
    preprocess.write_layout(out / "layout.txt", layout)
    flat = {"format_version": str(FORMAT_VERSION), "kind": "synthetic"}
    flat.update({f"synth.{k}": v for k, v in flatten_config(spec).items()})
    flat["atlas"] = "atlas.txt"
    flat["layout"] = "layout.txt"
    for name, array in arrays.items():
        tensorio.write_tensor(out / f"{name}.vcft", array)
        flat[f"tensor.{name}"] = f"{name}.vcft"
    manifest_path = out / "manifest.txt"
    manifest_path.write_text(format_flat_text(flat))
    return manifest_path


def _load_manifest(path: Path) -> dict[str, str]:
    try:
        flat = parse_flat_text(path.read_text())
    except OSError as exc:
        raise IOFailure(f"cannot read manifest {path}: {exc}") from exc
    version = int(flat.get("format_version", "-1"))
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"manifest version {version} not supported")
    return flat


def load_dataset(manifest_path: str | Path) -> Dataset:
    """Load a dataset (or split view) from its manifest."""
    path = Path(manifest_path)
    flat = _load_manifest(path)
    kind = flat.get("kind", "")
    if kind == "split":
        parent = load_dataset(path.parent / flat["parent"])
        indices = np.asarray([int(i) for i in flat["indices"].split()], dtype=np.int64)
        return parent.stimulus_subset(indices)
    if kind != "synthetic":
        raise IOFailure(f"unknown manifest kind {kind!r}")

    spec_flat = {k.split(".", 1)[1]: v for k, v in flat.items() if k.startswith("synth.")}
    spec = apply_overrides(SynthSpec(), spec_flat)
    base = path.parent
    arrays: dict[str, np.ndarray] = {}
    for key, rel in flat.items():
        if key.startswith("tensor."):
            file_path = base / rel
            if not file_path.exists():
                raise IOFailure(f"manifest lists missing file {file_path}")
            arrays[key.split(".", 1)[1]] = tensorio.read_tensor(file_path)
    missing = [k for k in _TENSOR_KEYS if k not in arrays]
    if missing:
        raise IOFailure(f"manifest lacks tensors: {missing}")
    atlas = preprocess.read_atlas_table(base / flat["atlas"])
    layout = preprocess.read_layout(base / flat["layout"])
    return Dataset(spec=spec, atlas=atlas, layout=layout,
                   raw_runs=arrays.get("raw_runs"),
                   **{k: arrays[k] for k in _TENSOR_KEYS})


def split(manifest_path: str | Path, ratios: tuple[float, float], seed: int
          ) -> tuple[Path, Path]:
    """Stimulus-level train/test split; all subjects of a stimulus stay together."""
    if len(ratios) != 2 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise BadRatios(f"ratios must be two nonnegative values summing to 1, got {ratios}")
    path = Path(manifest_path)
    flat = _load_manifest(path)
    if flat.get("kind") != "synthetic":
        raise BadRatios("can only split a base dataset manifest")
    n = int(flat["synth.n_samples"])
    perm = _rng(seed, 400).permutation(n)
    n_train = int(round(ratios[0] * n))
    groups = {"train": np.sort(perm[:n_train]), "test": np.sort(perm[n_train:])}
    out_paths = []
    for name, indices in groups.items():
        split_flat = {
            "format_version": str(FORMAT_VERSION),
            "kind": "split",
            "parent": path.name,
            "indices": " ".join(str(i) for i in indices),
        }
        out_path = path.parent / f"split_{name}.txt"
        out_path.write_text(format_flat_text(split_flat))
        out_paths.append(out_path)
    return out_paths[0], out_paths[1]


def preprocess_dataset(manifest_path: str | Path, out_dir: str | Path,
                       eps: float = 1e-8) -> Path:
    """Run the z-score / shift / average / pack chain over a raw-run dataset.

    Writes a new dataset directory whose voxels and surface images come from
    the preprocessing chain; stimulus-side target files are referenced from
    the parent dataset rather than copied.
    """
    src = load_dataset(manifest_path)
    if src.raw_runs is None:
        raise IOFailure("dataset has no raw runs to preprocess")
    spec = src.spec
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    n, s_count = src.raw_runs.shape[0], src.raw_runs.shape[1]
    voxels = np.empty((n, s_count, spec.n_voxels))
    for i in range(n):
        for s in range(s_count):
            runs = [
                preprocess.hemodynamic_shift(
                    preprocess.z_transform(
                        preprocess.RawRun(src.raw_runs[i, s, r], spec.tr_seconds,
                                          int(src.subject_ids[s])),
                        eps=eps,
                    ),
                    spec.delay_seconds,
                )
                for r in range(src.raw_runs.shape[2])
            ]
            voxels[i, s] = preprocess.average_runs(runs).volumes[0]
    surface = np.zeros((n, s_count, spec.h_input, spec.w_input))
    surface[:, :, src.layout[:, 0], src.layout[:, 1]] = voxels

    parent_dir = Path(manifest_path).parent
    parent_flat = _load_manifest(Path(manifest_path))
    flat = {"format_version": str(FORMAT_VERSION), "kind": "synthetic"}
    spec_no_raw = replace(spec, emit_raw=False)
    flat.update({f"synth.{k}": v for k, v in flatten_config(spec_no_raw).items()})
    flat["preprocessed_from"] = os.path.relpath(manifest_path, out)
    for key in ("atlas", "layout"):
        flat[key] = os.path.relpath(parent_dir / parent_flat[key], out)
    for name in _TENSOR_KEYS:
        if name in ("voxels", "surface"):
            continue
        flat[f"tensor.{name}"] = os.path.relpath(
            parent_dir / parent_flat[f"tensor.{name}"], out
        )
    tensorio.write_tensor(out / "voxels.vcft", voxels)
    tensorio.write_tensor(out / "surface.vcft", surface)
    flat["tensor.voxels"] = "voxels.vcft"
    flat["tensor.surface"] = "surface.vcft"
    manifest = out / "manifest.txt"
    manifest.write_text(format_flat_text(flat))
    return manifest
