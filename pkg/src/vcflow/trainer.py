"""Stage-wise optimization, checkpointing, and the evaluation path.

Stages run in the architecture's order: encoder alignment (prior MSE plus
hierarchical contrastive losses on mixed inputs), then the redistribution
adapter (alignment + cross-subject + subject-identity objectives), then
the decode heads under the cyclic weight schedule. Checkpoints are VCFC
containers of the module state dicts; with a fixed seed every run is
reproducible on the same platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import hcam as hcam_mod
from . import hed as hed_mod
from . import metrics as metrics_mod
from . import sara as sara_mod
from . import tensorio
from .config import ModelConfig, TrainConfig, TrialConfig, flatten_config, format_flat_text
from .datasets import Dataset, make_classifier, make_embedder, make_vae
from .errors import DivergedLoss, MissingUpstreamCheckpoint, ShapeMismatch
from .preprocess import RoiScheme, load_roi_scheme, partition_voxels

STAGE_ORDER = ("hcam", "sara", "hed")
STAGE_FILES = {name: f"{name}.ckpt" for name in STAGE_ORDER}

# spawn-key tags for trainer RNG streams
_TAG_ORDER = 1
_TAG_MIX = 2
_TAG_SHUFFLE = 77


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


@dataclass
class ModelBundle:
    hcam: hcam_mod.HcamModel
    adapter: sara_mod.RedistributionAdapter
    subject_clf: sara_mod.SubjectClassifier
    hed: hed_mod.HedModel
    scheme: RoiScheme

    def modules(self) -> dict[str, torch.nn.Module]:
        return {"hcam": self.hcam, "adapter": self.adapter,
                "subject_clf": self.subject_clf, "hed": self.hed}


def build_models(dataset: Dataset, model_cfg: ModelConfig, scheme_id: str,
                 n_subjects: int, seed: int) -> ModelBundle:
    torch.manual_seed(seed)
    spec = dataset.spec
    scheme = load_roi_scheme(scheme_id, dataset.atlas, spec.n_voxels)
    group_sizes = {s: int(scheme.group_indices(s).size) for s in hcam_mod.STREAMS}
    hcam_model = hcam_mod.HcamModel(
        spec.h_input, spec.w_input, group_sizes, model_cfg.d_latent,
        spec.l_clip, spec.c_clip, patch_size=model_cfg.patch_size,
        vit_layers=model_cfg.vit_layers, vit_heads=model_cfg.vit_heads,
        mlp_ratio=model_cfg.mlp_ratio, stream_hidden=model_cfg.stream_hidden,
        prior_blocks=model_cfg.prior_blocks, attn_dim=model_cfg.attn_dim,
        n_kv_tokens=model_cfg.n_kv_tokens, use_bias=model_cfg.use_bias,
    )
    adapter = sara_mod.RedistributionAdapter(
        spec.l_clip, spec.c_clip, l_redis=model_cfg.l_redis,
        mlp_ratio=model_cfg.redis_mlp_ratio, use_bias=model_cfg.use_bias,
    )
    subject_clf = sara_mod.SubjectClassifier(spec.c_clip, n_subjects)
    hed_model = hed_mod.HedModel(
        spec.l_clip, spec.c_clip, spec.vocab_size, spec.max_caption_len,
        spec.k_cls, spec.seg_size, spec.frame_count, spec.latent_channels,
        spec.latent_size, caption_dim=model_cfg.caption_dim,
        use_bias=model_cfg.use_bias,
    )
    return ModelBundle(hcam_model, adapter, subject_clf, hed_model, scheme)


def module_params(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_params(module: torch.nn.Module, params: dict[str, np.ndarray]) -> None:
    state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in params.items()}
    module.load_state_dict(state)


def state_checksum(module: torch.nn.Module) -> str:
    import hashlib

    digest = hashlib.sha256()
    for name, array in sorted(module_params(module).items()):
        digest.update(name.encode())
        digest.update(array.tobytes())
    return digest.hexdigest()


def _stage_modules(bundle: ModelBundle, stage: str) -> dict[str, torch.nn.Module]:
    if stage == "hcam":
        return {"hcam": bundle.hcam}
    if stage == "sara":
        return {"adapter": bundle.adapter, "subject_clf": bundle.subject_clf}
    return {"hed": bundle.hed}


def save_stage_checkpoint(out_dir: str | Path, stage: str, bundle: ModelBundle,
                          echo: str = "") -> Path:
    params: dict[str, np.ndarray] = {}
    for mod_name, module in _stage_modules(bundle, stage).items():
        for key, array in module_params(module).items():
            params[f"{mod_name}.{key}"] = array
    path = Path(out_dir) / STAGE_FILES[stage]
    tensorio.save_checkpoint(path, params, echo)
    return path


def load_stage_checkpoint(out_dir: str | Path, stage: str, bundle: ModelBundle) -> None:
    path = Path(out_dir) / STAGE_FILES[stage]
    if not path.exists():
        raise MissingUpstreamCheckpoint(f"no {stage} checkpoint at {path}")
    params, _ = tensorio.load_checkpoint(path)
    for mod_name, module in _stage_modules(bundle, stage).items():
        prefix = f"{mod_name}."
        subset = {
            k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)
        }
        load_module_params(module, subset)


def checkpoint_subject_count(out_dir: str | Path) -> int:
    """Subject-classifier width recorded in the adapter checkpoint."""
    path = Path(out_dir) / STAGE_FILES["sara"]
    if not path.exists():
        raise MissingUpstreamCheckpoint(f"no sara checkpoint at {path}")
    params, _ = tensorio.load_checkpoint(path)
    return params["subject_clf.linear.weight"].shape[0]


def shuffle_params(params: dict[str, np.ndarray], seed: int) -> dict[str, np.ndarray]:
    """Permute every tensor's entries: same value distribution, no structure."""
    rng = _rng(seed, _TAG_SHUFFLE)
    return {
        name: rng.permutation(array.ravel()).reshape(array.shape)
        for name, array in params.items()
    }


def shuffle_checkpoint(src_dir: str | Path, dst_dir: str | Path, seed: int) -> None:
    """Write a structure-destroyed copy of all stage checkpoints."""
    Path(dst_dir).mkdir(parents=True, exist_ok=True)
    for stage, fname in STAGE_FILES.items():
        src = Path(src_dir) / fname
        if not src.exists():
            raise MissingUpstreamCheckpoint(f"no {stage} checkpoint at {src}")
        params, echo = tensorio.load_checkpoint(src)
        trained_flags = {k: v for k, v in params.items() if k.endswith("trained_flag")}
        shuffled = shuffle_params(params, seed)
        shuffled.update(trained_flags)
        tensorio.save_checkpoint(Path(dst_dir) / fname, shuffled, echo)


@dataclass
class StageData:
    """Dataset tensors staged as torch arrays for one training run."""

    surface: torch.Tensor       # (N, S, H, W)
    groups: dict[str, torch.Tensor]
    clip_low: torch.Tensor      # (N, L, C)
    clip_high: torch.Tensor
    video_embed: torch.Tensor
    captions: torch.Tensor      # (N, T) long
    caption_lens: torch.Tensor
    labels: torch.Tensor        # (N,) long
    seg_masks: torch.Tensor     # (N, Hs, Ws)
    blurry_latent: torch.Tensor


def stage_data(dataset: Dataset, scheme: RoiScheme,
               dtype: torch.dtype = torch.float32) -> StageData:
    groups_np = partition_voxels(dataset.voxels, scheme)
    to = lambda a: torch.from_numpy(np.ascontiguousarray(a)).to(dtype)
    return StageData(
        surface=to(dataset.surface),
        groups={k: to(v) for k, v in groups_np.items()},
        clip_low=to(dataset.clip_low),
        clip_high=to(dataset.clip_high),
        video_embed=to(dataset.video_embed),
        captions=torch.from_numpy(dataset.captions.astype(np.int64)),
        caption_lens=torch.from_numpy(dataset.caption_lens.astype(np.int64)),
        labels=torch.from_numpy(dataset.labels.astype(np.int64)),
        seg_masks=to(dataset.seg_masks),
        blurry_latent=to(dataset.blurry_latent),
    )


def _batches(n: int, batch_size: int, seed: int) -> list[np.ndarray]:
    order = _rng(seed, _TAG_ORDER).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _mix_rows(x: torch.Tensor, spec: hcam_mod.MixSpec) -> torch.Tensor:
    """Mix along the flattened (batch, subject) row axis of (B, S, ...)."""
    b, s = x.shape[:2]
    flat = x.reshape(b * s, *x.shape[2:])
    return hcam_mod.mixco_mix(flat, spec).reshape(x.shape)


def _expand_targets(t: torch.Tensor, subjects: int) -> torch.Tensor:
    return t[:, None].expand(t.shape[0], subjects, *t.shape[1:])


def _check_finite(value: torch.Tensor, stage: str) -> float:
    scalar = float(value.item())
    if not math.isfinite(scalar):
        raise DivergedLoss(f"{stage} loss became non-finite")
    return scalar


def _log_line(record: dict[str, object]) -> str:
    parts = []
    for key, value in record.items():
        parts.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    return " ".join(parts)


def _mix_spec_for_batch(cfg: TrainConfig, enabled: bool, rows: int,
                        batch_idx: int) -> hcam_mod.MixSpec:
    if not enabled:
        return hcam_mod.identity_mix_spec(rows, cfg.temperature)
    rng = _rng(cfg.seed, _TAG_MIX, batch_idx)
    return hcam_mod.sample_mix_spec(rows, cfg.temperature, rng,
                                    beta_a=cfg.beta_a, beta_b=cfg.beta_b)


def _forward_semantics(bundle: ModelBundle, x_input: torch.Tensor,
                       x_groups: dict[str, torch.Tensor], use_sara: bool):
    """Shared inference path: encoders -> prior -> (adapter) -> fusion."""
    e_brain = bundle.hcam.encode_brain(x_input)
    f_brain = bundle.hcam.prior(e_brain)
    redis = bundle.adapter(f_brain) if use_sara else None
    fusion_src = redis.t_sem if use_sara else f_brain
    fused = {
        s: bundle.hcam.fusers[s](bundle.hcam.encode_stream(x_groups[s], s), fusion_src)
        for s in hcam_mod.STREAMS
    }
    return f_brain, redis, fused


def train_stage(dataset: Dataset, bundle: ModelBundle, cfg: TrainConfig,
                model_cfg: ModelConfig, stage: str, out_dir: str | Path
                ) -> list[dict[str, object]]:
    """Optimize one stage and write its checkpoint and loss log."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if stage == "sara":
        if not (out / STAGE_FILES["hcam"]).exists():
            raise MissingUpstreamCheckpoint("sara stage requires a hcam checkpoint")
    if stage == "hed":
        for upstream in ("hcam", "sara"):
            if not (out / STAGE_FILES[upstream]).exists():
                raise MissingUpstreamCheckpoint(
                    f"hed stage requires a {upstream} checkpoint"
                )

    data = stage_data(dataset, bundle.scheme)
    batches = _batches(dataset.n_stimuli, cfg.batch_size, cfg.seed)
    records: list[dict[str, object]] = []
    runner = {"hcam": _run_hcam, "sara": _run_sara, "hed": _run_hed}[stage]
    runner(bundle, data, cfg, model_cfg, batches, records)

    echo = format_flat_text(flatten_config(cfg))
    save_stage_checkpoint(out, stage, bundle, echo)
    log_path = out / f"train_{stage}.log"
    log_path.write_text("".join(_log_line(r) + "\n" for r in records))
    return records


def train(dataset: Dataset, cfg: TrainConfig, model_cfg: ModelConfig,
          scheme_id: str, out_dir: str | Path) -> list[dict[str, object]]:
    """Train the configured stage ('all' runs the three stages in order)."""
    bundle = build_models(dataset, model_cfg, scheme_id, dataset.n_subjects, cfg.seed)
    stages = STAGE_ORDER if cfg.stage == "all" else (cfg.stage,)
    out = Path(out_dir)
    # reload whatever upstream state exists so single-stage runs continue a pipeline
    for upstream in STAGE_ORDER:
        if upstream not in stages and (out / STAGE_FILES[upstream]).exists():
            load_stage_checkpoint(out, upstream, bundle)
    records: list[dict[str, object]] = []
    for stage in stages:
        records.extend(train_stage(dataset, bundle, cfg, model_cfg, stage, out))
    return records


def _epochs_for(cfg: TrainConfig, stage: str) -> int:
    return {"hcam": cfg.hcam_epochs, "sara": cfg.sara_epochs,
            "hed": cfg.hed_epochs}[stage]


def _run_hcam(bundle: ModelBundle, data: StageData, cfg: TrainConfig,
              model_cfg: ModelConfig, batches, records) -> None:
    optimizer = torch.optim.Adam(bundle.hcam.parameters(), lr=cfg.lr)
    prior_target = {
        "clip_high": data.clip_high, "video_embed": data.video_embed,
    }[model_cfg.prior_target]
    subjects = data.surface.shape[1]
    epochs = _epochs_for(cfg, "hcam")
    for epoch in range(epochs):
        # non-joint runs fit the prior first, then the alignment losses
        use_prior = cfg.joint_prior or epoch < (epochs + 1) // 2
        use_align = cfg.joint_prior or not use_prior or epochs == 1
        for b_idx, idx in enumerate(batches):
            rows = len(idx) * subjects
            spec = _mix_spec_for_batch(cfg, cfg.mixco, rows, b_idx)
            x_input = _mix_rows(data.surface[idx], spec)
            x_groups = {k: _mix_rows(v[idx], spec) for k, v in data.groups.items()}
            emb = bundle.hcam(x_input, x_groups)
            target_rows = _expand_targets(prior_target[idx], subjects)
            target_mixed = _mix_rows(target_rows, spec)
            loss_prior = hcam_mod.prior_loss(emb.f_brain, target_mixed)
            loss_align = hcam_mod.hierarchical_align_loss(
                emb.f_early, emb.f_ventral, emb.f_brain,
                data.clip_low[idx], data.clip_high[idx], spec,
            )
            if cfg.dorsal_align:
                video_rows = _expand_targets(data.video_embed[idx], subjects)
                loss_align = loss_align + hcam_mod.bimixco_loss(
                    hcam_mod.pool_tokens(emb.f_dorsal),
                    hcam_mod.pool_tokens(video_rows), spec,
                )
            total = 0.0
            if use_prior:
                total = total + loss_prior
            if use_align:
                total = total + loss_align
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            records.append({
                "stage": "hcam", "epoch": epoch, "batch": b_idx,
                "loss_total": _check_finite(total, "hcam"),
                "loss_prior": float(loss_prior.item()),
                "loss_align": float(loss_align.item()),
            })


def _within_subject_spec(cfg: TrainConfig, b: int, s: int, batch_idx: int
                         ) -> hcam_mod.MixSpec:
    """Mixing partners drawn from the same subject column, keeping labels valid."""
    rng = _rng(cfg.seed, _TAG_MIX, batch_idx)
    partner_b = rng.integers(0, b, size=b * s)
    row = np.arange(b * s)
    perm = partner_b * s + (row % s)
    lam = rng.beta(cfg.beta_a, cfg.beta_b, size=b * s)
    return hcam_mod.MixSpec(
        perm=torch.from_numpy(perm), lam=torch.from_numpy(lam).float(),
        temperature=cfg.temperature,
    )


def _run_sara(bundle: ModelBundle, data: StageData, cfg: TrainConfig,
              model_cfg: ModelConfig, batches, records) -> None:
    trainable = list(bundle.adapter.parameters()) + list(bundle.subject_clf.parameters())
    if not cfg.sara_freeze_upstream:
        trainable += list(bundle.hcam.parameters())
    optimizer = torch.optim.Adam(trainable, lr=cfg.lr)
    subjects = data.surface.shape[1]
    for epoch in range(_epochs_for(cfg, "sara")):
        for b_idx, idx in enumerate(batches):
            b = len(idx)
            if cfg.sara_freeze_upstream:
                with torch.no_grad():
                    f_brain = bundle.hcam.prior(bundle.hcam.encode_brain(data.surface[idx]))
            else:
                f_brain = bundle.hcam.prior(bundle.hcam.encode_brain(data.surface[idx]))
            if cfg.sara_mixco:
                spec = _within_subject_spec(cfg, b, subjects, b_idx)
                f_brain = _mix_rows(f_brain, spec)
            else:
                spec = hcam_mod.identity_mix_spec(b * subjects, cfg.temperature)
            out = bundle.adapter(f_brain)
            f_clip = _expand_targets(data.clip_high[idx], subjects)
            loss_align = sara_mod.align_loss(out.t_sem, f_clip, spec)
            loss_generic = sara_mod.generic_loss(out.t_sem, cfg.tau_g)
            labels = torch.arange(subjects).expand(b, subjects)
            loss_subj = sara_mod.subject_loss(out.t_subj, labels, bundle.subject_clf)
            total = sara_mod.sara_total(loss_align, loss_subj, loss_generic, cfg.sara)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            records.append({
                "stage": "sara", "epoch": epoch, "batch": b_idx,
                "loss_total": _check_finite(total, "sara"),
                "loss_align": float(loss_align.item()),
                "loss_generic": float(loss_generic.item()),
                "loss_subj": float(loss_subj.item()),
            })


def _run_hed(bundle: ModelBundle, data: StageData, cfg: TrainConfig,
             model_cfg: ModelConfig, batches, records) -> None:
    groups = [{"params": list(bundle.hed.parameters()), "lr": cfg.hed_lr}]
    if not cfg.hed_freeze_upstream:
        upstream = list(bundle.hcam.parameters()) + list(bundle.adapter.parameters())
        groups.append({"params": upstream, "lr": cfg.lr})
    optimizer = torch.optim.Adam(groups)
    schedules = hed_mod.default_schedules(cfg.schedule_period, len(batches))
    subjects = data.surface.shape[1]
    frozen = cfg.hed_freeze_upstream
    for epoch in range(_epochs_for(cfg, "hed")):
        for b_idx, idx in enumerate(batches):
            x_groups = {k: v[idx] for k, v in data.groups.items()}
            if frozen:
                with torch.no_grad():
                    _, _, fused = _forward_semantics(
                        bundle, data.surface[idx], x_groups,
                        model_cfg.use_sara_semantics,
                    )
            else:
                _, _, fused = _forward_semantics(
                    bundle, data.surface[idx], x_groups, model_cfg.use_sara_semantics
                )
            losses = {
                "caption": hed_mod.caption_loss(
                    fused["ventral"], data.captions[idx], data.caption_lens[idx],
                    bundle.hed.caption,
                ),
                "cls": hed_mod.cls_loss(fused["ventral"], data.labels[idx],
                                        bundle.hed.cls),
                "seg": hed_mod.seg_loss(fused["early"], data.seg_masks[idx],
                                        bundle.hed.seg),
                "motion": hed_mod.motion_loss(
                    bundle.hed.projector(fused["dorsal"]),
                    data.blurry_latent[idx], bundle.hed.latent,
                ),
            }
            total, weights = hed_mod.hed_total(losses, cfg.hed, schedules,
                                               epoch, b_idx)
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            record: dict[str, object] = {
                "stage": "hed", "epoch": epoch, "batch": b_idx,
                "loss_total": _check_finite(total, "hed"),
            }
            for name in hed_mod.LOSS_NAMES:
                record[f"loss_{name}"] = float(losses[name].item())
                record[f"w_{name}"] = weights[name]
            records.append(record)
    bundle.hed.mark_trained()


def load_bundle(ckpt_dir: str | Path, dataset: Dataset, model_cfg: ModelConfig,
                scheme_id: str) -> ModelBundle:
    """Rebuild models from the three stage checkpoints for inference."""
    n_subjects = checkpoint_subject_count(ckpt_dir)
    bundle = build_models(dataset, model_cfg, scheme_id, n_subjects, seed=0)
    for stage in STAGE_ORDER:
        load_stage_checkpoint(ckpt_dir, stage, bundle)
    return bundle


def reconstruct_clips(bundle: ModelBundle, dataset: Dataset, model_cfg: ModelConfig,
                      batch_size: int = 32) -> np.ndarray:
    """Run the inference path over a dataset; returns (N, S, F, H, W) clips."""
    data = stage_data(dataset, bundle.scheme)
    vae = make_vae(dataset.spec)
    chunks = []
    with torch.no_grad():
        for start in range(0, dataset.n_stimuli, batch_size):
            idx = np.arange(start, min(start + batch_size, dataset.n_stimuli))
            x_groups = {k: v[idx] for k, v in data.groups.items()}
            _, _, fused = _forward_semantics(
                bundle, data.surface[idx], x_groups, model_cfg.use_sara_semantics
            )
            frames = bundle.hed.reconstruct(
                fused["ventral"], fused["early"],
                bundle.hed.projector(fused["dorsal"]), vae,
            )
            chunks.append(frames[..., 0])
    return np.concatenate(chunks, axis=0)


def evaluate(ckpt_dir: str | Path, dataset: Dataset, model_cfg: ModelConfig,
             scheme_id: str, trial_cfg: TrialConfig,
             subjects: list[int] | None = None,
             bundle: ModelBundle | None = None) -> metrics_mod.MetricsReport:
    """Reconstruct every (stimulus, subject) pair and score the results."""
    if subjects is not None:
        dataset = dataset.subject_subset(subjects)
    if bundle is None:
        bundle = load_bundle(ckpt_dir, dataset, model_cfg, scheme_id)
    recon = reconstruct_clips(bundle, dataset, model_cfg)  # (N, S, F, H, W)
    n, s = recon.shape[:2]
    recon_flat = recon.reshape(n * s, *recon.shape[2:])
    gt_flat = np.repeat(dataset.clips, s, axis=0)
    sample_ids = np.repeat(dataset.stimulus_ids, s)
    embedder = make_embedder(dataset.spec)
    classifier = make_classifier(dataset.spec, embedder)
    return metrics_mod.build_report(recon_flat, gt_flat, embedder, classifier,
                                    trial_cfg, sample_ids=sample_ids)


def adapter_tokens(bundle: ModelBundle, dataset: Dataset, batch_size: int = 64
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Pooled semantic and subject tokens for probing, (N, S, C) each."""
    data = stage_data(dataset, bundle.scheme)
    sem_chunks, subj_chunks = [], []
    with torch.no_grad():
        for start in range(0, dataset.n_stimuli, batch_size):
            idx = np.arange(start, min(start + batch_size, dataset.n_stimuli))
            f_brain = bundle.hcam.prior(bundle.hcam.encode_brain(data.surface[idx]))
            out = bundle.adapter(f_brain)
            sem_chunks.append(out.t_sem.mean(dim=2).double().numpy())
            subj_chunks.append(out.t_subj.mean(dim=2).double().numpy())
    return np.concatenate(sem_chunks), np.concatenate(subj_chunks)
