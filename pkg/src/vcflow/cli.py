"""Command-line pipeline: synth -> preprocess -> train -> eval -> report.

Every command is deterministic given config plus seed, so re-running a
step overwrites its outputs with identical bytes. Exit codes: 0 success,
1 validation/config error, 2 runtime failure. The VCFLOW_SEED environment
variable overrides the base seed (lowest precedence is the config file,
then the environment, then --seed); the effective seed and its source are
echoed into the metrics file.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import datasets, metrics, tensorio, trainer
from .config import CliConfig, load_config
from .errors import ConfigError, MissingUpstreamCheckpoint, ValidationError, VcflowError

SEED_ENV_VAR = "VCFLOW_SEED"


def _paths(cfg: CliConfig) -> dict[str, Path]:
    out = Path(cfg.out_dir)
    return {
        "out": out,
        "dataset": out / "dataset",
        "manifest": out / "dataset" / "manifest.txt",
        "train_split": out / "dataset" / "split_train.txt",
        "test_split": out / "dataset" / "split_test.txt",
        "processed": out / "processed",
        "checkpoints": out / "checkpoints",
        "eval": out / "eval",
        "metrics": out / "eval" / "metrics.txt",
        "report": out / "eval" / "report.txt",
    }


def cmd_synth(cfg: CliConfig) -> None:
    paths = _paths(cfg)
    manifest = datasets.generate(cfg.synth, paths["dataset"])
    datasets.split(manifest, (cfg.train_ratio, 1.0 - cfg.train_ratio), cfg.seed)
    print(f"dataset written to {paths['dataset']}")


def cmd_preprocess(cfg: CliConfig) -> None:
    paths = _paths(cfg)
    if not paths["manifest"].exists():
        raise ConfigError("no dataset to preprocess; run synth first")
    manifest = datasets.preprocess_dataset(paths["manifest"], paths["processed"])
    print(f"processed manifest at {manifest}")


def _train_dataset(cfg: CliConfig, paths: dict[str, Path]) -> datasets.Dataset:
    if not paths["train_split"].exists():
        raise ConfigError("no training split; run synth first")
    dataset = datasets.load_dataset(paths["train_split"])
    holdout = cfg.train.holdout_subject
    if holdout >= 0:
        if holdout >= dataset.n_subjects:
            raise ConfigError(f"holdout subject {holdout} out of range")
        keep = [s for s in range(dataset.n_subjects) if s != holdout]
        dataset = dataset.subject_subset(keep)
    return dataset


def cmd_train(cfg: CliConfig) -> None:
    paths = _paths(cfg)
    dataset = _train_dataset(cfg, paths)
    records = trainer.train(dataset, cfg.train, cfg.model, cfg.scheme_id,
                            paths["checkpoints"])
    final = records[-1]["loss_total"] if records else float("nan")
    print(f"trained stage {cfg.train.stage}; final batch loss {final}")


def cmd_eval(cfg: CliConfig) -> None:
    paths = _paths(cfg)
    if not paths["test_split"].exists():
        raise ConfigError("no test split; run synth first")
    for fname in trainer.STAGE_FILES.values():
        if not (paths["checkpoints"] / fname).exists():
            raise MissingUpstreamCheckpoint(
                f"missing checkpoint {fname}; run train before eval"
            )
    dataset = datasets.load_dataset(paths["test_split"])
    holdout = cfg.train.holdout_subject
    subjects = [holdout] if holdout >= 0 else None
    report = trainer.evaluate(paths["checkpoints"], dataset, cfg.model,
                              cfg.scheme_id, cfg.trial, subjects=subjects)
    paths["eval"].mkdir(parents=True, exist_ok=True)
    seed_source = "config"
    if os.environ.get(SEED_ENV_VAR):
        seed_source = "env"
    header = (
        f"# base_seed = {cfg.seed}\n"
        f"# seed_source = {seed_source}\n"
        f"# scheme_id = {cfg.scheme_id}\n"
    )
    paths["metrics"].write_text(header + report.to_text())
    if cfg.train.dump_pgm:
        dump_dir = paths["eval"] / "recon"
        dump_dir.mkdir(parents=True, exist_ok=True)
        bundle = trainer.load_bundle(paths["checkpoints"], dataset, cfg.model,
                                     cfg.scheme_id)
        view = dataset if subjects is None else dataset.subject_subset(subjects)
        clips = trainer.reconstruct_clips(bundle, view, cfg.model)
        for i in range(min(4, clips.shape[0])):
            for f in range(clips.shape[2]):
                tensorio.write_pgm(dump_dir / f"stim{i:04d}_s0_f{f:02d}.pgm",
                                   clips[i, 0, f])
    print(f"metrics written to {paths['metrics']}")


def cmd_report(cfg: CliConfig) -> None:
    paths = _paths(cfg)
    if not paths["metrics"].exists():
        raise ConfigError("no metrics file; run eval first")
    report = metrics.MetricsReport.from_text(paths["metrics"].read_text())
    table = metrics.report_table(report)
    paths["report"].write_text(table)
    print(table, end="")


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def _parse_set(values: list[str]) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for item in values:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    return overrides


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key=value config file")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        help="override one config key")
    common.add_argument("--seed", type=int, help="base seed override")
    common.add_argument("--out", metavar="DIR", help="output directory")
    parser = argparse.ArgumentParser(
        prog="vcflow",
        description="synthetic fMRI-to-video decoding pipeline",
        parents=[common],
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__doc__)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        seed = args.seed
        if seed is None and os.environ.get(SEED_ENV_VAR):
            try:
                seed = int(os.environ[SEED_ENV_VAR])
            except ValueError as exc:
                raise ConfigError(f"{SEED_ENV_VAR} must be an integer") from exc
        cfg = load_config(args.config, _parse_set(args.set), seed=seed,
                          out_dir=args.out)
        cfg = cfg.resolved()
        COMMANDS[args.command](cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except VcflowError as exc:
        print(f"pipeline failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
