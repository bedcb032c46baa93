"""Single entry point for the whole pipeline.

Subcommands: train-classifier, train-diffusion, attack, purify, sample,
evaluate, report, reproduce. Every run is driven by a YAML config plus
``--set section.key=value`` overrides and emits a provenance manifest.

Exit codes:
    0  success
    1  unexpected internal error
    2  usage / argument error (argparse)
    3  configuration error (parse failure, unknown key, bad value)
    4  data error (unknown dataset, corrupt cache)
    5  training failure (diverged)
    6  missing or unreadable checkpoint
    7  evaluation error (e.g. empty success-rate denominator)

Errors print one machine-parsable line to stderr:
``ERROR[<code>] <slug>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import data as data_mod
from . import diffusion as diff_mod
from . import evaluation as eval_mod
from . import models as models_mod
from .attacks import AttackConfig, load_adversarial_batch, run_threat_model, save_adversarial_batch
from .container import file_sha256, write_container
from .errors import (
    AdvPurifyError,
    ConfigError,
    ContainerFormatError,
    DataCacheError,
    EmptyDenominatorError,
    MissingCheckpointError,
    TrainingDivergedError,
    UnknownArchitectureError,
    UnknownDatasetError,
)

_ERROR_CODES: list[tuple[type[Exception], int, str]] = [
    (ConfigError, 3, "config"),
    (UnknownDatasetError, 4, "unknown-dataset"),
    (DataCacheError, 4, "data-cache"),
    (TrainingDivergedError, 5, "training-diverged"),
    (UnknownArchitectureError, 3, "unknown-architecture"),
    (MissingCheckpointError, 6, "missing-checkpoint"),
    (ContainerFormatError, 6, "bad-container"),
    (EmptyDenominatorError, 7, "empty-denominator"),
    (AdvPurifyError, 1, "internal"),
    (ValueError, 3, "invalid-value"),
]


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"--set expects section.key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def _load_config(args: argparse.Namespace) -> config_mod.RunConfig:
    overrides: dict[str, str] = {}
    env_root = os.environ.get("ADVPURIFY_DATA_ROOT")
    if env_root:
        overrides["dataset.root"] = env_root
    overrides.update(_parse_overrides(args.set or []))  # flags beat the env var
    cfg = config_mod.parse_config(args.config, overrides)
    if args.seed is not None:
        cfg = config_mod.apply_master_seed(cfg, args.seed)
    return cfg


def _dataset(cfg: config_mod.RunConfig) -> data_mod.DatasetSplit:
    section = cfg["dataset"]
    return data_mod.load_dataset(section["name"], section["root"], section["seed"])


def _train_classifier(cfg: config_mod.RunConfig, role: str, split: data_mod.DatasetSplit):
    section = cfg[f"classifier_{role}"]
    model = models_mod.build_classifier(
        section["architecture"], split.image_shape, split.num_classes, section["seed"]
    )
    report = models_mod.train_classifier(
        model, split, section["epochs"], section["learning_rate"],
        section["batch_size"], section["seed"],
    )
    return model, report


def cmd_train_classifier(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    split = _dataset(cfg)
    model, report = _train_classifier(cfg, args.role, split)
    out = Path(args.out)
    models_mod.save_checkpoint(model, out)
    config_mod.write_manifest(out.parent, cfg, {out.name: file_sha256(out, 16)})
    print(
        f"trained classifier_{args.role} ({model.architecture_id}): "
        f"test_accuracy={report.test_accuracy:.4f} final_loss={report.final_train_loss:.4f} -> {out}"
    )
    return 0


def cmd_train_diffusion(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    split = _dataset(cfg)
    section = cfg["diffusion"]
    schedule = diff_mod.make_schedule(section["timesteps"], section["beta_start"], section["beta_end"])
    model = diff_mod.build_denoiser(
        split.image_shape, section["timesteps"], section["seed"], section["base_channels"]
    )
    augment = None
    if args.adversarial_augment:
        surrogate = models_mod.load_checkpoint(args.adversarial_augment)
        augment = (surrogate, _attack_config(cfg))
    report = diff_mod.train_denoiser(
        model, schedule, split, section["epochs"], section["learning_rate"],
        section["batch_size"], section["seed"], adversarial_augment=augment,
    )
    out = Path(args.out)
    diff_mod.save_denoiser(model, out)
    config_mod.write_manifest(out.parent, cfg, {out.name: file_sha256(out, 16)})
    print(
        f"trained denoiser: final_loss={report.final_train_loss:.4f} "
        f"test_mse={report.test_mse:.4f} -> {out}"
    )
    return 0


def _attack_config(cfg: config_mod.RunConfig, kind: str | None = None) -> AttackConfig:
    section = cfg["attack"]
    return AttackConfig(
        kind=kind or section["kind"],
        epsilon=section["epsilon"],
        alpha=section["alpha"],
        iterations=section["iterations"],
        random_init=section["random_init"],
        seed=section["seed"],
    )


def cmd_attack(args: argparse.Namespace) -> int:
    # dedicated flags are sugar for --set attack.* overrides
    for flag in ("kind", "epsilon", "alpha", "iterations"):
        value = getattr(args, flag)
        if value is not None:
            args.set = (args.set or []) + [f"attack.{flag}={value}"]
    cfg = _load_config(args)
    split = _dataset(cfg)
    target = models_mod.load_checkpoint(args.target)
    surrogate = models_mod.load_checkpoint(args.surrogate) if args.surrogate else None
    batch = data_mod.take_subset(
        split.test, cfg["eval"]["subset_size"], cfg["eval"]["subset_seed"]
    )
    adv = run_threat_model(target, surrogate, batch, _attack_config(cfg), args.mode)
    out = Path(args.out)
    save_adversarial_batch(adv, out)
    config_mod.write_manifest(out.parent, cfg, {out.name: file_sha256(out, 16)})
    print(
        f"attack {adv.config.kind}/{args.mode}: n={len(batch)} "
        f"max_deviation={adv.max_deviation():.4f} -> {out}"
    )
    return 0


def cmd_purify(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    section = cfg["diffusion"]
    denoiser = diff_mod.load_denoiser(args.denoiser)
    schedule = diff_mod.make_schedule(section["timesteps"], section["beta_start"], section["beta_end"])
    adv = load_adversarial_batch(args.input)
    pconfig = diff_mod.PurifyConfig(
        t_star=section["t_star"], denoise_steps=section["denoise_steps"], seed=section["seed"]
    )
    purified = diff_mod.purify(denoiser, schedule, adv.adversarial_pixels, pconfig)
    out = Path(args.out)
    write_container(
        out, "purified-batch",
        {"t_star": pconfig.t_star, "denoise_steps": pconfig.resolved_steps(), "seed": pconfig.seed},
        {"pixels": purified, "labels": adv.true_labels},
    )
    sidecar = out.with_suffix(out.suffix + ".provenance.json")
    sidecar.write_text(json.dumps({
        "t_star": pconfig.t_star,
        "denoise_steps": pconfig.resolved_steps(),
        "seed": pconfig.seed,
        "denoiser_checkpoint_sha256": file_sha256(args.denoiser),
        "config_hash": cfg.hash(),
    }, indent=2, sort_keys=True) + "\n")
    config_mod.write_manifest(out.parent, cfg, {out.name: file_sha256(out, 16)})
    print(f"purified {purified.shape[0]} images (t_star={pconfig.t_star}) -> {out}")
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    section = cfg["diffusion"]
    denoiser = diff_mod.load_denoiser(args.denoiser)
    schedule = diff_mod.make_schedule(section["timesteps"], section["beta_start"], section["beta_end"])
    pixels = diff_mod.sample(denoiser, schedule, args.num, section["seed"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    grid = int(np.ceil(np.sqrt(args.num)))
    eval_mod.to_grid_image(pixels, grid).save(out, format="PNG")
    config_mod.write_manifest(out.parent, cfg, {out.name: file_sha256(out, 16)})
    print(f"sampled {args.num} images -> {out}")
    return 0


def _run_grid(cfg: config_mod.RunConfig, target, surrogate, denoiser, split):
    section = cfg["diffusion"]
    schedule = diff_mod.make_schedule(section["timesteps"], section["beta_start"], section["beta_end"])
    eval_batch = data_mod.take_subset(
        split.test, cfg["eval"]["subset_size"], cfg["eval"]["subset_seed"]
    )
    attack_section = cfg["attack"]
    attack_configs = {
        kind: AttackConfig(
            kind=kind,
            epsilon=attack_section["epsilon"],
            alpha=attack_section["alpha"],
            iterations=attack_section["iterations"],
            random_init=attack_section["random_init"],
            seed=attack_section["seed"],
        )
        for kind in ("pgd", "fgsm")
    }
    pconfig = diff_mod.PurifyConfig(
        t_star=section["t_star"], denoise_steps=section["denoise_steps"], seed=section["seed"]
    )
    return eval_mod.run_grid(
        target, surrogate, denoiser, schedule, eval_batch, attack_configs, pconfig,
        seed=cfg["eval"]["grid_seed"], dataset_id=cfg["dataset"]["name"],
    ), schedule, eval_batch, attack_configs, pconfig


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    split = _dataset(cfg)
    target = models_mod.load_checkpoint(args.target)
    surrogate = models_mod.load_checkpoint(args.surrogate)
    denoiser = diff_mod.load_denoiser(args.denoiser)
    report, *_ = _run_grid(cfg, target, surrogate, denoiser, split)
    out_dir = Path(args.out or cfg["eval"]["output_dir"])
    csv_path, txt_path = eval_mod.write_report(report, out_dir)
    config_mod.write_manifest(out_dir, cfg, {
        csv_path.name: file_sha256(csv_path, 16),
        txt_path.name: file_sha256(txt_path, 16),
    })
    print(txt_path.read_text())
    print(f"report -> {csv_path}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    rows = eval_mod.read_report_csv(args.results)
    header = f"{'attack':<6} {'mode':<6} {'defended':<9} {'success':>8} {'clean_acc':>10} {'n':>6}"
    print(header)
    print("-" * len(header))
    for row in rows:
        print(
            f"{row['attack']:<6} {row['mode']:<6} {str(row['defended']).lower():<9} "
            f"{row['success_rate'] * 100:>7.1f}% {row['clean_accuracy'] * 100:>9.1f}% {row['n']:>6}"
        )
    return 0


def cmd_reproduce(args: argparse.Namespace) -> int:
    """Chain the full pipeline from one config: data, classifiers A and B,
    denoiser, the eight-cell grid, report, and triptychs."""
    cfg = _load_config(args)
    out_dir = Path(args.out or cfg["eval"]["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    split = _dataset(cfg)

    target, report_a = _train_classifier(cfg, "a", split)
    surrogate, report_b = _train_classifier(cfg, "b", split)
    print(f"classifier A: test_accuracy={report_a.test_accuracy:.4f}")
    print(f"classifier B: test_accuracy={report_b.test_accuracy:.4f}")

    section = cfg["diffusion"]
    schedule = diff_mod.make_schedule(section["timesteps"], section["beta_start"], section["beta_end"])
    denoiser = diff_mod.build_denoiser(
        split.image_shape, section["timesteps"], section["seed"], section["base_channels"]
    )
    den_report = diff_mod.train_denoiser(
        denoiser, schedule, split, section["epochs"], section["learning_rate"],
        section["batch_size"], section["seed"],
    )
    print(f"denoiser: final_loss={den_report.final_train_loss:.4f} test_mse={den_report.test_mse:.4f}")

    ckpts = {
        "classifier_a.ckpt": models_mod.save_checkpoint(target, out_dir / "classifier_a.ckpt"),
        "classifier_b.ckpt": models_mod.save_checkpoint(surrogate, out_dir / "classifier_b.ckpt"),
        "denoiser.ckpt": diff_mod.save_denoiser(denoiser, out_dir / "denoiser.ckpt"),
    }

    report, schedule, eval_batch, attack_configs, pconfig = _run_grid(
        cfg, target, surrogate, denoiser, split
    )
    csv_path, txt_path = eval_mod.write_report(report, out_dir)

    # one triptych panel per (attack, mode)
    tript_n = cfg["eval"]["triptych_grid"] ** 2
    probe = data_mod.ImageBatch(eval_batch.pixels[:tript_n], eval_batch.labels[:tript_n])
    image_paths: list = []
    for kind in ("pgd", "fgsm"):
        for mode in ("white", "black"):
            adv = run_threat_model(
                target, surrogate if mode == "black" else None, probe,
                attack_configs[kind], mode,
            )
            recovered = diff_mod.purify(denoiser, schedule, adv.adversarial_pixels, pconfig)
            image_paths += eval_mod.export_triptychs(
                probe.pixels, adv.adversarial_pixels, recovered, out_dir,
                grid_size=cfg["eval"]["triptych_grid"], prefix=f"{kind}-{mode}-",
            )

    artifacts = {name: file_sha256(path, 16) for name, path in ckpts.items()}
    artifacts[csv_path.name] = file_sha256(csv_path, 16)
    artifacts[txt_path.name] = file_sha256(txt_path, 16)
    artifacts.update({path.name: file_sha256(path, 16) for path in image_paths})
    config_mod.write_manifest(out_dir, cfg, artifacts)
    print(txt_path.read_text())
    print(f"artifacts -> {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advpurify",
        description="L-inf adversarial attack benchmark with diffusion purification defense",
    )
    parser.add_argument("--config", help="YAML config file (defaults used when omitted)")
    parser.add_argument(
        "--set", action="append", metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable; highest precedence)",
    )
    parser.add_argument(
        "--seed", type=int,
        help="master seed; derives every section seed via SHA-256(master:label)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-classifier", help="train classifier A or B")
    p.add_argument("--role", choices=("a", "b"), required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("train-diffusion", help="train the denoiser")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument(
        "--adversarial-augment", metavar="SURROGATE_CKPT",
        help="optional: augment every batch with adversarial examples crafted on this classifier",
    )
    p.set_defaults(func=cmd_train_diffusion)

    p = sub.add_parser("attack", help="craft an adversarial batch")
    p.add_argument("--target", required=True, help="target classifier checkpoint")
    p.add_argument("--surrogate", help="surrogate checkpoint (black mode)")
    p.add_argument("--mode", choices=("white", "black"), required=True)
    p.add_argument("--kind", choices=("fgsm", "pgd"), help="override attack.kind")
    p.add_argument("--epsilon", type=float, help="override attack.epsilon")
    p.add_argument("--alpha", type=float, help="override attack.alpha")
    p.add_argument("--iterations", type=int, help="override attack.iterations")
    p.add_argument("--out", required=True, help="adversarial batch output path")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("purify", help="purify a saved adversarial batch")
    p.add_argument("--denoiser", required=True, help="denoiser checkpoint")
    p.add_argument("--input", required=True, help="adversarial batch container")
    p.add_argument("--out", required=True, help="purified batch output path")
    p.set_defaults(func=cmd_purify)

    p = sub.add_parser("sample", help="generate images from noise")
    p.add_argument("--denoiser", required=True)
    p.add_argument("--num", type=int, default=16)
    p.add_argument("--out", required=True, help="PNG output path")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("evaluate", help="run the 2x2x2 grid from checkpoints")
    p.add_argument("--target", required=True)
    p.add_argument("--surrogate", required=True)
    p.add_argument("--denoiser", required=True)
    p.add_argument("--out", help="output directory (default: eval.output_dir)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render a saved report.csv as a table")
    p.add_argument("--results", required=True, help="path to report.csv")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("reproduce", help="full pipeline: train everything, run grid, export report")
    p.add_argument("--out", help="output directory (default: eval.output_dir)")
    p.set_defaults(func=cmd_reproduce)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # map onto documented exit codes
        for exc_type, code, slug in _ERROR_CODES:
            if isinstance(exc, exc_type):
                print(f"ERROR[{code}] {slug}: {exc}", file=sys.stderr)
                return code
        print(f"ERROR[1] unexpected: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
