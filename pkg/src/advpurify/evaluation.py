"""Attack-success metrics, the full evaluation grid, and report export.

The grid covers {pgd, fgsm} x {white, black} x {defended, undefended}.
Success rate follows the standard definition: among items the target
classifies correctly when clean, the fraction whose post-pipeline
prediction no longer matches the true label. The defended pipeline is
purify -> predict; the undefended pipeline is predict.

Every defended/undefended pair shares the same adversarial batch, and all
eight cells share the same evaluation subset, so cells are comparable.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image

from .attacks import AdversarialBatch, AttackConfig, run_threat_model
from .data import ImageBatch
from .diffusion import Denoiser, NoiseSchedule, PurifyConfig, purify
from .errors import EmptyDenominatorError
from .models import Classifier
from .seeding import derive_seed

CSV_COLUMNS = [
    "attack", "mode", "defended", "success_rate", "clean_accuracy",
    "n", "epsilon", "alpha", "iterations", "t_star", "seed",
]

_PREDICT_BATCH = 512


@dataclass
class CellResult:
    """One cell of the success-rate grid."""

    attack: str
    mode: str
    defended: bool
    success_rate: float
    clean_accuracy: float
    n_evaluated: int
    config: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not 0.0 <= self.success_rate <= 1.0:
            raise ValueError(f"success_rate outside [0, 1]: {self.success_rate}")
        if self.n_evaluated <= 0:
            raise ValueError(f"n_evaluated must be positive, got {self.n_evaluated}")


@dataclass
class EvaluationReport:
    """All eight grid cells plus provenance."""

    cells: list[CellResult]
    dataset_id: str
    target_fingerprint: str
    surrogate_fingerprint: str
    denoiser_fingerprint: str
    seed: int
    timestamp: str = ""

    def __post_init__(self) -> None:
        keys = {(c.attack, c.mode, c.defended) for c in self.cells}
        if len(keys) != len(self.cells):
            raise ValueError("duplicate grid cells")
        if not self.timestamp:
            self.timestamp = datetime.now(timezone.utc).isoformat()

    def cell(self, attack: str, mode: str, defended: bool) -> CellResult:
        for c in self.cells:
            if (c.attack, c.mode, c.defended) == (attack, mode, defended):
                return c
        raise KeyError((attack, mode, defended))


def _predict_chunked(model: Classifier, pixels: np.ndarray) -> np.ndarray:
    preds = [
        model.predict(pixels[i:i + _PREDICT_BATCH])
        for i in range(0, pixels.shape[0], _PREDICT_BATCH)
    ]
    return np.concatenate(preds)


def success_rate(
    target: Classifier,
    adv: AdversarialBatch,
    defense: tuple[Denoiser, NoiseSchedule, PurifyConfig] | None = None,
) -> CellResult:
    """Success rate of one adversarial batch against one pipeline.

    Raises EmptyDenominatorError when the target misclassifies every
    clean item (the metric is undefined).
    """
    clean_pred = _predict_chunked(target, adv.original.pixels)
    correct = clean_pred == adv.true_labels
    n = int(correct.sum())
    if n == 0:
        raise EmptyDenominatorError("no clean item was classified correctly")

    if defense is None:
        pipeline_adv = adv.adversarial_pixels
        pipeline_clean = adv.original.pixels
    else:
        denoiser, schedule, pconfig = defense
        pipeline_adv = purify(denoiser, schedule, adv.adversarial_pixels, pconfig)
        pipeline_clean = purify(denoiser, schedule, adv.original.pixels, pconfig)

    post_pred = _predict_chunked(target, pipeline_adv)
    flipped = correct & (post_pred != adv.true_labels)
    clean_acc = float((_predict_chunked(target, pipeline_clean) == adv.true_labels).mean())

    mode = "white" if adv.surrogate_model_id == target.model_id else "black"
    return CellResult(
        attack=adv.config.kind,
        mode=mode,
        defended=defense is not None,
        success_rate=float(flipped.sum() / n),
        clean_accuracy=clean_acc,
        n_evaluated=n,
        config={
            "epsilon": adv.config.epsilon,
            "alpha": adv.config.alpha,
            "iterations": adv.config.iterations,
            "t_star": defense[2].t_star if defense is not None else None,
            "seed": adv.config.seed,
        },
    )


def run_grid(
    target: Classifier,
    surrogate: Classifier,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    eval_batch: ImageBatch,
    attack_configs: dict[str, AttackConfig],
    purify_config: PurifyConfig,
    seed: int,
    dataset_id: str = "",
) -> EvaluationReport:
    """Compute all eight cells on one shared evaluation subset.

    attack_configs maps "pgd" and "fgsm" to their threat parameters. Each
    (attack, mode) adversarial batch is crafted once and scored both with
    and without the purification defense.
    """
    if set(attack_configs) != {"pgd", "fgsm"}:
        raise ValueError(f"attack_configs must have exactly 'pgd' and 'fgsm', got {sorted(attack_configs)}")
    for kind, config in attack_configs.items():
        if config.kind != kind:
            raise ValueError(f"attack_configs[{kind!r}] has kind {config.kind!r}")
    purify_config.validate(schedule.T)

    cells: list[CellResult] = []
    for attack in ("pgd", "fgsm"):
        for mode in ("white", "black"):
            config = attack_configs[attack]
            config = AttackConfig(
                kind=config.kind,
                epsilon=config.epsilon,
                alpha=config.alpha,
                iterations=config.iterations,
                random_init=config.random_init,
                seed=derive_seed(seed, f"attack-{attack}-{mode}"),
            )
            adv = run_threat_model(
                target, surrogate if mode == "black" else None, eval_batch, config, mode
            )
            defense_seed = derive_seed(seed, f"purify-{attack}-{mode}")
            defense = (
                denoiser,
                schedule,
                PurifyConfig(
                    t_star=purify_config.t_star,
                    denoise_steps=purify_config.denoise_steps,
                    seed=defense_seed,
                ),
            )
            for cell_defense in (None, defense):
                cell = success_rate(target, adv, cell_defense)
                if cell.mode != mode:  # provenance sanity: fingerprints must agree
                    raise ValueError(f"provenance mismatch: expected {mode}, inferred {cell.mode}")
                cells.append(cell)

    return EvaluationReport(
        cells=cells,
        dataset_id=dataset_id,
        target_fingerprint=target.fingerprint()[:16],
        surrogate_fingerprint=surrogate.fingerprint()[:16],
        denoiser_fingerprint=denoiser.fingerprint()[:16],
        seed=seed,
    )


def to_grid_image(pixels: np.ndarray, grid_size: int) -> Image.Image:
    """Tile the first grid_size^2 images into one uint8 image."""
    n, channels, height, width = pixels.shape
    rows = cols = grid_size
    canvas = np.zeros((channels, rows * height, cols * width), dtype=np.float32)
    for idx in range(min(n, rows * cols)):
        r, c = divmod(idx, cols)
        canvas[:, r * height:(r + 1) * height, c * width:(c + 1) * width] = pixels[idx]
    arr = np.round(canvas * 255.0).astype(np.uint8)
    if channels == 1:
        return Image.fromarray(arr[0], mode="L")
    return Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")


def export_triptychs(
    original: np.ndarray,
    attacked: np.ndarray,
    recovered: np.ndarray,
    out_dir: str | Path,
    grid_size: int = 4,
    prefix: str = "",
) -> list[Path]:
    """Write lossless PNG grids for each stage plus a combined panel.

    Returns the four file paths: original, attacked, recovered, triptych.
    """
    if not (original.shape == attacked.shape == recovered.shape):
        raise ValueError(
            f"stage shapes differ: {original.shape}, {attacked.shape}, {recovered.shape}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stages = {"original": original, "attacked": attacked, "recovered": recovered}
    paths: list[Path] = []
    images: list[Image.Image] = []
    for stage, pixels in stages.items():
        img = to_grid_image(pixels, grid_size)
        path = out_dir / f"{prefix}{stage}.png"
        img.save(path, format="PNG")
        paths.append(path)
        images.append(img)

    gap = 8
    width = sum(im.width for im in images) + 2 * gap
    mode = images[0].mode
    panel = Image.new(mode, (width, images[0].height), color=255 if mode == "L" else (255, 255, 255))
    x = 0
    for im in images:
        panel.paste(im, (x, 0))
        x += im.width + gap
    panel_path = out_dir / f"{prefix}triptych.png"
    panel.save(panel_path, format="PNG")
    paths.append(panel_path)
    return paths


def write_report(report: EvaluationReport, out_dir: str | Path) -> tuple[Path, Path]:
    """Write report.csv (one row per cell, full precision) and report.txt
    (human-readable table, percentages with one decimal).

    The CSV is deterministic given the report's cells and seeds: no
    timestamps, stable row order, repr-exact floats.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "report.csv"
    txt_path = out_dir / "report.txt"

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for cell in sorted(report.cells, key=lambda c: (c.attack, c.mode, c.defended)):
        cfg = cell.config
        writer.writerow(
            [
                cell.attack,
                cell.mode,
                str(cell.defended).lower(),
                repr(cell.success_rate),
                repr(cell.clean_accuracy),
                cell.n_evaluated,
                repr(cfg.get("epsilon")),
                repr(cfg.get("alpha")),
                cfg.get("iterations"),
                cfg.get("t_star") if cfg.get("t_star") is not None else "",
                cfg.get("seed"),
            ]
        )
    csv_path.write_text(buffer.getvalue())

    txt_path.write_text(_human_table(report))
    return csv_path, txt_path


def _human_table(report: EvaluationReport) -> str:
    def pct(value: float) -> str:
        return f"{value * 100.0:.1f}"

    lines = [
        "Adversarial Attack Success Rates (%)",
        "(\"Without Diffusion\" = undefended pipeline, \"With Diffusion\" = purify -> predict)",
        "",
        f"{'Type':<10} {'PGD':>24} {'FGSM':>25}",
        f"{'':<10} {'Without':>11} {'With':>12} {'Without':>12} {'With':>12}",
    ]
    for mode, label in (("white", "White Box"), ("black", "Black Box")):
        row = [f"{label:<10}"]
        for attack in ("pgd", "fgsm"):
            row.append(f"{pct(report.cell(attack, mode, False).success_rate):>11}")
            row.append(f"{pct(report.cell(attack, mode, True).success_rate):>12}")
        lines.append(" ".join(row))
    lines.append("")
    lines.append("Clean accuracy (%): "
                 f"undefended {pct(report.cell('pgd', 'white', False).clean_accuracy)}, "
                 f"purified {pct(report.cell('pgd', 'white', True).clean_accuracy)}")
    any_cfg = report.cells[0].config
    defended_cfg = report.cell("pgd", "white", True).config
    lines.append(
        f"Config: epsilon={any_cfg.get('epsilon')}, alpha={any_cfg.get('alpha')}, "
        f"iterations={any_cfg.get('iterations')}, t_star={defended_cfg.get('t_star')}, "
        f"n={report.cells[0].n_evaluated}, seed={report.seed}"
    )
    lines.append(
        f"Checkpoints: target={report.target_fingerprint} surrogate={report.surrogate_fingerprint} "
        f"denoiser={report.denoiser_fingerprint} dataset={report.dataset_id}"
    )
    return "\n".join(lines) + "\n"


def read_report_csv(path: str | Path) -> list[dict]:
    """Parse report.csv back into typed row dicts (exact float round-trip)."""
    rows = []
    with open(path, newline="") as fh:
        for record in csv.DictReader(fh):
            rows.append(
                {
                    "attack": record["attack"],
                    "mode": record["mode"],
                    "defended": record["defended"] == "true",
                    "success_rate": float(record["success_rate"]),
                    "clean_accuracy": float(record["clean_accuracy"]),
                    "n": int(record["n"]),
                    "epsilon": float(record["epsilon"]),
                    "alpha": float(record["alpha"]),
                    "iterations": int(record["iterations"]),
                    "t_star": int(record["t_star"]) if record["t_star"] else None,
                    "seed": int(record["seed"]),
                }
            )
    return rows
