"""FGSM and PGD under an explicit L-inf threat model, plus the
white-box/black-box harness that decides whose gradients the attacker
may use.

Both attacks are untargeted: they ascend the cross-entropy loss of the
true label. PGD tracks the perturbation delta rather than the perturbed
image so that a single projected step with alpha == epsilon reproduces
FGSM bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .container import read_container, write_container
from .data import ImageBatch
from .errors import ShapeMismatchError
from .models import Classifier, as_label_oracle

BALL_SLACK = 1e-6  # float tolerance on the L-inf containment invariant


@dataclass(frozen=True)
class AttackConfig:
    """Threat-model parameters. epsilon/alpha are in pixel units on [0, 1]."""

    kind: str  # "fgsm" | "pgd"
    epsilon: float
    alpha: float = 0.025
    iterations: int = 10
    random_init: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("fgsm", "pgd"):
            raise ValueError(f"kind must be 'fgsm' or 'pgd', got {self.kind!r}")
        if not 0.0 < self.epsilon <= 0.5:
            raise ValueError(f"epsilon must be in (0, 0.5], got {self.epsilon}")
        if self.kind == "pgd":
            if self.alpha <= 0 or self.alpha > self.epsilon:
                raise ValueError(
                    f"pgd requires 0 < alpha <= epsilon, got alpha={self.alpha}, epsilon={self.epsilon}"
                )
            if self.iterations < 1:
                raise ValueError(f"iterations must be >= 1, got {self.iterations}")


@dataclass
class AdversarialBatch:
    """Attack output: perturbed pixels plus provenance.

    Construction enforces the threat-model invariants: adversarial pixels
    stay within epsilon (plus float slack) of the originals and inside
    [0, 1].
    """

    original: ImageBatch
    adversarial_pixels: np.ndarray
    true_labels: np.ndarray
    surrogate_model_id: str
    config: AttackConfig

    def __post_init__(self) -> None:
        if self.adversarial_pixels.shape != self.original.pixels.shape:
            raise ShapeMismatchError(
                f"adversarial pixels shape {self.adversarial_pixels.shape} "
                f"!= original {self.original.pixels.shape}"
            )
        deviation = float(np.abs(self.adversarial_pixels - self.original.pixels).max())
        if deviation > self.config.epsilon + BALL_SLACK:
            raise ValueError(
                f"L-inf deviation {deviation} exceeds epsilon {self.config.epsilon}"
            )
        lo, hi = float(self.adversarial_pixels.min()), float(self.adversarial_pixels.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"adversarial pixels outside [0, 1]: min={lo}, max={hi}")

    def max_deviation(self) -> float:
        return float(np.abs(self.adversarial_pixels - self.original.pixels).max())


def fgsm(model: Classifier, batch: ImageBatch, epsilon: float) -> AdversarialBatch:
    """Single-step signed-gradient attack: clamp(X + epsilon * sign(dL/dX)).

    epsilon == 0 is tolerated (identity perturbation) so the zero limit is
    testable; threat-model configs still require epsilon > 0.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    grad = model.loss_input_gradient(batch.pixels, batch.labels)
    step = np.float32(epsilon) * np.sign(grad)
    adversarial = np.clip(batch.pixels + step.astype(batch.pixels.dtype), 0.0, 1.0)
    eps_recorded = epsilon if epsilon > 0 else 1e-12  # config type forbids exactly 0
    config = AttackConfig(
        kind="fgsm", epsilon=eps_recorded, alpha=eps_recorded, iterations=1, random_init=False
    )
    return AdversarialBatch(batch, adversarial, batch.labels.copy(), model.model_id, config)


def pgd(
    model: Classifier,
    batch: ImageBatch,
    config: AttackConfig,
    step_callback: Callable[[int, np.ndarray], None] | None = None,
) -> AdversarialBatch:
    """Iterative signed-gradient ascent with per-step projection onto the
    epsilon-ball and clamp to [0, 1].

    The optional step_callback receives (iteration, current adversarial
    pixels) after every projected step, for instrumentation.
    """
    if config.kind != "pgd":
        raise ValueError(f"pgd called with config kind {config.kind!r}")
    pixels = batch.pixels
    eps = np.float32(config.epsilon)
    alpha = np.float32(config.alpha)

    if config.random_init:
        rng = np.random.Generator(np.random.PCG64(config.seed))
        delta = rng.uniform(-config.epsilon, config.epsilon, size=pixels.shape).astype(
            pixels.dtype
        )
        delta = np.clip(delta, -eps, eps)
    else:
        delta = np.zeros_like(pixels)

    for iteration in range(config.iterations):
        current = np.clip(pixels + delta, 0.0, 1.0)
        grad = model.loss_input_gradient(current, batch.labels)
        delta = np.clip(delta + alpha * np.sign(grad).astype(pixels.dtype), -eps, eps)
        if step_callback is not None:
            step_callback(iteration, np.clip(pixels + delta, 0.0, 1.0))

    adversarial = np.clip(pixels + delta, 0.0, 1.0)
    return AdversarialBatch(batch, adversarial, batch.labels.copy(), model.model_id, config)


def run_threat_model(
    target: Classifier,
    surrogate: Classifier | None,
    batch: ImageBatch,
    config: AttackConfig,
    mode: str,
) -> AdversarialBatch:
    """Craft an adversarial batch under the requested threat model.

    white: gradients come from the target itself; surrogate must be None.
    black: gradients come from the surrogate only; the target is wrapped
    as a strict label oracle for the duration, so any gradient query
    against it would raise (and its query counter stays flat).
    """
    if mode == "white":
        if surrogate is not None:
            raise ValueError("white-box mode takes its gradients from the target; pass surrogate=None")
        attacker = target
    elif mode == "black":
        if surrogate is None:
            raise ValueError("black-box mode requires a surrogate model")
        if surrogate is target or surrogate.fingerprint() == target.fingerprint():
            raise ValueError("black-box mode requires a surrogate distinct from the target")
        # From here on the attacker's only view of the target is a strict
        # prediction oracle: a gradient request through it raises, so
        # crafting can only use surrogate gradients.
        target = as_label_oracle(target, strict=True)
        attacker = surrogate
    else:
        raise ValueError(f"mode must be 'white' or 'black', got {mode!r}")

    if config.kind == "fgsm":
        result = fgsm(attacker, batch, config.epsilon)
        # keep the caller's config so the batch records the requested threat model
        result = AdversarialBatch(
            result.original, result.adversarial_pixels, result.true_labels,
            result.surrogate_model_id, config,
        )
    else:
        result = pgd(attacker, batch, config)
    return result


def save_adversarial_batch(adv: AdversarialBatch, path: str | Path) -> Path:
    meta = {
        "surrogate_model_id": adv.surrogate_model_id,
        "config": {
            "kind": adv.config.kind,
            "epsilon": adv.config.epsilon,
            "alpha": adv.config.alpha,
            "iterations": adv.config.iterations,
            "random_init": adv.config.random_init,
            "seed": adv.config.seed,
        },
    }
    arrays = {
        "original_pixels": adv.original.pixels,
        "adversarial_pixels": adv.adversarial_pixels,
        "labels": adv.true_labels,
    }
    return write_container(path, "adversarial-batch", meta, arrays)


def load_adversarial_batch(path: str | Path) -> AdversarialBatch:
    _, meta, arrays = read_container(path, expected_kind="adversarial-batch")
    original = ImageBatch(arrays["original_pixels"], arrays["labels"])
    config = AttackConfig(**meta["config"])
    return AdversarialBatch(
        original, arrays["adversarial_pixels"], arrays["labels"], meta["surrogate_model_id"], config
    )
