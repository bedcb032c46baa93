"""Unconditional pixel-space denoising diffusion.

Covers the full defense stack: linear noise schedule, closed-form forward
noising, a small residual conv net with sinusoidal time embedding that
predicts the added noise, ancestral sampling, and purification (partially
noise an input to step t*, then denoise it back).

Step indices are 1-based: t ranges over [1, T], and schedule arrays store
index t at position t-1. The reverse update is

    z_{t-1} = (z_t - beta_t / sqrt(1 - alpha_bar_t) * eps_pred) / sqrt(alpha_t)
              + sqrt(beta_t) * xi,

with the stochastic term omitted at t = 1.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .container import read_container, write_container
from .data import DatasetSplit, ImageBatch, batches
from .errors import MissingCheckpointError, TrainingDivergedError
from .models import TrainReport
from .seeding import derive_seed


@dataclass(frozen=True)
class NoiseSchedule:
    """Diffusion constants over T steps; arrays are float64 and 0-indexed."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def coeffs(self, t: int | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t)) for 1-based t."""
        ab = self.alpha_bar[np.asarray(t) - 1]
        return np.sqrt(ab), np.sqrt(1.0 - ab)


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule; alpha_bar is the running product of (1 - beta)."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def forward_noise(
    schedule: NoiseSchedule, z0: np.ndarray, t: int | np.ndarray, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """One-jump forward noising: z_t = sqrt(ab_t) z0 + sqrt(1-ab_t) eps.

    t may be a scalar or a per-item array of shape (batch,). Returns
    (z_t, eps) so training can supervise the noise.
    """
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.T):
        raise ValueError(f"t must be in [1, {schedule.T}], got {t}")
    rng = np.random.Generator(np.random.PCG64(seed))
    eps = rng.standard_normal(z0.shape).astype(z0.dtype)
    c_signal, c_noise = schedule.coeffs(t_arr)
    if t_arr.ndim == 1:
        c_signal = c_signal.reshape(-1, *([1] * (z0.ndim - 1)))
        c_noise = c_noise.reshape(-1, *([1] * (z0.ndim - 1)))
    zt = (c_signal * z0 + c_noise * eps).astype(z0.dtype)
    return zt, eps


@dataclass(frozen=True)
class PurifyConfig:
    """Forward-noising depth and reverse iteration count for purification."""

    t_star: int
    denoise_steps: int | None = None
    seed: int = 0

    def resolved_steps(self) -> int:
        return self.t_star if self.denoise_steps is None else self.denoise_steps

    def validate(self, T: int) -> None:
        if not 1 <= self.t_star <= T:
            raise ValueError(f"t_star must be in [1, {T}], got {self.t_star}")
        steps = self.resolved_steps()
        if not 1 <= steps <= self.t_star:
            raise ValueError(
                f"denoise_steps must be in [1, t_star={self.t_star}], got {steps}"
            )


class _TimeEmbedding(nn.Module):
    """Sinusoidal features of the step index followed by a two-layer MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.SiLU(), nn.Linear(dim * 2, dim * 2))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / (half - 1)
        )
        angles = t.float()[:, None] * freqs[None, :]
        feats = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
        return self.mlp(feats)


class _ResBlock(nn.Module):
    def __init__(self, channels: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, channels)
        self.norm2 = nn.GroupNorm(8, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class _NoisePredictionNet(nn.Module):
    """Residual conv U-Net over three resolutions (full, /2, /4).

    The /4 level gives the net image-global context, which matters when
    reconstructing glyph structure from heavy noise. Input and output
    shapes match; side length must be divisible by 4.
    """

    def __init__(self, in_channels: int, base_channels: int = 16, emb_dim: int = 64):
        super().__init__()
        c1, c2, c3 = base_channels, base_channels * 2, base_channels * 4
        emb_out = emb_dim * 2
        self.time_emb = _TimeEmbedding(emb_dim)
        self.conv_in = nn.Conv2d(in_channels, c1, 3, padding=1)
        self.enc1 = _ResBlock(c1, emb_out)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = _ResBlock(c2, emb_out)
        self.down2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.mid1 = _ResBlock(c3, emb_out)
        self.mid2 = _ResBlock(c3, emb_out)
        self.up2 = nn.ConvTranspose2d(c3, c2, 2, stride=2)
        self.fuse2 = nn.Conv2d(c2 * 2, c2, 3, padding=1)
        self.dec2 = _ResBlock(c2, emb_out)
        self.up1 = nn.ConvTranspose2d(c2, c1, 2, stride=2)
        self.fuse1 = nn.Conv2d(c1 * 2, c1, 3, padding=1)
        self.dec1 = _ResBlock(c1, emb_out)
        self.conv_out = nn.Conv2d(c1, in_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = self.time_emb(t)
        h1 = self.enc1(self.conv_in(x), emb)
        h2 = self.enc2(self.down1(h1), emb)
        h3 = self.mid2(self.mid1(self.down2(h2), emb), emb)
        d2 = self.dec2(self.fuse2(torch.cat([self.up2(h3), h2], dim=1)), emb)
        d1 = self.dec1(self.fuse1(torch.cat([self.up1(d2), h1], dim=1)), emb)
        return self.conv_out(d1)


class Denoiser:
    """Noise-prediction model bound to a schedule length T."""

    def __init__(self, net: nn.Module, input_shape: tuple[int, int, int], T: int,
                 base_channels: int = 16):
        self.net = net
        self.input_shape = tuple(input_shape)
        self.T = T
        self.base_channels = base_channels
        self.net.eval()

    def predict_noise(self, zt: np.ndarray, t: int | np.ndarray) -> np.ndarray:
        t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
        if t_arr.shape[0] == 1:
            t_arr = np.repeat(t_arr, zt.shape[0])
        self.net.eval()
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(zt)).float()
            out = self.net(x, torch.from_numpy(t_arr))
        return out.numpy().astype(zt.dtype)

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(f"denoiser:{self.input_shape}:{self.T}".encode())
        for name, tensor in sorted(self.net.state_dict().items()):
            digest.update(name.encode())
            digest.update(tensor.detach().numpy().tobytes())
        return digest.hexdigest()


def build_denoiser(
    input_shape: tuple[int, int, int], T: int, seed: int, base_channels: int = 16
) -> Denoiser:
    channels = input_shape[0]
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = _NoisePredictionNet(channels, base_channels)
    return Denoiser(net, input_shape, T, base_channels)


def train_denoiser(
    model: Denoiser,
    schedule: NoiseSchedule,
    split: DatasetSplit,
    epochs: int,
    learning_rate: float,
    batch_size: int,
    seed: int,
    adversarial_augment=None,
) -> TrainReport:
    """Minimize MSE between predicted and true noise at uniformly drawn t.

    When adversarial_augment is a (surrogate classifier, AttackConfig)
    pair, each batch is concatenated with perturb(batch) before noising,
    doubling the effective batch size. Returns a report whose test_mse is
    the held-out denoising error.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    optimizer = torch.optim.Adam(model.net.parameters(), lr=learning_rate)
    model.net.train()
    epoch_means: list[float] = []
    for epoch in range(epochs):
        rng = np.random.Generator(np.random.PCG64(derive_seed(seed, f"noise-epoch-{epoch}")))
        losses = []
        for batch in batches(split, "train", batch_size, derive_seed(seed, f"epoch-{epoch}")):
            pixels = batch.pixels
            if adversarial_augment is not None:
                pixels = np.concatenate([pixels, _perturb(adversarial_augment, batch)], axis=0)
            n = pixels.shape[0]
            t = rng.integers(1, schedule.T + 1, size=n)
            eps = rng.standard_normal(pixels.shape).astype(np.float32)
            c_signal, c_noise = schedule.coeffs(t)
            shape = (-1, 1, 1, 1)
            zt = (
                c_signal.reshape(shape) * pixels + c_noise.reshape(shape) * eps
            ).astype(np.float32)

            optimizer.zero_grad()
            pred = model.net(torch.from_numpy(zt), torch.from_numpy(t))
            loss = F.mse_loss(pred, torch.from_numpy(eps))
            if not torch.isfinite(loss):
                model.net.eval()
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}: {float(loss.detach())}"
                )
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        epoch_means.append(float(np.mean(losses)))
    model.net.eval()
    return TrainReport(
        epochs_run=epochs,
        final_train_loss=epoch_means[-1],
        test_mse=held_out_mse(model, schedule, split.test, derive_seed(seed, "held-out")),
        epoch_mean_losses=epoch_means,
    )


def _perturb(adversarial_augment, batch: ImageBatch) -> np.ndarray:
    from .attacks import AttackConfig, fgsm, pgd  # local import: attacks also imports models

    surrogate, config = adversarial_augment
    if not isinstance(config, AttackConfig):
        raise TypeError("adversarial_augment must be (classifier, AttackConfig)")
    if config.kind == "fgsm":
        return fgsm(surrogate, batch, config.epsilon).adversarial_pixels
    return pgd(surrogate, batch, config).adversarial_pixels


def held_out_mse(
    model: Denoiser, schedule: NoiseSchedule, test: ImageBatch, seed: int, limit: int = 1024
) -> float:
    """Denoising MSE on held-out images at uniformly drawn t (diagnostic)."""
    pixels = test.pixels[:limit]
    rng = np.random.Generator(np.random.PCG64(seed))
    t = rng.integers(1, schedule.T + 1, size=pixels.shape[0])
    zt, eps = forward_noise(schedule, pixels, t, derive_seed(seed, "eps"))
    pred = model.predict_noise(zt, t)
    return float(np.mean((pred - eps) ** 2))


def denoise_step(
    model, schedule: NoiseSchedule, zt: np.ndarray, t: int, seed: int
) -> np.ndarray:
    """One ancestral reverse step from z_t to z_{t-1} (1-based t)."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t must be in [1, {schedule.T}], got {t}")
    beta_t = schedule.beta[t - 1]
    alpha_t = schedule.alpha[t - 1]
    ab_t = schedule.alpha_bar[t - 1]
    eps_pred = model.predict_noise(zt, t)
    mean = (zt - (beta_t / np.sqrt(1.0 - ab_t)) * eps_pred) / np.sqrt(alpha_t)
    if t == 1:
        return mean.astype(zt.dtype)
    rng = np.random.Generator(np.random.PCG64(seed))
    xi = rng.standard_normal(zt.shape).astype(zt.dtype)
    return (mean + np.sqrt(beta_t) * xi).astype(zt.dtype)


def denoise_from(model, schedule: NoiseSchedule, zt: np.ndarray, t_start: int, seed: int,
                 steps: int | None = None) -> np.ndarray:
    """Run ancestral steps from t_start downward.

    With steps == t_start (the default) this walks all the way to z_0.
    Fewer steps stop early and finish with the closed-form z0 estimate
    from the last noise prediction.
    """
    steps = t_start if steps is None else steps
    if not 1 <= steps <= t_start:
        raise ValueError(f"steps must be in [1, {t_start}], got {steps}")
    z = zt
    for t in range(t_start, t_start - steps, -1):
        z = denoise_step(model, schedule, z, t, derive_seed(seed, f"reverse-{t}"))
    remaining = t_start - steps
    if remaining >= 1:
        eps_pred = model.predict_noise(z, remaining)
        c_signal, c_noise = schedule.coeffs(remaining)
        z = ((z - c_noise * eps_pred) / c_signal).astype(zt.dtype)
    return z


def sample(model, schedule: NoiseSchedule, num_images: int, seed: int) -> np.ndarray:
    """Generate images from pure noise; returns pixels in [0, 1]."""
    shape = (num_images, *model.input_shape)
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "init-noise")))
    z = rng.standard_normal(shape).astype(np.float32)
    z = denoise_from(model, schedule, z, schedule.T, derive_seed(seed, "ladder"))
    return np.clip(z, 0.0, 1.0)


def purify(model, schedule: NoiseSchedule, pixels: np.ndarray, config: PurifyConfig) -> np.ndarray:
    """Noise the input to t_star in one closed-form jump, then denoise back.

    Output has the input's shape and lies in [0, 1]. Adversarial
    perturbations are drowned by the injected noise and stripped by the
    learned reverse process.
    """
    config.validate(schedule.T)
    zt, _ = forward_noise(schedule, pixels, config.t_star, derive_seed(config.seed, "forward"))
    z = denoise_from(
        model, schedule, zt, config.t_star, derive_seed(config.seed, "reverse"),
        steps=config.resolved_steps(),
    )
    return np.clip(z, 0.0, 1.0).astype(pixels.dtype)


def save_denoiser(model: Denoiser, path: str | Path) -> Path:
    state = {name: tensor.detach().numpy() for name, tensor in model.net.state_dict().items()}
    meta = {
        "input_shape": list(model.input_shape),
        "T": model.T,
        "base_channels": model.base_channels,
    }
    return write_container(path, "denoiser", meta, state)


def load_denoiser(path: str | Path) -> Denoiser:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpointError(f"denoiser checkpoint not found: {path}")
    _, meta, arrays = read_container(path, expected_kind="denoiser")
    model = build_denoiser(
        tuple(meta["input_shape"]), meta["T"], seed=0,
        base_channels=meta.get("base_channels", 16),
    )
    state = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    model.net.load_state_dict(state)
    model.net.eval()
    return model
