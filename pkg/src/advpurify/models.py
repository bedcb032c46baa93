"""Small differentiable classifiers: build, train, persist, query.

Two structurally different CNN architectures are provided so transfer
attacks cross a real architecture gap: ``small-cnn-a`` (two conv blocks,
the defended model) and ``small-cnn-b`` (one wider conv block, the
black-box surrogate). The public interface is numpy in / numpy out;
torch is an implementation detail.

The input-gradient oracle that attacks consume lives here
(``Classifier.loss_input_gradient``), as does the label-only oracle that
enforces the black-box boundary (``as_label_oracle``).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .container import read_container, write_container
from .data import DatasetSplit, ImageBatch, batches
from .errors import (
    MissingCheckpointError,
    OracleBoundaryError,
    ShapeMismatchError,
    TrainingDivergedError,
    UnknownArchitectureError,
)
from .seeding import derive_seed

ARCHITECTURES = ("small-cnn-a", "small-cnn-b")

_EVAL_BATCH = 512


class _SmallCnnA(nn.Module):
    """Two conv blocks + two fully connected layers."""

    def __init__(self, in_channels: int, side: int, num_classes: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 16, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(16, 32, kernel_size=3, padding=1)
        flat = 32 * (side // 4) * (side // 4)
        self.fc1 = nn.Linear(flat, 128)
        self.fc2 = nn.Linear(128, num_classes)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        x = torch.flatten(x, 1)
        x = F.relu(self.fc1(x))
        return self.fc2(x)


class _SmallCnnB(nn.Module):
    """One wide conv block + one fully connected layer; shallower than A."""

    def __init__(self, in_channels: int, side: int, num_classes: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 12, kernel_size=5, padding=2)
        flat = 12 * (side // 2) * (side // 2)
        self.fc1 = nn.Linear(flat, 64)
        self.fc2 = nn.Linear(64, num_classes)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = torch.flatten(x, 1)
        x = F.relu(self.fc1(x))
        return self.fc2(x)


_ARCH_CLASSES = {"small-cnn-a": _SmallCnnA, "small-cnn-b": _SmallCnnB}


@dataclass
class TrainReport:
    epochs_run: int
    final_train_loss: float
    test_accuracy: float | None = None
    test_mse: float | None = None
    epoch_mean_losses: list[float] | None = None

    def __post_init__(self) -> None:
        if self.test_accuracy is not None and not 0.0 <= self.test_accuracy <= 1.0:
            raise ValueError(f"test_accuracy outside [0, 1]: {self.test_accuracy}")


class Classifier:
    """A frozen-or-trainable classifier with a numpy interface.

    ``gradient_queries`` counts every input-gradient evaluation; the
    black-box harness asserts this stays flat for the target model while
    an attack runs.
    """

    def __init__(
        self,
        architecture_id: str,
        net: nn.Module,
        input_shape: tuple[int, int, int],
        num_classes: int,
    ):
        self.architecture_id = architecture_id
        self.net = net
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.gradient_queries = 0
        self.net.eval()

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    def cast(self, dtype: str) -> "Classifier":
        """Cast parameters in place to 'float32' or 'float64'; returns self."""
        self.net.to(dtype=getattr(torch, dtype))
        return self

    def _check_pixels(self, pixels: np.ndarray) -> torch.Tensor:
        if pixels.ndim != 4 or tuple(pixels.shape[1:]) != self.input_shape:
            raise ShapeMismatchError(
                f"pixels shape {pixels.shape} does not match model input {self.input_shape}"
            )
        return torch.from_numpy(np.ascontiguousarray(pixels)).to(self.dtype)

    def logits(self, pixels: np.ndarray) -> np.ndarray:
        x = self._check_pixels(pixels)
        self.net.eval()
        with torch.no_grad():
            return self.net(x).numpy()

    def predict(self, pixels: np.ndarray) -> np.ndarray:
        return self.logits(pixels).argmax(axis=1).astype(np.int64)

    def loss(self, pixels: np.ndarray, labels: np.ndarray) -> float:
        x = self._check_pixels(pixels)
        y = torch.from_numpy(np.ascontiguousarray(labels)).long()
        self.net.eval()
        with torch.no_grad():
            return float(F.cross_entropy(self.net(x), y))

    def loss_input_gradient(self, pixels: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """d(mean cross-entropy)/d(pixels); same shape and dtype as the model."""
        if labels.shape[0] != pixels.shape[0]:
            raise ShapeMismatchError(
                f"labels shape {labels.shape} does not match batch size {pixels.shape[0]}"
            )
        x = self._check_pixels(pixels).requires_grad_(True)
        y = torch.from_numpy(np.ascontiguousarray(labels)).long()
        self.net.eval()
        loss = F.cross_entropy(self.net(x), y)
        loss.backward()
        self.gradient_queries += 1
        assert x.grad is not None
        return x.grad.detach().numpy()

    def fingerprint(self) -> str:
        """SHA-256 over architecture and current parameter bytes."""
        digest = hashlib.sha256()
        digest.update(f"{self.architecture_id}:{self.input_shape}:{self.num_classes}".encode())
        for name, tensor in sorted(self.net.state_dict().items()):
            digest.update(name.encode())
            digest.update(tensor.detach().numpy().tobytes())
        return digest.hexdigest()

    @property
    def model_id(self) -> str:
        return f"{self.architecture_id}:{self.fingerprint()[:8]}"


def build_classifier(
    architecture_id: str,
    input_shape: tuple[int, int, int],
    num_classes: int,
    seed: int,
) -> Classifier:
    """Construct a classifier with parameters initialized deterministically from seed."""
    if architecture_id not in _ARCH_CLASSES:
        raise UnknownArchitectureError(
            f"unknown architecture {architecture_id!r}; supported: {', '.join(ARCHITECTURES)}"
        )
    channels, height, width = input_shape
    if height != width:
        raise ShapeMismatchError(f"square inputs required, got {input_shape}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = _ARCH_CLASSES[architecture_id](channels, height, num_classes)
    return Classifier(architecture_id, net, input_shape, num_classes)


def train_classifier(
    model: Classifier,
    split: DatasetSplit,
    epochs: int,
    learning_rate: float,
    batch_size: int,
    seed: int,
) -> TrainReport:
    """SGD-with-momentum training; mutates the model in place.

    Raises TrainingDivergedError on a non-finite loss.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    optimizer = torch.optim.SGD(model.net.parameters(), lr=learning_rate, momentum=0.9)
    model.net.train()
    epoch_means: list[float] = []
    for epoch in range(epochs):
        epoch_losses = []
        for batch in batches(split, "train", batch_size, derive_seed(seed, f"epoch-{epoch}")):
            x = torch.from_numpy(batch.pixels).to(model.dtype)
            y = torch.from_numpy(batch.labels).long()
            optimizer.zero_grad()
            loss = F.cross_entropy(model.net(x), y)
            if not torch.isfinite(loss):
                model.net.eval()
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}: {float(loss.detach())}"
                )
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
        epoch_means.append(float(np.mean(epoch_losses)))
    model.net.eval()
    accuracy = evaluate_accuracy(model, split.test)
    return TrainReport(
        epochs_run=epochs,
        final_train_loss=epoch_means[-1],
        test_accuracy=accuracy,
        epoch_mean_losses=epoch_means,
    )


def evaluate_accuracy(model: Classifier, batch: ImageBatch) -> float:
    correct = 0
    for start in range(0, len(batch), _EVAL_BATCH):
        chunk = batch.pixels[start:start + _EVAL_BATCH]
        preds = model.predict(chunk)
        correct += int((preds == batch.labels[start:start + _EVAL_BATCH]).sum())
    return correct / len(batch)


def save_checkpoint(model: Classifier, path: str | Path) -> Path:
    state = {name: tensor.detach().numpy() for name, tensor in model.net.state_dict().items()}
    meta = {
        "architecture_id": model.architecture_id,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "dtype": str(model.dtype).removeprefix("torch."),
    }
    return write_container(path, "classifier", meta, state)


def load_checkpoint(path: str | Path) -> Classifier:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpointError(f"checkpoint not found: {path}")
    _, meta, arrays = read_container(path, expected_kind="classifier")
    model = build_classifier(
        meta["architecture_id"], tuple(meta["input_shape"]), meta["num_classes"], seed=0
    )
    model.cast(meta.get("dtype", "float32"))
    state = {name: torch.from_numpy(arr) for name, arr in arrays.items()}
    model.net.load_state_dict(state)
    model.net.eval()
    return model


class LabelOracle:
    """Prediction-only view of a classifier.

    In strict mode this is the entire black-box boundary: predictions are
    the only observable, and any gradient or logits request raises
    OracleBoundaryError. Non-strict mode additionally permits logits for
    diagnostics.
    """

    def __init__(self, model: Classifier, strict: bool):
        self._model = model
        self.strict = strict

    def predict(self, pixels: np.ndarray) -> np.ndarray:
        return self._model.predict(pixels)

    def logits(self, pixels: np.ndarray) -> np.ndarray:
        if self.strict:
            raise OracleBoundaryError("strict label oracle does not expose logits")
        return self._model.logits(pixels)

    def loss_input_gradient(self, pixels: np.ndarray, labels: np.ndarray) -> np.ndarray:
        raise OracleBoundaryError("gradient request through a label oracle")


def as_label_oracle(model: Classifier, strict: bool = True) -> LabelOracle:
    return LabelOracle(model, strict)
