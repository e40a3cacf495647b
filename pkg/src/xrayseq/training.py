"""Head training with Adam and binary cross-entropy, plus inference helpers."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import EmptyInput, NumericalError, ShapeMismatch
from .images import TripletBatch
from .models import BuiltModel, load_checkpoint, save_checkpoint

__all__ = [
    "TrainConfig",
    "TrainHistory",
    "binary_cross_entropy",
    "per_label_accuracy",
    "batch_inputs",
    "predict_batch",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

# Probability clipping used when the loss is computed from probabilities.
PROB_EPS = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 100
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-7
    threshold: float = 0.5
    seed: int = 0
    shuffle_each_epoch: bool = True
    deterministic: bool = True

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    val_label_accuracy: list[list[float]] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "TrainHistory":
        return cls(**json.loads(text))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "TrainHistory":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def binary_cross_entropy(probs: torch.Tensor | np.ndarray, targets: torch.Tensor | np.ndarray) -> torch.Tensor:
    """Mean over labels and batch of the per-label binary cross-entropy."""
    p = torch.as_tensor(probs, dtype=torch.float64).clamp(PROB_EPS, 1 - PROB_EPS)
    y = torch.as_tensor(targets, dtype=torch.float64)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


def per_label_accuracy(probs: np.ndarray, targets: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return ((probs >= threshold) == (targets >= 0.5)).mean(axis=0)


def batch_inputs(batch: TripletBatch, branches: int) -> tuple[np.ndarray, ...]:
    """The image arrays a model with ``branches`` inputs consumes; 1 branch sees the third image."""
    return batch.inputs if branches == 3 else (batch.third,)


def predict_batch(model: BuiltModel, batch: TripletBatch | Sequence[np.ndarray]) -> np.ndarray:
    """Inference-mode probabilities, shape (batch, 15)."""
    inputs = batch_inputs(batch, model.config.branches) if isinstance(batch, TripletBatch) else tuple(batch)
    if len(inputs) != model.config.branches:
        raise ShapeMismatch(f"model takes {model.config.branches} input(s), got {len(inputs)}")
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            return model(*inputs).numpy()
    finally:
        model.train(was_training)


def _extract_features(model: BuiltModel, inputs: Sequence[np.ndarray], chunk: int) -> torch.Tensor:
    # the backbone is frozen and there is no augmentation, so features are computed once
    n = inputs[0].shape[0]
    parts = [model.features([x[i : i + chunk] for x in inputs]) for i in range(0, n, chunk)]
    return torch.cat(parts, dim=0)


class _DeterministicMode:
    def __init__(self, enabled: bool):
        self.enabled = enabled

    def __enter__(self):
        if self.enabled:
            self._threads = torch.get_num_threads()
            self._algos = torch.are_deterministic_algorithms_enabled()
            torch.set_num_threads(1)
            torch.use_deterministic_algorithms(True)
        return self

    def __exit__(self, *exc):
        if self.enabled:
            torch.set_num_threads(self._threads)
            torch.use_deterministic_algorithms(self._algos)


def _evaluate(model: BuiltModel, feats: torch.Tensor, targets: torch.Tensor, chunk: int):
    model.eval()
    with torch.no_grad():
        logits = torch.cat([model.head(feats[i : i + chunk]) for i in range(0, len(feats), chunk)])
    loss = F.binary_cross_entropy_with_logits(logits, targets).item()
    probs = torch.sigmoid(logits).numpy()
    return loss, probs


def train(
    model: BuiltModel,
    train_batch: TripletBatch,
    val_batch: TripletBatch,
    config: TrainConfig = TrainConfig(),
    checkpoint_path: str | Path | None = None,
    log_path: str | Path | None = None,
    meta: dict | None = None,
) -> tuple[BuiltModel, TrainHistory]:
    """Fit the head of ``model`` in place and return it with the per-epoch history.

    Raises NumericalError as soon as a batch loss is not finite.
    """
    config.validate()
    if len(train_batch) == 0 or len(val_batch) == 0:
        raise EmptyInput("training and validation sets must both be non-empty")
    branches = model.config.branches
    dtype = model.head.output.weight.dtype
    history = TrainHistory()
    log = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log = open(log_path, "w", encoding="utf-8")
    try:
        with _DeterministicMode(config.deterministic):
            torch.manual_seed(config.seed)
            generator = torch.Generator().manual_seed(config.seed)
            x_train = _extract_features(model, batch_inputs(train_batch, branches), config.batch_size)
            x_val = _extract_features(model, batch_inputs(val_batch, branches), config.batch_size)
            y_train = torch.as_tensor(train_batch.targets, dtype=dtype)
            y_val = torch.as_tensor(val_batch.targets, dtype=dtype)
            optimizer = torch.optim.Adam(
                model.trainable_parameters(),
                lr=config.learning_rate,
                betas=(config.beta1, config.beta2),
                eps=config.adam_eps,
            )
            n = len(x_train)
            for epoch in range(1, config.epochs + 1):
                started = time.perf_counter()
                model.train()
                order = torch.randperm(n, generator=generator) if config.shuffle_each_epoch else torch.arange(n)
                total = 0.0
                for b, start in enumerate(range(0, n, config.batch_size), start=1):
                    idx = order[start : start + config.batch_size]
                    logits = model.head(x_train[idx])
                    loss = F.binary_cross_entropy_with_logits(logits, y_train[idx])
                    if not torch.isfinite(loss):
                        raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
                    optimizer.zero_grad(set_to_none=True)
                    loss.backward()
                    optimizer.step()
                    total += loss.item() * len(idx)
                train_loss = total / n
                _, train_probs = _evaluate(model, x_train, y_train, config.batch_size)
                val_loss, val_probs = _evaluate(model, x_val, y_val, config.batch_size)
                if not math.isfinite(val_loss):
                    raise NumericalError(f"non-finite validation loss at epoch {epoch}")
                train_acc = per_label_accuracy(train_probs, train_batch.targets, config.threshold)
                val_acc = per_label_accuracy(val_probs, val_batch.targets, config.threshold)
                history.train_loss.append(train_loss)
                history.val_loss.append(val_loss)
                history.train_accuracy.append(float(train_acc.mean()))
                history.val_accuracy.append(float(val_acc.mean()))
                history.val_label_accuracy.append([float(a) for a in val_acc])
                history.epoch_seconds.append(time.perf_counter() - started)
                if log is not None:
                    for split, loss_value, acc in (
                        ("train", train_loss, history.train_accuracy[-1]),
                        ("validation", val_loss, history.val_accuracy[-1]),
                    ):
                        log.write(json.dumps({"epoch": epoch, "split": split, "loss": loss_value, "accuracy": acc}) + "\n")
    finally:
        if log is not None:
            log.close()
    model.eval()
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, meta=meta)
    return model, history
