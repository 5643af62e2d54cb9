"""Adam optimization, early stopping and the epoch loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from . import functional as F
from .checkpoint import Checkpoint, save_checkpoint
from .errors import ConfigError, NonFiniteError, OptimizerError, TrainingError
from .seeding import derive_rng
from .tensor import no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 8
    max_epochs: int = 30
    patience: int = 5
    seed: int = 0
    freeze_backbone: bool = False
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.patience < 1 or self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("patience, max_epochs and batch_size must all be >= 1")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)


class Adam:
    """Adam with bias-corrected moments; parameters are updated in place."""

    def __init__(self, lr: float = 0.001, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray | None]) -> None:
        # names without a gradient (frozen or unreachable) are left untouched
        for name, g in grads.items():
            if g is not None and g.shape != params[name].shape:
                raise OptimizerError(f"gradient shape {g.shape} does not match parameter {name} {params[name].shape}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)

    def step_model(self, model) -> None:
        trainable = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
        self.step({n: p.data for n, p in trainable}, {n: p.grad for n, p in trainable})


class EarlyStopping:
    """Stops after ``patience`` consecutive epochs without a strictly lower loss."""

    def __init__(self, patience: int = 5):
        if patience < 1:
            raise ConfigError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best = math.inf
        self.streak = 0

    def update(self, val_loss: float) -> tuple[bool, bool]:
        """Return (stop, improved) after seeing one validation loss."""
        if val_loss < self.best:
            self.best = val_loss
            self.streak = 0
            return False, True
        self.streak += 1
        return self.streak >= self.patience, False


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_epoch: int | None = None

    CSV_COLUMNS = ("epoch", "train_loss", "val_loss", "val_accuracy")

    def to_csv(self) -> str:
        lines = [",".join(self.CSV_COLUMNS)]
        for e in self.epochs:
            lines.append(f"{e.epoch},{e.train_loss!r},{e.val_loss!r},{e.val_accuracy!r}")
        return "\n".join(lines) + "\n"


@dataclass
class EvalResult:
    loss: float
    actual: np.ndarray
    predicted: np.ndarray

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.actual == self.predicted))


def evaluate(model, batches: Iterable) -> EvalResult:
    """Eval-mode pass; the loss is the sample-weighted mean over batches."""
    model.eval()
    total, count = 0.0, 0
    actual, predicted = [], []
    with no_grad():
        for x, y in batches:
            out = model(x)
            total += F.nll_loss(out, y).item() * len(y)
            count += len(y)
            actual.append(y)
            predicted.append(out.data.argmax(axis=1))
    if count == 0:
        raise TrainingError("evaluation received no samples")
    return EvalResult(total / count, np.concatenate(actual), np.concatenate(predicted))


def train(
    model,
    train_batches: Callable[[int], Iterable],
    val_batches: Callable[[], Iterable],
    config: TrainConfig,
    metadata: dict | None = None,
    checkpoint_path=None,
) -> tuple[Checkpoint, TrainHistory]:
    """Fit ``model`` and return the checkpoint of the lowest validation loss.

    ``train_batches(epoch)`` yields the (images, labels) batches of one epoch;
    ``val_batches()`` yields the validation batches.  When
    ``checkpoint_path`` is given the best checkpoint is rewritten there each
    time the validation loss strictly improves.
    """
    if config.freeze_backbone:
        model.freeze_backbone()
    model.set_rng(derive_rng(config.seed, "dropout"))
    optimizer = Adam(config.learning_rate, config.betas, config.eps)
    stopper = EarlyStopping(config.patience)
    history = TrainHistory()
    best: Checkpoint | None = None

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        total, correct, count = 0.0, 0, 0
        for batch_index, (x, y) in enumerate(train_batches(epoch)):
            model.zero_grad()
            try:
                out = model(x)
                loss = F.nll_loss(out, y)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite values at epoch {epoch}, batch {batch_index}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"loss is {value} at epoch {epoch}, batch {batch_index}")
            loss.backward()
            optimizer.step_model(model)
            total += value * len(y)
            correct += int((out.data.argmax(axis=1) == y).sum())
            count += len(y)
        if count == 0:
            raise TrainingError(f"epoch {epoch} produced no training batches")

        try:
            result = evaluate(model, val_batches())
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite values during validation at epoch {epoch}: {exc}") from exc
        stats = EpochStats(epoch, total / count, correct / count, result.loss, result.accuracy)
        history.epochs.append(stats)
        history.stopped_epoch = epoch
        log.info(
            "epoch %d train_loss=%.6f train_acc=%.4f val_loss=%.6f val_acc=%.4f",
            epoch, stats.train_loss, stats.train_accuracy, stats.val_loss, stats.val_accuracy,
        )

        stop, improved = stopper.update(result.loss)
        if improved:
            history.best_epoch = epoch
            meta = dict(metadata or {})
            meta.update(epoch=epoch, val_loss=result.loss, config=config.to_dict())
            best = Checkpoint.from_model(model, meta)
            if checkpoint_path is not None:
                save_checkpoint(best, None, checkpoint_path)
        if stop:
            log.info("early stopping after epoch %d (best epoch %d)", epoch, history.best_epoch)
            break

    return best, history
