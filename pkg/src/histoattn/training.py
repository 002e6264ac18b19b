"""Binary cross-entropy training with SGD or Adam and early stopping."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Iterator, Mapping, Optional, Protocol

import numpy as np

from . import ops
from .backbone import Model, forward
from .errors import ConfigError, ContractError, DataError, NumericError
from .tensor import Tensor, as_tensor, no_grad


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def _check_labels(labels) -> np.ndarray:
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float64).reshape(-1)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise DataError("labels must be 0 or 1")
    return y


def bce_loss(logits, labels) -> Tensor:
    """Mean binary cross-entropy with p = softmax(logits)[:, 1].

    Evaluated through log-softmax, so log p and log(1 - p) never see a
    rounded-to-zero probability.
    """
    logits = as_tensor(logits)
    y = _check_labels(labels)
    if logits.ndim != 2 or logits.shape[1] != 2 or logits.shape[0] != y.size:
        raise DataError(f"expected logits (B, 2) matching {y.size} labels, got {logits.shape}")
    logp = ops.log_softmax(logits, axis=1)
    weights = np.stack([1.0 - y, y], axis=1)
    return ops.scale(ops.sum(ops.mul(logp, weights)), -1.0 / y.size)


# ---------------------------------------------------------------------------
# optimisers
# ---------------------------------------------------------------------------

def _grads_for(params: Mapping[str, Tensor], grads: Optional[Mapping[str, np.ndarray]]):
    out = {}
    for k, p in params.items():
        g = grads[k] if grads is not None and k in grads else p.grad
        if g is None:
            raise ContractError(f"no gradient for parameter {k!r}")
        out[k] = np.asarray(g, dtype=np.float64)
    return out


def sgd_step(params: Mapping[str, Tensor], grads: Optional[Mapping[str, np.ndarray]] = None,
             lr: float = 0.01) -> Mapping[str, Tensor]:
    """theta <- theta - lr * g, in place. ``grads`` defaults to each ``.grad``."""
    for k, g in _grads_for(params, grads).items():
        params[k].data = params[k].data - lr * g
    return params


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, Tensor], grads: Optional[Mapping[str, np.ndarray]],
              state: AdamState, lr: float = 0.001, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, t: Optional[int] = None):
    """One bias-corrected Adam update, in place. Returns (params, state)."""
    t = state.t + 1 if t is None else t
    if t < 1:
        raise ContractError("Adam step counter must start at 1")
    for k, g in _grads_for(params, grads).items():
        m = state.m.get(k, np.zeros_like(g))
        v = state.v.get(k, np.zeros_like(g))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        params[k].data = params[k].data - lr * m_hat / (np.sqrt(v_hat) + eps)
        state.m[k], state.v[k] = m, v
    state.t = t
    return params, state


# ---------------------------------------------------------------------------
# configuration and bookkeeping
# ---------------------------------------------------------------------------

@dataclass
class AdamConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 0.001
    batch_size: int = 16
    max_epochs: int = 100
    early_stopping_patience: int = 10
    seed: int = 0
    adam: AdamConfig = field(default_factory=AdamConfig)
    sgd_momentum: float = 0.0

    def __post_init__(self):
        if isinstance(self.adam, dict):
            self.adam = AdamConfig(**self.adam)

    def validate(self) -> None:
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be positive")
        if self.early_stopping_patience < 1:
            raise ConfigError("early_stopping_patience must be at least 1")
        if self.sgd_momentum != 0.0:
            raise ConfigError("SGD momentum is not supported (must be 0)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True when a new best arrives."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigError("patience must be at least 1")
        self.patience = patience
        self.best_loss = np.inf
        self.best_epoch = 0
        self.epochs_since_improvement = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best_loss:
            self.best_loss, self.best_epoch = val_loss, epoch
            self.epochs_since_improvement = 0
            return True
        self.epochs_since_improvement += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.epochs_since_improvement >= self.patience


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    seconds: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc", "seconds"])
        for r in self.epochs:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_acc), f"{r.seconds:.3f}"])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def deterministic_view(self) -> list[tuple]:
        """The log minus wall-clock time."""
        return [(r.epoch, r.train_loss, r.val_loss, r.val_acc) for r in self.epochs]


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

class BatchSource(Protocol):
    def __len__(self) -> int: ...

    def batches(self, batch_size: int, seed: Optional[int], epoch: int,
                training: bool) -> Iterator[tuple[np.ndarray, np.ndarray]]: ...


class ArraySet:
    """In-memory (N, C, H, W) inputs with binary labels."""

    def __init__(self, x: np.ndarray, y: np.ndarray):
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64).reshape(-1)
        if len(self.x) != len(self.y):
            raise DataError("inputs and labels differ in length")

    def __len__(self) -> int:
        return len(self.y)

    def batches(self, batch_size, seed=None, epoch=0, training=False):
        order = np.arange(len(self))
        if seed is not None:
            order = np.random.default_rng([seed, epoch]).permutation(len(self))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            yield self.x[idx], self.y[idx]


def evaluate_loss(model: Model, data: BatchSource, batch_size: int) -> tuple[float, float]:
    """(mean BCE, accuracy) in eval mode."""
    total, correct, n = 0.0, 0, 0
    with no_grad():
        for x, y in data.batches(batch_size, None, 0, False):
            logits = forward(model, x, training=False)
            total += bce_loss(logits, y).item() * len(y)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
            n += len(y)
    return total / n, correct / n


def train(model: Model, train_set: BatchSource, val_set: BatchSource, cfg: TrainConfig,
          log_fn=None) -> tuple[Model, TrainLog]:
    """Minibatch training; returns the model restored to its best-validation
    epoch and the per-epoch log."""
    cfg.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError("training and validation sets must be non-empty")
    params = model.named_parameters()
    state = AdamState()
    stopper = EarlyStopping(cfg.early_stopping_patience)
    log = TrainLog()
    best_state = model.state()
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        losses, counts = [], []
        for x, y in train_set.batches(cfg.batch_size, cfg.seed, epoch, True):
            model.zero_grad()
            loss = bce_loss(forward(model, x, training=True,
                                    dropout_seed=cfg.seed * 1_000_003 + step * 7), y)
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            loss.backward()
            if cfg.optimizer == "adam":
                adam_step(params, None, state, cfg.learning_rate, cfg.adam.beta1, cfg.adam.beta2,
                          cfg.adam.eps)
            else:
                sgd_step(params, None, cfg.learning_rate)
            losses.append(loss.item())
            counts.append(len(y))
            step += 1
        train_loss = float(np.dot(losses, counts) / np.sum(counts))
        val_loss, val_acc = evaluate_loss(model, val_set, cfg.batch_size)
        if not np.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        if stopper.update(epoch, val_loss):
            best_state = model.state()
        rec = EpochRecord(epoch, train_loss, val_loss, val_acc, time.perf_counter() - t0)
        log.epochs.append(rec)
        if log_fn is not None:
            log_fn(rec)
        if stopper.should_stop:
            log.stopped_early = True
            break
    model.zero_grad()
    model.load_state(best_state)
    log.best_epoch = stopper.best_epoch
    return model, log
