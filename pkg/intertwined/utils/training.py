"""
Loss, optimizers, the training loop and evaluation
"""
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import trange

from intertwined import config as settings
from intertwined.utils.errors import ConfigurationError, DataError, TrainingDivergenceError
from intertwined.utils.params import ParamStore
from intertwined.utils.tensor import Graph, Tensor, backward, custom_op, no_grad

logger = logging.getLogger(__name__)

DEFAULT_LR = 0.001
DEFAULT_RHO = 0.9
DEFAULT_EPSILON = 1e-7
DEFAULT_BATCH_SIZE = 64
DEFAULT_EPOCHS = 100


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """
    Mean negative log-likelihood of `labels` under softmax(`logits`).

    Softmax and log are fused in log-space; the gradient with respect to
    the logits is (softmax - onehot) / batch.

    Args:
        logits: 6 scores for one trial, or B × 6
        labels: Class index, or B indices

    Returns:
        Scalar loss tensor

    Raises:
        DataError: If a label is not an integer in range
    """
    single = logits.ndim == 1
    scores = logits.data[None] if single else logits.data
    batch, n_classes = scores.shape
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape != (batch,) or not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"Expected {batch} integer labels, got {labels!r}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataError(f"Labels must lie in 0..{n_classes - 1}, got {sorted(set(labels.tolist()))}")

    shifted = scores - scores.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    rows = np.arange(batch)
    loss = -log_probs[rows, labels].mean()

    def grad_fn(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        grad = grad * (g / batch)
        return (grad.reshape(logits.shape),)

    return custom_op("cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), grad_fn)


def _check_gradients(params: ParamStore, lr: float, epoch: Optional[int], batch: Optional[int]) -> None:
    for name, param in params.items():
        if param.grad is not None and not np.all(np.isfinite(param.grad)):
            raise TrainingDivergenceError(
                f"Non-finite gradient in {name} (epoch {epoch}, batch {batch}, lr {lr})",
                parameter=name, epoch=epoch, batch=batch, lr=lr)


def sgd_step(params: ParamStore, lr: float, epoch: Optional[int] = None, batch: Optional[int] = None) -> ParamStore:
    """Plain gradient descent θ ← θ − lr·g, then zero the gradients."""
    _check_gradients(params, lr, epoch, batch)
    for param in params.values():
        if param.grad is None:
            continue
        param.data = (param.data - lr * param.grad).astype(param.dtype, copy=False)
    params.zero_grad()
    return params


def rmsprop_step(params: ParamStore, lr: float = DEFAULT_LR, rho: float = DEFAULT_RHO,
                 epsilon: float = DEFAULT_EPSILON, epoch: Optional[int] = None,
                 batch: Optional[int] = None) -> ParamStore:
    """
    RMSProp: v ← ρv + (1−ρ)g², θ ← θ − lr·g / (√v + ε), then zero the gradients.

    A missing gradient counts as zero, so the running average still decays.
    """
    if not 0.0 < rho < 1.0:
        raise ConfigurationError(f"rho must lie in (0, 1), got {rho}")
    _check_gradients(params, lr, epoch, batch)
    for name, param in params.items():
        grad = param.grad if param.grad is not None else np.zeros_like(param.data)
        state = params.state.setdefault(name, {})
        square_avg = state.get("square_avg")
        if square_avg is None:
            square_avg = np.zeros_like(param.data)
        square_avg = rho * square_avg + (1.0 - rho) * grad * grad
        state["square_avg"] = square_avg
        param.data = (param.data - lr * grad / (np.sqrt(square_avg) + epsilon)).astype(param.dtype, copy=False)
    params.zero_grad()
    return params


class SGD:
    name = "sgd"

    def __init__(self, lr: float = DEFAULT_LR):
        self.lr = lr

    def step(self, params: ParamStore, epoch: Optional[int] = None, batch: Optional[int] = None) -> ParamStore:
        return sgd_step(params, self.lr, epoch, batch)


class RMSProp:
    name = "rmsprop"

    def __init__(self, lr: float = DEFAULT_LR, rho: float = DEFAULT_RHO, epsilon: float = DEFAULT_EPSILON):
        self.lr = lr
        self.rho = rho
        self.epsilon = epsilon

    def step(self, params: ParamStore, epoch: Optional[int] = None, batch: Optional[int] = None) -> ParamStore:
        return rmsprop_step(params, self.lr, self.rho, self.epsilon, epoch, batch)


def make_optimizer(name: str, lr: Optional[float] = None):
    lr = DEFAULT_LR if lr is None else lr
    if lr < 0:
        raise ConfigurationError(f"Learning rate must be non-negative, got {lr}")
    if name == "sgd":
        return SGD(lr)
    if name == "rmsprop":
        return RMSProp(lr)
    raise ConfigurationError(f"Unknown minimizer {name!r}; expected sgd or rmsprop")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainRecord:
    """
    Per-epoch losses and the best-validation-loss summary of one fit.

    Serialized as JSON lines: one ``{"type": "epoch", ...}`` line per
    epoch followed by one ``{"type": "summary", ...}`` line.
    """
    seed: int
    config_hash: str
    batch_size: int
    lr: float
    minimizer: str
    epochs: List[EpochStats] = field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_loss: Optional[float] = None
    best_val_accuracy: Optional[float] = None

    def add_epoch(self, stats: EpochStats) -> bool:
        """Append an epoch; return True if it is the new best by validation loss."""
        self.epochs.append(stats)
        if self.best_val_loss is None or stats.val_loss < self.best_val_loss:
            self.best_epoch = stats.epoch
            self.best_val_loss = stats.val_loss
            self.best_val_accuracy = stats.val_accuracy
            return True
        return False

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "minimizer": self.minimizer,
            "epochs": len(self.epochs),
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "best_val_accuracy": self.best_val_accuracy,
        }

    def to_lines(self) -> str:
        lines = [json.dumps({"type": "epoch", **asdict(e)}, sort_keys=True) for e in self.epochs]
        lines.append(json.dumps({"type": "summary", **self.summary()}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_lines())
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> "TrainRecord":
        epochs, summary = [], None
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                entry = json.loads(line)
                kind = entry.pop("type")
                if kind == "epoch":
                    epochs.append(EpochStats(**entry))
                else:
                    summary = entry
        if summary is None:
            raise DataError(f"Train record {path} has no summary line")
        record = cls(summary["seed"], summary["config_hash"], summary["batch_size"], summary["lr"],
                     summary["minimizer"], epochs)
        record.best_epoch = summary["best_epoch"]
        record.best_val_loss = summary["best_val_loss"]
        record.best_val_accuracy = summary["best_val_accuracy"]
        return record

    def loss_curve(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(e) for e in self.epochs],
                            columns=["epoch", "train_loss", "val_loss", "val_accuracy"])

    def write_loss_curve(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.loss_curve().to_csv(path, index=False, float_format="%.17g")
        return path


def _as_arrays(data, dtype) -> Tuple[np.ndarray, np.ndarray]:
    if hasattr(data, "to_arrays"):
        inputs, labels = data.to_arrays()
    else:
        inputs, labels = data
    inputs = np.asarray(inputs, dtype=dtype)
    labels = np.asarray(labels, dtype=np.int64)
    if len(inputs) == 0:
        raise DataError("Dataset is empty")
    if len(inputs) != len(labels):
        raise DataError(f"{len(inputs)} trials but {len(labels)} labels")
    return inputs, labels


def predict_logits(model, data, batch_size: int = 256) -> Tuple[np.ndarray, np.ndarray]:
    inputs, labels = _as_arrays(data, model.dtype)
    chunks = []
    with no_grad():
        for start in range(0, len(inputs), batch_size):
            chunks.append(model.forward(inputs[start:start + batch_size]).data)
    return np.concatenate(chunks, axis=0), labels


def accuracy_from_scores(scores: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DataError("Cannot score an empty dataset")
    return float(np.mean(np.argmax(scores, axis=-1) == labels))


def evaluate(model, data, batch_size: int = 256) -> Tuple[float, float]:
    """
    Returns:
        (mean cross-entropy, accuracy) on `data`
    """
    logits, labels = predict_logits(model, data, batch_size)
    with no_grad():
        loss = cross_entropy(Tensor(logits), labels).item()
    return loss, accuracy_from_scores(logits, labels)


def evaluate_accuracy(model, data) -> float:
    logits, labels = predict_logits(model, data)
    return accuracy_from_scores(logits, labels)


def fit(model, train, val, epochs: int = DEFAULT_EPOCHS, batch_size: int = DEFAULT_BATCH_SIZE, seed: int = 0,
        lr: Optional[float] = None, optimizer=None, restore_best: bool = True,
        progress: Optional[bool] = None) -> TrainRecord:
    """
    Shuffled mini-batch training with best-validation-loss snapshotting.

    Args:
        model: Model to train in place
        train: Training Dataset or (inputs, labels)
        val: Validation Dataset or (inputs, labels)
        epochs: Number of passes over `train`
        batch_size: Trials per update
        seed: Seeds the per-epoch shuffling and the dropout masks
        lr: Learning rate for the config's minimizer (ignored if `optimizer` is given)
        optimizer: Optional optimizer instance
        restore_best: Load the best-epoch parameters back into the model at the end
        progress: Show a progress bar; defaults to the INTERTWINED_PROGRESS setting

    Returns:
        TrainRecord of the run

    Raises:
        TrainingDivergenceError: If a loss or gradient becomes non-finite
    """
    if epochs < 0:
        raise ConfigurationError(f"epochs must be >= 0, got {epochs}")
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    x_train, y_train = _as_arrays(train, model.dtype)
    x_val, y_val = _as_arrays(val, model.dtype)
    optimizer = optimizer or make_optimizer(model.config.minimizer, lr)
    progress = settings["PROGRESS"] if progress is None else progress

    rng = np.random.default_rng(seed)
    record = TrainRecord(seed, model.config.config_hash(), batch_size, optimizer.lr, optimizer.name)
    best_snapshot = None
    n = len(x_train)
    start_time = time.time()

    for epoch in trange(epochs, desc=f"fit {model.family}", disable=not progress, leave=False):
        order = rng.permutation(n)
        total = 0.0
        for batch, start in enumerate(range(0, n, batch_size)):
            index = order[start:start + batch_size]
            model.params.zero_grad()
            with Graph() as graph:
                loss = cross_entropy(model.forward(x_train[index], training=True, rng=rng), y_train[index])
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDivergenceError(
                        f"Non-finite training loss at epoch {epoch + 1}, batch {batch} (lr {optimizer.lr})",
                        epoch=epoch + 1, batch=batch, lr=optimizer.lr)
                backward(loss, graph)
            optimizer.step(model.params, epoch=epoch + 1, batch=batch)
            total += value * len(index)

        val_loss, val_accuracy = evaluate(model, (x_val, y_val))
        if not np.isfinite(val_loss):
            raise TrainingDivergenceError(f"Non-finite validation loss at epoch {epoch + 1} (lr {optimizer.lr})",
                                          epoch=epoch + 1, lr=optimizer.lr)
        stats = EpochStats(epoch + 1, total / n, val_loss, val_accuracy)
        if record.add_epoch(stats):
            best_snapshot = model.params.snapshot()
            logger.debug(f"New best validation loss {val_loss:.4f} at epoch {epoch + 1}")
        logger.debug(f"Epoch {epoch + 1}/{epochs}: train {stats.train_loss:.4f}, "
                     f"val {val_loss:.4f}, accuracy {val_accuracy:.3f}")

    if restore_best and best_snapshot is not None:
        model.params.load(best_snapshot)
    if epochs:
        end_time = time.time() - start_time
        logger.info(f"Training complete in {end_time:.2f} seconds. Best epoch {record.best_epoch}: "
                    f"val loss {record.best_val_loss:.4f}, accuracy {record.best_val_accuracy:.3f}")
    return record
