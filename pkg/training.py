"""
Training loop for RnnClassifier: seeded mini-batches, Adam, learning-rate plateau
halving, early stopping with best-parameter restore, per-epoch history.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from tqdm import tqdm

from artifacts import read_records, write_records
from corpus import ClassWeights
from errors import TrainingError
from log_utils import is_quiet, log_metric, log_with_timestamp

HISTORY_SCHEMA = "history"

# Training loop defaults
TRAINING_CONFIG = {
    "batch_size": 64,
    "initial_lr": 1e-4,
    "plateau_patience": 5,
    "plateau_factor": 0.5,
    "early_stop_patience": 15,
    "beta1": 0.9,
    "beta2": 0.999,
    "epsilon": 1e-8,
}


@dataclass
class TrainingSchedule:
    batch_size: int = TRAINING_CONFIG["batch_size"]
    initial_lr: float = TRAINING_CONFIG["initial_lr"]
    plateau_patience: int = TRAINING_CONFIG["plateau_patience"]
    plateau_factor: float = TRAINING_CONFIG["plateau_factor"]
    early_stop_patience: int = TRAINING_CONFIG["early_stop_patience"]
    max_epochs: int = 200
    class_weights: Optional[ClassWeights] = None
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.initial_lr <= 0:
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("Patience values must be >= 1")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0
    beta1: float = TRAINING_CONFIG["beta1"]
    beta2: float = TRAINING_CONFIG["beta2"]
    epsilon: float = TRAINING_CONFIG["epsilon"]

    @classmethod
    def create(cls, params):
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update of `params` in place; returns (params, state)"""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.t
    correction2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"Gradient for '{name}' has shape {g.shape}, parameter {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
    return params, state


class ReduceLROnPlateau:
    """Multiply the learning rate by `factor` after `patience` epochs without a strictly lower loss"""

    def __init__(self, patience=5, factor=0.5):
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.wait = 0

    def on_epoch_end(self, loss, lr):
        if loss < self.best:
            self.best = loss
            self.wait = 0
            return lr
        self.wait += 1
        if self.wait >= self.patience:
            self.wait = 0
            log_with_timestamp(f"⚠️  Test loss flat for {self.patience} epochs, "
                               f"learning rate {lr:g} -> {lr * self.factor:g}")
            return lr * self.factor
        return lr


class EarlyStopping:
    """Stop after `patience` epochs without a strictly lower loss; keeps the best parameters"""

    def __init__(self, patience=15):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.best_params = None
        self.wait = 0

    def on_epoch_end(self, epoch, loss, params):
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            self.best_params = {k: v.copy() for k, v in params.items()}
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


@dataclass
class TrainingHistory:
    train_loss: List[float] = field(default_factory=list)
    train_accuracy: List[float] = field(default_factory=list)
    test_loss: List[float] = field(default_factory=list)
    test_accuracy: List[float] = field(default_factory=list)
    learning_rate: List[float] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def __len__(self):
        return len(self.train_loss)

    def append(self, train_loss, train_accuracy, test_loss, test_accuracy, lr):
        self.train_loss.append(float(train_loss))
        self.train_accuracy.append(float(train_accuracy))
        self.test_loss.append(float(test_loss))
        self.test_accuracy.append(float(test_accuracy))
        self.learning_rate.append(float(lr))

    def to_records(self):
        return [
            {
                "epoch": i + 1,
                "train_loss": self.train_loss[i],
                "train_accuracy": self.train_accuracy[i],
                "test_loss": self.test_loss[i],
                "test_accuracy": self.test_accuracy[i],
                "learning_rate": self.learning_rate[i],
            }
            for i in range(len(self))
        ]

    def save(self, path, config_hash=""):
        meta = {"best_epoch": self.best_epoch, "stopped_early": self.stopped_early}
        return write_records(path, HISTORY_SCHEMA, self.to_records(), config_hash, meta)

    @classmethod
    def load(cls, path, expected_hash=None):
        header, records = read_records(path, HISTORY_SCHEMA, expected_hash, stage="train")
        history = cls()
        for r in records:
            history.append(r["train_loss"], r["train_accuracy"], r["test_loss"],
                           r["test_accuracy"], r["learning_rate"])
        meta = header.get("meta", {})
        history.best_epoch = meta.get("best_epoch", 0)
        history.stopped_early = meta.get("stopped_early", False)
        return history


def _batches(n, batch_size):
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def predict(model, data, batch_size=64):
    """
    Labels (argmax, ties toward the lower class index) and probability vectors.
    `data` is an EncodedDataset or an array of shape (L, D) / (B, L, D).
    """
    if hasattr(data, "inputs"):
        n = len(data)
        probs = np.empty((n, model.config.num_classes))
        for sl in _batches(n, batch_size):
            probs[sl] = model.forward(data.inputs(np.arange(sl.start, sl.stop)))
    else:
        probs = model.forward(data)
    return np.argmax(probs, axis=-1), probs


def evaluate(model, dataset, batch_size=64):
    """Unweighted mean cross-entropy and accuracy over a dataset"""
    labels, probs = predict(model, dataset, batch_size)
    y = dataset.labels
    picked = np.maximum(probs[np.arange(len(y)), y], 1e-12)
    return float(np.mean(-np.log(picked))), float(np.mean(labels == y))


def fit(model, train, test, schedule):
    """
    Train `model` in place on `train`, monitoring test loss after every epoch.
    Returns (params, history); params are the best-test-loss parameters.
    """
    if len(train) == 0 or len(test) == 0:
        raise ValueError("fit needs non-empty train and test sets")

    num_classes = model.config.num_classes
    weights = None
    if schedule.class_weights is not None:
        weights = schedule.class_weights.as_array(num_classes)

    rng = np.random.default_rng(schedule.seed)
    adam = AdamState.create(model.params)
    plateau = ReduceLROnPlateau(schedule.plateau_patience, schedule.plateau_factor)
    stopper = EarlyStopping(schedule.early_stop_patience)
    history = TrainingHistory()
    lr = schedule.initial_lr

    log_with_timestamp(f"🚀 Training {model.config.cell} "
                       f"({'bi' if model.config.bidirectional else 'uni'}directional, "
                       f"{model.config.rnn_layers} layer(s), {model.config.units} units, "
                       f"{model.parameter_count()} parameters) on {len(train)} samples")

    epochs = tqdm(range(1, schedule.max_epochs + 1), desc="train", disable=is_quiet() or None)
    for epoch in epochs:
        order = rng.permutation(len(train))
        loss_sum, correct = 0.0, 0
        for batch_no, sl in enumerate(_batches(len(train), schedule.batch_size), start=1):
            rows = order[sl]
            X, y = train.batch(rows)
            loss, grads, probs = model.loss_and_gradients(X, y, weights)
            if not np.isfinite(loss):
                raise TrainingError(f"Non-finite training loss at epoch {epoch}, batch {batch_no}")
            adam_step(model.params, grads, adam, lr)
            loss_sum += loss * len(rows)
            correct += int(np.sum(np.argmax(probs, axis=1) == y))

        train_loss = loss_sum / len(train)
        train_acc = correct / len(train)
        test_loss, test_acc = evaluate(model, test, schedule.batch_size)
        if not np.isfinite(test_loss):
            raise TrainingError(f"Non-finite test loss at epoch {epoch}")

        history.append(train_loss, train_acc, test_loss, test_acc, lr)
        log_metric("epoch", epoch=epoch, train_loss=round(train_loss, 6),
                   train_accuracy=round(train_acc, 4), test_loss=round(test_loss, 6),
                   test_accuracy=round(test_acc, 4), lr=lr)
        epochs.set_postfix(loss=f"{train_loss:.4f}", test_loss=f"{test_loss:.4f}")

        stop = stopper.on_epoch_end(epoch, test_loss, model.params)
        lr = plateau.on_epoch_end(test_loss, lr)
        if stop:
            history.stopped_early = True
            log_with_timestamp(f"⚠️  Early stop at epoch {epoch}, best epoch {stopper.best_epoch}")
            break

    history.best_epoch = stopper.best_epoch
    if stopper.best_params is not None:
        for name, value in stopper.best_params.items():
            model.params[name][...] = value
    log_with_timestamp(f"✅ Training finished after {len(history)} epochs "
                       f"(best test loss {stopper.best:.4f} at epoch {stopper.best_epoch})")
    return model.params, history
