"""Losses, optimizer, early stopping, and the training loop.

Focal loss follows the canonical form: with p_t the probability assigned
to the true class and alpha_t the class weight, loss = -alpha_t *
(1 - p_t)^gamma * log(p_t), averaged over the batch. gamma=0 with class
balancing off reduces exactly (bitwise) to binary cross-entropy, because
both paths share the same p_t computation.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ModelGraph, forward, save_checkpoint
from .tensor import Tensor

PROB_EPS = 1e-7  # probabilities entering log are clamped to [eps, 1-eps]


class TrainingDiverged(RuntimeError):
    """Train loss went NaN; the run is aborted rather than continued."""


@dataclass
class FocalLossParams:
    alpha: float = 0.25
    gamma: float = 2.0
    balanced: bool = True  # off: alpha_t = 1 for both classes

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


def _validate_labels(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empty label batch")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0 or 1")
    return labels


def _true_class_prob(p: Tensor, labels: np.ndarray) -> Tensor:
    """p_t = p where y=1, 1-p where y=0, with p clamped to [eps, 1-eps]."""
    y = T.from_array(labels.astype(p.data.dtype), dtype=p.data.dtype)
    one = T.ones_like(p)
    pc = T.clamp(p, PROB_EPS, 1.0 - PROB_EPS)
    return T.add(T.mul(pc, y), T.mul(T.sub(one, pc), T.sub(one, y)))


def focal_loss(p: Tensor, labels, params: FocalLossParams) -> Tensor:
    """Mean focal loss over a batch of probabilities p in [0,1]."""
    labels = _validate_labels(labels)
    if p.shape != labels.shape:
        raise ValueError(f"probability shape {p.shape} != labels shape {labels.shape}")
    p_t = _true_class_prob(p, labels)
    modulator = T.power(T.sub(T.ones_like(p_t), p_t), params.gamma)
    if params.balanced:
        alpha_t = T.from_array(
            np.where(labels == 1, params.alpha, 1.0 - params.alpha),
            dtype=p.data.dtype)
    else:
        alpha_t = T.ones_like(p_t)
    per_sample = T.mul(alpha_t, T.mul(modulator, T.neg(T.log(p_t))))
    return T.reduce_mean(per_sample)


def bce_loss(p: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy, clamped like focal_loss."""
    labels = _validate_labels(labels)
    if p.shape != labels.shape:
        raise ValueError(f"probability shape {p.shape} != labels shape {labels.shape}")
    p_t = _true_class_prob(p, labels)
    return T.reduce_mean(T.neg(T.log(p_t)))


# ---------------------------------------------------------------------------
# RMSProp


@dataclass
class RmsPropState:
    lr: float = 1e-3
    rho: float = 0.9
    epsilon: float = 1e-7
    v: dict = field(default_factory=dict)  # parameter name -> accumulator

    def ensure(self, name: str, shape) -> np.ndarray:
        if name not in self.v:
            self.v[name] = np.zeros(shape, dtype=np.float32)
        return self.v[name]


def rmsprop_step(model: ModelGraph, grads, state: RmsPropState) -> None:
    """v <- rho*v + (1-rho)*g^2; theta <- theta - lr*g/(sqrt(v)+eps).

    Only trainable parameters move; every trainable parameter must have a
    gradient on the map.
    """
    for name, tensor in model.parameters.items():
        if not model.trainable.get(name):
            continue
        g = grads.get(tensor)
        if g is None:
            raise ValueError(f"no gradient recorded for trainable parameter {name!r}")
        g = g.astype(np.float32, copy=False)
        v = state.ensure(name, tensor.shape)
        v = state.rho * v + (1.0 - state.rho) * g * g
        state.v[name] = v
        tensor.data = tensor.data - state.lr * g / (np.sqrt(v) + state.epsilon)


# ---------------------------------------------------------------------------
# Early stopping


@dataclass
class EarlyStopState:
    patience: int = 5
    min_delta: float = 1e-4
    best_loss: float = float("inf")
    best_epoch: int = 0
    wait: int = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch's validation loss; True means stop now."""
        if not np.isfinite(val_loss):
            raise ValueError(f"validation loss must be finite, got {val_loss}")
        if val_loss < self.best_loss - self.min_delta:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.wait = 0
            return False
        # Clamped so wait never exceeds patience; stop fires at equality.
        self.wait = min(self.wait + 1, self.patience)
        return self.wait >= self.patience


class BestWeightKeeper:
    """Snapshot of the best-so-far model, restorable when training halts."""

    def __init__(self, checkpoint_path=None):
        self.checkpoint_path = checkpoint_path
        self._weights = None
        self._metadata = None

    def snapshot(self, model: ModelGraph, epoch: int, val_loss: float) -> None:
        self._weights = {n: t.data.copy() for n, t in model.parameters.items()}
        self._metadata = {"epoch": epoch, "best_val_loss": float(val_loss)}
        if self.checkpoint_path is not None:
            model.metadata.update(self._metadata)
            save_checkpoint(model, self.checkpoint_path)

    def restore(self, model: ModelGraph) -> ModelGraph:
        if self._weights is None:
            return model
        for name, data in self._weights.items():
            model.parameters[name].data = data.copy()
        model.metadata.update(self._metadata)
        return model


# ---------------------------------------------------------------------------
# Config / history


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 100
    seed: int = 0
    loss: str = "focal"  # "focal" | "bce"
    focal: FocalLossParams = field(default_factory=FocalLossParams)
    lr: float = 1e-3
    rho: float = 0.9
    epsilon: float = 1e-7
    patience: int = 5
    min_delta: float = 1e-4
    augment: bool = False
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.loss not in ("focal", "bce"):
            raise ValueError(f"loss must be 'focal' or 'bce', got {self.loss!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    wall_time: float = field(compare=False, default=0.0)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch != self.records[-1].epoch + 1:
            raise ValueError("epoch records must be consecutive")
        self.records.append(record)

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,train_acc,val_loss,val_acc"]
        for r in self.records:
            lines.append(f"{r.epoch},{r.train_loss:.6f},{r.train_acc:.6f},"
                         f"{r.val_loss:.6f},{r.val_acc:.6f}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())


# ---------------------------------------------------------------------------
# Training loop


def _loss_fn(config: TrainConfig):
    if config.loss == "focal":
        return lambda p, y: focal_loss(p, y, config.focal)
    return bce_loss


def evaluate_split(model: ModelGraph, dataset, split: str, config: TrainConfig):
    """Eval-mode loss and accuracy over one split (no augmentation, no shuffle)."""
    loss_fn = _loss_fn(config)
    total_loss = 0.0
    correct = 0
    n = 0
    for xb, yb in dataset.batches(split, config.batch_size):
        out, _ = forward(model, xb, mode="eval")
        probs = Tensor(out.data.reshape(-1))
        loss = loss_fn(probs, yb)
        size = len(yb)
        total_loss += loss.item() * size
        correct += int(np.sum((probs.data >= 0.5) == (yb == 1)))
        n += size
    if n == 0:
        raise ValueError(f"split {split!r} is empty")
    return total_loss / n, correct / n


def train(model: ModelGraph, dataset, config: TrainConfig):
    """Train on dataset's 'train' split, validating on 'val' each epoch.

    Deterministic given (seed, config, dataset): batch order comes from the
    seeded per-epoch shuffle, dropout from a generator seeded once at the
    start. Keeps the best-validation-loss weights and restores them when
    early stopping fires (or at the end of the run).
    """
    if dataset.size("train") == 0:
        raise ValueError("training split is empty")
    loss_fn = _loss_fn(config)
    dropout_rng = np.random.default_rng(config.seed)
    opt = RmsPropState(lr=config.lr, rho=config.rho, epsilon=config.epsilon)
    stopper = EarlyStopState(patience=config.patience, min_delta=config.min_delta)
    keeper = BestWeightKeeper(config.checkpoint_path)
    history = TrainHistory()

    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        total_loss = 0.0
        correct = 0
        n = 0
        for xb, yb in dataset.batches("train", config.batch_size,
                                      shuffle_seed=config.seed, epoch=epoch,
                                      augment=config.augment):
            with T.Tape() as tape:
                out, _ = forward(model, xb, mode="train", rng=dropout_rng)
                probs = T.reshape(out, (out.shape[0],))
                loss = loss_fn(probs, yb)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise TrainingDiverged(
                    f"train loss became non-finite at epoch {epoch}")
            grads = T.backward(tape, loss)
            rmsprop_step(model, grads, opt)
            size = len(yb)
            total_loss += loss_value * size
            correct += int(np.sum((probs.data >= 0.5) == (yb == 1)))
            n += size

        val_loss, val_acc = evaluate_split(model, dataset, "val", config)
        record = EpochRecord(epoch=epoch, train_loss=total_loss / n,
                             train_acc=correct / n, val_loss=val_loss,
                             val_acc=val_acc,
                             wall_time=time.perf_counter() - started)
        history.append(record)

        improved_to_best = val_loss < stopper.best_loss - stopper.min_delta
        stop = stopper.update(epoch, val_loss)
        if improved_to_best:
            keeper.snapshot(model, epoch, val_loss)
        if stop:
            break

    keeper.restore(model)
    return model, history
