"""Loss, ADAM, plateau schedule and the epoch loop with best-checkpoint selection."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from cxrnet import functional as F
from cxrnet.errors import DivergenceError, LabelError, NumericError, UsageError
from cxrnet.models import Network
from cxrnet.tensor import DTYPE, Tensor, no_grad

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


# ---------------------------------------------------------------- loss


@dataclass
class LossValue:
    total: Tensor
    per_label: np.ndarray

    @property
    def value(self) -> float:
        return float(self.total.data)


def _check_binary(y: np.ndarray) -> None:
    if not np.all((y == 0) | (y == 1)):
        raise LabelError("labels must be binary (0 or 1)")


def bce_loss(y, f) -> LossValue:
    """Class-averaged binary cross entropy.

    ``f`` may be a Tensor (differentiable) or an array of probabilities;
    batched inputs are averaged over the batch as well. The scalar equals the
    mean of the per-label vector.
    """
    y = np.asarray(y, dtype=np.float64)
    _check_binary(y)
    probs = f if isinstance(f, Tensor) else Tensor(f)
    if probs.shape != y.shape:
        raise UsageError(f"labels {y.shape} and predictions {probs.shape} differ in shape")
    total = F.binary_cross_entropy(probs, y, clamp=PROB_CLAMP)
    fc = np.clip(probs.data.astype(np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    elem = -(y * np.log(fc) + (1 - y) * np.log1p(-fc))
    per_label = elem.reshape(-1, elem.shape[-1]).mean(axis=0) if elem.ndim > 1 else elem
    return LossValue(total, per_label)


def l1_loss(target, pred: Tensor) -> LossValue:
    t = np.asarray(target, dtype=DTYPE).reshape(pred.shape)
    total = F.mean(F.abs(F.add(pred, Tensor(-t))))
    per = np.abs(pred.data - t).reshape(-1, pred.shape[-1]).mean(axis=0)
    return LossValue(total, per)


LOSSES = {"bce": bce_loss, "l1": l1_loss}


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected ADAM update, in place.

    Parameters whose gradient is ``None`` are left alone (and keep their
    moments). Raises :class:`NumericError` naming the first parameter with a
    non-finite gradient before anything is modified.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name}", name=name)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = g.astype(DTYPE, copy=False)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = (b1 * m + (1 - b1) * g).astype(DTYPE)
        v = (b2 * v + (1 - b2) * g * g).astype(DTYPE)
        state.m[name], state.v[name] = m, v
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(DTYPE)


# ---------------------------------------------------------------- schedule


@dataclass
class PlateauState:
    lr: float
    factor: float = 0.5
    patience: int = 1
    best: float = math.inf
    bad_epochs: int = 0


def plateau_schedule(history, state: PlateauState) -> float:
    """Update ``state`` with the newest validation loss in ``history`` and return the lr.

    The rate is multiplied by ``factor`` once the best-so-far loss has failed
    to strictly improve for ``patience`` consecutive epochs.
    """
    if not len(history):
        raise UsageError("plateau_schedule needs at least one completed epoch")
    latest = float(history[-1])
    if latest < state.best:
        state.best = latest
        state.bad_epochs = 0
    else:
        state.bad_epochs += 1
        if state.bad_epochs >= state.patience:
            state.lr *= state.factor
            state.bad_epochs = 0
    return state.lr


# ---------------------------------------------------------------- data streams


class Dataset(Protocol):
    def __len__(self) -> int: ...

    def batch(self, indices: np.ndarray, rng: np.random.Generator | None) -> tuple: ...


@dataclass
class ArrayDataset:
    """In-memory ``(images, meta, labels)`` triples; ``augment`` is applied per image when training."""

    images: np.ndarray | None
    labels: np.ndarray
    meta: np.ndarray | None = None
    augment: Callable | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, indices, rng=None):
        imgs = None
        if self.images is not None:
            imgs = self.images[indices]
            if self.augment is not None and rng is not None:
                imgs = np.stack([self.augment(img, rng) for img in imgs])
            imgs = np.ascontiguousarray(imgs, dtype=DTYPE)
        meta = None if self.meta is None else self.meta[indices].astype(DTYPE)
        return imgs, meta, self.labels[indices]


# ---------------------------------------------------------------- loop


@dataclass
class TrainPlan:
    batch_size: int = 16
    initial_lr: float = 0.01
    plateau_factor: float = 0.5
    patience: int = 1
    max_epochs: int = 50
    min_lr: float = 1e-6
    seed: int = 0

    @classmethod
    def preset(cls, regime: str, large: bool = False, **overrides) -> "TrainPlan":
        """``regime`` is ``"transfer"`` (lr 1e-3, batch 16) or ``"scratch"`` (lr 1e-2; batch 8 when large)."""
        if regime == "transfer":
            kw = dict(initial_lr=0.001, batch_size=16)
        elif regime == "scratch":
            kw = dict(initial_lr=0.01, batch_size=8 if large else 16)
        else:
            raise UsageError(f"unknown regime {regime!r}")
        kw.update(overrides)
        return cls(**kw)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    model: Network
    history: list[EpochRecord]
    best_epoch: int
    best_state: dict

    @property
    def best_val_loss(self) -> float:
        return self.history[self.best_epoch - 1].val_loss


def _loss_fn(model: Network):
    return LOSSES[model.loss]


def evaluate_loss(model: Network, data, batch_size: int = 32) -> float:
    """Mean loss over a dataset in eval mode, weighted by batch size."""
    n = len(data)
    total = 0.0
    loss = _loss_fn(model)
    with no_grad():
        for i in range(0, n, batch_size):
            idx = np.arange(i, min(i + batch_size, n))
            images, meta, labels = data.batch(idx, None)
            out = model.forward(images, meta, training=False)
            total += loss(labels, out).value * len(idx)
    return total / n


def train(model: Network, plan: TrainPlan, train_data, val_data,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Run the epoch loop and restore the minimum-validation-loss state.

    Batch order and augmentation draw from ``plan.seed`` only. A non-finite
    training loss aborts with :class:`DivergenceError` carrying the best state
    seen so far.
    """
    if len(train_data) == 0 or len(val_data) == 0:
        raise UsageError("training and validation streams must be non-empty")
    rng = np.random.default_rng(plan.seed)
    loss_fn = _loss_fn(model)
    params = model.trainable_parameters()
    adam = AdamState(lr=plan.initial_lr)
    sched = PlateauState(lr=plan.initial_lr, factor=plan.plateau_factor, patience=plan.patience)
    history: list[EpochRecord] = []
    best_state, best_epoch, best_val = model.snapshot(), 0, math.inf
    n = len(train_data)

    for epoch in range(1, plan.max_epochs + 1):
        order = rng.permutation(n)
        running, seen = 0.0, 0
        for start in range(0, n, plan.batch_size):
            idx = order[start: start + plan.batch_size]
            images, meta, labels = train_data.batch(idx, rng)
            model.zero_grad()
            out = model.forward(images, meta, training=True)
            loss = loss_fn(labels, out)
            if not math.isfinite(loss.value):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}", best_state, history)
            loss.total.backward()
            try:
                adam_step(params, {k: p.grad for k, p in params.items()}, adam)
            except NumericError as exc:
                raise DivergenceError(str(exc), best_state, history) from exc
            running += loss.value * len(idx)
            seen += len(idx)
        val = evaluate_loss(model, val_data, plan.batch_size)
        if not math.isfinite(val):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}", best_state, history)
        record = EpochRecord(epoch, running / seen, val, adam.lr)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        log.info("epoch %d train %.5f val %.5f lr %.2e", epoch, record.train_loss, val, adam.lr)
        if val < best_val:
            best_val, best_epoch, best_state = val, epoch, model.snapshot()
        adam.lr = plateau_schedule([r.val_loss for r in history], sched)
        if adam.lr < plan.min_lr:
            log.info("learning rate %.2e below floor; stopping", adam.lr)
            break

    model.load_state_dict(best_state)
    model.zero_grad()
    return TrainResult(model, history, best_epoch, best_state)


def write_history_csv(history: list[EpochRecord], path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr)])


def read_history_csv(path) -> list[EpochRecord]:
    with Path(path).open() as fh:
        return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]), float(r["lr"]))
                for r in csv.DictReader(fh)]
