"""Momentum SGD with weight decay, evaluation, and training logs."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np

from .autodiff import Tape, Tensor, backward, softmax_cross_entropy
from .data import Dataset, augment_batch


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at step {step}")


class Trainable(Protocol):
    def parameters(self) -> dict[str, Tensor]: ...

    def decay_exempt(self, name: str) -> bool: ...

    def loss(self, batch, training: bool = True) -> Tensor: ...


@dataclass
class HyperParams:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 10
    milestones: tuple[float, ...] = (0.5, 0.75)
    lr_factor: float = 0.1
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch size and epochs must be positive")

    def lr_at(self, epoch: int) -> float:
        """Piecewise-constant rate: divided by ``1/lr_factor`` at each milestone fraction."""
        drops = sum(epoch >= int(round(f * self.epochs)) for f in self.milestones)
        return self.lr * self.lr_factor**drops


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_err: float
    test_err: float
    seconds: float


@dataclass
class TrainLog:
    epochs: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)

    def rows(self, timing: bool = True) -> list[list]:
        out = []
        for r in self.epochs:
            row = [r.epoch, repr(r.train_loss), repr(r.train_err), repr(r.test_err)]
            if timing:
                row.append(f"{r.seconds:.3f}")
            out.append(row)
        return out

    def to_csv(self, path, timing: bool = True) -> None:
        """Write one row per epoch; ``timing=False`` drops the wall-clock column."""
        header = ["epoch", "train_loss", "train_err", "test_err"] + (["seconds"] if timing else [])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(self.rows(timing))


def sgd_step(
    model: Trainable,
    batch,
    hyper: HyperParams,
    velocity: dict[str, np.ndarray],
    lr: Optional[float] = None,
    step: int = 0,
) -> float:
    """One momentum-SGD update in place; returns the batch loss.

    ``v <- momentum*v - lr*(grad + decay*theta)``, ``theta <- theta + v``;
    parameters the model marks decay-exempt skip the decay term.
    """
    lr = hyper.lr if lr is None else lr
    with Tape() as tape:
        loss = model.loss(batch, training=True)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDiverged(step, value)
    grads = backward(tape, loss)
    for name, p in model.parameters().items():
        g = grads.get(p)
        if g is None:
            g = np.zeros(p.shape)
        if hyper.weight_decay and not model.decay_exempt(name):
            g = g + hyper.weight_decay * p.data
        v = velocity.get(name)
        v = -lr * g if v is None else hyper.momentum * v - lr * g
        velocity[name] = v
        p.data = p.data + v
    return value


def _grad_norm(model: Trainable) -> float:
    total = 0.0
    for p in model.parameters().values():
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def evaluate(network, dataset: Dataset, batch_size: int = 256) -> float:
    """Top-1 error rate; the network runs in evaluation mode."""
    if len(dataset) == 0:
        return 0.0
    preds = network.predict(dataset.normalized(), batch_size)
    return float(np.mean(preds != dataset.labels))


def train(
    network,
    dataset: Dataset,
    hyper: HyperParams,
    test_set: Optional[Dataset] = None,
    record_grad_norms: bool = False,
    on_epoch=None,
):
    """Train in place and return ``(network, TrainLog)``.

    Shuffling and augmentation draw from streams derived from
    ``hyper.seed``, so a rerun with the same seed replays every update.
    """
    test_set = dataset if test_set is None else test_set
    log = TrainLog()
    velocity: dict[str, np.ndarray] = {}
    root = np.random.SeedSequence(hyper.seed)
    n = len(dataset)
    step = 0
    counting = _Counting(network)
    for epoch in range(hyper.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng(root.spawn(1)[0])
        order = rng.permutation(n)
        lr = hyper.lr_at(epoch)
        loss_sum = 0.0
        wrong = 0
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            if len(idx) < 2:
                continue
            images = dataset.images[idx]
            if hyper.augment:
                images = augment_batch(images, rng)
            x = dataset.normalize(images)
            y = dataset.labels[idx]
            loss = sgd_step(counting, (x, y), hyper, velocity, lr, step)
            loss_sum += loss * len(idx)
            wrong += counting.wrong
            log.step_losses.append(loss)
            if record_grad_norms:
                log.grad_norms.append(_grad_norm(network))
            step += 1
        rec = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / n,
            train_err=wrong / n,
            test_err=evaluate(network, test_set),
            seconds=time.perf_counter() - t0,
        )
        log.epochs.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return network, log


class _Counting:
    """Wraps a network so a training step also counts its mistakes."""

    def __init__(self, network):
        self.network = network
        self.wrong = 0

    def parameters(self):
        return self.network.parameters()

    def decay_exempt(self, name):
        return self.network.decay_exempt(name)

    def loss(self, batch, training=True):
        images, labels = batch
        logits = self.network.forward(images, training)
        self.wrong = int(np.sum(np.argmax(logits.data, axis=1) != labels))
        return softmax_cross_entropy(logits, labels)
