"""Adam with coupled weight decay, split protocols and the epoch loop."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .errors import NumericalError, ValidationError
from .hostnet import ClassifierModel
from .metrics import accuracy
from .numerics import softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 32
    weight_decay: float = 0.001
    learning_rate: float = 0.001
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive")
        if self.weight_decay < 0 or self.learning_rate < 0:
            raise ValidationError("weight_decay and learning_rate must be non-negative")


class Adam:
    """Adam with L2 decay folded into the gradient (``g + wd * p``)."""

    def __init__(self, params: dict[str, np.ndarray], config: TrainConfig) -> None:
        self.params = params
        self.config = config
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        cfg = self.config
        self.t += 1
        b1, b2 = cfg.adam_beta1, cfg.adam_beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {k}")
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= (cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_epsilon)).astype(p.dtype, copy=False)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict | None,
    config: TrainConfig,
) -> dict:
    """Functional form: updates ``params`` in place and returns the new optimizer state."""
    opt = Adam(params, config)
    if state is not None:
        opt.m, opt.v, opt.t = state["m"], state["v"], state["t"]
    opt.step(grads)
    return {"m": opt.m, "v": opt.v, "t": opt.t}


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    protocol: Literal["fourfold_cv", "fixed_test_with_val_split"] = "fourfold_cv"
    seed: int = 0
    folds: int = 4
    train_fraction: float = 0.8

    def __post_init__(self) -> None:
        if self.protocol not in ("fourfold_cv", "fixed_test_with_val_split"):
            raise ValidationError(f"unknown protocol {self.protocol!r}")
        if self.folds < 3:
            raise ValidationError("cross-validation needs at least 3 folds")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValidationError("train_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray | None = None


def _shuffled_by_class(labels: np.ndarray, rng: np.random.Generator) -> list[np.ndarray]:
    out = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        out.append(idx[rng.permutation(idx.size)])
    return out


def _interleaved(groups: list[np.ndarray]) -> np.ndarray:
    """Merge per-class lists so every prefix holds each class in proportion."""
    idx = np.concatenate(groups)
    keys = np.concatenate([(np.arange(g.size) + 0.5) / g.size for g in groups])
    cls = np.concatenate([np.full(g.size, i) for i, g in enumerate(groups)])
    return idx[np.lexsort((cls, keys))]


def make_splits(n_items: int, labels: np.ndarray, plan: SplitPlan) -> list[Split]:
    """Deterministic, class-stratified index splits.

    ``fourfold_cv`` yields one (train, val, test) triple per rotation: fold r
    is the test set, fold r+1 the validation set, the rest train.
    ``fixed_test_with_val_split`` yields one (train, val) pair.
    """
    labels = np.asarray(labels)
    if labels.shape != (n_items,):
        raise ValidationError(f"expected {n_items} labels, got {labels.shape}")
    counts = np.unique(labels, return_counts=True)[1]
    fewest = int(counts.min()) if counts.size else 0
    groups = _shuffled_by_class(labels, np.random.default_rng(plan.seed))
    if plan.protocol == "fourfold_cv":
        if fewest < plan.folds:
            raise ValidationError(f"every class needs at least {plan.folds} items for {plan.folds}-fold CV")
        # class-major order with a running fold counter keeps folds stratified and within 1 of each other
        order = np.concatenate(groups)
        folds = [np.sort(order[i :: plan.folds]) for i in range(plan.folds)]
        out = []
        for r in range(plan.folds):
            v = (r + 1) % plan.folds
            train = np.sort(np.concatenate([folds[i] for i in range(plan.folds) if i not in (r, v)]))
            out.append(Split(train=train, val=folds[v], test=folds[r]))
        return out
    if fewest < 2:
        raise ValidationError("every class needs at least 2 items for a train/validation split")
    order = _interleaved(groups)
    n_val = int(round(n_items * (1.0 - plan.train_fraction)))
    n_val = min(max(n_val, 1), n_items - 1)
    return [Split(train=np.sort(order[n_val:]), val=np.sort(order[:n_val]))]


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------

@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    best_epoch: int = -1
    test_accuracy: float = float("nan")
    wall_time_seconds: float = 0.0

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for e, (tr, va) in enumerate(zip(self.train_loss, self.val_loss)):
            w.writerow([e, repr(tr), repr(va)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "test_accuracy": self.test_accuracy,
            "wall_time_seconds": self.wall_time_seconds,
        }


def evaluate(model: ClassifierModel, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> tuple[float, float]:
    """Inference-mode mean cross-entropy and accuracy."""
    total, preds = 0.0, []
    for i in range(0, len(x), batch_size):
        logits = model.forward(x[i : i + batch_size], training=False)
        loss, _ = softmax_cross_entropy(logits.astype(np.float64), y[i : i + batch_size])
        total += loss * len(logits)
        preds.append(logits.argmax(axis=1))
    return total / len(x), accuracy(np.concatenate(preds), y)


def train_run(
    model: ClassifierModel,
    train: tuple[np.ndarray, np.ndarray],
    val: tuple[np.ndarray, np.ndarray],
    test: tuple[np.ndarray, np.ndarray] | None,
    config: TrainConfig,
    on_epoch: Callable[[int, float, float], None] | None = None,
) -> tuple[TrainReport, dict[str, np.ndarray]]:
    """Train for exactly ``config.epochs`` epochs and keep the lowest-validation-loss state.

    Test accuracy is measured with that best state, which is also left loaded
    in ``model`` and returned.
    """
    x_tr, y_tr = train
    x_va, y_va = val
    if len(x_tr) == 0 or len(x_va) == 0:
        raise ValidationError("training and validation sets must be non-empty")
    start = time.perf_counter()
    report = TrainReport()
    params = model.parameters()
    opt = Adam(params, config)
    best_state: dict[str, np.ndarray] = model.state_dict()
    best_loss = np.inf
    n = len(x_tr)
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        epoch_loss = 0.0
        for i in range(0, n, config.batch_size):
            idx = order[i : i + config.batch_size]
            model.zero_grad()
            logits = model.forward(x_tr[idx], training=True)
            loss, grad = softmax_cross_entropy(logits, y_tr[idx])
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}, batch {i // config.batch_size}")
            model.backward(grad.astype(model.dtype, copy=False))
            opt.step(model.gradients())
            epoch_loss += loss * len(idx)
        val_loss, _ = evaluate(model, x_va, y_va)
        if not np.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        report.train_loss.append(epoch_loss / n)
        report.val_loss.append(val_loss)
        if val_loss < best_loss:
            best_loss = val_loss
            report.best_epoch = epoch
            best_state = model.state_dict()
        if on_epoch is not None:
            on_epoch(epoch, report.train_loss[-1], val_loss)
        log.debug("epoch %d train %.5f val %.5f", epoch, report.train_loss[-1], val_loss)
    model.load_state_dict(best_state)
    if test is not None and len(test[0]):
        _, report.test_accuracy = evaluate(model, *test)
    report.wall_time_seconds = time.perf_counter() - start
    return report, best_state
