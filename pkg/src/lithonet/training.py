"""Weighted cross-entropy, Adam and the early-stopping training loop."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ShapeError, UsageError
from .models import Model, ParamEntry, ParamSet

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "train_acc", "val_acc")


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    class_weights: Optional[tuple[float, ...]] = None
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        for name in ("batch_size", "max_epochs", "patience"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)
            if any(w <= 0 for w in self.class_weights):
                raise ValueError(f"class weights must be positive, got {self.class_weights}")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["class_weights"] is not None:
            d["class_weights"] = list(d["class_weights"])
        return d


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _check_targets(target: np.ndarray) -> None:
    ok = np.isin(target, (0.0, 1.0)).all(axis=1) & (target.sum(axis=1) == 1.0)
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise ShapeError(f"target row {bad} is not one-hot: {target[bad]}")


def weighted_cross_entropy(predicted, target, weights=None) -> float:
    """Mean over samples of ``-sum_c w_c * y_c * log(max(p_c, 1e-12))``."""
    predicted = np.atleast_2d(np.asarray(predicted, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if predicted.shape != target.shape:
        raise ShapeError(f"predicted {predicted.shape} and target {target.shape} differ")
    _check_targets(target)
    w = np.ones(predicted.shape[1]) if weights is None else np.asarray(weights, dtype=np.float64)
    logp = np.log(np.maximum(predicted, LOG_CLAMP))
    return float(-(target * w * logp).sum() / predicted.shape[0])


def weighted_cross_entropy_grad(predicted, target, weights=None, normalizer: Optional[int] = None):
    """Gradient of the weighted loss with respect to the softmax logits.

    For one-hot targets this is ``w_y * (p - y) / N``; ``normalizer``
    overrides ``N`` when a batch is processed in several pieces.
    """
    predicted = np.atleast_2d(np.asarray(predicted, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    w = np.ones(predicted.shape[1]) if weights is None else np.asarray(weights, dtype=np.float64)
    n = predicted.shape[0] if normalizer is None else normalizer
    sample_w = target @ w
    return sample_w[:, None] * (predicted - target) / n


def class_weights_from_counts(counts) -> np.ndarray:
    """``max(counts) / counts``: the most frequent class gets weight 1."""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or (counts <= 0).any():
        raise ValueError(f"class counts must be positive, got {counts.tolist()}")
    return counts.max() / counts


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        arrays = _flatten(params)
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def _flatten(params) -> list[np.ndarray]:
    out = []
    for p in params:
        if isinstance(p, ParamEntry):
            out += [p.weight, p.bias]
        else:
            out.append(p)
    return out


def adam_step(params, grads, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    arrays = _flatten(params)
    g_arrays = _flatten(grads)
    if len(arrays) != len(g_arrays) or len(arrays) != len(state.m):
        raise ShapeError(
            f"{len(arrays)} parameters, {len(g_arrays)} gradients, {len(state.m)} moment slots"
        )
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for theta, g, m, v in zip(arrays, g_arrays, state.m, state.v):
        if theta.shape != g.shape or m.shape != g.shape:
            raise ShapeError(f"parameter {theta.shape} / gradient {g.shape} / moment {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= config.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + config.epsilon)
    return params, state


def _shape_groups(images: Sequence[np.ndarray], indices) -> list[list[int]]:
    groups: dict[tuple, list[int]] = defaultdict(list)
    for i in indices:
        groups[images[i].shape].append(int(i))
    return list(groups.values())


def _stack(images: Sequence[np.ndarray], idx: Sequence[int]) -> np.ndarray:
    batch = np.stack([images[i] for i in idx])
    return batch[:, None] if batch.ndim == 3 else batch


def predict_proba(model: Model, images: Sequence[np.ndarray], batch_size: int = 32) -> np.ndarray:
    """Inference-mode probabilities; same-shape images are batched together."""
    probs = np.empty((len(images), model.spec.classes))
    for start in range(0, len(images), batch_size):
        chunk = range(start, min(start + batch_size, len(images)))
        for group in _shape_groups(images, chunk):
            probs[group] = model.forward(_stack(images, group), train=False)
    return probs


@dataclass
class TrainResult:
    params: ParamSet
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def train(
    model: Model,
    train_set: tuple[Sequence[np.ndarray], Sequence[int]],
    val_set: tuple[Sequence[np.ndarray], Sequence[int]],
    config: TrainConfig,
    history_path: Union[str, Path, None] = None,
) -> TrainResult:
    """Fit ``model`` with Adam, keeping the weights of the lowest validation loss.

    Each set is ``(images, labels)``; images are ``(H, W)`` arrays. A
    mini-batch whose images differ in size is processed one shape group at
    a time with gradients accumulated over the whole batch. The model is
    left holding the best parameters.
    """
    train_x, train_y = list(train_set[0]), np.asarray(train_set[1], dtype=int)
    val_x, val_y = list(val_set[0]), np.asarray(val_set[1], dtype=int)
    if len(train_x) == 0 or len(val_x) == 0:
        raise UsageError("training needs non-empty train and validation sets")
    classes = model.spec.classes
    weights = np.ones(classes) if config.class_weights is None else np.asarray(config.class_weights)
    if weights.shape != (classes,):
        raise ShapeError(f"{weights.size} class weights for {classes} classes")
    train_t = one_hot(train_y, classes)
    val_t = one_hot(val_y, classes)

    shuffle_seq, dropout_seq = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)

    params = model.param_arrays()
    grads = model.grad_arrays()
    accum = [np.zeros_like(a) for a in params]
    state = AdamState.zeros_like(params)

    best_loss = np.inf
    best_params = model.snapshot()
    best_epoch = 0
    since_best = 0
    history: list[dict] = []
    stopped_early = False

    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_x))
        loss_sum = 0.0
        correct = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            for a in accum:
                a.fill(0.0)
            for group in _shape_groups(train_x, batch):
                probs = model.forward(_stack(train_x, group), train=True, rng=dropout_rng)
                target = train_t[group]
                loss_sum += weighted_cross_entropy(probs, target, weights) * len(group)
                correct += int((probs.argmax(axis=1) == train_y[group]).sum())
                model.backward(
                    weighted_cross_entropy_grad(probs, target, weights, normalizer=len(batch)),
                    from_logits=True,
                )
                for a, g in zip(accum, grads):
                    a += g
            adam_step(params, accum, state, config)

        val_probs = predict_proba(model, val_x, config.batch_size)
        val_loss = weighted_cross_entropy(val_probs, val_t, weights)
        row = {
            "epoch": epoch,
            "train_loss": loss_sum / len(train_x),
            "val_loss": val_loss,
            "train_acc": correct / len(train_x),
            "val_acc": float((val_probs.argmax(axis=1) == val_y).mean()),
        }
        history.append(row)
        log.debug("epoch %d: %s", epoch, row)

        if val_loss < best_loss:
            best_loss = val_loss
            best_params = model.snapshot()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.patience:
                stopped_early = True
                break

    model.set_params(best_params)
    if history_path is not None:
        write_history(history, history_path)
    return TrainResult(best_params, history, best_epoch, stopped_early)


def write_history(history: Sequence[dict], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(float(row[k])) if k != "epoch" else row[k]) for k in HISTORY_FIELDS})
