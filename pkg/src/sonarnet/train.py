"""Loss, optimizers and the mini-batch training loop."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np

from .arch import (NetworkSpec, TrainedModel, backward, forward, init_params, param_shapes,
                   predict_proba)
from .layers import TRAIN
from .rng import Rng


class TrainingDiverged(RuntimeError):
    pass


def cross_entropy(probabilities, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the logits.

    The gradient is the fused softmax + cross-entropy form
    ``(p - onehot) / batch``.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = p.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if n and (labels.min() < 0 or labels.max() >= c):
        bad = labels[(labels < 0) | (labels >= c)][0]
        raise ValueError(f"label {bad} out of range [0, {c})")
    picked = p[np.arange(n), labels]
    loss = -np.mean(np.log(np.maximum(picked, np.finfo(np.float64).tiny)))
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def sgd_step(params, grads, lr):
    """Plain SGD, in place: ``p <- p - lr * g``."""
    for p, g in zip(params, grads):
        p -= lr * g
    return params


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected ADAM update, in place. Increments ``state.t`` once."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 0.001
    batch_size: int = 128
    epochs: int = 30
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be adam or sgd, got {self.optimizer!r}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class History:
    epoch: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_acc"])
        for e, l, a in zip(self.epoch, self.loss, self.train_acc):
            w.writerow([e, f"{l:.6g}", f"{a:.6g}"])
        return buf.getvalue()


def minibatches(n, batch_size, rng: Rng):
    """Shuffled index batches; a trailing singleton merges into the previous batch."""
    order = rng.permutation(n)
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    return [order[a:b] for a, b in zip(bounds[:-1], bounds[1:])]


def _unpack(data):
    if hasattr(data, "images"):
        return np.asarray(data.images, dtype=np.float64), np.asarray(data.labels)
    images, labels = data
    return np.asarray(images, dtype=np.float64), np.asarray(labels)


def train(spec: NetworkSpec, train_set, config: TrainConfig, rng: Rng | None = None,
          model: TrainedModel | None = None):
    """Train ``spec`` from scratch (or continue ``model``) for ``config.epochs``.

    Every random choice (init, shuffling, dropout masks) descends from ``rng``
    (default ``Rng(config.seed)``), so the result is bit-reproducible.
    Returns ``(model, history)``.
    """
    images, labels = _unpack(train_set)
    if len(images) == 0:
        raise ValueError("training set is empty")
    if images.shape[-1] != spec.input_size or images.shape[-2] != spec.input_size:
        raise ValueError(f"images are {images.shape[-2]}x{images.shape[-1]} but "
                         f"{spec.name} expects {spec.input_size}x{spec.input_size}")
    root = rng if rng is not None else Rng(config.seed)
    init_rng, shuffle_rng, drop_rng = root.spawn(1), root.spawn(2), root.spawn(3)
    model = init_params(spec, init_rng) if model is None else model.copy()
    model.meta.update(seed=config.seed, epochs=config.epochs, optimizer=config.optimizer)
    params = model.flat_params()
    keys = [(name, key) for name, key, _ in param_shapes(spec)]
    state = AdamState.zeros_like(params) if config.optimizer == "adam" else None

    history = History()
    step = 0
    # overflow during a blow-up is caught by the explicit finiteness checks below
    with np.errstate(over="ignore", invalid="ignore"):
        step = _run_epochs(model, params, keys, state, images, labels, config, history,
                           shuffle_rng, drop_rng)
    if not all(np.all(np.isfinite(p)) for p in params):
        raise TrainingDiverged(f"non-finite parameters after step {step}")
    model.meta["steps"] = step
    model.meta["config"] = asdict(config)
    return model, history


def _run_epochs(model, params, keys, state, images, labels, config, history, shuffle_rng, drop_rng):
    step = 0
    for epoch in range(1, config.epochs + 1):
        total_loss, correct = 0.0, 0
        for idx in minibatches(len(images), config.batch_size, shuffle_rng):
            result = forward(model, images[idx], TRAIN, drop_rng)
            loss, grad_logits = cross_entropy(result.probabilities, labels[idx])
            step += 1
            if not np.isfinite(loss) or not np.all(np.isfinite(result.logits)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            grads, _ = backward(model, result, grad_logits, input_grad=False)
            flat_grads = [grads[name][key] for name, key in keys]
            if config.optimizer == "adam":
                adam_step(params, flat_grads, state, config.learning_rate,
                          config.beta1, config.beta2, config.epsilon)
            else:
                sgd_step(params, flat_grads, config.learning_rate)
            for name, st in result.new_stats.items():
                model.stats[name] = st
            total_loss += loss * len(idx)
            correct += int(np.sum(result.probabilities.argmax(axis=1) == labels[idx]))
        history.epoch.append(epoch)
        history.loss.append(total_loss / len(images))
        history.train_acc.append(correct / len(images))
    return step


def evaluate(model: TrainedModel, test_set) -> float:
    """Accuracy of the inference-mode argmax (ties go to the lowest class index)."""
    images, labels = _unpack(test_set)
    if len(images) == 0:
        raise ValueError("test set is empty")
    pred = predict_proba(model, images).argmax(axis=1)
    return float(np.mean(pred == labels))
