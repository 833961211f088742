"""Non-meta-learned reference models: the support target mean, and an LSTM
pretrained with plain supervised learning then fine-tuned on the head."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import PretrainConfig
from .errors import DataError
from .maml import AdaptedHead, TrainingLog, _log, adapt_head
from .net import TaskNetwork, backward, features, predict
from .optim import make_optimizer
from .rng import derive_rng
from .series import MetaWindow
from .training import TrainState, train_loop


@dataclass(frozen=True)
class ConstantPredictor:
    value: float

    def __call__(self, X: np.ndarray) -> np.ndarray:
        return np.full(np.asarray(X).shape[0], self.value)


def target_mean_baseline(support: MetaWindow) -> ConstantPredictor:
    if support.size == 0:
        raise DataError("empty support")
    return ConstantPredictor(float(support.labels.mean()))


def finetune_baseline(
    net: TaskNetwork, support: MetaWindow, lr: float, steps: int, weight_decay: float = 0.0
) -> AdaptedHead:
    """Head-only MAE gradient descent on the support, with decoupled weight decay."""
    phi = features(net, support.inputs)
    w, b = net.head
    W, B, _ = adapt_head(phi, support.labels, w, b, lr, steps, weight_decay=weight_decay)
    return AdaptedHead(W, float(B), steps, support)


def window_mae(net: TaskNetwork, X: np.ndarray, y: np.ndarray, chunk: int = 4096) -> float:
    total = 0.0
    for a in range(0, len(y), chunk):
        total += np.abs(y[a : a + chunk] - predict(net, X[a : a + chunk])).sum()
    return float(total / len(y))


def pretrain(
    net: TaskNetwork,
    train_windows: tuple[np.ndarray, np.ndarray],
    cfg: PretrainConfig,
    validation_windows: tuple[np.ndarray, np.ndarray],
    *,
    seed: int = 0,
    state: Optional[TrainState] = None,
    on_checkpoint=None,
    stop_at: Optional[int] = None,
) -> tuple[TaskNetwork, TrainingLog]:
    """Mini-batch MAE training of every parameter; returns the best-validation network.

    One epoch is a shuffled pass over all training windows.
    """
    X, y = train_windows
    Xv, yv = validation_windows
    if len(y) == 0:
        raise DataError("no training windows")
    config = net.config

    def step(params, rngs, optimizer):
        order = rngs["pretrain"].permutation(len(y))
        total = 0.0
        for a in range(0, len(y), cfg.batch_size):
            idx = order[a : a + cfg.batch_size]
            loss, grads = backward(TaskNetwork(config, params), X[idx], y[idx], "mae")
            params = optimizer.step(params, grads.grads)
            total += loss * len(idx)
        return total / len(y), params, {}

    result = train_loop(
        dict(net.params),
        step,
        lambda p: window_mae(TaskNetwork(config, p), Xv, yv),
        optimizer=make_optimizer(cfg.optimizer, cfg.lr),
        epochs=cfg.epochs,
        patience=cfg.patience,
        rngs={"pretrain": derive_rng(seed, "pretrain")},
        state=state,
        on_checkpoint=on_checkpoint,
        stop_at=stop_at,
    )
    return TaskNetwork(config, result.params), _log(result)
