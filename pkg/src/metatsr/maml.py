"""MAML for time series regression with last-layer fast adaptation.

Inner loop (per task, head only, mean MAE over the support)::

    pred_i = (gamma * w + beta) . phi_i + b
    s_i    = sign(y_i - pred_i)
    w'     = w + alpha * gamma * mean_i(s_i * phi_i)
    b'     = b + alpha * mean_i(s_i)

Meta-gradient. The signs ``s_i`` are piecewise constant in every parameter,
so almost everywhere they have zero derivative and ``w'`` is affine in
``(w, gamma, phi_support)``. With one inner step and ``u = mean_i(s_i phi_i)``
the query prediction is::

    pred_j = (gamma * w + alpha * gamma**2 * u + beta) . phi_j + b + alpha * mean(s)

whose exact derivatives are::

    d/dw          = gamma * phi_j          (the inner Hessian in w is zero)
    d/dgamma      = (w' + alpha * gamma * u) * phi_j
    d/dphi_j      = gamma * w' + beta
    d/dphi_i      = (alpha / l) * s_i * gamma**2 * phi_j     (support path)

The first-order variant treats the inner update as a constant: it keeps the
``w`` and ``phi_j`` terms, uses ``w' * phi_j`` for ``gamma`` and drops the
support path. For the head parameters both variants coincide.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .config import MamlConfig
from .errors import DataError, NumericalError
from .net import FilmParams, TaskNetwork, extract, extract_backward, features, film
from .optim import make_optimizer
from .rng import derive_rng
from .series import MetaWindow, VirtualTask
from .training import TrainResult, TrainState, train_loop


@dataclass(frozen=True)
class TaskArrays:
    """Virtual tasks stacked into dense arrays for batched computation."""

    support_x: np.ndarray  # (N, l, delta, C)
    support_y: np.ndarray  # (N, l)
    query_x: np.ndarray  # (N, m, delta, C)
    query_y: np.ndarray  # (N, m)
    series_ids: tuple[str, ...] = ()
    t_index: tuple[int, ...] = ()

    @classmethod
    def from_tasks(cls, tasks: Sequence[VirtualTask]) -> "TaskArrays":
        if not tasks:
            raise DataError("no virtual tasks")
        return cls(
            np.stack([t.support.inputs for t in tasks]),
            np.stack([t.support.labels for t in tasks]),
            np.stack([t.query.inputs for t in tasks]),
            np.stack([t.query.labels for t in tasks]),
            tuple(t.support.series_id for t in tasks),
            tuple(t.support.t_index for t in tasks),
        )

    def __len__(self) -> int:
        return self.support_y.shape[0]

    def take(self, idx) -> "TaskArrays":
        idx = np.asarray(idx)
        return TaskArrays(
            self.support_x[idx],
            self.support_y[idx],
            self.query_x[idx],
            self.query_y[idx],
            tuple(self.series_ids[i] for i in idx) if self.series_ids else (),
            tuple(self.t_index[i] for i in idx) if self.t_index else (),
        )


def as_task_arrays(tasks) -> TaskArrays:
    return tasks if isinstance(tasks, TaskArrays) else TaskArrays.from_tasks(list(tasks))


@dataclass(frozen=True)
class AdaptedHead:
    theta_prime: np.ndarray
    bias_prime: float
    steps_taken: int
    source_support: Optional[MetaWindow] = field(default=None, repr=False, compare=False)

    def predict(self, phi: np.ndarray, film_params: Optional[FilmParams] = None) -> np.ndarray:
        return phi @ film(self.theta_prime, film_params) + self.bias_prime


# --------------------------------------------------------------------------
# inner loop


def adapt_head(
    phi: np.ndarray,
    y: np.ndarray,
    w: np.ndarray,
    b,
    alpha: float,
    steps: int,
    gamma: Optional[np.ndarray] = None,
    beta: Optional[np.ndarray] = None,
    weight_decay: float = 0.0,
    loss: str = "mae",
):
    """Gradient descent on the (optionally FiLM-modulated) head.

    Works on a single support (``phi: (l, F)``) or a stack of them
    (``phi: (T, l, F)``). Weight decay is decoupled and multiplicative:
    ``w <- (1 - weight_decay) * w - alpha * grad``; the bias is not decayed.
    Returns ``(w', b', u)`` where ``u`` is the first step's mean of
    ``s_i * phi_i`` (needed by the exact meta-gradient).
    """
    if loss not in ("mae", "mse"):
        raise ValueError(f"unknown loss {loss!r}")
    lead = phi.shape[:-2]
    W = np.broadcast_to(w, lead + w.shape[-1:]).astype(np.float64, copy=True)
    B = np.broadcast_to(np.asarray(b, dtype=np.float64), lead).astype(np.float64, copy=True)
    g = 1.0 if gamma is None else gamma
    be = 0.0 if beta is None else beta
    u0 = None
    for _ in range(steps):
        theta = g * W + be
        pred = np.einsum("...lf,...f->...l", phi, theta) + B[..., None]
        r = y - pred
        s = np.sign(r) if loss == "mae" else 2.0 * r
        u = np.einsum("...l,...lf->...f", s, phi) / phi.shape[-2]
        if u0 is None:
            u0 = u
        gw = -g * u
        gb = -s.mean(axis=-1)
        if not (np.isfinite(gw).all() and np.isfinite(gb).all()):
            raise NumericalError("divergent inner loop")
        W = (1.0 - weight_decay) * W - alpha * gw
        B = B - alpha * gb
    if not (np.isfinite(W).all() and np.isfinite(B).all()):
        raise NumericalError("divergent inner loop")
    return W, B, u0


def inner_adapt(
    net: TaskNetwork,
    support: MetaWindow,
    cfg: MamlConfig,
    film_params: Optional[FilmParams] = None,
    steps: Optional[int] = None,
) -> AdaptedHead:
    """Adapt the head on ``support``; the extractor and FiLM parameters stay fixed."""
    n = cfg.inner_steps if steps is None else steps
    phi = features(net, support.inputs)
    w, b = net.head
    g = None if film_params is None else film_params.gamma
    be = None if film_params is None else film_params.beta
    W, B, _ = adapt_head(phi, support.labels, w, b, cfg.inner_lr, n, g, be)
    return AdaptedHead(W, float(B), n, support)


def kernel_oracle_predict(
    net: TaskNetwork,
    support: MetaWindow,
    query_x: np.ndarray,
    alpha: float,
    inner_steps: int = 1,
    loss: str = "mae",
) -> np.ndarray | float:
    """Prediction after one MAE step, written as a kernel correction.

    ``pred_j = w.phi_j + b - eps_j`` with
    ``eps_j = -(alpha / l) * sum_i sign(y_i - pred_i) * k(x_i, x_j)`` and
    ``k(x_i, x_j) = phi_i . phi_j + 1`` (the ``+1`` is the bias feature).
    Accepts one query window ``(delta, C)`` or a batch ``(n, delta, C)``.
    """
    if inner_steps != 1 or loss != "mae":
        raise ValueError("the kernel form holds for one inner step with MAE only")
    query_x = np.asarray(query_x, dtype=np.float64)
    single = query_x.ndim == 2
    if single:
        query_x = query_x[None]
    w, b = net.head
    phi_s = features(net, support.inputs)
    phi_q = features(net, query_x)
    err = np.sign(support.labels - (phi_s @ w + b))
    kernel = phi_s @ phi_q.T + 1.0
    eps = -(alpha / support.size) * (err @ kernel)
    pred = phi_q @ w + b - eps
    return float(pred[0]) if single else pred


def meta_augment(support: MetaWindow, noise_level: float, rng: np.random.Generator) -> MetaWindow:
    """Copy of ``support`` with Gaussian label noise of std ``noise_level``."""
    if noise_level < 0:
        raise ValueError("noise_level must be >= 0")
    labels = support.labels
    if noise_level > 0:
        labels = labels + rng.normal(0.0, noise_level, size=labels.shape)
    return MetaWindow(support.inputs, labels, support.origin_indices, support.series_id, support.t_index)


# --------------------------------------------------------------------------
# meta-objective


@dataclass
class MetaGrads:
    loss: float  # mean query MAE over tasks
    task_losses: np.ndarray  # (T,)
    head_w: np.ndarray
    head_b: float
    gamma: Optional[np.ndarray]  # (T, F)
    beta: Optional[np.ndarray]  # (T, F)
    phi_s: np.ndarray  # (T, l, F)
    phi_q: np.ndarray  # (T, m, F)


def meta_head_grads(
    phi_s: np.ndarray,
    y_s: np.ndarray,
    phi_q: np.ndarray,
    y_q: np.ndarray,
    w: np.ndarray,
    b: float,
    alpha: float,
    steps: int,
    gamma: Optional[np.ndarray] = None,
    beta: Optional[np.ndarray] = None,
    exact: bool = True,
) -> MetaGrads:
    """Post-adaptation query MAE averaged over tasks, with gradients w.r.t. the
    head, the per-task FiLM parameters and the support/query features."""
    T, l, F = phi_s.shape
    m = phi_q.shape[1]
    W, B, u = adapt_head(phi_s, y_s, w, b, alpha, steps, gamma, beta)
    g = np.ones((T, F)) if gamma is None else gamma
    be = np.zeros((T, F)) if beta is None else beta
    theta_q = g * W + be
    r = y_q - (np.einsum("tmf,tf->tm", phi_q, theta_q) + B[:, None])
    task_losses = np.abs(r).mean(axis=1)
    dpred = -np.sign(r) / (m * T)
    Phi = np.einsum("tm,tmf->tf", dpred, phi_q)
    exact = exact and steps == 1
    dphi_s = np.zeros_like(phi_s)
    if exact:
        s = np.sign(y_s - (np.einsum("tlf,tf->tl", phi_s, g * w + be) + b))
        dphi_s = (alpha / l) * s[:, :, None] * (g * g * Phi)[:, None, :]
        dgamma = Phi * (W + alpha * g * u)
    else:
        dgamma = Phi * W
    return MetaGrads(
        loss=float(task_losses.mean()),
        task_losses=task_losses,
        head_w=(g * Phi).sum(axis=0),
        head_b=float(dpred.sum()),
        gamma=None if gamma is None else dgamma,
        beta=None if beta is None else Phi,
        phi_s=dphi_s,
        phi_q=dpred[:, :, None] * theta_q[:, None, :],
    )


def _batch_features(net: TaskNetwork, batch: TaskArrays):
    T, l = batch.support_y.shape
    m = batch.query_y.shape[1]
    shape = batch.support_x.shape[2:]
    X = np.concatenate([batch.support_x.reshape(-1, *shape), batch.query_x.reshape(-1, *shape)])
    phi, cache = extract(net, X)
    F = phi.shape[1]
    return phi[: T * l].reshape(T, l, F), phi[T * l :].reshape(T, m, F), cache


def maml_meta_grads(
    net: TaskNetwork,
    batch: TaskArrays,
    cfg: MamlConfig,
    support_y: Optional[np.ndarray] = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean post-adaptation query MAE and its gradient w.r.t. all task-network parameters."""
    phi_s, phi_q, cache = _batch_features(net, batch)
    w, b = net.head
    y_s = batch.support_y if support_y is None else support_y
    mg = meta_head_grads(
        phi_s, y_s, phi_q, batch.query_y, w, b, cfg.inner_lr, cfg.inner_steps, exact=cfg.second_order
    )
    F = phi_s.shape[-1]
    dphi = np.concatenate([mg.phi_s.reshape(-1, F), mg.phi_q.reshape(-1, F)])
    grads = extract_backward(net, cache, dphi)
    grads["head.w"] = mg.head_w
    grads["head.b"] = np.asarray(mg.head_b)
    return mg.loss, grads


def maml_meta_loss(net: TaskNetwork, batch: TaskArrays, cfg: MamlConfig, steps: Optional[int] = None) -> float:
    """Mean post-adaptation query MAE (no gradients)."""
    phi_s, phi_q, _ = _batch_features(net, batch)
    w, b = net.head
    W, B, _ = adapt_head(phi_s, batch.support_y, w, b, cfg.inner_lr, cfg.inner_steps if steps is None else steps)
    pred = np.einsum("tmf,tf->tm", phi_q, W) + B[:, None]
    return float(np.abs(batch.query_y - pred).mean())


def chunked_mean(fn: Callable[[TaskArrays], float], tasks: TaskArrays, chunk: int = 64) -> float:
    """Task-weighted mean of ``fn`` over ``tasks`` evaluated in chunks."""
    n = len(tasks)
    total = 0.0
    for a in range(0, n, chunk):
        idx = np.arange(a, min(a + chunk, n))
        total += fn(tasks.take(idx)) * len(idx)
    return total / n


def sample_batch(n_tasks: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform meta-batch indices, without replacement within the batch."""
    return rng.choice(n_tasks, size=min(batch_size, n_tasks), replace=False)


def augment_labels(y: np.ndarray, noise_level: float, rng: np.random.Generator) -> np.ndarray:
    if noise_level == 0:
        return y
    return y + rng.normal(0.0, noise_level, size=y.shape)


# --------------------------------------------------------------------------
# meta-training


@dataclass
class TrainingLog:
    rows: list[dict]
    best_epoch: int
    best_val: float
    epochs_run: int
    state: Optional[TrainState] = field(default=None, repr=False)


def meta_train(
    train_tasks,
    net: TaskNetwork,
    cfg: MamlConfig,
    validation_tasks,
    *,
    seed: int = 0,
    state: Optional[TrainState] = None,
    on_checkpoint=None,
    stop_at: Optional[int] = None,
) -> tuple[TaskNetwork, TrainingLog]:
    """Meta-train all task-network parameters; returns the best-validation network.

    Each meta-epoch samples ``meta_batch_size`` virtual tasks, adapts the head
    on every (label-noised) support, and takes one optimizer step on the mean
    query MAE. Validation is the mean post-adaptation query MAE over all
    validation tasks.
    """
    train = as_task_arrays(train_tasks)
    val = as_task_arrays(validation_tasks)
    config = net.config

    def step(params, rngs, optimizer):
        inner = TaskNetwork(config, params)
        batch = train.take(sample_batch(len(train), cfg.meta_batch_size, rngs["tasks"]))
        y_s = augment_labels(batch.support_y, cfg.noise_level, rngs["augment"])
        loss, grads = maml_meta_grads(inner, batch, cfg, y_s)
        return loss, optimizer.step(params, grads), {}

    def validate(params):
        inner = TaskNetwork(config, params)
        return chunked_mean(lambda b: maml_meta_loss(inner, b, cfg), val)

    result = train_loop(
        dict(net.params),
        step,
        validate,
        optimizer=make_optimizer(cfg.optimizer, cfg.meta_lr),
        epochs=cfg.meta_epochs,
        patience=cfg.patience,
        eval_every=cfg.eval_every,
        rngs={"tasks": derive_rng(seed, "tasks"), "augment": derive_rng(seed, "augment")},
        state=state,
        on_checkpoint=on_checkpoint,
        checkpoint_every=cfg.checkpoint_every,
        stop_at=stop_at,
    )
    return TaskNetwork(config, result.params), _log(result)


def _log(result: TrainResult) -> TrainingLog:
    return TrainingLog(result.log, result.best_epoch, result.best_val, result.epochs_run, result.state)
