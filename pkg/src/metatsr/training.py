"""Early-stopped gradient loop shared by meta-training and pretraining.

The loop owns everything that has to survive an interruption (parameters,
optimizer moments, RNG states, early-stopping counters and the log), so a
run resumed from a :class:`TrainState` continues on exactly the trajectory
it would have followed uninterrupted.
"""
from __future__ import annotations

import copy
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NumericalError
from .rng import restore_rng, rng_state

Params = dict[str, np.ndarray]

LOG_COLUMNS = ("epoch", "train_loss", "val_loss", "wall_time")


@dataclass
class TrainState:
    epoch: int
    params: Params
    best_params: Params
    best_val: float
    best_epoch: int
    since_best: int
    optimizer: dict
    rngs: dict[str, dict]
    log: list[dict] = field(default_factory=list)
    done: bool = False


@dataclass
class TrainResult:
    params: Params  # best-validation parameters
    final_params: Params
    log: list[dict]
    best_epoch: int
    best_val: float
    epochs_run: int
    state: TrainState


StepFn = Callable[[Params, dict[str, np.random.Generator], object], tuple[float, Params, dict]]


def train_loop(
    params: Params,
    step: StepFn,
    validate: Callable[[Params], float],
    *,
    optimizer,
    epochs: int,
    patience: int,
    eval_every: int = 1,
    rngs: Optional[dict[str, np.random.Generator]] = None,
    state: Optional[TrainState] = None,
    on_checkpoint: Optional[Callable[[TrainState, str], None]] = None,
    checkpoint_every: int = 0,
    stop_at: Optional[int] = None,
) -> TrainResult:
    """Run ``step`` for up to ``epochs`` epochs with early stopping on ``validate``.

    ``step(params, rngs, optimizer)`` performs one epoch of updates and
    returns ``(train_loss, new_params, extra_log_fields)``.
    Validation runs once before the first update (epoch 0) and then every
    ``eval_every`` epochs; training stops once ``patience`` epochs pass
    without a strict improvement. ``stop_at`` halts after that epoch without
    marking the run finished, which is how interruptions are simulated.
    """
    start = time.perf_counter()
    if state is None:
        rngs = rngs or {}
        val0 = validate(params)
        if not math.isfinite(val0):
            raise NumericalError("non-finite validation loss at initialisation")
        state = TrainState(
            epoch=0,
            params=dict(params),
            best_params=dict(params),
            best_val=val0,
            best_epoch=0,
            since_best=0,
            optimizer=optimizer.state_dict(),
            rngs={k: rng_state(g) for k, g in rngs.items()},
            log=[{"epoch": 0, "train_loss": float("nan"), "val_loss": val0, "wall_time": 0.0}],
        )
    else:
        state = copy.deepcopy(state)
        optimizer.load_state_dict(state.optimizer)
    rngs = {k: restore_rng(s) for k, s in state.rngs.items()}

    while not state.done and state.epoch < epochs:
        if stop_at is not None and state.epoch >= stop_at:
            break
        train_loss, new_params, extra = step(state.params, rngs, optimizer)
        if not math.isfinite(train_loss) or any(not np.isfinite(v).all() for v in new_params.values()):
            raise NumericalError(f"non-finite loss or parameters at epoch {state.epoch + 1}")
        state.params = new_params
        state.epoch += 1
        row = {"epoch": state.epoch, "train_loss": train_loss, "val_loss": float("nan")}
        row.update(extra)
        improved = False
        if state.epoch % eval_every == 0 or state.epoch == epochs:
            val = validate(state.params)
            if not math.isfinite(val):
                raise NumericalError(f"non-finite validation loss at epoch {state.epoch}")
            row["val_loss"] = val
            if val < state.best_val:
                state.best_val, state.best_epoch = val, state.epoch
                state.best_params = dict(state.params)
                state.since_best = 0
                improved = True
            else:
                state.since_best = state.epoch - state.best_epoch
        row["wall_time"] = time.perf_counter() - start
        state.log.append(row)
        state.optimizer = optimizer.state_dict()
        state.rngs = {k: rng_state(g) for k, g in rngs.items()}
        if state.since_best >= patience:
            state.done = True
        if on_checkpoint is not None:
            if improved:
                on_checkpoint(state, "best")
            if checkpoint_every and state.epoch % checkpoint_every == 0:
                on_checkpoint(state, "last")

    if state.epoch >= epochs:
        state.done = True
    return TrainResult(
        params=state.best_params,
        final_params=state.params,
        log=state.log,
        best_epoch=state.best_epoch,
        best_val=state.best_val,
        epochs_run=state.epoch,
        state=state,
    )
