"""Sliding meta-testing protocol.

For every test series with ``M`` meta-windows, adaptation points sit at
``t = 0, step, 2*step, ...`` as long as ``t + H <= M - 1``. At each point the
model is adapted on ``T_t`` (always from the pristine trained parameters) and
scored by MAE on each of ``T_{t+1} ... T_{t+H}``. Points whose horizon would
run past the series end are skipped, so every horizon has the same number of
samples.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence, Union

import numpy as np

from .baselines import finetune_baseline, target_mean_baseline
from .config import FinetuneConfig, MetaTestConfig, config_hash
from .errors import DataError
from .maml import adapt_head
from .mmaml import ModulationNetwork, encode_stats, generate
from .net import TaskNetwork, features
from .series import MetaWindow, group_by_series, summarize_arrays

Predictor = Callable[[np.ndarray], np.ndarray]


class Adapter(Protocol):
    name: str

    def adapt(self, support: MetaWindow, steps: int) -> Predictor: ...

    def fingerprint(self) -> str: ...


@dataclass(frozen=True)
class MamlAdapter:
    net: TaskNetwork
    inner_lr: float
    name: str = "maml"

    def adapt(self, support: MetaWindow, steps: int) -> Predictor:
        w, b = self.net.head
        W, B, _ = adapt_head(features(self.net, support.inputs), support.labels, w, b, self.inner_lr, steps)
        return lambda X: features(self.net, X) @ W + float(B)

    def fingerprint(self) -> str:
        return self.net.hash()


@dataclass(frozen=True)
class MmamlAdapter:
    net: TaskNetwork
    mod: ModulationNetwork
    inner_lr: float
    name: str = "mmaml"

    def adapt(self, support: MetaWindow, steps: int) -> Predictor:
        mu, _ = encode_stats(self.mod, summarize_arrays(support.inputs, support.labels))
        gamma, beta = generate(self.mod, mu)
        w, b = self.net.head
        phi = features(self.net, support.inputs)
        W, B, _ = adapt_head(phi, support.labels, w, b, self.inner_lr, steps, gamma, beta)
        theta = gamma * W + beta
        return lambda X: features(self.net, X) @ theta + float(B)

    def fingerprint(self) -> str:
        return self.net.hash() + self.mod.hash()


@dataclass(frozen=True)
class FinetuneAdapter:
    net: TaskNetwork
    lr: float
    weight_decay: float = 0.0
    name: str = "lstm-finetune"

    def adapt(self, support: MetaWindow, steps: int) -> Predictor:
        head = finetune_baseline(self.net, support, self.lr, steps, self.weight_decay)
        return lambda X: features(self.net, X) @ head.theta_prime + head.bias_prime

    def fingerprint(self) -> str:
        return self.net.hash()


@dataclass(frozen=True)
class TargetMeanAdapter:
    name: str = "target-mean"

    def adapt(self, support: MetaWindow, steps: int) -> Predictor:
        return target_mean_baseline(support)

    def fingerprint(self) -> str:
        return "target-mean"


# --------------------------------------------------------------------------
# protocol


def default_step(n_meta_windows: int) -> int:
    return max(1, n_meta_windows // 100)


def adaptation_count(n_meta_windows: int, step: int, horizon: int) -> int:
    """Closed-form number of adaptation points in one series."""
    if n_meta_windows - 1 < horizon:
        return 0
    return (n_meta_windows - 1 - horizon) // step + 1


def adaptation_points(meta_windows: Sequence[MetaWindow], cfg: MetaTestConfig) -> list[tuple[str, int, list[MetaWindow]]]:
    """``(series_id, position, [T_t, ..., T_{t+H}])`` for every adaptation point, in a fixed order."""
    points = []
    groups = group_by_series(meta_windows)
    for sid in sorted(groups):
        mws = groups[sid]
        step = cfg.meta_test_step or default_step(len(mws))
        for t in range(0, adaptation_count(len(mws), step, cfg.horizon) * step, step):
            points.append((sid, t, mws[t : t + cfg.horizon + 1]))
    return points


def ci95(values: Sequence[float]) -> float:
    """Normal-approximation half-width ``1.96 * s / sqrt(n)``; 0 for a single run."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return 0.0
    # shift by one sample so identical runs give exactly zero
    v = v - v[0]
    return float(1.96 * v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class EvalResult:
    model: str
    per_horizon_mae: np.ndarray  # (H,) mean over runs
    per_horizon_ci: np.ndarray  # (H,)
    aggregate_mae: float
    ci95_half_width: float
    run_count: int
    config_hash: str
    run_per_horizon: np.ndarray  # (runs, H)
    errors: list[np.ndarray] = field(repr=False)  # per run: (points, H, l) absolute errors
    points: list[tuple[str, int]] = field(repr=False, default_factory=list)
    gradient_steps: int = 1

    @property
    def horizon(self) -> int:
        return self.per_horizon_mae.shape[0]

    def horizon_average(self, h: int) -> tuple[float, float]:
        """Mean and CI of the MAE averaged over query meta-windows ``t+1 .. t+h``."""
        per_run = self.run_per_horizon[:, :h].mean(axis=1)
        return float(per_run.mean()), ci95(per_run)


def _resolve_adapters(adapter, runs: int, seed: int) -> list:
    if isinstance(adapter, (list, tuple)):
        if len(adapter) != runs:
            raise ValueError(f"{len(adapter)} adapters for {runs} runs")
        return list(adapter)
    if callable(adapter) and not hasattr(adapter, "adapt"):
        return [adapter(seed + r) for r in range(runs)]
    return [adapter] * runs


def meta_test(
    adapter: Union[Adapter, Sequence[Adapter], Callable[[int], Adapter]],
    test_meta_windows: Sequence[MetaWindow],
    cfg: MetaTestConfig,
    *,
    threads: int = 1,
    check_hygiene: bool = True,
) -> EvalResult:
    """Run the sliding protocol ``cfg.runs`` times and aggregate.

    ``adapter`` is either one adapter reused for every run, a sequence with
    one adapter per run, or a factory called with ``cfg.seed + run``.
    """
    points = adaptation_points(test_meta_windows, cfg)
    if not points:
        raise DataError(
            f"no adaptation points: a test series needs at least {cfg.horizon + 1} meta-windows"
        )
    adapters = _resolve_adapters(adapter, cfg.runs, cfg.seed)
    H = cfg.horizon

    run_errors = []
    for ad in adapters:
        reference = ad.fingerprint()

        def evaluate(point):
            _, _, mws = point
            if check_hygiene and ad.fingerprint() != reference:
                raise RuntimeError("trained parameters changed between adaptation points")
            predictor = ad.adapt(mws[0], cfg.gradient_steps)
            return np.stack([np.abs(q.labels - predictor(q.inputs)) for q in mws[1:]])

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                errs = list(pool.map(evaluate, points))
        else:
            errs = [evaluate(p) for p in points]
        run_errors.append(np.stack(errs))  # (P, H, l)

    run_per_horizon = np.stack([e.mean(axis=(0, 2)) for e in run_errors])
    run_aggregate = run_per_horizon.mean(axis=1)
    return EvalResult(
        model=adapters[0].name,
        per_horizon_mae=run_per_horizon.mean(axis=0),
        per_horizon_ci=np.array([ci95(run_per_horizon[:, h]) for h in range(H)]),
        aggregate_mae=float(run_aggregate.mean()),
        ci95_half_width=ci95(run_aggregate),
        run_count=len(adapters),
        config_hash=config_hash(cfg),
        run_per_horizon=run_per_horizon,
        errors=run_errors,
        points=[(sid, t) for sid, t, _ in points],
        gradient_steps=cfg.gradient_steps,
    )


# --------------------------------------------------------------------------
# hyperparameter selection and ablations


def select_finetune(
    net: TaskNetwork,
    validation_meta_windows: Sequence[MetaWindow],
    cfg: MetaTestConfig,
    grid: FinetuneConfig = FinetuneConfig(),
) -> tuple[FinetuneAdapter, float]:
    """Grid search over fine-tuning LR and weight decay on validation MAE."""
    single = cfg.model_copy(update={"runs": 1})
    best = None
    for lr in grid.lr_grid:
        for wd in grid.weight_decay_grid:
            ad = FinetuneAdapter(net, lr, wd)
            mae = meta_test(ad, validation_meta_windows, single, check_hygiene=False).aggregate_mae
            if best is None or mae < best[1]:
                best = (ad, mae)
    return best


AXES = ("gradient_steps", "vrae_weight", "horizon")


def ablation_sweep(
    axis: str,
    values: Iterable,
    base_config: MetaTestConfig,
    adapter_for: Callable[[object], object],
    test_meta_windows: Sequence[MetaWindow],
    *,
    threads: int = 1,
) -> list[dict]:
    """Run :func:`meta_test` once per axis value, everything else fixed.

    ``adapter_for(value)`` returns whatever :func:`meta_test` accepts; for
    ``gradient_steps`` and ``horizon`` it usually ignores the value, for
    ``vrae_weight`` it trains (or loads) a model per value. Returns long-format
    rows ``{axis, value, horizon, mae, ci95}`` with one row per horizon.
    """
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}")
    rows = []
    for value in values:
        cfg = base_config
        if axis in ("gradient_steps", "horizon"):
            cfg = base_config.model_copy(update={axis: int(value)})
        result = meta_test(adapter_for(value), test_meta_windows, cfg, threads=threads)
        for h in range(result.horizon):
            rows.append(
                {
                    "axis": axis,
                    "value": value,
                    "horizon": h + 1,
                    "mae": float(result.per_horizon_mae[h]),
                    "ci95": float(result.per_horizon_ci[h]),
                }
            )
    return rows
