"""Long series, rolling windows, meta-windows and preprocessing.

Windowing convention: window ``j`` covers time steps ``[j*k, j*k + delta)``
and is labelled with the target at ``j*k + delta``, the first step after the
window. ``j`` starts at 0, so a series of length ``L`` yields
``(L - 1 - delta) // k + 1`` windows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError

SPLITS = ("train", "validation", "test")
STD_FLOOR = 1e-8


def _frozen(a, dtype=np.float64) -> np.ndarray:
    # a read-only view of a read-only array needs no defensive copy
    if isinstance(a, np.ndarray) and a.dtype == dtype and not a.flags.writeable:
        if a.base is None or (isinstance(a.base, np.ndarray) and not a.base.flags.writeable):
            return a
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class LongSeries:
    channels: np.ndarray  # (L, C)
    target: np.ndarray  # (L,)
    id: str
    split: str = "train"

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float64)
        if ch.ndim == 1:
            ch = ch[:, None]
        tg = np.asarray(self.target, dtype=np.float64).reshape(-1)
        if ch.ndim != 2 or ch.shape[1] < 1 or ch.shape[0] < 1:
            raise DataError(f"series {self.id!r}: channels must be a non-empty (L, C) matrix")
        if ch.shape[0] != tg.shape[0]:
            raise DataError(
                f"series {self.id!r}: {ch.shape[0]} channel rows but {tg.shape[0]} targets"
            )
        if self.split not in SPLITS:
            raise DataError(f"series {self.id!r}: unknown split {self.split!r}")
        object.__setattr__(self, "channels", _frozen(ch))
        object.__setattr__(self, "target", _frozen(tg))

    @property
    def length(self) -> int:
        return self.target.shape[0]

    @property
    def n_channels(self) -> int:
        return self.channels.shape[1]

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.channels).all() and np.isfinite(self.target).all())


@dataclass(frozen=True)
class WindowSpec:
    window_size: int
    step_size: int = 1

    def __post_init__(self):
        if self.window_size < 1 or self.step_size < 1:
            raise ConfigError("window_size and step_size must be >= 1")

    def count(self, length: int) -> int:
        """Number of labelled windows a series of ``length`` steps yields."""
        if length - 1 < self.window_size:
            return 0
        return (length - 1 - self.window_size) // self.step_size + 1


@dataclass(frozen=True, eq=False)
class LabeledWindow:
    inputs: np.ndarray  # (delta, C)
    label: float
    origin_index: int

    def __post_init__(self):
        object.__setattr__(self, "inputs", _frozen(self.inputs))
        if self.inputs.ndim != 2:
            raise DataError("window inputs must be (delta, C)")
        if not math.isfinite(self.label):
            raise DataError("window label must be finite")


@dataclass(frozen=True, eq=False)
class MetaWindow:
    """``l`` consecutive labelled windows of one series, stored as arrays."""

    inputs: np.ndarray  # (l, delta, C)
    labels: np.ndarray  # (l,)
    origin_indices: np.ndarray  # (l,)
    series_id: str
    t_index: int

    def __post_init__(self):
        object.__setattr__(self, "inputs", _frozen(self.inputs))
        object.__setattr__(self, "labels", _frozen(self.labels))
        object.__setattr__(self, "origin_indices", _frozen(self.origin_indices, np.int64))
        n = self.labels.shape[0]
        if self.inputs.ndim != 3 or self.inputs.shape[0] != n or self.origin_indices.shape != (n,):
            raise DataError("meta-window arrays have inconsistent shapes")
        if n < 1:
            raise DataError("meta-window must hold at least one window")
        if n > 1 and not (self.origin_indices[1:] > self.origin_indices[:-1]).all():
            raise DataError("meta-window windows must be in increasing origin order")

    @classmethod
    def from_windows(cls, windows: Sequence[LabeledWindow], series_id: str, t_index: int) -> "MetaWindow":
        return cls(
            inputs=np.stack([w.inputs for w in windows]),
            labels=np.array([w.label for w in windows]),
            origin_indices=np.array([w.origin_index for w in windows]),
            series_id=series_id,
            t_index=t_index,
        )

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    @property
    def windows(self) -> list[LabeledWindow]:
        return [
            LabeledWindow(self.inputs[i], float(self.labels[i]), int(self.origin_indices[i]))
            for i in range(self.size)
        ]


@dataclass(frozen=True)
class VirtualTask:
    support: MetaWindow
    query: MetaWindow

    def __post_init__(self):
        if self.support.series_id != self.query.series_id:
            raise DataError("virtual task spans two series")
        if self.query.t_index != self.support.t_index + 1:
            raise DataError("query must be the meta-window right after the support")


@dataclass(frozen=True, eq=False)
class MetaWindowSummary:
    values: np.ndarray  # (l, C + 1)

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))


# --------------------------------------------------------------------------
# windowing


def rolling_window_arrays(series: LongSeries, spec: WindowSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Array form of :func:`rolling_window`: ``(inputs, labels, origins)``."""
    if not series.is_finite():
        raise DataError(f"series {series.id!r} has non-finite values; preprocess it first")
    n = spec.count(series.length)
    if n == 0:
        raise DataError("series shorter than window plus label")
    origins = np.arange(n, dtype=np.int64) * spec.step_size
    # (L - delta + 1, C, delta) -> pick strided starts -> (n, delta, C)
    view = np.lib.stride_tricks.sliding_window_view(series.channels, spec.window_size, axis=0)
    inputs = np.ascontiguousarray(view[origins].transpose(0, 2, 1))
    labels = series.target[origins + spec.window_size].copy()
    return inputs, labels, origins


def rolling_window(series: LongSeries, spec: WindowSpec) -> list[LabeledWindow]:
    inputs, labels, origins = rolling_window_arrays(series, spec)
    return [LabeledWindow(inputs[i], float(labels[i]), int(origins[i])) for i in range(len(labels))]


def generate_meta_windows(windows: Sequence[LabeledWindow], l: int, series_id: str = "") -> list[MetaWindow]:
    """Group consecutive windows into blocks of ``l``; the remainder is dropped."""
    if l < 1:
        raise ConfigError("meta-window length must be >= 1")
    return [
        MetaWindow.from_windows(windows[n * l : (n + 1) * l], series_id, n)
        for n in range(len(windows) // l)
    ]


def meta_windows_from_arrays(
    inputs: np.ndarray, labels: np.ndarray, origins: np.ndarray, l: int, series_id: str
) -> list[MetaWindow]:
    if l < 1:
        raise ConfigError("meta-window length must be >= 1")
    inputs, labels, origins = _frozen(inputs), _frozen(labels), _frozen(origins, np.int64)
    return [
        MetaWindow(inputs[n * l : (n + 1) * l], labels[n * l : (n + 1) * l], origins[n * l : (n + 1) * l], series_id, n)
        for n in range(len(labels) // l)
    ]


def series_meta_windows(series: LongSeries, spec: WindowSpec, l: int) -> list[MetaWindow]:
    """Rolling window followed by meta-window grouping, for one series."""
    return meta_windows_from_arrays(*rolling_window_arrays(series, spec), l, series.id)


def group_by_series(meta_windows: Iterable[MetaWindow]) -> dict[str, list[MetaWindow]]:
    groups: dict[str, list[MetaWindow]] = {}
    for mw in meta_windows:
        groups.setdefault(mw.series_id, []).append(mw)
    for mws in groups.values():
        mws.sort(key=lambda m: m.t_index)
    return groups


def virtual_tasks(meta_windows: Sequence[MetaWindow], step: int = 1) -> list[VirtualTask]:
    """Support/query pairs ``(T_t, T_{t+1})`` at ``t = 0, step, 2*step, ...`` per series."""
    if step < 1:
        raise ConfigError("task step must be >= 1")
    tasks = []
    for mws in group_by_series(meta_windows).values():
        for pos in range(0, len(mws) - 1, step):
            tasks.append(VirtualTask(mws[pos], mws[pos + 1]))
    return tasks


def summarize_arrays(inputs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """``(..., l, delta, C)`` + ``(..., l)`` -> ``(..., l, C + 1)``."""
    return np.concatenate([inputs[..., 0, :], labels[..., None]], axis=-1)


def summarize(mw: MetaWindow) -> MetaWindowSummary:
    return MetaWindowSummary(summarize_arrays(mw.inputs, mw.labels))


# --------------------------------------------------------------------------
# preprocessing


def _parse_policy(policy: str) -> tuple[str, float]:
    if policy == "interpolate":
        return "interpolate", 0.0
    if policy == "zero":
        return "constant", 0.0
    if policy.startswith("constant:"):
        try:
            return "constant", float(policy.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad imputation policy {policy!r}") from None
    raise ConfigError(f"unknown imputation policy {policy!r}")


def impute(values: np.ndarray, policy: str) -> np.ndarray:
    """Fill non-finite entries of a 1-D signal according to ``policy``.

    ``interpolate`` draws a straight line between the neighbouring valid
    samples and holds the edge value past either end; ``zero`` and
    ``constant:<v>`` substitute a fixed value.
    """
    kind, value = _parse_policy(policy)
    out = np.array(values, dtype=np.float64, copy=True)
    bad = ~np.isfinite(out)
    if not bad.any():
        return out
    if kind == "constant":
        out[bad] = value
        return out
    good = np.flatnonzero(~bad)
    if good.size == 0:
        raise DataError("cannot interpolate a signal with no valid samples")
    out[bad] = np.interp(np.flatnonzero(bad), good, out[good])
    return out


@dataclass(frozen=True)
class PreprocessParams:
    mean: tuple[float, ...]
    std: tuple[float, ...]
    target_min: float
    target_max: float
    channel_policies: tuple[str, ...]
    target_policy: str = "zero"
    channel_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not (len(self.mean) == len(self.std) == len(self.channel_policies)):
            raise ConfigError("preprocess parameters disagree on channel count")
        if any(s <= 0 for s in self.std):
            raise ConfigError("standard deviations must be positive")
        for p in (*self.channel_policies, self.target_policy):
            _parse_policy(p)

    def to_dict(self) -> dict:
        return {
            "mean": list(self.mean),
            "std": list(self.std),
            "target_min": self.target_min,
            "target_max": self.target_max,
            "channel_policies": list(self.channel_policies),
            "target_policy": self.target_policy,
            "channel_names": list(self.channel_names),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PreprocessParams":
        return cls(
            mean=tuple(d["mean"]),
            std=tuple(d["std"]),
            target_min=float(d["target_min"]),
            target_max=float(d["target_max"]),
            channel_policies=tuple(d["channel_policies"]),
            target_policy=d.get("target_policy", "zero"),
            channel_names=tuple(d.get("channel_names", ())),
        )


def _impute_series(raw: LongSeries, channel_policies: Sequence[str], target_policy: str):
    channels = np.column_stack([impute(raw.channels[:, c], channel_policies[c]) for c in range(raw.n_channels)])
    return channels, impute(raw.target, target_policy)


def fit_preprocess(
    train: Sequence[LongSeries],
    channel_policies: Sequence[str] | None = None,
    target_policy: str = "zero",
    channel_names: Sequence[str] = (),
) -> PreprocessParams:
    """Fit imputation-aware standardisation on the training split only."""
    if not train:
        raise DataError("no training series to fit preprocessing on")
    n_channels = train[0].n_channels
    if any(s.n_channels != n_channels for s in train):
        raise DataError("training series disagree on channel count")
    policies = tuple(channel_policies) if channel_policies is not None else ("interpolate",) * n_channels
    if len(policies) != n_channels:
        raise ConfigError(f"{len(policies)} imputation policies for {n_channels} channels")
    imputed = [_impute_series(s, policies, target_policy) for s in train]
    channels = np.concatenate([c for c, _ in imputed])
    target = np.concatenate([t for _, t in imputed])
    lo, hi = float(target.min()), float(target.max())
    if hi == lo:
        raise DataError("degenerate target range")
    std = np.maximum(channels.std(axis=0), STD_FLOOR)
    return PreprocessParams(
        mean=tuple(float(v) for v in channels.mean(axis=0)),
        std=tuple(float(v) for v in std),
        target_min=lo,
        target_max=hi,
        channel_policies=policies,
        target_policy=target_policy,
        channel_names=tuple(channel_names),
    )


def normalize_target(y: np.ndarray, params: PreprocessParams, clamp: bool = True) -> np.ndarray:
    if params.target_max == params.target_min:
        raise DataError("degenerate target range")
    out = (np.asarray(y, dtype=np.float64) - params.target_min) / (params.target_max - params.target_min)
    return np.clip(out, 0.0, 1.0) if clamp else out


def denormalize_target(y: np.ndarray, params: PreprocessParams) -> np.ndarray:
    return np.asarray(y, dtype=np.float64) * (params.target_max - params.target_min) + params.target_min


def preprocess(raw: LongSeries, params: PreprocessParams) -> LongSeries:
    """Impute, standardise channels and min-max the target (clamped to [0, 1])."""
    if raw.n_channels != len(params.mean):
        raise DataError(f"series {raw.id!r} has {raw.n_channels} channels, expected {len(params.mean)}")
    if params.target_max == params.target_min:
        raise DataError("degenerate target range")
    channels, target = _impute_series(raw, params.channel_policies, params.target_policy)
    channels = (channels - np.asarray(params.mean)) / np.asarray(params.std)
    return replace(raw, channels=channels, target=normalize_target(target, params))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_series(
    series: Sequence[LongSeries],
    fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
    manifest: Mapping[str, str] | None = None,
) -> tuple[list[LongSeries], list[LongSeries], list[LongSeries]]:
    """Assign whole series to train/validation/test.

    Without a manifest the input order is kept: the first series go to
    train, then validation, then test. Validation and test receive
    ``round(f * M)`` series each (at least one); train takes the rest.
    """
    out: dict[str, list[LongSeries]] = {s: [] for s in SPLITS}
    if manifest is not None:
        for s in series:
            split = manifest.get(s.id)
            if split is None:
                raise DataError(f"series {s.id!r} missing from split manifest")
            if split not in SPLITS:
                raise DataError(f"manifest assigns unknown split {split!r} to {s.id!r}")
            out[split].append(replace(s, split=split))
        return out["train"], out["validation"], out["test"]

    m = len(series)
    if m < len(SPLITS):
        raise DataError(f"need at least {len(SPLITS)} series to split without a manifest, got {m}")
    if abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) <= 0:
        raise ConfigError("split fractions must be positive and sum to 1")
    n_val = max(1, _round_half_up(fractions[1] * m))
    n_test = max(1, _round_half_up(fractions[2] * m))
    n_train = m - n_val - n_test
    if n_train < 1:
        raise DataError(f"too few series ({m}) for the requested fractions")
    bounds = {"train": (0, n_train), "validation": (n_train, n_train + n_val), "test": (n_train + n_val, m)}
    for split, (a, b) in bounds.items():
        out[split] = [replace(s, split=split) for s in series[a:b]]
    return out["train"], out["validation"], out["test"]


def autocorrelation(y, max_lag: int) -> np.ndarray:
    """Sample autocorrelation at lags ``0..max_lag`` (biased estimator)."""
    y = np.asarray(y, dtype=np.float64)
    if max_lag < 1 or y.shape[0] <= max_lag:
        raise DataError("series must be longer than max_lag")
    d = y - y.mean()
    denom = d @ d
    if denom == 0.0:
        raise DataError("constant series")
    n = y.shape[0]
    acf = np.array([d[: n - k] @ d[k:] for k in range(max_lag + 1)]) / denom
    acf[0] = 1.0
    return acf
