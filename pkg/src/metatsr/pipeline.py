"""Split, preprocess and window a collection of long series in one go."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import DataError
from .series import (
    LongSeries,
    MetaWindow,
    PreprocessParams,
    VirtualTask,
    WindowSpec,
    fit_preprocess,
    preprocess,
    rolling_window_arrays,
    series_meta_windows,
    split_series,
    virtual_tasks,
)

SPLIT_NAMES = ("train", "validation", "test")


@dataclass(frozen=True)
class PreparedData:
    spec: WindowSpec
    meta_window_size: int
    params: PreprocessParams
    series: dict[str, list[LongSeries]]
    windows: dict[str, tuple[np.ndarray, np.ndarray]]
    meta_windows: dict[str, list[MetaWindow]]

    def tasks(self, split: str, step: int = 1) -> list[VirtualTask]:
        return virtual_tasks(self.meta_windows[split], step)

    @property
    def n_channels(self) -> int:
        return len(self.params.mean)


def _stack_windows(series: Sequence[LongSeries], spec: WindowSpec, n_channels: int):
    if not series:
        return np.empty((0, spec.window_size, n_channels)), np.empty(0)
    parts = [rolling_window_arrays(s, spec)[:2] for s in series]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def prepare(
    raw: Sequence[LongSeries],
    spec: WindowSpec,
    meta_window_size: int,
    *,
    manifest: Optional[Mapping[str, str]] = None,
    channel_policies: Optional[Sequence[str]] = None,
    target_policy: str = "zero",
    channel_names: Sequence[str] = (),
) -> PreparedData:
    """Assign splits, fit preprocessing on train only, then window every split."""
    if not raw:
        raise DataError("no series to prepare")
    train, val, test = split_series(raw, manifest=manifest)
    params = fit_preprocess(train, channel_policies, target_policy, channel_names)
    splits = {
        name: [preprocess(s, params) for s in group] for name, group in zip(SPLIT_NAMES, (train, val, test))
    }
    C = len(params.mean)
    return PreparedData(
        spec=spec,
        meta_window_size=meta_window_size,
        params=params,
        series=splits,
        windows={k: _stack_windows(v, spec, C) for k, v in splits.items()},
        meta_windows={
            k: [mw for s in v for mw in series_meta_windows(s, spec, meta_window_size)] for k, v in splits.items()
        },
    )
