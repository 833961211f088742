"""On-disk formats: CSV ingestion, a deterministic binary array container,
checkpoints, and the CSV reports.

Container layout (all integers little-endian)::

    b"MTSR" | u16 version | u32 header length | header (canonical JSON, UTF-8)
    | array payloads, in header order, raw little-endian bytes

The header lists every array's name, dtype and shape. Nothing time- or
platform-dependent is written, so identical inputs give identical bytes.
"""
from __future__ import annotations

import csv
import fnmatch
import io as _io
import json
import math
import os
import struct
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .config import canonical_json
from .errors import ConfigError, DataError
from .series import LongSeries, MetaWindow, WindowSpec
from .training import TrainState

MAGIC = b"MTSR"
VERSION = 1
_DTYPES = {"f8": "<f8", "i8": "<i8"}


# --------------------------------------------------------------------------
# binary container


def _json_safe(obj):
    """Replace non-finite floats by strings so the header stays strict JSON."""
    if isinstance(obj, float) and not math.isfinite(obj):
        return {"__float__": repr(obj)}
    if isinstance(obj, Mapping):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.generic):
        return _json_safe(obj.item())
    return obj


def _json_restore(obj):
    if isinstance(obj, dict):
        if set(obj) == {"__float__"}:
            return float(obj["__float__"])
        return {k: _json_restore(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_json_restore(v) for v in obj]
    return obj


def write_container(path, header: Mapping, arrays: Mapping[str, np.ndarray]) -> None:
    specs, payloads = [], []
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        kind = "i8" if np.issubdtype(a.dtype, np.integer) else "f8"
        a = np.array(a, dtype=_DTYPES[kind], order="C")
        specs.append({"name": name, "dtype": kind, "shape": list(a.shape)})
        payloads.append(a.tobytes())
    head = canonical_json(_json_safe({"meta": dict(header), "arrays": specs})).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<HI", VERSION, len(head)) + head)
        for p in payloads:
            f.write(p)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    if raw[:4] != MAGIC or len(raw) < 10:
        raise DataError(f"{path} is not a metatsr container")
    version, n = struct.unpack("<HI", raw[4:10])
    if version != VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    try:
        head = _json_restore(json.loads(raw[10 : 10 + n].decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DataError(f"{path}: corrupt header") from None
    offset = 10 + n
    arrays = {}
    for spec in head["arrays"]:
        dt = np.dtype(_DTYPES[spec["dtype"]])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        if offset + count * dt.itemsize > len(raw):
            raise DataError(f"{path}: truncated payload")
        arrays[spec["name"]] = np.frombuffer(raw, dt, count, offset).reshape(tuple(spec["shape"])).astype(dt.newbyteorder("="))
        offset += count * dt.itemsize
    if offset != len(raw):
        raise DataError(f"{path}: trailing or missing payload bytes")
    return head["meta"], arrays


# --------------------------------------------------------------------------
# windows and meta-windows


def save_windows(path, X: np.ndarray, y: np.ndarray, spec: WindowSpec, config_hash: str) -> None:
    header = {"kind": "windows", "delta": spec.window_size, "k": spec.step_size, "config_hash": config_hash}
    write_container(path, header, {"inputs": X, "labels": y})


def load_windows(path, expected_hash: Optional[str] = None) -> tuple[np.ndarray, np.ndarray]:
    meta, arrays = read_container(path)
    _check_kind(path, meta, "windows", expected_hash)
    return arrays["inputs"], arrays["labels"]


def save_meta_windows(
    path, meta_windows: Sequence[MetaWindow], spec: WindowSpec, l: int, config_hash: str, n_channels: int
) -> None:
    header = {
        "kind": "meta_windows",
        "delta": spec.window_size,
        "k": spec.step_size,
        "l": l,
        "C": n_channels,
        "count": len(meta_windows),
        "series_ids": [m.series_id for m in meta_windows],
        "config_hash": config_hash,
    }
    if meta_windows:
        arrays = {
            "inputs": np.stack([m.inputs for m in meta_windows]),
            "labels": np.stack([m.labels for m in meta_windows]),
            "origins": np.stack([m.origin_indices for m in meta_windows]),
            "t_index": np.array([m.t_index for m in meta_windows], dtype=np.int64),
        }
    else:
        arrays = {
            "inputs": np.empty((0, l, spec.window_size, n_channels)),
            "labels": np.empty((0, l)),
            "origins": np.empty((0, l), dtype=np.int64),
            "t_index": np.empty(0, dtype=np.int64),
        }
    write_container(path, header, arrays)


def load_meta_windows(path, expected_hash: Optional[str] = None) -> tuple[list[MetaWindow], dict]:
    meta, a = read_container(path)
    _check_kind(path, meta, "meta_windows", expected_hash)
    mws = [
        MetaWindow(a["inputs"][i], a["labels"][i], a["origins"][i], sid, int(a["t_index"][i]))
        for i, sid in enumerate(meta["series_ids"])
    ]
    return mws, meta


def import_meta_window_arrays(inputs: np.ndarray, labels: np.ndarray, series_id: str = "external") -> list[MetaWindow]:
    """Wrap externally produced arrays ``(N, l, delta, C)`` and ``(N, l)``.

    Rows are taken as consecutive meta-windows of a single series with
    stride-1 windows; use one call per source series.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if inputs.ndim != 4 or labels.shape != inputs.shape[:2]:
        raise DataError(f"expected (N, l, delta, C) inputs and (N, l) labels, got {inputs.shape} and {labels.shape}")
    N, l = labels.shape
    origins = np.arange(N * l, dtype=np.int64).reshape(N, l)
    return [MetaWindow(inputs[i], labels[i], origins[i], series_id, i) for i in range(N)]


def _check_kind(path, meta: Mapping, kind: str, expected_hash: Optional[str]) -> None:
    if meta.get("kind") != kind:
        raise DataError(f"{path} holds {meta.get('kind')!r}, expected {kind!r}")
    if expected_hash is not None and meta.get("config_hash") != expected_hash:
        raise DataError(
            f"{path} was produced by config {meta.get('config_hash')}, current config is {expected_hash}"
        )


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: Mapping[str, np.ndarray], meta: Mapping) -> None:
    write_container(path, {"kind": "checkpoint", **meta}, params)


def load_checkpoint(path, expected_hash: Optional[str] = None) -> tuple[dict[str, np.ndarray], dict]:
    meta, arrays = read_container(path)
    _check_kind(path, meta, "checkpoint", expected_hash)
    return arrays, meta


def save_train_state(path, state: TrainState, meta: Mapping) -> None:
    arrays = {f"params/{k}": v for k, v in state.params.items()}
    arrays.update({f"best/{k}": v for k, v in state.best_params.items()})
    opt = dict(state.optimizer)
    for slot in ("m", "v"):
        arrays.update({f"opt.{slot}/{k}": v for k, v in opt.pop(slot, {}).items()})
    header = {
        "kind": "train_state",
        **meta,
        "epoch": state.epoch,
        "best_val": state.best_val,
        "best_epoch": state.best_epoch,
        "since_best": state.since_best,
        "done": state.done,
        "optimizer": opt,
        "rngs": state.rngs,
        "log": state.log,
    }
    write_container(path, header, arrays)


def load_train_state(path, expected_hash: Optional[str] = None) -> tuple[TrainState, dict]:
    meta, arrays = read_container(path)
    _check_kind(path, meta, "train_state", expected_hash)

    def group(prefix):
        return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}

    opt = dict(meta["optimizer"])
    if opt.get("kind") == "adam":
        opt["m"], opt["v"] = group("opt.m/"), group("opt.v/")
    state = TrainState(
        epoch=meta["epoch"],
        params=group("params/"),
        best_params=group("best/"),
        best_val=meta["best_val"],
        best_epoch=meta["best_epoch"],
        since_best=meta["since_best"],
        optimizer=opt,
        rngs=meta["rngs"],
        log=meta["log"],
        done=meta["done"],
    )
    return state, meta


# --------------------------------------------------------------------------
# CSV ingestion


def read_series_csv(
    path, target_column: str, series_id: Optional[str] = None, drop_columns: Sequence[str] = ()
) -> tuple[LongSeries, list[str]]:
    """One long series per file. Every column except the target and those
    matching a ``drop_columns`` glob becomes an input channel; non-numeric
    columns are replaced by integer category codes, with -1 for missing."""
    path = Path(path)
    try:
        df = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"malformed CSV {path.name}: {exc}") from None
    if target_column not in df.columns:
        raise DataError(f"{path.name}: missing target column {target_column!r}")
    if len(df) == 0:
        raise DataError(f"{path.name}: no rows")
    target = pd.to_numeric(df[target_column], errors="coerce").to_numpy(dtype=np.float64)
    names, cols = [], []
    for name in df.columns:
        if name == target_column or any(fnmatch.fnmatchcase(str(name), p) for p in drop_columns):
            continue
        col = df[name]
        if not pd.api.types.is_numeric_dtype(col):
            # missing categories keep pandas' sentinel code -1
            col = pd.Series(pd.Categorical(col).codes.astype(np.float64))
        names.append(str(name))
        cols.append(col.to_numpy(dtype=np.float64))
    if not cols:
        raise DataError(f"{path.name}: no input columns besides the target")
    return LongSeries(np.column_stack(cols), target, series_id or path.stem), names


def load_series_dir(directory, target_column: str, drop_columns: Sequence[str] = ()) -> tuple[list[LongSeries], list[str]]:
    """Every ``*.csv`` in ``directory`` (sorted by name), excluding ``manifest.csv``."""
    files = sorted(p for p in Path(directory).glob("*.csv") if p.name != "manifest.csv")
    if not files:
        raise DataError(f"no CSV files in {directory}")
    out, names = [], None
    for p in files:
        s, cols = read_series_csv(p, target_column, drop_columns=drop_columns)
        if names is not None and cols != names:
            raise DataError(f"{p.name}: columns differ from {files[0].name}")
        names = cols
        out.append(s)
    return out, names


def read_manifest(path) -> dict[str, str]:
    """Two-column CSV ``series_id,split``."""
    try:
        df = pd.read_csv(path, dtype=str)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read split manifest {path}: {exc}") from None
    if list(df.columns) != ["series_id", "split"]:
        raise DataError("split manifest must have columns series_id,split")
    return dict(zip(df["series_id"], df["split"]))


def write_series_csv(path, series: LongSeries, channel_names: Sequence[str], target_column: str = "target") -> None:
    df = pd.DataFrame(series.channels, columns=list(channel_names))
    df[target_column] = series.target
    _write_text(path, df.to_csv(index=False, float_format="%.10g", lineterminator="\n"))


# --------------------------------------------------------------------------
# CSV reports

RESULT_COLUMNS = ("model", "dataset", "gradient_steps", "horizon", "mae", "ci95")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write(text)


def write_rows(path, columns: Sequence[str], rows: Iterable[Mapping]) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    _write_text(path, buf.getvalue())


def read_rows(path, columns: Optional[Sequence[str]] = None) -> list[dict]:
    try:
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            rows = list(reader)
            header = reader.fieldnames or []
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    if columns is not None and list(header) != list(columns):
        raise DataError(f"{path}: expected columns {','.join(columns)}, found {','.join(header)}")
    return rows


def result_rows(result, dataset: str, horizons: Sequence[int] = (1, 10)) -> list[dict]:
    """Table-style rows: MAE averaged over query meta-windows ``1..h`` for each ``h``."""
    rows = []
    for h in horizons:
        if h > result.horizon:
            continue
        mae, ci = result.horizon_average(h)
        rows.append(
            {"model": result.model, "dataset": dataset, "gradient_steps": result.gradient_steps, "horizon": h, "mae": mae, "ci95": ci}
        )
    return rows


def curve_rows(result, dataset: str) -> list[dict]:
    """One row per individual horizon (MAE on query meta-window ``t + h`` only)."""
    return [
        {
            "model": result.model,
            "dataset": dataset,
            "gradient_steps": result.gradient_steps,
            "horizon": h + 1,
            "mae": float(result.per_horizon_mae[h]),
            "ci95": float(result.per_horizon_ci[h]),
        }
        for h in range(result.horizon)
    ]


def write_train_log(path, log: Sequence[Mapping]) -> None:
    # fixed leading columns, then extras sorted so resumed logs match uninterrupted ones
    lead = ["epoch", "train_loss", "val_loss"]
    extra = sorted({k for row in log for k in row} - set(lead) - {"wall_time"})
    columns = lead + extra + ["wall_time"]
    write_rows(path, columns, ({c: row.get(c, float("nan")) for c in columns} for row in log))


def write_embeddings(path, meta_windows: Sequence[MetaWindow], z: np.ndarray) -> None:
    columns = ["series_id", "t_index"] + [f"z{i}" for i in range(z.shape[1])]
    rows = (
        {"series_id": m.series_id, "t_index": m.t_index, **{f"z{i}": float(v) for i, v in enumerate(zi)}}
        for m, zi in zip(meta_windows, z)
    )
    write_rows(path, columns, rows)


def write_json(path, obj) -> None:
    _write_text(path, json.dumps(_json_safe(obj), sort_keys=True, indent=2) + "\n")


def read_json(path):
    try:
        return _json_restore(json.loads(Path(path).read_text(encoding="utf-8")))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def check_empty_or_new(path) -> None:
    if Path(path).exists() and not Path(path).is_dir():
        raise ConfigError(f"output path {path} exists and is not a directory")
