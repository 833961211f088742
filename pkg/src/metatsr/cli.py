"""``metatsr`` command line: preprocess, train, evaluate, report, gradcheck, synth.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .baselines import pretrain
from .config import NetConfig
from .errors import ConfigError, DataError, MetaTSRError, NumericalError
from .evaluation import (
    FinetuneAdapter,
    MamlAdapter,
    MmamlAdapter,
    TargetMeanAdapter,
    ablation_sweep,
    meta_test,
    select_finetune,
)
from .maml import meta_train
from .mmaml import ModulationNetwork, embed, joint_params, mmaml_meta_train, split_params
from .net import TaskNetwork
from .pipeline import SPLIT_NAMES, prepare
from .rng import derive_rng
from .runconfig import OUTPUT_ENV, PRESETS, RunConfig, build_config, dump_config, resolve_manifest
from .series import autocorrelation, virtual_tasks
from .synthetic import synth_task_family
from .training import TrainState
from .verify import all_gradient_checks, kernel_oracle_suite

log = logging.getLogger("metatsr")

ACF_LAGS = 100


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# paths


def data_dir(cfg: RunConfig) -> Path:
    return Path(cfg.output_dir) / "data"


def run_dir(cfg: RunConfig, model: Optional[str] = None, run: int = 0) -> Path:
    model = model or cfg.model
    return Path(cfg.output_dir) / "checkpoints" / f"{model}-{cfg.train_hash(model)}" / f"run{run}"


def echo_config(cfg: RunConfig, name: str) -> None:
    path = Path(cfg.output_dir) / f"{name}.config.yaml"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg), encoding="utf-8")


# --------------------------------------------------------------------------
# preprocess


def cmd_preprocess(cfg: RunConfig) -> int:
    if not cfg.dataset.path:
        raise ConfigError("dataset.path is required for preprocess")
    raw, names = io.load_series_dir(cfg.dataset.path, cfg.dataset.target_column, cfg.dataset.drop_columns)
    manifest = cfg.dataset.manifest
    if isinstance(manifest, str):
        manifest = io.read_manifest(manifest)
    manifest = resolve_manifest(manifest, [s.id for s in raw])
    spec = cfg.window.spec()
    data = prepare(
        raw,
        spec,
        cfg.meta_window_size,
        manifest=manifest,
        channel_policies=cfg.dataset.channel_policies,
        target_policy=cfg.dataset.target_policy,
        channel_names=names,
    )
    h = cfg.data_hash()
    C = data.n_channels

    # everything is computed before anything is written; outputs land in a
    # scratch directory that replaces the target in one move
    final = data_dir(cfg)
    final.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=".data-", dir=final.parent))
    try:
        acf_rows, count_rows = [], []
        for split in SPLIT_NAMES:
            X, y = data.windows[split]
            io.save_windows(scratch / f"{split}_windows.bin", X, y, spec, h)
            io.save_meta_windows(scratch / f"{split}_meta_windows.bin", data.meta_windows[split], spec, cfg.meta_window_size, h, C)
            for s in data.series[split]:
                n_windows = spec.count(s.length)
                count_rows.append(
                    {
                        "series_id": s.id,
                        "split": split,
                        "length": s.length,
                        "windows": n_windows,
                        "meta_windows": n_windows // cfg.meta_window_size,
                        "discarded": n_windows % cfg.meta_window_size,
                    }
                )
                lags = min(ACF_LAGS, s.length - 1)
                try:
                    acf = autocorrelation(s.target, lags)
                except DataError:
                    acf = np.full(lags + 1, np.nan)
                acf_rows.extend({"series_id": s.id, "lag": k, "acf": float(v)} for k, v in enumerate(acf))
        io.write_rows(scratch / "acf.csv", ("series_id", "lag", "acf"), acf_rows)
        io.write_rows(scratch / "counts.csv", ("series_id", "split", "length", "windows", "meta_windows", "discarded"), count_rows)
        io.write_json(scratch / "preprocess.json", {"config_hash": h, "params": data.params.to_dict()})
        if final.exists():
            shutil.rmtree(final)
        os.replace(scratch, final)
    finally:
        if scratch.exists():
            shutil.rmtree(scratch)
    echo_config(cfg, "preprocess")
    for r in count_rows:
        print(f"{r['split']:<10} {r['series_id']}: {r['windows']} windows, {r['meta_windows']} meta-windows")
    return 0


# --------------------------------------------------------------------------
# train


def load_split(cfg: RunConfig, split: str):
    mws, meta = io.load_meta_windows(data_dir(cfg) / f"{split}_meta_windows.bin", cfg.data_hash())
    return mws, meta


def _ckpt_meta(cfg: RunConfig, model: str, run: int, extra: dict) -> dict:
    return {"config_hash": cfg.train_hash(model), "data_hash": cfg.data_hash(), "model": model, "run": run, "seed": cfg.seed + run, **extra}


def _train_one(cfg: RunConfig, run: int, stop_at: Optional[int], data) -> None:
    model, seed = cfg.model, cfg.seed + run
    out = run_dir(cfg, model, run)
    out.mkdir(parents=True, exist_ok=True)
    state_path = out / "state.bin"
    state: Optional[TrainState] = None
    if cfg.resume and state_path.exists():
        state, _ = io.load_train_state(state_path, cfg.train_hash(model))
        if state.done:
            print(f"run {run}: already finished, nothing to resume")
            return

    if model == "target-mean":
        io.save_checkpoint(out / "best.bin", {}, _ckpt_meta(cfg, model, run, {}))
        io.save_checkpoint(out / "final.bin", {}, _ckpt_meta(cfg, model, run, {}))
        return

    train_mws, val_mws, C = data
    net_cfg = cfg.net.build(C, cfg.window.window_size)
    net0 = TaskNetwork.init(net_cfg, derive_rng(seed, "init.task"))
    extra = {"net": net_cfg.model_dump(mode="json")}

    def checkpoint(st: TrainState, kind: str) -> None:
        if kind == "best":
            io.save_checkpoint(out / "best.bin", st.best_params, _ckpt_meta(cfg, model, run, extra))
        io.save_train_state(state_path, st, _ckpt_meta(cfg, model, run, extra))

    if model == "maml":
        mcfg = cfg.maml
        net, tlog = meta_train(
            virtual_tasks(train_mws, cfg.task_step), net0, mcfg, virtual_tasks(val_mws),
            seed=seed, state=state, on_checkpoint=checkpoint, stop_at=stop_at,
        )
        best, final = net.params, tlog.state.params
    elif model == "mmaml":
        mcfg = cfg.maml
        mod0 = ModulationNetwork.init(C + 1, net_cfg.feature_dim, mcfg.mod_hidden, mcfg.latent_dim, derive_rng(seed, "init.mod"))
        extra["mod"] = mod0.dims()
        net, mod, tlog = mmaml_meta_train(
            virtual_tasks(train_mws, cfg.task_step), net0, mod0, mcfg, virtual_tasks(val_mws),
            seed=seed, state=state, on_checkpoint=checkpoint, stop_at=stop_at,
        )
        best, final = joint_params(net, mod), tlog.state.params
    else:  # lstm-finetune
        Xtr, ytr = io.load_windows(data_dir(cfg) / "train_windows.bin", cfg.data_hash())
        Xva, yva = io.load_windows(data_dir(cfg) / "validation_windows.bin", cfg.data_hash())
        net, tlog = pretrain(
            net0, (Xtr, ytr), cfg.pretrain, (Xva, yva), seed=seed, state=state, on_checkpoint=checkpoint, stop_at=stop_at
        )
        best, final = net.params, tlog.state.params

    io.save_train_state(state_path, tlog.state, _ckpt_meta(cfg, model, run, extra))
    io.write_train_log(out / "log.csv", tlog.rows)
    if not tlog.state.done:
        print(f"run {run}: stopped at epoch {tlog.state.epoch}; resume with --resume")
        return
    io.save_checkpoint(out / "best.bin", best, _ckpt_meta(cfg, model, run, extra))
    io.save_checkpoint(out / "final.bin", final, _ckpt_meta(cfg, model, run, extra))
    print(f"run {run}: best validation {tlog.best_val:.6g} at epoch {tlog.best_epoch} ({tlog.epochs_run} epochs)")


def cmd_train(cfg: RunConfig, stop_at: Optional[int] = None) -> int:
    data = None
    if cfg.model != "target-mean":
        train_mws, meta = load_split(cfg, "train")
        val_mws, _ = load_split(cfg, "validation")
        if not train_mws or not val_mws:
            raise DataError("training and validation splits need at least one meta-window each")
        data = (train_mws, val_mws, int(meta["C"]))
    echo_config(cfg, "train")
    for run in range(cfg.meta_test.runs):
        _train_one(cfg, run, stop_at, data)
    return 0


# --------------------------------------------------------------------------
# evaluate


def load_adapter(cfg: RunConfig, model: str, run: int):
    params, meta = io.load_checkpoint(run_dir(cfg, model, run) / "best.bin", cfg.train_hash(model))
    if meta.get("data_hash") != cfg.data_hash():
        raise DataError("checkpoint was trained on different data")
    if model == "target-mean":
        return TargetMeanAdapter()
    net_cfg = NetConfig(**meta["net"])
    if model == "maml":
        return MamlAdapter(TaskNetwork(net_cfg, params), cfg.maml.inner_lr)
    if model == "mmaml":
        net_p, mod_p = split_params(params)
        mod = ModulationNetwork(**meta["mod"], params=mod_p)
        return MmamlAdapter(TaskNetwork(net_cfg, net_p), mod, cfg.maml.inner_lr)
    # grid-selected on validation for the gradient-step count being evaluated
    val_mws, _ = load_split(cfg, "validation")
    adapter, _ = select_finetune(TaskNetwork(net_cfg, params), val_mws, cfg.meta_test, cfg.finetune)
    return adapter


def _missing_checkpoint(cfg: RunConfig, model: str) -> DataError:
    return DataError(f"no trained {model} checkpoint for this configuration under {run_dir(cfg, model).parent}; run `metatsr train` first")


def load_adapters(cfg: RunConfig, model: str) -> list:
    try:
        return [load_adapter(cfg, model, r) for r in range(cfg.meta_test.runs)]
    except DataError as exc:
        if not run_dir(cfg, model).parent.exists():
            raise _missing_checkpoint(cfg, model) from None
        raise exc


def parse_sweep(text: str) -> tuple[str, list]:
    axis, sep, values = text.partition("=")
    if not sep:
        raise ConfigError("--sweep expects axis=v1,v2,...")
    cast = float if axis == "vrae_weight" else int
    try:
        return axis, [cast(v) for v in values.split(",") if v]
    except ValueError:
        raise ConfigError(f"bad sweep values {values!r}") from None


def cmd_evaluate(cfg: RunConfig, sweep: Optional[str] = None, dump_errors: bool = False) -> int:
    test_mws, _ = load_split(cfg, "test")
    model, name = cfg.model, cfg.dataset.name
    out = Path(cfg.output_dir)
    echo_config(cfg, "evaluate")
    if sweep:
        axis, values = parse_sweep(sweep)
        if axis == "vrae_weight":
            if model != "mmaml":
                raise ConfigError("the vrae_weight axis needs model=mmaml")

            def adapters_for(v):
                sub = cfg.model_copy(update={"maml": cfg.maml.model_copy(update={"vrae_weight": v})})
                return load_adapters(sub, model)
        else:
            base = load_adapters(cfg, model)

            def adapters_for(_):
                return base
        rows = ablation_sweep(axis, values, cfg.meta_test, adapters_for, test_mws, threads=cfg.threads)
        for r in rows:
            r["model"], r["dataset"] = model, name
        path = out / "ablation" / f"{model}_{axis}.csv"
        io.write_rows(path, ("model", "dataset", "axis", "value", "horizon", "mae", "ci95"), rows)
        print(f"wrote {path}")
        return 0

    result = meta_test(load_adapters(cfg, model), test_mws, cfg.meta_test, threads=cfg.threads)
    g = cfg.meta_test.gradient_steps
    horizons = sorted({1, cfg.meta_test.horizon})
    io.write_rows(out / "results" / f"{model}_g{g}.csv", io.RESULT_COLUMNS, io.result_rows(result, name, horizons))
    io.write_rows(out / "curves" / f"{model}_g{g}.csv", io.RESULT_COLUMNS, io.curve_rows(result, name))
    if dump_errors:
        rows = [
            {"run": r, "series_id": sid, "t": t, "horizon": h + 1, "window": j, "abs_error": float(e[p, h, j])}
            for r, e in enumerate(result.errors)
            for p, (sid, t) in enumerate(result.points)
            for h in range(e.shape[1])
            for j in range(e.shape[2])
        ]
        io.write_rows(out / "errors" / f"{model}_g{g}.csv", ("run", "series_id", "t", "horizon", "window", "abs_error"), rows)
    if model == "mmaml":
        mod = load_adapter(cfg, model, 0).mod
        for split in SPLIT_NAMES:
            mws, _ = load_split(cfg, split)
            if mws:
                io.write_embeddings(out / "embeddings" / f"{split}.csv", mws, embed(mod, mws))
    for h in horizons:
        mae, ci = result.horizon_average(h)
        print(f"{model} {name} steps={g} horizon 1..{h}: MAE {mae:.6f} +/- {ci:.6f} ({result.run_count} runs)")
    return 0


# --------------------------------------------------------------------------
# report


def flag_rows(rows: list[dict]) -> list[dict]:
    """Best / second-best flags per (dataset, gradient_steps, horizon).

    Ties share a flag; a column with a single model gets no flags."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["dataset"], int(r["gradient_steps"]), int(r["horizon"])), []).append(r)
    out = []
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda r: r["model"])
        distinct = sorted({float(r["mae"]) for r in members})
        for r in members:
            flag = ""
            if len(members) > 1:
                if float(r["mae"]) == distinct[0]:
                    flag = "best"
                elif len(distinct) > 1 and float(r["mae"]) == distinct[1]:
                    flag = "second"
            out.append({**r, "flag": flag})
    return out


def cmd_report(files: Sequence[str], output_dir: str) -> int:
    if not files:
        raise DataError("report needs at least one result file")
    rows = []
    for f in files:
        rows.extend(io.read_rows(f, io.RESULT_COLUMNS))
    keys = [(r["model"], r["dataset"], r["gradient_steps"], r["horizon"]) for r in rows]
    if len(set(keys)) != len(keys):
        raise DataError("duplicate (model, dataset, gradient_steps, horizon) rows across result files")
    for r in rows:
        r["mae"], r["ci95"] = float(r["mae"]), float(r["ci95"])
    flagged = flag_rows(rows)
    out = Path(output_dir)
    io.write_rows(out / "summary.csv", io.RESULT_COLUMNS + ("flag",), flagged)
    width = max(len(r["model"]) for r in flagged)
    for r in flagged:
        mark = {"best": " **", "second": " *"}.get(r["flag"], "")
        print(
            f"{r['dataset']:<12} steps={r['gradient_steps']:<3} h={r['horizon']:<3} "
            f"{r['model']:<{width}}  {r['mae']:.6f} +/- {r['ci95']:.6f}{mark}"
        )
    return 0


# --------------------------------------------------------------------------
# gradcheck / synth


def cmd_gradcheck(seed: int, instances: int) -> int:
    ok = True
    oracle = kernel_oracle_suite(instances, seed)
    print(f"kernel oracle: {oracle.instances} instances, max |error| {oracle.max_abs_error:.3e} -> {'ok' if oracle.passed else 'FAIL'}")
    ok &= oracle.passed
    for name, rep in all_gradient_checks(seed).items():
        print(f"{name}: max relative error {rep.max_error:.3e} ({rep.worst}) -> {'ok' if rep.passed else 'FAIL'}")
        ok &= rep.passed
    if not ok:
        raise NumericalError("gradient or oracle check failed")
    return 0


def cmd_synth(output_dir: str, regimes: int, series: int, length: int, seed: int, drift: bool) -> int:
    family = synth_task_family(regimes, series, length, seed, drift=drift)
    out = Path(output_dir)
    names = [f"x{i}" for i in range(family.config.n_channels)]
    for s in family.series:
        io.write_series_csv(out / f"{s.id}.csv", s, names)
    io.write_json(out / "generator.json", family.to_dict())
    print(f"wrote {len(family.series)} series to {out}")
    return 0


# --------------------------------------------------------------------------
# argument parsing


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--preset", choices=PRESETS, help="dataset preset applied before the config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config entry, e.g. maml.inner_lr=0.05")
    p.add_argument("--output-dir", help=f"output directory (also ${OUTPUT_ENV})")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker cap for evaluation")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metatsr", description="Meta-learning for time series regression.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="window raw CSVs into train/validation/test artifacts")
    _config_args(p)
    p.add_argument("--data", help="directory of per-series CSVs (dataset.path)")

    p = sub.add_parser("train", help="train the selected model once per evaluation run")
    _config_args(p)
    p.add_argument("--model", choices=("maml", "mmaml", "lstm-finetune", "target-mean"))
    p.add_argument("--resume", action="store_true", help="continue from the last saved training state")
    p.add_argument("--stop-at", type=int, help=argparse.SUPPRESS)

    p = sub.add_parser("evaluate", help="run the sliding meta-testing protocol")
    _config_args(p)
    p.add_argument("--model", choices=("maml", "mmaml", "lstm-finetune", "target-mean"))
    p.add_argument("--gradient-steps", type=int)
    p.add_argument("--sweep", help="ablation: gradient_steps=1,2,5 | horizon=1,5,10 | vrae_weight=0,0.1")
    p.add_argument("--dump-errors", action="store_true", help="also write every per-window absolute error")

    p = sub.add_parser("report", help="merge result CSVs and flag best/second-best")
    p.add_argument("files", nargs="+")
    p.add_argument("--output-dir", default=None)

    p = sub.add_parser("gradcheck", help="finite-difference and kernel-oracle self-checks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=100)

    p = sub.add_parser("synth", help="write a synthetic task family as CSVs")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--regimes", type=int, default=2)
    p.add_argument("--series", type=int, default=6)
    p.add_argument("--length", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-drift", action="store_true")
    return parser


def _run_config(args, environ) -> RunConfig:
    flags: dict = {"output_dir": args.output_dir, "seed": args.seed, "threads": args.threads}
    if getattr(args, "model", None):
        flags["model"] = args.model
    if getattr(args, "resume", False):
        flags["resume"] = True
    if getattr(args, "data", None):
        flags["dataset"] = {"path": args.data}
    if getattr(args, "gradient_steps", None) is not None:
        flags["meta_test"] = {"gradient_steps": args.gradient_steps}
    return build_config(args.config, args.preset, tuple(args.overrides), flags, environ)


def main(argv: Optional[Sequence[str]] = None, environ: Optional[dict] = None) -> int:
    environ = os.environ if environ is None else environ
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            out = args.output_dir or environ.get(OUTPUT_ENV) or "report"
            return cmd_report(args.files, out)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed, args.instances)
        if args.command == "synth":
            return cmd_synth(args.output_dir, args.regimes, args.series, args.length, args.seed, not args.no_drift)
        cfg = _run_config(args, environ)
        if args.command == "preprocess":
            return cmd_preprocess(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.stop_at)
        return cmd_evaluate(cfg, args.sweep, args.dump_errors)
    except MetaTSRError as exc:
        print(f"metatsr: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:  # pydantic or argument validation outside our error types
        print(f"metatsr: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
