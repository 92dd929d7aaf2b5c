"""Command-line entry point: ``ibrtwin {simulate,fit,validate,monitor}``.

Every command reads a JSON config, writes under ``--out`` and finishes with a
``manifest.json``. Exit codes: 0 success, 1 usage or validation error,
2 completed with warnings (ELS did not converge).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .armax import ArmaxOrders, FeedbackMode, load_model, predict_horizon, save_model
from .errors import IbrTwinError, MissingColumn, NoConvergenceWarning
from .estimation import FitConfig, fit_batch_els, fit_recursive, select_training_event
from .metrics import summarize_errors, summarize_suite
from .monitor import EventKind, Monitor, MonitorConfig, write_event_log
from .sim import ScenarioConfig, config_hash, generate_event_suite, simulate
from .timeseries import ChannelRoles, TimeSeriesDataset, export_csv, ingest_csv

log = logging.getLogger("ibrtwin")

EXIT_OK, EXIT_INVALID, EXIT_WARN = 0, 1, 2


class ConfigError(ValueError):
    pass


class StreamAborted(IbrTwinError):
    pass


# -- plumbing -------------------------------------------------------------------------


def _load_config(path: Path) -> dict:
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return cfg


def _field(cfg: dict, key: str, path: Path, default=...):
    if key in cfg:
        return cfg[key]
    if default is ...:
        raise ConfigError(f"{path}: missing required field '{key}'")
    return default


def _section(cfg: dict, key: str, path: Path, parse, default=None):
    raw = cfg.get(key)
    if raw is None:
        return default
    try:
        return parse(raw)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: field '{key}': {exc}") from None


def _resolve(base: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else (base.parent / p)


def _existing(base: Path, value, key: str) -> Path:
    p = _resolve(base, value)
    if not p.exists():
        raise ConfigError(f"{base}: field '{key}' points to missing file {p}")
    return p


def _prepare_out(out: Path, force: bool) -> Path:
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _provenance(seed: int, chash: str) -> dict:
    return {"seed": seed, "config_hash": chash, "version": __version__}


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _manifest(out: Path, command: str, seed: int, chash: str, files: list[dict], **extra) -> Path:
    doc = {
        "command": command,
        "provenance": _provenance(seed, chash),
        "files": files,
        **extra,
        "metadata": {"created": datetime.now(timezone.utc).isoformat()},
    }
    return _write_json(out / "manifest.json", doc)


def _comments(seed: int, chash: str, **kw) -> list[str]:
    lines = [f"seed={seed}", f"config_hash={chash}"]
    lines += [f"{k}={v}" for k, v in kw.items()]
    return lines


def _roles(cfg: dict, path: Path, default: ChannelRoles | None = None) -> ChannelRoles:
    roles = _section(cfg, "roles", path, ChannelRoles.from_dict, default)
    if roles is None:
        raise ConfigError(f"{path}: missing required field 'roles'")
    return roles


def _paths(cfg: dict, key: str, path: Path) -> list[Path]:
    value = _field(cfg, key, path)
    items = [value] if isinstance(value, str) else list(value)
    if not items:
        raise ConfigError(f"{path}: field '{key}' lists no files")
    return [_existing(path, v, key) for v in items]


def _map(fn, items, jobs: int):
    if jobs <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# -- simulate -----------------------------------------------------------------------


def _simulate_one(scenario: ScenarioConfig) -> TimeSeriesDataset:
    return simulate(scenario)


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    base = _section(cfg, "scenario", args.config, ScenarioConfig.from_dict)
    if base is None:
        raise ConfigError(f"{args.config}: missing required field 'scenario'")
    count = int(_field(cfg, "count", args.config, 1))
    seed = args.seed if args.seed is not None else int(_field(cfg, "seed", args.config, base.rng_seed))
    chash = config_hash(cfg)
    out = _prepare_out(args.out, args.force)

    if count == 1:
        suite = [replace(base, rng_seed=seed, name=base.name or base.kind.value.lower())]
    else:
        suite = generate_event_suite(base, count, seed)
    datasets = _map(_simulate_one, suite, args.jobs)

    files = []
    for sc, data in zip(suite, datasets):
        target = out / f"{sc.name}.csv"
        export_csv(data, target, comments=_comments(seed, chash, scenario=sc.name, scenario_seed=sc.rng_seed))
        files.append({"path": target.name, "scenario": sc.name, "seed": sc.rng_seed, "kind": sc.kind.value,
                      "scenario_hash": sc.config_hash()})
    _manifest(out, "simulate", seed, chash, files, plant_kind=base.kind.value)
    print(f"wrote {len(files)} scenario file(s) to {out}")
    return EXIT_OK


# -- fit ----------------------------------------------------------------------------


def cmd_fit(args) -> int:
    cfg = _load_config(args.config)
    train = _paths(cfg, "train", args.config)
    roles = _roles(cfg, args.config)
    orders = _section(cfg, "orders", args.config, lambda d: ArmaxOrders(**d))
    if orders is None:
        raise ConfigError(f"{args.config}: missing required field 'orders'")
    fit_cfg = _section(cfg, "fit", args.config, FitConfig.from_dict, FitConfig())
    method = _field(cfg, "method", args.config, "batch_els")
    if method not in ("batch_els", "recursive"):
        raise ConfigError(f"{args.config}: field 'method' must be 'batch_els' or 'recursive', got {method!r}")
    seed = args.seed if args.seed is not None else int(_field(cfg, "seed", args.config, 0))
    chash = config_hash(cfg)
    out = _prepare_out(args.out, args.force)

    datasets = [ingest_csv(p, roles) for p in train]
    k = select_training_event(datasets) if len(datasets) > 1 else 0
    data = datasets[k]
    converged = True
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NoConvergenceWarning)
        if method == "batch_els":
            model, report = fit_batch_els(data, orders, fit_cfg)
            report_doc = report.to_dict()
            converged = report.converged
        else:
            model, state = fit_recursive(data, orders, fit_cfg)
            report_doc = {"updates": state.count, "converged": True}
    for w in caught:
        log.warning("%s", w.message)

    model.metadata["provenance"] = _provenance(seed, chash)
    model.metadata["training_file"] = train[k].name
    save_model(model, out / "model.json")
    report_doc = {"provenance": _provenance(seed, chash), "training_file": train[k].name, **report_doc}
    _write_json(out / "fit_report.json", report_doc)
    _manifest(
        out, "fit", seed, chash,
        [{"path": "model.json"}, {"path": "fit_report.json"}],
        training_file=os.path.relpath(train[k], args.config.parent), converged=converged,
    )
    print(f"fitted {model.n_inputs}-in/{model.n_outputs}-out ARMAX{orders.na, orders.nb, orders.nc} "
          f"on {train[k].name}; converged={converged}")
    return EXIT_OK if converged else EXIT_WARN


# -- validate -----------------------------------------------------------------------


def _validate_one(job):
    model_path, data_path, roles, mode = job
    model = load_model(model_path)
    data = ingest_csv(data_path, roles, allow_missing_outputs=True)
    pred = predict_horizon(model, data, mode)
    return data, pred


def cmd_validate(args) -> int:
    cfg = _load_config(args.config)
    model_path = _existing(args.config, _field(cfg, "model", args.config), "model")
    data_paths = _paths(cfg, "data", args.config)
    model = load_model(model_path)
    roles = _roles(cfg, args.config, ChannelRoles(model.input_names, model.output_names))
    mode_text = args.mode or _field(cfg, "mode", args.config, "measured")
    try:
        mode = FeedbackMode.parse(mode_text)
    except ValueError as exc:
        raise ConfigError(f"--mode: {exc}") from None
    seed = args.seed if args.seed is not None else int(_field(cfg, "seed", args.config, 0))
    chash = config_hash({**cfg, "mode": str(mode)})
    out = _prepare_out(args.out, args.force)
    (out / "predictions").mkdir(exist_ok=True)

    jobs = [(model_path, p, roles, mode) for p in data_paths]
    results = _map(_validate_one, jobs, args.jobs)
    summaries, files = [], []
    for path, (data, pred) in zip(data_paths, results):
        L = pred.start
        summaries.append(summarize_errors(path.stem, data.output_names, data.outputs[L:], pred.yhat[L:]))
        target = out / "predictions" / f"{path.stem}.csv"
        _write_predictions(target, data, pred.yhat, _comments(seed, chash, model=model_path.name, mode=mode))
        files.append({"path": f"predictions/{target.name}", "scenario": path.stem})

    meta = {"provenance": _provenance(seed, chash), "mode": str(mode), "model": model_path.name}
    report = summarize_suite(summaries, meta)
    report.write_json(out / "report.json")
    report.write_boxplot_csv(out / "boxplot.csv")
    files += [{"path": "report.json"}, {"path": "boxplot.csv"}]
    _manifest(out, "validate", seed, chash, files, mode=str(mode))
    for ch, stats in report.nrmse_pct.items():
        print(f"{ch}: median NRMSE {stats.median:.3f}% (min {stats.min:.3f}, max {stats.max:.3f}) over {len(summaries)} scenario(s)")
    return EXIT_OK


def _write_predictions(path: Path, data: TimeSeriesDataset, yhat: np.ndarray, comments: list[str]) -> None:
    with path.open("w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh)
        w.writerow(["t"] + [n for ch in data.output_names for n in (ch, f"{ch}_hat")])
        for k, t in enumerate(data.time):
            row = [repr(float(t))]
            for m in range(data.n_outputs):
                y = data.outputs[k, m]
                row += ["" if not math.isfinite(y) else repr(float(y)), repr(float(yhat[k, m]))]
            w.writerow(row)


# -- monitor ------------------------------------------------------------------------


def _stream_rows(path: Path, roles: ChannelRoles):
    """Yield ``(line, t, u, y_or_None, error)`` for every data row of a stream CSV."""
    with path.open(newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader, None)
        if header is None:
            raise MissingColumn(f"{path}: stream has no header")
        header = [h.strip() for h in header]
        cols = {}
        for name in (roles.time, *roles.inputs, *roles.outputs):
            if name not in header:
                raise MissingColumn(f"{path}: column '{name}' is missing (have {header})")
            cols[name] = header.index(name)
        for line, row in enumerate(reader, start=2):
            try:
                t = float(row[cols[roles.time]])
                u = np.array([float(row[cols[c]]) for c in roles.inputs])
                cells = [row[cols[c]].strip() for c in roles.outputs]
                y = None if any(c == "" for c in cells) else np.array([float(c) for c in cells])
                if not (math.isfinite(t) and np.isfinite(u).all()):
                    raise ValueError("non-finite time or input")
            except (ValueError, IndexError) as exc:
                yield line, None, None, None, str(exc)
                continue
            yield line, t, u, y, None


def cmd_monitor(args) -> int:
    cfg = _load_config(args.config)
    model_path = _existing(args.config, _field(cfg, "model", args.config), "model")
    stream_path = _existing(args.config, _field(cfg, "stream", args.config), "stream")
    model = load_model(model_path)
    roles = _roles(cfg, args.config, ChannelRoles(model.input_names, model.output_names))
    mcfg = _section(cfg, "monitor", args.config, MonitorConfig.from_dict, MonitorConfig())
    budget = int(_field(cfg, "error_budget", args.config, 10))
    seed = args.seed if args.seed is not None else int(_field(cfg, "seed", args.config, 0))
    chash = config_hash(cfg)
    out = _prepare_out(args.out, args.force)

    mon = Monitor(model, mcfg)
    errors = 0
    index = -1
    last_t = -math.inf
    for line, t, u, y, err in _stream_rows(stream_path, roles):
        if err is None and t <= last_t:
            err = f"time {t} does not advance past {last_t}"
        if err is not None:
            errors += 1
            mon._log(max(mon.last_index, 0), EventKind.STREAM_ERROR, line=line, error=err)
            if errors > budget:
                write_event_log(mon.events, out / "events.jsonl", seed=seed, config_hash=chash)
                raise StreamAborted(f"{stream_path}: {errors} malformed rows exceed the error budget of {budget}")
            continue
        index += 1
        last_t = t
        mon.step(u, y, index=index)

    write_event_log(mon.events, out / "events.jsonl", seed=seed, config_hash=chash)
    files = [{"path": "events.jsonl"}]
    (out / "models").mkdir(exist_ok=True)
    for v, m in enumerate(mon.models):
        m.metadata.setdefault("provenance", _provenance(seed, chash))
        name = f"models/model_v{v:04d}.json"
        save_model(m, out / name)
        files.append({"path": name, "version": v})
    summary = {
        "provenance": _provenance(seed, chash),
        "samples": index + 1,
        "stream_errors": errors,
        "triggers": sum(ev.kind is EventKind.RECAL_TRIGGERED for ev in mon.events),
        "recalibrations": sum(ev.kind is EventKind.RECAL_COMPLETED for ev in mon.events),
        "final_version": mon.version,
        "final_rmse": mon.rolling_rmse(),
        "timeline": mon.timeline,
    }
    if not math.isfinite(summary["final_rmse"]):
        summary["final_rmse"] = None
    _write_json(out / "summary.json", summary)
    files.append({"path": "summary.json"})
    _manifest(out, "monitor", seed, chash, files)
    print(f"{summary['samples']} samples, {summary['triggers']} trigger(s), "
          f"final model v{mon.version}, final rolling RMSE {summary['final_rmse']}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ibrtwin", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, helptext in (
        ("simulate", cmd_simulate, "generate scenario datasets"),
        ("fit", cmd_fit, "fit an ARMAX model on training data"),
        ("validate", cmd_validate, "score a model on held-out datasets"),
        ("monitor", cmd_monitor, "stream a record through the continual monitor"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        p.add_argument("--jobs", type=int, default=1)
        if name == "validate":
            p.add_argument("--mode", help="measured | freerun | measured-until:<k>")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (IbrTwinError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
