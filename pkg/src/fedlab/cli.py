"""Command-line experiment runner.

Subcommands ``train``, ``lrme``, ``dlg`` and ``sweep`` read a JSON config
holding ExperimentConfig fields, an optional ``"sweep"`` object mapping field
names to lists of values (their cartesian product is run), and for ``dlg`` an
optional ``"dlg"`` object. Each run writes a CSV trace; every invocation
writes ``summary.json`` and, for sweeps, ``table.csv``.
"""

import argparse
import csv
import hashlib
import itertools
import json
import math
import statistics
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .attacks import DlgConfig, leakage_study
from .engine import ExperimentConfig, rounds_to_target, run_experiment
from .errors import ConfigError, FedLabError, InvalidInput, NumericalDivergence, ParseError
from .fedalgos import ALGORITHMS
from .models import MODELS

DEFAULT_TARGET = 0.85
DATASETS = ("logistic", "quadratic", "lrme", "mnist", "csv")
PARTITIONS = ("iid", "sorted", "mixture")

# defaults a subcommand applies before the config file is read
SUBCOMMAND_DEFAULTS = {
    "train": {},
    "sweep": {},
    "lrme": {"algorithm": "losac_prox", "model": "trace_regression", "dataset": "lrme",
             "eta": 2e-3},
    "dlg": {"algorithm": "losac", "model": "binary_logistic", "dataset": "logistic",
            "N": 100, "S": 100, "M": 1, "R": 5, "n_features": 5, "n_classes": 2, "samples": 100,
            "test_fraction": 0.0},
}

DLG_FIELDS = {"attack_steps", "eta_d", "init_scale", "target_kind", "client", "round"}

_CHECKS = [
    ("algorithm", lambda c: c.algorithm in ALGORITHMS, f"must be one of {sorted(ALGORITHMS)}"),
    ("model", lambda c: c.model in MODELS, f"must be one of {sorted(MODELS)}"),
    ("dataset", lambda c: c.dataset in DATASETS, f"must be one of {list(DATASETS)}"),
    ("partition", lambda c: c.partition in PARTITIONS, f"must be one of {list(PARTITIONS)}"),
    ("N", lambda c: c.N >= 1, "must be >= 1"),
    ("S", lambda c: 1 <= c.S <= c.N, "must satisfy 1 <= S <= N"),
    ("R", lambda c: c.R >= 0, "must be >= 0"),
    ("T", lambda c: c.T >= 1, "must be >= 1"),
    ("M", lambda c: c.M >= 1, "must be >= 1"),
    ("eta", lambda c: c.eta > 0, "must be > 0"),
    ("lam", lambda c: c.lam >= 0, "must be >= 0"),
    ("mu_reg", lambda c: c.mu_reg >= 0, "must be >= 0"),
    ("rho", lambda c: c.rho > 0, "must be > 0"),
    ("eta_l", lambda c: c.eta_l > 0, "must be > 0"),
    ("eta_g", lambda c: c.eta_g > 0, "must be > 0"),
    ("prox_steps", lambda c: c.prox_steps >= 1, "must be >= 1"),
    ("alpha_momentum", lambda c: 0 <= c.alpha_momentum <= 1, "must lie in [0, 1]"),
    ("c_percent", lambda c: (c.c_percent is None) == (c.partition != "mixture"),
     "must be given exactly when partition is 'mixture'"),
    ("c_percent", lambda c: c.c_percent is None or 0 <= c.c_percent <= 100,
     "must lie in [0, 100]"),
    ("test_fraction", lambda c: 0 <= c.test_fraction < 1, "must lie in [0, 1)"),
    ("seeds", lambda c: len(c.seeds) > 0 and all(isinstance(s, int) for s in c.seeds),
     "must be a non-empty list of integers"),
    ("eval_every", lambda c: c.eval_every is None or c.eval_every >= 1, "must be >= 1"),
    ("accuracy_target", lambda c: c.accuracy_target is None or 0 < c.accuracy_target <= 1,
     "must lie in (0, 1]"),
]

_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(name, value):
    kind = _TYPES[name]
    if value is None:
        return None
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(name, f"expected a boolean, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(name, f"expected a string, got {value!r}")
        return value
    if kind is list:
        if not isinstance(value, list):
            raise ConfigError(name, f"expected a list, got {value!r}")
        return value
    return value


def validate_config(cfg):
    for name, check, message in _CHECKS:
        if not check(cfg):
            raise ConfigError(name, f"{message} (got {getattr(cfg, name)!r})")
    try:
        cfg.validate()
    except InvalidInput as exc:
        raise ConfigError("config", str(exc)) from None
    return cfg


def build_config(values, base=None):
    """ExperimentConfig from a mapping of field values on top of ``base``."""
    merged = dict(base or {})
    merged.update(values)
    for name in merged:
        if name not in _TYPES:
            raise ConfigError(name, "unknown field")
    cfg = ExperimentConfig(**{k: _coerce(k, v) for k, v in merged.items()})
    return validate_config(cfg)


def canonical_json(cfg):
    return json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))


def run_id(cfg, seed):
    """Stable short hash of the resolved config and the seed."""
    payload = json.dumps({"config": json.loads(canonical_json(cfg)), "seed": seed},
                         sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def load_json(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"{path}:{exc.lineno}:{exc.colno}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a JSON object")
    return raw


@dataclass
class ConfigFile:
    configs: list
    sweep_keys: list
    dlg: dict = field(default_factory=dict)


def parse_config(raw, subcommand="train"):
    """Resolve a config mapping into one ExperimentConfig per sweep point."""
    raw = dict(raw)
    sweep = raw.pop("sweep", None) or {}
    dlg = raw.pop("dlg", None) or {}
    if not isinstance(sweep, dict):
        raise ConfigError("sweep", "must be an object mapping fields to lists")
    if not isinstance(dlg, dict):
        raise ConfigError("dlg", "must be an object")
    for name in dlg:
        if name not in DLG_FIELDS:
            raise ConfigError(f"dlg.{name}", "unknown field")
    base = SUBCOMMAND_DEFAULTS[subcommand]
    keys = []
    for name, values in sweep.items():
        if name not in _TYPES:
            raise ConfigError(f"sweep.{name}", "unknown field")
        if not isinstance(values, list):
            raise ConfigError(f"sweep.{name}", "must be a list")
        if values:
            keys.append(name)
    configs = []
    for combo in itertools.product(*(sweep[k] for k in keys)):
        configs.append(build_config({**raw, **dict(zip(keys, combo))}, base))
    return ConfigFile(configs, keys, dlg)


@dataclass
class RunManifest:
    config_path: str
    subcommand: str
    configs: list
    out_dir: Path
    sweep_keys: list = field(default_factory=list)
    dlg: dict = field(default_factory=dict)
    parallel: int = 1

    def runs(self):
        """(config, seed, run id) for every run, in execution order."""
        for cfg in self.configs:
            for seed in cfg.seeds:
                yield cfg, seed, run_id(cfg, seed)


def _float_or_none(value):
    if value is None:
        return None
    value = float(value)
    return None if math.isnan(value) else value


def _final_metrics(record):
    return {
        "round": record.round,
        "train_loss": _float_or_none(record.train_loss),
        "test_loss": _float_or_none(record.test_loss),
        "test_acc": _float_or_none(record.test_acc),
        "recovery_err": _float_or_none(record.recovery_err),
        "recovered_rank": record.recovered_rank,
    }


def _train_run(manifest, cfg, seed, rid):
    trace = run_experiment(cfg, seed, parallel=manifest.parallel)
    name = f"{cfg.algorithm}_{rid}.csv"
    (manifest.out_dir / name).write_text(trace.to_csv())
    entry = {"csv": name, "final": _final_metrics(trace.final)}
    if MODELS[cfg.model].classification:
        target = cfg.accuracy_target or DEFAULT_TARGET
        entry["accuracy_target"] = target
        entry["rounds_to_target"] = rounds_to_target(trace, target)
    return entry


def _dlg_run(manifest, cfg, seed, rid):
    opts = dict(manifest.dlg)
    client = opts.pop("client", 0)
    rnd = opts.pop("round", 5)
    exposure = ALGORITHMS[cfg.algorithm].exposure
    if opts.setdefault("target_kind", exposure) != exposure:
        raise ConfigError("dlg.target_kind",
                          f"{cfg.algorithm} exposes {exposure}, not {opts['target_kind']}")
    try:
        dlg_cfg = DlgConfig(**opts)
    except (InvalidInput, TypeError) as exc:
        raise ConfigError("dlg", str(exc)) from None
    if rnd > cfg.R:
        raise ConfigError("dlg.round", f"round {rnd} exceeds R={cfg.R}")
    cap, result = leakage_study(cfg, dlg_cfg, client, rnd, seed)
    norm = float(np.linalg.norm(cap.features))
    name = f"dlg_{cfg.algorithm}_{rid}.csv"
    with (manifest.out_dir / name).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "objective", "error", "relative_error"])
        for k, (obj, err) in enumerate(zip(result.objective, result.error), start=1):
            writer.writerow([k, f"{obj:.6g}", f"{err:.6g}", f"{err / norm:.6g}"])
    return {"csv": name, "exposure": exposure, "data_norm": norm,
            "final_error": result.final_error, "final_relative_error": result.final_error / norm}


def comparison_table(entries, sweep_keys):
    """Rows (algorithm, setting) with medians over seeds of rounds-to-target,
    final training loss and final test accuracy."""
    setting_keys = [k for k in sweep_keys if k != "algorithm"]
    groups = {}
    for e in entries:
        if e.get("status") != "ok":
            continue
        setting = ";".join(f"{k}={e['config'][k]}" for k in setting_keys)
        groups.setdefault((e["config"]["algorithm"], setting), []).append(e)
    rows = []
    for (algorithm, setting), group in groups.items():
        reached = [e["rounds_to_target"] for e in group if e.get("rounds_to_target") is not None]
        losses = [e["final"]["train_loss"] for e in group if e["final"]["train_loss"] is not None]
        accs = [e["final"]["test_acc"] for e in group if e["final"]["test_acc"] is not None]
        rows.append({
            "algorithm": algorithm,
            "setting": setting,
            "runs": len(group),
            "reached": len(reached),
            "rounds_to_target": statistics.median(reached) if reached else None,
            "train_loss": statistics.median(losses) if losses else None,
            "test_acc": statistics.median(accs) if accs else None,
        })
    return rows


def _write_table(path, rows):
    columns = ["algorithm", "setting", "runs", "reached", "rounds_to_target", "train_loss",
               "test_acc"]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow(["" if row[c] is None else
                             f"{row[c]:.6g}" if isinstance(row[c], float) else row[c]
                             for c in columns])


def run(manifest):
    """Execute every run of the manifest. Returns the process exit code."""
    manifest.out_dir.mkdir(parents=True, exist_ok=True)
    entries, failed = [], False
    execute = _dlg_run if manifest.subcommand == "dlg" else _train_run
    for cfg, seed, rid in manifest.runs():
        entry = {"run_id": rid, "seed": seed, "config": asdict(cfg)}
        try:
            entry.update(execute(manifest, cfg, seed, rid))
            entry["status"] = "ok"
        except NumericalDivergence as exc:
            failed = True
            entry["status"] = "diverged"
            entry["error"] = {"type": "NumericalDivergence", "message": str(exc),
                              "round": exc.round, "step": exc.step, "client": exc.client}
            print(json.dumps({"run_id": rid, **entry["error"]}), file=sys.stderr)
        entries.append(entry)

    summary = {"config_path": manifest.config_path, "subcommand": manifest.subcommand,
               "runs": entries}
    if manifest.subcommand != "dlg":
        table = comparison_table(entries, manifest.sweep_keys)
        summary["table"] = table
        if manifest.sweep_keys:
            _write_table(manifest.out_dir / "table.csv", table)
    (manifest.out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return 1 if failed else 0


def build_parser():
    parser = argparse.ArgumentParser(prog="fedlab",
                                     description="Federated optimization experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train one configuration (or a sweep) and write metric traces",
        "lrme": "low-rank matrix estimation runs",
        "dlg": "gradient-inversion attack on one client's upload",
        "sweep": "run the cartesian product of the config's sweep lists",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", default="runs", help="output directory (default: runs)")
        p.add_argument("--seed", type=int, help="run only this seed")
        p.add_argument("--parallel", type=int, default=1,
                       help="threads for client work (default: 1)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.parallel < 1:
            raise ConfigError("parallel", "must be >= 1")
        raw = load_json(args.config)
        parsed = parse_config(raw, args.command)
        if args.command == "sweep" and not parsed.sweep_keys:
            raise ConfigError("sweep", "the sweep subcommand needs a non-empty 'sweep' object")
        configs = parsed.configs
        if args.seed is not None:
            configs = [replace(c, seeds=[args.seed]) for c in configs]
        manifest = RunManifest(str(args.config), args.command, configs, Path(args.out),
                               parsed.sweep_keys, parsed.dlg, args.parallel)
        return run(manifest)
    except FedLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
