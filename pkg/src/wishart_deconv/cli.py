"""Command-line front end: ``wishart-deconv {simulate,estimate,finance,study,schema}``.

Each command reads one JSON config (``--config``, optional), applies flag
overrides, validates the result against a published schema and writes its
outputs plus ``manifest.json`` into ``--out-dir``.

Exit codes: 0 success, 2 validation or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .estimator import DEFAULT_T_GRID, EstimationError, EstimatorConfig, GridSpec, deconvolve
from .finance import FINANCE_DF, InsufficientDataError, PriceDataError, estimate_from_prices, parse_prices, write_weekly_csv
from .sampling import (
    PRESETS,
    RNG_ALGORITHM,
    MixtureSpec,
    ProtocolConfig,
    StudyCell,
    default_workers,
    run_protocol,
    run_study,
)
from .spd import NotPositiveDefiniteError, eigenvalues_of, is_positive_definite
from .special import KAPPA2, PoleError
from .transform import NonConvergenceError, QuadratureSpec

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

WORKERS_ENV = "WISHART_DECONV_WORKERS"
MANIFEST = "manifest.json"


class ConfigError(ValueError):
    pass


# --- schemas -----------------------------------------------------------------

_NUM = {"type": "number"}

MIXING_SCHEMA = {
    "oneOf": [
        {"type": "string", "enum": sorted(PRESETS)},
        {
            "type": "object",
            "required": ["components"],
            "additionalProperties": False,
            "properties": {
                "components": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "required": ["weight", "sigma"],
                        "additionalProperties": False,
                        "properties": {
                            "weight": {"type": "number", "exclusiveMinimum": 0},
                            "N": {"type": ["number", "null"], "exclusiveMinimum": 1},
                            "sigma": {"type": "array", "items": _NUM, "minItems": 3, "maxItems": 3},
                        },
                    },
                }
            },
        },
    ]
}

ESTIMATOR_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "N": {"type": "number", "exclusiveMinimum": 0.5},
        "T": {"type": ["number", "null"], "exclusiveMinimum": 0.125},
        "select_T": {"type": "boolean"},
        "T_grid": {
            "oneOf": [
                {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0.125}, "minItems": 1},
                {
                    "type": "object",
                    "required": ["min", "max", "count"],
                    "additionalProperties": False,
                    "properties": {
                        "min": {"type": "number", "exclusiveMinimum": 0.125},
                        "max": {"type": "number", "exclusiveMinimum": 0.125},
                        "count": {"type": "integer", "minimum": 1},
                    },
                },
            ]
        },
        "quadrature": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["grid", "monte-carlo"]},
                "nodes_per_axis": {"type": "integer", "minimum": 1},
                "n_samples": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_a1": {"type": "integer", "minimum": 2},
                "n_a2": {"type": "integer", "minimum": 2},
                "bounds": {
                    "oneOf": [
                        {"type": "null"},
                        {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 4, "maxItems": 4},
                    ]
                },
                "quantiles": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}, "minItems": 2, "maxItems": 2},
            },
        },
        "amplification_cap": {"type": "number", "minimum": 1},
        "clip": {"type": "boolean"},
    },
}

SIMULATE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "n": {"type": "integer", "minimum": 1},
        "mixing": MIXING_SCHEMA,
        "noise_df": {"type": "number", "exclusiveMinimum": 0.5},
        "seed": {"type": "integer", "minimum": 0},
    },
}

STUDY_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "cells": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "n", "mixing"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string"},
                    "n": {"type": "integer", "minimum": 2},
                    "mixing": MIXING_SCHEMA,
                },
            },
        },
        "replicates": {"type": "integer", "minimum": 1},
        "noise_df": {"type": "number", "exclusiveMinimum": 0.5},
        "seed": {"type": "integer", "minimum": 0},
        "reference": {"enum": ["exact", "kde"]},
        "estimator": ESTIMATOR_SCHEMA,
    },
}

SCHEMAS = {
    "simulate": SIMULATE_SCHEMA,
    "estimate": ESTIMATOR_SCHEMA,
    "finance": ESTIMATOR_SCHEMA,
    "study": STUDY_SCHEMA,
}

DEFAULTS = {
    "simulate": {"n": 500, "mixing": "unimodal", "noise_df": 20.0, "seed": 0},
    "estimate": {"N": 20.0, "T": None},
    "finance": {"N": FINANCE_DF, "T": None},
    "study": {
        "cells": [
            {"name": "unimodal-500", "n": 500, "mixing": "unimodal"},
            {"name": "unimodal-1000", "n": 1000, "mixing": "unimodal"},
            {"name": "unimodal-2000", "n": 2000, "mixing": "unimodal"},
            {"name": "bimodal-2000", "n": 2000, "mixing": "bimodal"},
        ],
        "replicates": 20,
        "noise_df": 20.0,
        "seed": 0,
        "reference": "exact",
        "estimator": {"N": 20.0},
    },
}


def validate(config: dict, schema: dict) -> None:
    """Raise ``ConfigError`` listing every violation with its JSON path."""
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(config), key=lambda e: e.json_path)
    if errors:
        raise ConfigError("; ".join(f"{e.json_path}: {e.message}" for e in errors))


def load_config(path) -> dict:
    """Read a JSON config; a previous run's manifest is accepted in its place."""
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError("$: config must be a JSON object")
    if "config_digest" in data and "config" in data:
        data = data["config"]
    return data


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_digest(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- config -> objects -------------------------------------------------------


def mixing_from_config(value, path: str) -> MixtureSpec:
    if isinstance(value, str):
        return PRESETS[value]
    try:
        return MixtureSpec.from_dict(value)
    except (ValueError, NotPositiveDefiniteError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def estimator_from_config(c: dict, path: str = "$") -> EstimatorConfig:
    tg = c.get("T_grid")
    if tg is None:
        T_grid = DEFAULT_T_GRID
    elif isinstance(tg, dict):
        if not tg["max"] >= tg["min"]:
            raise ConfigError(f"{path}.T_grid: max must not be below min")
        T_grid = tuple(float(t) for t in np.geomspace(tg["min"], tg["max"], tg["count"]))
    else:
        T_grid = tuple(float(t) for t in tg)
    T = c.get("T")
    if c.get("select_T", T is None):
        T = None
    elif T is None:
        raise ConfigError(f"{path}.T: a fixed cutoff is required when select_T is false")
    g = c.get("grid", {})
    try:
        grid = GridSpec(
            g.get("n_a1", 40), g.get("n_a2", 40),
            None if g.get("bounds") is None else tuple(g["bounds"]),
            tuple(g.get("quantiles", (0.01, 0.99))),
        )
        return EstimatorConfig(
            N=float(c.get("N", 20.0)),
            T=None if T is None else float(T),
            T_grid=T_grid,
            quad=QuadratureSpec(**c.get("quadrature", {})),
            amplification_cap=float(c.get("amplification_cap", 1e12)),
            grid=grid,
            clip=bool(c.get("clip", False)),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def resolve_config(command: str, args) -> dict:
    """Defaults, then the config file, then flag overrides; validated."""
    config = json.loads(json.dumps(DEFAULTS[command]))
    user = load_config(args.config)
    if command == "study" and "estimator" in user:
        config["estimator"].update(user.pop("estimator"))
    config.update(user)
    est = config["estimator"] if command == "study" else config
    if getattr(args, "seed", None) is not None:
        if command in ("simulate", "study"):
            config["seed"] = args.seed
        else:
            est.setdefault("quadrature", {})["seed"] = args.seed
    if getattr(args, "df", None) is not None:
        if command in ("simulate", "study"):
            config["noise_df"] = args.df
        else:
            est["N"] = args.df
    if getattr(args, "T", None) is not None:
        est["T"] = args.T
        est["select_T"] = False
    if getattr(args, "select_T", False):
        est["select_T"] = True
    validate(config, SCHEMAS[command])
    return config


# --- I/O ---------------------------------------------------------------------


def write_dataset(ys: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y11", "y12", "y22"])
        for y in ys:
            w.writerow([repr(float(y[0, 0])), repr(float(y[0, 1])), repr(float(y[1, 1]))])


def read_dataset(path) -> np.ndarray:
    """``(n, 3)`` rows of ``y11, y12, y22``; errors name the line."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["y11", "y12", "y22"]:
            raise PriceDataError(f"{path}: line 1: expected header y11,y12,y22")
        for row in reader:
            if not row:
                continue
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise PriceDataError(f"{path}: line {reader.line_num}: {exc}") from None
            if len(vals) != 3:
                raise PriceDataError(f"{path}: line {reader.line_num}: expected 3 fields, got {len(vals)}")
            if not is_positive_definite(np.array([vals]))[0]:
                raise PriceDataError(f"{path}: line {reader.line_num}: matrix is not positive definite")
            rows.append(vals)
    if not rows:
        raise PriceDataError(f"{path}: no observations")
    return np.array(rows)


def write_grid(grid, out_dir: Path) -> list[str]:
    grid.to_csv(out_dir / "density.csv")
    grid.to_json(out_dir / "density.json")
    return ["density.csv", "density.json"]


def write_manifest(out_dir: Path, command: str, argv, config: dict, seeds: dict, outputs, timings: dict, extra: dict) -> None:
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "config_digest": config_digest(config),
        "seeds": seeds,
        "version": __version__,
        "kappa2": KAPPA2,
        "rng_algorithm": RNG_ALGORITHM,
        "timings_s": timings,
        "outputs": {name: file_digest(out_dir / name) for name in outputs},
        **extra,
    }
    with open(out_dir / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _grid_summary(grid) -> dict:
    meta = dict(grid.meta)
    meta.pop("risk_curve", None)
    return meta


# --- commands ----------------------------------------------------------------


def cmd_simulate(args, config: dict, workers: int):
    mixing = mixing_from_config(config["mixing"], "$.mixing")
    proto = ProtocolConfig(config["n"], mixing, float(config["noise_df"]), config["seed"])
    t0 = time.perf_counter()
    ys = run_protocol(proto)
    write_dataset(ys, args.out_dir / "dataset.csv")
    return ["dataset.csv"], {"simulate": time.perf_counter() - t0}, {"seed": config["seed"]}, {"n": config["n"]}


def cmd_estimate(args, config: dict, workers: int):
    cfg = estimator_from_config(config)
    t0 = time.perf_counter()
    ys = read_dataset(args.dataset)
    t1 = time.perf_counter()
    grid = deconvolve(eigenvalues_of(ys), cfg, workers=workers)
    t2 = time.perf_counter()
    outputs = write_grid(grid, args.out_dir)
    extra = {"estimate": _grid_summary(grid), "input_digest": file_digest(args.dataset)}
    seeds = {"quadrature": cfg.quad.seed}
    return outputs, {"read": t1 - t0, "estimate": t2 - t1}, seeds, extra


def cmd_finance(args, config: dict, workers: int):
    cfg = estimator_from_config(config)
    t0 = time.perf_counter()
    series = parse_prices(args.prices)
    grid, weeks = estimate_from_prices(series, cfg)
    t1 = time.perf_counter()
    write_weekly_csv(weeks, args.out_dir / "weekly.csv")
    outputs = ["weekly.csv"] + write_grid(grid, args.out_dir)
    extra = {"estimate": _grid_summary(grid), "input_digest": file_digest(args.prices), "df": cfg.N}
    return outputs, {"estimate": t1 - t0}, {"quadrature": cfg.quad.seed}, extra


def cmd_study(args, config: dict, workers: int):
    cfg = estimator_from_config(config["estimator"], "$.estimator")
    cells = [
        StudyCell(c["name"], c["n"], mixing_from_config(c["mixing"], f"$.cells[{i}].mixing"))
        for i, c in enumerate(config["cells"])
    ]
    t0 = time.perf_counter()
    res = run_study(cells, config["replicates"], cfg, float(config["noise_df"]), config["seed"], workers, config["reference"])
    res.to_csv(args.out_dir / "study.csv")
    res.to_json(args.out_dir / "study.json")
    return ["study.csv", "study.json"], {"study": time.perf_counter() - t0}, {"seed": config["seed"]}, {}


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "finance": cmd_finance, "study": cmd_study}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wishart-deconv", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", type=Path, help="JSON config file (or a previous manifest.json)")
        sp.add_argument("--out-dir", type=Path, default=Path("."), help="output directory (created if missing)")
        sp.add_argument("--workers", type=int, default=None, help=f"worker processes (default ${WORKERS_ENV} or 1)")
        if seed:
            sp.add_argument("--seed", type=int, default=None)

    def cutoff(sp):
        sp.add_argument("--T", type=float, default=None, help="fixed spectral cutoff")
        sp.add_argument("--select-T", action="store_true", help="choose T by minimizing the unbiased risk")

    sp = sub.add_parser("simulate", help="simulate a dataset from the mixture protocol")
    common(sp)
    sp.add_argument("--df", type=float, default=None, help="noise Wishart degrees of freedom")

    sp = sub.add_parser("estimate", help="deconvolve a dataset of 2x2 matrices")
    sp.add_argument("dataset", type=Path)
    common(sp)
    cutoff(sp)
    sp.add_argument("--df", type=float, default=None, help="noise Wishart degrees of freedom N")

    sp = sub.add_parser("finance", help="weekly covariances from daily closes, then deconvolve")
    sp.add_argument("prices", type=Path)
    common(sp)
    cutoff(sp)
    sp.add_argument("--df", type=float, default=None, help=f"noise degrees of freedom (default {FINANCE_DF:g})")

    sp = sub.add_parser("study", help="replicated ISE study")
    common(sp)
    sp.add_argument("--df", type=float, default=None, help="noise Wishart degrees of freedom")

    sp = sub.add_parser("schema", help="print the JSON schema of a command config")
    sp.add_argument("name", choices=sorted(SCHEMAS))
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    if args.command == "schema":
        print(json.dumps(SCHEMAS[args.name], indent=1, sort_keys=True))
        return EXIT_OK
    try:
        workers = args.workers if args.workers is not None else default_workers()
        if workers < 1:
            raise ConfigError(f"--workers must be positive, got {workers}")
        config = resolve_config(args.command, args)
        for attr in ("dataset", "prices"):
            path = getattr(args, attr, None)
            if path is not None and not path.is_file():
                raise FileNotFoundError(f"{attr} file not found: {path}")
        args.out_dir.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        outputs, timings, seeds, extra = COMMANDS[args.command](args, config, workers)
        timings["total"] = time.perf_counter() - t0
        extra["workers"] = workers
        write_manifest(args.out_dir, args.command, argv, config, seeds, outputs, timings, extra)
    except (ConfigError, PriceDataError, InsufficientDataError, FileNotFoundError, NotPositiveDefiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (EstimationError, NonConvergenceError, PoleError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
