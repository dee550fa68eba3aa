"""Command-line interface: ``livcurve {estimate,simulate,select} --config FILE``.

Configuration is YAML. Exit codes: 0 success, 1 usage or configuration
error, 2 data error, 3 numerical failure. ``LIV_LOG`` (error / info / debug)
sets the log level.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .core import (Sample, SupportSet, WeightFunction, make_indicator_model, make_linear_origin_model,
                   make_spline_model, make_weight_kde, make_weight_tapered, make_weight_truncnorm)
from .estimators import EstimationError, cross_fit_estimate, estimate_variant
from .nuisance import NuisanceFitError, NuisanceSpec
from .quadrature import rule_for

log = logging.getLogger("livcurve")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CURVE_POINTS = 101


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

@dataclass
class RunConfig:
    command: str
    data_path: Optional[Path] = None
    columns: dict = field(default_factory=dict)
    nuisance: NuisanceSpec = field(default_factory=NuisanceSpec)
    model: dict = field(default_factory=lambda: {"type": "constant"})
    weight: dict = field(default_factory=lambda: {"type": "kde"})
    support: Optional[tuple] = None
    variant: str = "DR"
    folds: int = 2
    bootstrap: int = 0
    level: float = 0.95
    sandwich: bool = True
    quadrature_nodes: int = 64
    seed: int = 0
    output: Optional[Path] = None
    simulate: dict = field(default_factory=dict)
    candidates: list = field(default_factory=list)
    jobs: int = 1

    @classmethod
    def from_dict(cls, raw: dict, command: str, base_dir: Path = Path(".")) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        raw = dict(raw)
        known = {"data", "nuisance", "model", "weight", "support", "estimator", "inference", "seed", "output",
                 "simulate", "select"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(command=command)
        data = raw.get("data") or {}
        if data:
            if "path" not in data:
                raise ConfigError("data.path is required")
            p = Path(data["path"])
            cfg.data_path = p if p.is_absolute() else base_dir / p
            cols = data.get("columns") or {}
            for key in ("z", "a", "y"):
                if key not in cols:
                    raise ConfigError(f"data.columns.{key} is required")
            cfg.columns = {"z": cols["z"], "a": cols["a"], "y": cols["y"], "x": list(cols.get("x") or []),
                           "v": list(cols.get("v") or [])}
            missing = [c for c in cfg.columns["v"] if c not in cfg.columns["x"]]
            if missing:
                raise ConfigError(f"effect modifiers {missing} must also be listed in data.columns.x")
        try:
            cfg.nuisance = NuisanceSpec.from_dict(raw.get("nuisance") or {})
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(f"nuisance spec: {exc}") from exc
        cfg.model = dict(raw.get("model") or cfg.model)
        cfg.weight = dict(raw.get("weight") or cfg.weight)
        if raw.get("support") is not None:
            sup = raw["support"]
            if not (isinstance(sup, (list, tuple)) and len(sup) == 2):
                raise ConfigError("support must be a two-element list [t_lo, t_hi]")
            cfg.support = (float(sup[0]), float(sup[1]))
        est = raw.get("estimator") or {}
        cfg.variant = str(est.get("variant", "DR")).upper()
        if cfg.variant not in ("DR", "IPW", "REG", "CROSSFIT"):
            raise ConfigError(f"estimator.variant must be DR, IPW, REG or CROSSFIT, got {cfg.variant}")
        cfg.folds = int(est.get("folds", 2))
        cfg.quadrature_nodes = int(est.get("quadrature_nodes", 64))
        inf = raw.get("inference") or {}
        cfg.bootstrap = int(inf.get("bootstrap", 0))
        cfg.level = float(inf.get("level", 0.95))
        cfg.sandwich = bool(inf.get("sandwich", True))
        cfg.seed = int(raw.get("seed", 0))
        if raw.get("output") is not None:
            cfg.output = Path(raw["output"])
        cfg.simulate = dict(raw.get("simulate") or {})
        sel = raw.get("select") or {}
        cfg.candidates = _parse_candidates(sel.get("candidates", [1, 2, 3, 4]))
        if "folds" in sel:
            cfg.folds = int(sel["folds"])
        return cfg


def _parse_candidates(items) -> list:
    if not isinstance(items, (list, tuple)) or not items:
        raise ConfigError("select.candidates must be a nonempty list of spline degrees of freedom")
    out = []
    for item in items:
        if isinstance(item, bool) or not isinstance(item, int) or item < 1:
            raise ConfigError(f"invalid candidate {item!r}: expected an integer df >= 1")
        out.append(item)
    return out


def load_config(path, command: str) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return RunConfig.from_dict(raw or {}, command, path.parent)


# ---------------------------------------------------------------------------
# data

def read_sample(path, columns: dict) -> Sample:
    """Read a CSV into a :class:`Sample`; errors name the offending row and column."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot open data file {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"data file {path} is empty") from None
        header = [h.strip() for h in header]
        wanted = [columns["z"], columns["a"], columns["y"], *columns["x"]]
        for col in wanted:
            if col not in header:
                raise DataError(f"column {col!r} not found in {path} (columns: {header})")
        idx = [header.index(c) for c in wanted]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            vals = []
            for col, j in zip(wanted, idx):
                try:
                    vals.append(float(row[j]))
                except (ValueError, IndexError):
                    cell = row[j] if j < len(row) else ""
                    raise DataError(f"row {lineno}, column {col!r}: cannot parse {cell!r} as a number") from None
                if not np.isfinite(vals[-1]):
                    raise DataError(f"row {lineno}, column {col!r}: value is not finite")
            if vals[1] not in (0.0, 1.0):
                raise DataError(f"row {lineno}, column {columns['a']!r}: treatment must be 0 or 1, got {row[idx[1]]!r}")
            rows.append(vals)
    if not rows:
        raise DataError(f"data file {path} has no rows")
    arr = np.array(rows)
    x = arr[:, 3:] if columns["x"] else np.zeros((arr.shape[0], 0))
    v_idx = tuple(columns["x"].index(c) for c in columns["v"])
    try:
        return Sample(x, arr[:, 0], arr[:, 1], arr[:, 2], v_idx)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_sample(sample: Sample, path, x_names=None) -> None:
    x_names = x_names or [f"x{j + 1}" for j in range(sample.d)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["z", "a", "y", *x_names])
        for i in range(sample.n):
            w.writerow([repr(float(sample.z[i])), int(sample.a[i]), repr(float(sample.y[i])),
                        *(repr(float(v)) for v in sample.x[i])])


# ---------------------------------------------------------------------------
# builders

def build_support(cfg: RunConfig, sample: Optional[Sample]) -> SupportSet:
    if cfg.support is not None:
        return SupportSet(*cfg.support)
    if sample is None:
        raise ConfigError("support is required")
    lo, hi = np.quantile(sample.z, [0.025, 0.975])
    return SupportSet(float(lo), float(hi))


def build_weight(spec: dict, support: SupportSet, sample: Optional[Sample]) -> WeightFunction:
    kind = spec.get("type", "kde")
    if kind == "truncnorm":
        w = make_weight_truncnorm(float(spec.get("mu", 0.0)), float(spec.get("sigma", 1.0)), support)
    elif kind == "kde":
        if sample is None:
            raise ConfigError("a kde weight needs data")
        w = make_weight_kde(sample, spec.get("bandwidth", "silverman"), support)
    else:
        raise ConfigError(f"unknown weight type {kind!r} (expected truncnorm or kde)")
    taper = spec.get("taper", 0.1)
    if taper:
        w = make_weight_tapered(w, float(taper))
    return w


def build_model(spec: dict, support: SupportSet):
    kind = spec.get("type", "constant")
    if kind == "constant":
        return make_spline_model(1, support)
    if kind == "linear":
        return make_spline_model(2, support)
    if kind == "linear_origin":
        return make_linear_origin_model()
    if kind == "spline":
        return make_spline_model(int(spec.get("df", 3)), support)
    if kind == "indicator":
        return make_indicator_model(spec["levels"], int(spec.get("v_column", 0)))
    raise ConfigError(f"unknown model type {kind!r}")


# ---------------------------------------------------------------------------
# commands

def _fit(cfg: RunConfig, sample: Sample, model, weight, rule):
    if cfg.variant == "CROSSFIT":
        return cross_fit_estimate(sample, model, weight, cfg.nuisance, v_folds=cfg.folds, rng_seed=cfg.seed,
                                  rule=rule)
    return estimate_variant(sample, model, weight, cfg.nuisance, cfg.variant, rule=rule)


def run_estimate(cfg: RunConfig, sample: Optional[Sample] = None):
    """In-process equivalent of ``livcurve estimate``; returns (result, curve rows, curve header)."""
    from .inference import bootstrap_ci, sandwich_for

    if sample is None:
        if cfg.data_path is None:
            raise ConfigError("estimate needs a data section")
        sample = read_sample(cfg.data_path, cfg.columns)
    support = build_support(cfg, sample)
    weight = build_weight(cfg.weight, support, sample)
    model = build_model(cfg.model, support)
    rule = rule_for(weight, cfg.quadrature_nodes, models=(model,))
    res = _fit(cfg, sample, model, weight, rule)
    if cfg.sandwich:
        res.covariance = sandwich_for(res).covariance
    if cfg.bootstrap:
        boot = bootstrap_ci(sample, lambda s: _fit(cfg, s, model, weight, rule).psi_hat, B=cfg.bootstrap,
                            level=cfg.level, rng_seed=cfg.seed, n_jobs=cfg.jobs)
        res.ci = boot.ci
        res.diagnostics["bootstrap_failed"] = boot.n_failed
    elif res.covariance is not None:
        from scipy import stats

        zq = stats.norm.ppf(0.5 + cfg.level / 2)
        res.ci = np.column_stack([res.psi_hat - zq * res.se, res.psi_hat + zq * res.se])
    grid = np.linspace(support.t_lo, support.t_hi, CURVE_POINTS)
    v_names = cfg.columns.get("v", []) if cfg.columns else []
    header = ["t", *v_names, "gamma"]
    rows = []
    if sample.v is None:
        for t, g in zip(grid, model.gamma(grid, None, res.psi_hat)):
            rows.append([t, g])
    else:
        for v in np.unique(sample.v, axis=0):
            vv = np.broadcast_to(v, (grid.size, v.size))
            for t, g in zip(grid, model.gamma(grid, vv, res.psi_hat)):
                rows.append([t, *v, g])
    return res, rows, header


def cmd_estimate(cfg: RunConfig) -> Path:
    res, rows, header = run_estimate(cfg)
    out = cfg.output or Path("estimate.json")
    payload = res.to_dict()
    payload["diagnostics"] = {k: v for k, v in payload["diagnostics"].items() if _jsonable(v)}
    out.write_text(json.dumps(payload, indent=2) + "\n")
    curve_path = out.with_suffix(".curve.csv")
    with open(curve_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])
    log.info("wrote %s and %s", out, curve_path)
    return out


def _jsonable(v):
    try:
        json.dumps(v)
        return True
    except TypeError:
        return False


def cmd_simulate(cfg: RunConfig) -> Path:
    from .simulation import SimConfig, generate, run_study, standard_grid, write_metrics_csv

    sim = cfg.simulate
    allowed = {"n", "n_reps", "B", "grid", "cells", "export_data"}
    unknown = set(sim) - allowed
    if unknown:
        raise ConfigError(f"unknown simulate keys: {sorted(unknown)}")
    ns = sim.get("n", 1000)
    ns = ns if isinstance(ns, list) else [ns]
    n_reps = int(sim.get("n_reps", 200))
    B = int(sim.get("B", 0))
    if "export_data" in sim:
        batch = generate(SimConfig(n=int(ns[0]), n_reps=1, rng_seed=cfg.seed), np.random.default_rng(cfg.seed))
        write_sample(batch.sample, Path(sim["export_data"]))
    cells = []
    try:
        if "cells" in sim:
            for c in sim["cells"]:
                for n in ns:
                    cells.append(SimConfig(n=int(n), n_reps=n_reps, B=B, rng_seed=cfg.seed, **c))
        elif sim.get("grid", "standard") == "standard":
            for n in ns:
                cells.extend(standard_grid(int(n), n_reps, B, cfg.seed))
        else:
            raise ConfigError(f"unknown simulate.grid {sim.get('grid')!r}")
    except TypeError as exc:
        raise ConfigError(f"simulate cell: {exc}") from exc
    rows = run_study(cells, n_jobs=cfg.jobs)
    out = cfg.output or Path("simulation.csv")
    write_metrics_csv(rows, out)
    return out


def cmd_select(cfg: RunConfig) -> Path:
    from .selection import cv_select, spline_candidate

    if cfg.data_path is None:
        raise ConfigError("select needs a data section")
    sample = read_sample(cfg.data_path, cfg.columns)
    support = build_support(cfg, sample)
    weight = build_weight(cfg.weight, support, sample)
    cands = [spline_candidate(k, support) for k in cfg.candidates]
    rule = rule_for(weight, cfg.quadrature_nodes, models=cands)
    table = cv_select(sample, cands, cfg.nuisance, v=cfg.folds, weight=weight, rule=rule, rng_seed=cfg.seed)
    out = cfg.output or Path("risk.csv")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "risk", "selected"])
        for k, risk, sel in zip(cfg.candidates, table.risks, range(len(cfg.candidates))):
            w.writerow([k, repr(float(risk)), int(sel == table.selected)])
    return out


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "select": cmd_select}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="livcurve", description="Doubly robust local IV curve estimation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in (("estimate", "estimate the working-model parameters on a CSV"),
                        ("simulate", "run the Monte Carlo study"),
                        ("select", "cross-validated choice of spline degrees of freedom")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, type=Path, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--jobs", type=int, default=1, help="maximum parallel workers")
        p.add_argument("--output", type=Path, help="output path")
    return parser


def _setup_logging():
    level = os.environ.get("LIV_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.command)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.output is not None:
            cfg.output = args.output
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg.jobs = args.jobs
        out = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EstimationError, NuisanceFitError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining validation errors come from user-supplied settings
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
