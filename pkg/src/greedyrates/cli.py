"""Command-line entry point: ``greedyrates {rate,audit,lemmas,tv} --config PATH``.

Each command validates its JSON config, runs, and writes ``report.csv`` and
``summary.json`` into ``--out``.  Exit codes: 0 success, 2 configuration or
precondition error, 3 numeric failure, 4 audit or oracle violations.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys

import jsonschema
import numpy as np

from . import __version__
from .errors import ConfigError, ContractError, DataError, DomainError, NumericError

CSV_SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VIOLATION = 0, 2, 3, 4

_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}
_INSTANCE = {
    "type": "object",
    "properties": {"family": {"enum": ["plus", "minus"]}, "theta": {"type": "number", "minimum": -1, "maximum": 1},
                   "gamma": _NUM, "p": _NUM, "q": _NUM, "m": _NUM},
    "required": ["family", "theta", "p", "q", "m"],
    "additionalProperties": False,
}

SCHEMAS = {
    "rate": {
        "type": "object",
        "properties": {
            "seed": {"type": "integer"},
            "family": {"enum": ["plus", "minus", "inventory"]},
            "gamma": _NUM, "p": _NUM, "q": _NUM, "m": _NUM,
            "n_values": {"type": "array", "items": _POS_INT, "minItems": 1},
            "replications": {"type": "integer", "minimum": 2},
            "algorithm": {"enum": ["greedy", "truth"]},
            "grid_nodes": {"type": "integer", "minimum": 2},
            "ref_nodes": _POS_INT, "n_paths": {"type": "integer", "minimum": 2},
            "eps": {"type": "number", "exclusiveMinimum": 0},
        },
        "required": ["seed", "family", "n_values", "replications"],
        "additionalProperties": False,
    },
    "audit": {
        "type": "object",
        "properties": {
            "seed": {"type": "integer"},
            "instances": {"type": "array", "items": _INSTANCE, "minItems": 1},
            "x_points": {"type": "integer", "minimum": 0},
            "a_points": {"type": "integer", "minimum": 0},
            "t_points": {"type": "integer", "minimum": 0},
            "stability_trials": {"type": "integer", "minimum": 0},
            "envelope_trials": {"type": "integer", "minimum": 0},
            "envelope_n": _POS_INT,
            "bound_scale": {"type": "number", "minimum": 0},
        },
        "required": ["seed"],
        "additionalProperties": False,
    },
    "lemmas": {
        "type": "object",
        "properties": {
            "seed": {"type": "integer"},
            "n_mc": {"type": "integer", "minimum": 2},
            "trials": _POS_INT,
            "rhs_scale": {"type": "number", "minimum": 0},
            "truncation": {"type": "array", "items": {
                "type": "object", "properties": {"m": _NUM, "scale": _NUM, "alpha": _NUM, "u": _NUM, "v": _NUM},
                "required": ["m", "alpha", "u", "v"], "additionalProperties": False}},
            "inverse_moment": {"type": "array", "items": {
                "type": "object", "properties": {"m": _NUM, "scale": _NUM, "alpha": _NUM},
                "required": ["m", "alpha"], "additionalProperties": False}},
            "holder": {"type": "array", "items": {
                "type": "object", "properties": {"p": _NUM, "q": _NUM}, "required": ["p", "q"],
                "additionalProperties": False}},
            "sign_power": {"type": "array", "items": _NUM},
        },
        "required": ["seed"],
        "additionalProperties": False,
    },
    "tv": {
        "type": "object",
        "properties": {
            "seed": {"type": "integer"},
            "densities": {"type": "array", "minItems": 1, "items": {
                "type": "object",
                "properties": {"name": {"type": "string"},
                               "kind": {"enum": ["uniform", "gaussian", "spike", "fgm", "csv"]},
                               "params": {"type": "object"}, "path": {"type": "string"}},
                "required": ["kind"], "additionalProperties": False}},
            "h_grid": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
            "min_exponent": _NUM,
            "inventory_audit": {"type": "boolean"},
        },
        "required": ["seed", "densities"],
        "additionalProperties": False,
    },
}

DEFAULT_INSTANCES = [
    {"family": "plus", "theta": 0.5, "gamma": 0.5, "p": 2.0, "q": 1.0, "m": 2.0},
    {"family": "plus", "theta": -0.3, "gamma": 0.5, "p": 2.0, "q": 1.0, "m": 1.0},
    {"family": "minus", "theta": 0.4, "gamma": 0.5, "p": 2.0, "q": 1.0, "m": 1.0},
    {"family": "minus", "theta": -0.25, "gamma": 0.5, "p": 3.0, "q": 0.5, "m": 1.0},
]
DEFAULT_LEMMAS = {
    "truncation": [{"m": 2.0, "alpha": 1.0, "u": 0.1, "v": 0.001},
                   {"m": 2.0, "alpha": 0.5, "u": 0.1, "v": 0.01}],
    "inverse_moment": [{"m": 2.0, "scale": 0.5, "alpha": 0.2},
                       {"m": 2.0, "alpha": 0.25}],
    "holder": [{"p": 2.0, "q": 2.0}, {"p": 3.0, "q": 3.0}],
    "sign_power": [0.25, 0.5, 1.0],
}


class Outputs:
    """Collects CSV rows and a JSON summary, then writes both deterministically."""

    def __init__(self, command: str, config: dict, columns):
        self.command = command
        self.config = config
        self.columns = list(columns)
        self.rows = []
        self.summary = {}

    def add(self, *row):
        self.rows.append(row)

    def csv_text(self) -> str:
        buf = io.StringIO()
        echo = json.dumps(self.config, sort_keys=True, separators=(",", ":"))
        buf.write(f"# greedyrates {self.command} report csv-v{CSV_SCHEMA_VERSION} "
                  f"version={__version__} config={echo}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_fmt(v) for v in row])
        return buf.getvalue()

    def json_text(self) -> str:
        doc = {"command": self.command, "version": __version__, "csv_schema": CSV_SCHEMA_VERSION,
               "config": self.config, "seed": self.config.get("seed"), **self.summary}
        return json.dumps(_clean(doc), sort_keys=True, indent=2) + "\n"

    def write(self, out_dir: str):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
            fh.write(self.csv_text())
        with open(os.path.join(out_dir, "summary.json"), "w") as fh:
            fh.write(self.json_text())


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def _clean(obj):
    """JSON-safe copy: NaN and infinities become null, numpy scalars become Python."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_rate(config: dict, workers: int = 1) -> tuple:
    from .analysis import RateConfig, run_rate_experiment
    cfg = RateConfig.from_dict({**config, "workers": workers})
    report = run_rate_experiment(cfg)
    out = Outputs("rate", config, ["n", "mean_regret", "ci95", "std_error", "lower_bound", "worst_theta"])
    for row in report.rows():
        out.add(*row)
    out.summary = {
        "fitted_exponent": report.fitted_exponent, "fitted_stderr": report.fitted_stderr,
        "theoretical_exponent": report.theoretical_exponent, "boundary_flag": report.boundary_flag,
        "degenerate": report.degenerate, "dropped": list(report.dropped), "adapted": report.adapted,
        "replications": report.replications,
    }
    return out, EXIT_OK


def cmd_audit(config: dict, workers: int = 1) -> tuple:
    from .analysis import (envelope_holder_audit, margin_mass_audit, p_growth_audit,
                           random_stability_audit)
    from .core import RateParams
    from .hard_instances import HardInstance, sample_dgp

    seed = config["seed"]
    x_points = config.get("x_points", 100)
    a_points = config.get("a_points", 100)
    t_points = config.get("t_points", 10_000)
    if min(x_points, a_points, t_points) < 1:
        raise ConfigError("audit lattices must be nonempty")
    scale = config.get("bound_scale", 1.0)
    out = Outputs("audit", config, ["audit", "instance", "trials", "violations"])
    reports = []
    for k, spec in enumerate(config.get("instances", DEFAULT_INSTANCES)):
        params = RateParams(spec.get("gamma", 0.5), spec["p"], spec["q"], spec["m"]).require_strict_growth()
        inst = HardInstance(spec["family"], spec["theta"], params)
        xs = np.append(np.linspace(0.0, 1.0, max(x_points - 1, 1)), 2.0)[:x_points]
        acts = np.linspace(-1.0, 1.0, a_points)
        ts = np.geomspace(1e-8, 10.0, t_points)
        pg = p_growth_audit(inst, xs, acts)
        mm = margin_mass_audit(inst, ts, bound_scale=scale)
        env = envelope_holder_audit(inst, sample_dgp(inst, config.get("envelope_n", 64), seed + k),
                                    config.get("envelope_trials", 10_000), seed + k)
        for rep in (pg, mm, env):
            reports.append((f"{k}", rep))
    trials = config.get("stability_trials", 10_000)
    if trials:
        reports.append(("random", random_stability_audit(trials, seed, bound_scale=scale)))
    total = 0
    details = []
    for label, rep in reports:
        out.add(rep.name, label, rep.trials, len(rep.violations))
        total += len(rep.violations)
        details.extend({"audit": rep.name, "instance": label, **v._asdict()} for v in rep.violations[:20])
    out.summary = {"total_violations": total, "violations": details,
                   "audits": [{"audit": r.name, "instance": lab, "trials": r.trials,
                               "violations": len(r.violations)} for lab, r in reports]}
    return out, EXIT_VIOLATION if total else EXIT_OK


def cmd_lemmas(config: dict, workers: int = 1) -> tuple:
    from .analysis import (generalized_holder_oracle, inverse_moment_oracle, power_sampler,
                           sign_power_audit, truncation_lemma_oracle)

    seed = config["seed"]
    n_mc = config.get("n_mc", 1_000_000)
    trials = config.get("trials", 50)
    rhs_scale = config.get("rhs_scale", 1.0)
    suite = {k: config.get(k, v) for k, v in DEFAULT_LEMMAS.items()}
    out = Outputs("lemmas", config, ["oracle", "case", "trial", "lhs", "rhs", "std_error", "holds"])
    failures = 0

    def emit(name, case, trial, res):
        nonlocal failures
        rhs = rhs_scale * res.rhs
        ok = res.lhs <= rhs + 3.0 * res.std_error
        failures += not ok
        out.add(name, case, trial, res.lhs, rhs, res.std_error, ok)

    for c, spec in enumerate(suite["truncation"]):
        scale = spec.get("scale", 1.0)
        M = scale ** (-1.0 / spec["m"])
        for t in range(trials):
            emit("truncation", c, t, truncation_lemma_oracle(power_sampler(spec["m"], scale), M, spec["m"],
                                                             spec["alpha"], spec["u"], spec["v"], n_mc,
                                                             seed + 1000 * c + t))
    for c, spec in enumerate(suite["inverse_moment"]):
        scale = spec.get("scale", 1.0)
        M = scale ** (-1.0 / spec["m"])
        for t in range(trials):
            emit("inverse_moment", c, t, inverse_moment_oracle(power_sampler(spec["m"], scale), spec["alpha"],
                                                               M, spec["m"], n_mc, seed + 1000 * c + t))
    unif = lambda rng, n: rng.random(n)  # noqa: E731
    for c, spec in enumerate(suite["holder"]):
        for t in range(trials):
            emit("holder", c, t, generalized_holder_oracle(unif, unif, spec["p"], spec["q"], n_mc,
                                                           seed + 1000 * c + t))
    sign_rows = []
    for c, q in enumerate(suite["sign_power"]):
        ratio, const, _ = sign_power_audit(q, n_mc, seed + c)
        bound = rhs_scale * const * (1.0 + 1e-12)
        ok = ratio <= bound
        failures += not ok
        out.add("sign_power", c, 0, ratio, bound, 0.0, ok)
        sign_rows.append({"q": q, "max_ratio": ratio, "constant": const})
    out.summary = {"failures": failures, "sign_power": sign_rows}
    return out, EXIT_VIOLATION if failures else EXIT_OK


def _density(spec: dict):
    from . import or_models
    kind = spec["kind"]
    params = spec.get("params", {})
    if kind == "csv":
        if "path" not in spec:
            raise ConfigError("csv densities need a path")
        return or_models.load_density_csv(spec["path"])
    builders = {"uniform": or_models.uniform_density, "gaussian": or_models.gaussian_density,
                "spike": or_models.spike_density, "fgm": or_models.fgm_density}
    try:
        return builders[kind](**params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {kind} density: {exc}") from None


def cmd_tv(config: dict, workers: int = 1) -> tuple:
    from .or_models import (InventoryModel, density_noise, fit_tv_exponent,
                            tv_action_regularity_audit)

    h_grid = config.get("h_grid", np.geomspace(1e-3, 0.25, 9).tolist())
    min_exp = config.get("min_exponent", 0.25)
    out = Outputs("tv", config, ["density", "h", "tv_norm"])
    fits = []
    for k, spec in enumerate(config["densities"]):
        name = spec.get("name", f"{spec['kind']}-{k}")
        dens = _density(spec)
        fit = fit_tv_exponent(dens, h_grid, min_exponent=min_exp)
        for h, v in zip(fit.h, fit.norms):
            out.add(name, float(h), float(v))
        entry = {"name": name, "ell": fit.ell, "q_bar": fit.q_bar, "regular": fit.regular}
        if config.get("inventory_audit", False) and dens.dim >= 1:
            model = InventoryModel(k=dens.dim, b=(1.0,) * dens.dim, demand=density_noise(dens))
            audit = tv_action_regularity_audit(model, [], [], n_mc=50, seed=config["seed"] + k,
                                               density=dens)
            entry["action_audit_max_ratio"] = audit.max_ratio
        fits.append(entry)
    out.summary = {"fits": fits, "irregular": [f["name"] for f in fits if not f["regular"]]}
    return out, EXIT_OK


COMMANDS = {"rate": cmd_rate, "audit": cmd_audit, "lemmas": cmd_lemmas, "tv": cmd_tv}


def load_config(command: str, path: str, seed_override=None) -> dict:
    try:
        with open(path) as fh:
            config = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(config, dict):
        raise ConfigError("config must be a JSON object")
    if seed_override is not None:
        config["seed"] = seed_override
    try:
        jsonschema.validate(config, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    return config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="greedyrates", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"greedyrates {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", default=".", help="output directory (default: current)")
        p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        config = load_config(args.command, args.config, args.seed)
        out, code = COMMANDS[args.command](config, args.workers)
    except (ConfigError, ContractError, DomainError, DataError) as exc:
        print(f"greedyrates: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"greedyrates: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    out.write(args.out)
    if code == EXIT_VIOLATION:
        print(f"greedyrates: {args.command} found violations; see {args.out}/summary.json", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
