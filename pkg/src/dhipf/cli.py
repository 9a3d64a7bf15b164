"""Command-line entry point.

    dhipf run case1 --seed 42 --out results
    dhipf run custom --config exp.json
    dhipf spec case3 > exp.json

Exit codes: 0 success, 1 a filter failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .experiments import (
    DOUBLEWELL_CASES,
    MODELS,
    ConfigError,
    ExperimentSpec,
    doublewell_case,
    gap_sweep,
    lorenz_switch,
    lorenz_track,
    run_experiment,
    write_results,
)
from .filters import FilterConfig
from .models import NOISE_SCALINGS

EXPERIMENTS = ("case1", "case2", "case3", "lorenz-track", "lorenz-switch", "gap-sweep", "custom")
WEIGHT_MODE_FLAGS = {"jacobian": "jacobian", "paper": "paper_literal", "paper_literal": "paper_literal"}

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


@dataclass
class CliConfig:
    command: str
    experiment: Optional[str] = None
    config: Optional[str] = None
    out: str = "results"
    seed: Optional[int] = None
    filters: Optional[list] = None
    particles: Optional[int] = None
    levels: Optional[int] = None
    weight_mode: Optional[str] = None
    noise_scaling: Optional[str] = None
    repeats: Optional[int] = None
    quiet: bool = False


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer seed, got {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dhipf", description="Nonlinear filtering benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a built-in or custom experiment")
    run.add_argument("experiment", choices=EXPERIMENTS)
    run.add_argument("--config", help="JSON experiment file (required for 'custom')")
    run.add_argument("--out", default="results", help="output directory (default: results)")
    run.add_argument("--seed", type=_seed)
    run.add_argument("--filters", help="comma-separated filter names or kinds")
    run.add_argument("--particles", type=_positive_int, help="particles per particle filter")
    run.add_argument("--levels", type=_positive_int, help="homotopy levels L")
    run.add_argument("--weight-mode", choices=("jacobian", "paper"))
    run.add_argument("--noise-scaling", choices=NOISE_SCALINGS)
    run.add_argument("--repeats", type=_positive_int)
    run.add_argument("--quiet", action="store_true", help="suppress the summary table")
    run.add_argument("-v", "--verbose", action="store_true", help="log per-run progress")

    show = sub.add_parser("spec", help="print the JSON spec of a built-in experiment")
    show.add_argument("experiment", choices=EXPERIMENTS[:-1])
    return parser


def parse_args(argv=None) -> CliConfig:
    """Parse ``argv``; usage errors exit with status 2."""
    ns = build_parser().parse_args(argv)
    if ns.command == "spec":
        return CliConfig("spec", ns.experiment)
    if ns.experiment == "custom" and not ns.config:
        build_parser().error("'run custom' requires --config")
    if ns.experiment != "custom" and ns.config:
        build_parser().error("--config is only valid with 'run custom'")
    filters = None
    if ns.filters is not None:
        filters = [f.strip() for f in ns.filters.split(",") if f.strip()]
        if not filters:
            build_parser().error("--filters needs at least one name")
    if ns.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    return CliConfig(
        command="run",
        experiment=ns.experiment,
        config=ns.config,
        out=ns.out,
        seed=ns.seed,
        filters=filters,
        particles=ns.particles,
        levels=ns.levels,
        weight_mode=WEIGHT_MODE_FLAGS[ns.weight_mode] if ns.weight_mode else None,
        noise_scaling=ns.noise_scaling,
        repeats=ns.repeats,
        quiet=ns.quiet,
    )


# -- spec files -------------------------------------------------------------------

_SPEC_KEYS = {"name", "model", "case", "model_params", "x0", "n_steps", "gap", "seed", "switch_at",
              "repeats", "filters"}
_FILTER_KEYS = {f.name for f in dataclasses.fields(FilterConfig)}

_MODEL_DEFAULTS = {
    "doublewell": dict(model_params=dict(DOUBLEWELL_CASES[1], dt=0.01), x0=[0.6], n_steps=300),
    "lorenz63": dict(model_params=dict(sigma=1.0, R=1.0, dt=0.01), x0=[1.0, 1.0, 1.0], n_steps=4000),
    "linear": dict(model_params=dict(a=0.9, sigma=1.0, R=1.0, dt=1.0), x0=[0.0], n_steps=100),
}


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(f"{key}: {message}")


def _filter_from_dict(entry, key: str) -> FilterConfig:
    if isinstance(entry, str):
        entry = {"kind": entry}
    _check(isinstance(entry, dict), key, "expected an object or a filter kind")
    for k in entry:
        _check(k in _FILTER_KEYS, f"{key}.{k}", "unknown key")
    _check("kind" in entry, f"{key}.kind", "missing")
    merged = dict(entry)
    kind = merged["kind"]
    _check(isinstance(kind, str), f"{key}.kind", "expected a string")
    # integers first so a float in an integer slot is reported by name
    for k in ("n_particles", "enkf_ensemble", "levels", "mcmc_steps", "max_iter", "seed"):
        if merged.get(k) is not None:
            _check(_is_int(merged[k]), f"{key}.{k}", "expected an integer")
    for k in ("mcmc_step_size", "grad_tol"):
        if merged.get(k) is not None:
            _check(_is_number(merged[k]), f"{key}.{k}", "expected a number")
    if merged.get("betas") is not None:
        b = merged["betas"]
        _check(isinstance(b, list) and all(_is_number(v) for v in b), f"{key}.betas", "expected a list of numbers")
    try:
        return FilterConfig(**merged)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def spec_from_dict(data: dict) -> ExperimentSpec:
    """Validate a decoded JSON object and fill defaults."""
    _check(isinstance(data, dict), "<root>", "expected a JSON object")
    for k in data:
        _check(k in _SPEC_KEYS, k, "unknown key")
    model = data.get("model", "doublewell")
    _check(model in MODELS, "model", f"expected one of {MODELS}")

    if "case" in data:
        _check(model == "doublewell", "case", "only valid with model 'doublewell'")
        case = data["case"]
        _check(_is_int(case) and case in DOUBLEWELL_CASES, "case", "expected 1, 2 or 3")
        base = doublewell_case(case).to_dict()
    else:
        base = dict(_MODEL_DEFAULTS[model], name=model, model=model, gap=1, seed=0, switch_at=None,
                    repeats=1, filters=None)
    base["model_params"] = dict(base["model_params"])

    params = data.get("model_params", {})
    _check(isinstance(params, dict), "model_params", "expected an object")
    for k, v in params.items():
        if k == "noise_scaling":
            _check(v in NOISE_SCALINGS, f"model_params.{k}", f"expected one of {NOISE_SCALINGS}")
        else:
            _check(_is_number(v), f"model_params.{k}", "expected a number")
    base["model_params"].update(params)

    for k in ("n_steps", "gap", "seed", "repeats"):
        if k in data:
            _check(_is_int(data[k]), k, "expected an integer")
            base[k] = data[k]
    if "seed" in data:
        _check(0 <= data["seed"] < 2**64, "seed", "must be an unsigned 64-bit integer")
    if "switch_at" in data:
        _check(data["switch_at"] is None or _is_int(data["switch_at"]), "switch_at", "expected an integer or null")
        base["switch_at"] = data["switch_at"]
    if "x0" in data:
        x0 = data["x0"]
        if _is_number(x0):
            x0 = [x0]
        _check(isinstance(x0, list) and all(_is_number(v) for v in x0), "x0", "expected a list of numbers")
        base["x0"] = [float(v) for v in x0]
    if "name" in data:
        _check(isinstance(data["name"], str) and data["name"], "name", "expected a nonempty string")
        base["name"] = data["name"]

    entries = data.get("filters", base["filters"])
    if entries is None:
        entries = default_filters(model)
    _check(isinstance(entries, list) and entries, "filters", "expected a nonempty list")
    filters = [_filter_from_dict(e, f"filters[{i}]") for i, e in enumerate(entries)]
    return ExperimentSpec(
        name=base["name"], model=model, model_params=base["model_params"], x0=base["x0"],
        n_steps=base["n_steps"], filters=filters, gap=base["gap"], seed=base["seed"],
        switch_at=base["switch_at"], repeats=base["repeats"],
    )


def default_filters(model: str) -> list:
    if model == "lorenz63":
        return [{"kind": "ipf", "n_particles": 10}, {"kind": "dhipf", "n_particles": 10}]
    return [{"kind": k} for k in ("bootstrap", "apf", "enkf", "ipf", "dhpf", "dhipf")]


def load_spec(path) -> ExperimentSpec:
    """Read and validate a JSON experiment file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return spec_from_dict(data)


def dump_spec(spec: ExperimentSpec) -> str:
    return json.dumps(spec.to_dict(), indent=2)


# -- running ----------------------------------------------------------------------


def builtin_specs(name: str, seed: Optional[int] = None) -> list:
    kw = {} if seed is None else {"seed": seed}
    if name in ("case1", "case2", "case3"):
        return [doublewell_case(int(name[-1]), **kw)]
    if name == "lorenz-track":
        return [lorenz_track(**kw)]
    if name == "lorenz-switch":
        return [lorenz_switch(**kw)]
    if name == "gap-sweep":
        return gap_sweep(**kw)
    raise ConfigError(f"experiment: unknown built-in {name!r}")


def apply_overrides(spec: ExperimentSpec, cfg: CliConfig) -> ExperimentSpec:
    """Apply command-line overrides and re-validate."""
    data = spec.to_dict()
    if cfg.seed is not None:
        data["seed"] = cfg.seed
    if cfg.repeats is not None:
        data["repeats"] = cfg.repeats
    if cfg.noise_scaling is not None:
        _check(spec.model != "linear", "noise_scaling", "the linear model fixes its own scaling")
        data["model_params"]["noise_scaling"] = cfg.noise_scaling
    filters = data["filters"]
    if cfg.filters is not None:
        names = [FilterConfig(**f).name for f in filters]
        keep = [f for f, n in zip(filters, names) if n in cfg.filters or f["kind"] in cfg.filters]
        unknown = [w for w in cfg.filters if w not in names and w not in {f["kind"] for f in filters}]
        _check(not unknown, "filters", f"not in this experiment: {', '.join(unknown)}")
        filters = keep
    for f in filters:
        if cfg.particles is not None and f["kind"] != "enkf":
            f["n_particles"] = cfg.particles
        if cfg.levels is not None and f["kind"] in ("dhpf", "dhipf"):
            f["levels"] = cfg.levels
            f["betas"] = None
        if cfg.weight_mode is not None:
            f["weight_mode"] = cfg.weight_mode
    # overriding L can make two homotopy filters identical; keep the first
    seen, unique = set(), []
    for f in filters:
        key = json.dumps({k: v for k, v in f.items() if k != "label"}, sort_keys=True)
        if key not in seen:
            seen.add(key)
            unique.append(f)
    data["filters"] = unique
    return spec_from_dict(data)


def run(cfg: CliConfig) -> int:
    if cfg.experiment == "custom":
        specs = [load_spec(cfg.config)]
    else:
        specs = builtin_specs(cfg.experiment)
    specs = [apply_overrides(s, cfg) for s in specs]

    results = []
    for spec in specs:
        results += run_experiment(spec)
    out = Path(cfg.out)
    try:
        rep = write_results(results, out)
        (out / "spec.json").write_text(json.dumps([s.to_dict() for s in specs], indent=2) + "\n")
    except OSError as exc:
        print(f"dhipf: cannot write to {out}: {exc.strerror}", file=sys.stderr)
        return EXIT_USAGE
    if not cfg.quiet:
        print(rep.format_table())
        print(f"\nwrote {out}/results.csv, trajectories.csv, errors.csv, summary.csv")
    for r in results:
        if r.failed:
            print(f"dhipf: {r.experiment}/{r.filter} repeat {r.repeat} failed: {r.error}", file=sys.stderr)
    return EXIT_FAILED if rep.failed else EXIT_OK


def main(argv=None) -> int:
    cfg = parse_args(argv)
    try:
        if cfg.command == "spec":
            specs = builtin_specs(cfg.experiment)
            if len(specs) == 1:
                print(dump_spec(specs[0]))
            else:
                print(json.dumps([s.to_dict() for s in specs], indent=2))
            return EXIT_OK
        return run(cfg)
    except ConfigError as exc:
        print(f"dhipf: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
