"""
Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
A JSON config file may hold ``registration``, ``simulation``, ``build`` and
``grid`` sections; any field can be overridden by its flag.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .errors import AgeModelError, DataError, NumericalError, StageError
from .fields import GridSpec, ScalarVolume, field_norm
from .io import (list_volumes, load_model, read_ages, read_manifest, read_volume, save_model,
                 write_csv, write_pgm, write_volume)
from .registration import RegistrationParams
from .validation import LabelVolume, SimulationSpec, dice

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

BUILD_DEFAULTS = {"gw_iters": 5, "smoothing_weight": 0.5}
GRID_DEFAULTS = {"dims": [64, 64, 1], "spacing": [1.0, 1.0, 1.0]}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flag(name):
    return "--" + name.replace("_", "-")


def _add_dataclass_flags(parser, cls, group_title):
    group = parser.add_argument_group(group_title)
    for f in dataclasses.fields(cls):
        sequence = f.name in ("iterations_per_level", "aging_amplitude_schedule", "ages")
        kind = int if f.name in ("levels", "affine_iterations", "cohort_size", "timepoints",
                                 "template_iterations", "seed", "iterations_per_level") else float
        group.add_argument(_flag(f.name), dest=f.name, type=kind, nargs="+" if sequence else None,
                           default=None, help=f"override {f.name}")


def _add_build_flags(parser):
    group = parser.add_argument_group("model building")
    group.add_argument("--gw-iters", dest="gw_iters", type=int, default=None)
    group.add_argument("--smoothing-weight", dest="smoothing_weight", type=float, default=None)


def _add_grid_flags(parser):
    group = parser.add_argument_group("grid")
    group.add_argument("--dims", type=int, nargs=3, default=None)
    group.add_argument("--spacing", type=float, nargs=3, default=None)


def _load_config(path):
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise DataError(f"config {path} must hold a JSON object")
    unknown = set(cfg) - {"registration", "simulation", "build", "grid"}
    if unknown:
        raise DataError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _merge(section, args, names):
    out = dict(section)
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            out[name] = value
    return out


def registration_params(cfg, args):
    names = [f.name for f in dataclasses.fields(RegistrationParams)]
    return RegistrationParams.from_dict(_merge(cfg.get("registration", {}), args, names))


def simulation_spec(cfg, args):
    names = [f.name for f in dataclasses.fields(SimulationSpec)]
    return SimulationSpec.from_dict(_merge(cfg.get("simulation", {}), args, names))


def build_settings(cfg, args):
    unknown = set(cfg.get("build", {})) - set(BUILD_DEFAULTS)
    if unknown:
        raise DataError(f"unknown build parameters: {sorted(unknown)}")
    return _merge({**BUILD_DEFAULTS, **cfg.get("build", {})}, args, list(BUILD_DEFAULTS))


def grid_spec(cfg, args):
    g = _merge({**GRID_DEFAULTS, **cfg.get("grid", {})}, args, ["dims", "spacing"])
    try:
        return GridSpec(tuple(g["dims"]), tuple(g["spacing"]))
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid grid: {exc}") from exc


# ---------------------------------------------------------------------------
# commands

def cmd_build(args, cfg):
    from .model import AgeSeries, build_model

    paths = list_volumes(args.series_dir)
    if not paths:
        raise DataError(f"no .mhd volumes in {args.series_dir}")
    ages = read_ages(args.ages_file)
    if len(ages) != len(paths):
        raise DataError(f"{len(paths)} volumes but {len(ages)} ages")
    templates = [read_volume(p) for p in paths]
    for p, t in zip(paths, templates):
        if not isinstance(t, ScalarVolume):
            raise DataError(f"{p} is not a scalar volume")
    reg = registration_params(cfg, args)
    settings = build_settings(cfg, args)
    series = AgeSeries(templates, ages)
    model = build_model(series, reg, settings["gw_iters"], settings["smoothing_weight"],
                        metadata={"inputs": [Path(p).name for p in paths]})
    save_model(model, args.output)
    print(f"model written to {args.output} (reference index {model.m_index}, "
          f"age {model.m_age:g})")


def cmd_synthesize(args, cfg):
    from .model import synthesize

    model = load_model(args.model_dir)
    img = synthesize(model, args.age)
    write_volume(img, args.output)
    if args.slice:
        write_pgm(img, args.slice)
    print(f"synthesized age {args.age:g} -> {args.output}")


def cmd_simulate(args, cfg):
    from .validation import simulate_longitudinal

    spec = simulation_spec(cfg, args)
    grid = grid_spec(cfg, args)
    reg = registration_params(cfg, args)
    series, truth = simulate_longitudinal(spec, grid, reg)
    out = Path(args.output)
    (out / "templates").mkdir(parents=True, exist_ok=True)
    (out / "ground_truth").mkdir(parents=True, exist_ok=True)
    width = len(str(len(series) - 1))
    for i, (t, g) in enumerate(zip(series.templates, truth)):
        write_volume(t, out / "templates" / f"T_{i:0{width}d}.mhd")
        write_volume(g, out / "ground_truth" / f"GT_{i:0{width}d}.mhd")
    (out / "ages.txt").write_text("".join(f"{a!r}\n" for a in series.ages))
    config = {"simulation": spec.to_dict(), "registration": reg.to_dict(),
              "grid": {"dims": list(grid.dims), "spacing": list(grid.spacing)}}
    (out / "simulation.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    print(f"simulated {len(series)} templates into {out}")


def cmd_validate(args, cfg):
    from .plotting import plot_series
    from .validation import mse_trend, topology_sweep

    model = load_model(args.model_dir)
    out = Path(args.output)
    if out.resolve() == Path(args.model_dir).resolve():
        raise DataError("the report directory must differ from the model directory")
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = model.ages[0], model.ages[-1]
    pad = args.extend * (hi - lo)
    ts_ext = np.linspace(lo - pad, hi + pad, args.samples)

    sweep = topology_sweep(model, lo - pad, hi + pad, args.samples)
    write_csv(out / "topology.csv", ["t", "min_jacobian"], sweep)
    ts_in = np.linspace(lo, hi, args.samples)
    trend = mse_trend(model, list(ts_in))
    write_csv(out / "mse_trend.csv", ["t", "value"], zip(ts_in, trend))
    gam = model.gamma(ts_ext)
    write_csv(out / "gamma.csv", ["t", "value"], zip(ts_ext, gam))

    plot_series(out / "topology.png", [t for t, _ in sweep], [d for _, d in sweep],
                "min interior Jacobian determinant", "topology sweep", model.ages, hline=0.0)
    plot_series(out / "mse_trend.png", ts_in, trend, "MSE vs first age", "aging trend",
                model.ages)
    plot_series(out / "gamma.png", ts_ext, gam, "gamma", "temporal curve", model.ages)
    worst = min(d for _, d in sweep)
    print(f"report written to {out}; min Jacobian determinant {worst:.4g}")


def cmd_dice(args, cfg):
    a, b = read_volume(args.a), read_volume(args.b)
    for name, v in ((args.a, a), (args.b, b)):
        if not isinstance(v, LabelVolume):
            raise DataError(f"{name} is not a label volume")
    labels = args.labels or sorted(set(a.present()) | set(b.present()))
    print("label,dice")
    for lab in labels:
        print(f"{lab},{dice(a, b, lab)!r}")


def cmd_info(args, cfg):
    manifest = read_manifest(args.model_dir)
    model = load_model(args.model_dir)
    print(f"format_version: {manifest['format_version']}")
    print(f"tool_version: {manifest.get('tool_version')}")
    print(f"grid: dims={list(model.G.grid.dims)} spacing={list(model.G.grid.spacing)}")
    print(f"ages: {' '.join(f'{a:g}' for a in model.ages)}")
    print(f"reference: index {model.m_index}, age {model.m_age:g}")
    print(f"forward field norm: {field_norm(model.v_f_transported):.6g} mm")
    print(f"backward field norm: {field_norm(model.v_b_transported):.6g} mm")
    print(f"gamma at ends: {model.gamma(model.ages[0]):.4f} {model.gamma(model.ages[-1]):.4f}")
    if model.gamma.ramp:
        print(f"linear-ramp directions: {' '.join(model.gamma.ramp)}")


def make_parser():
    parser = _Parser(prog="agemodel", description="Diffeomorphic aging model from "
                     "age-specific templates.")
    parser.add_argument("--config", help="JSON config file")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build", help="build a model from an age series")
    p.add_argument("series_dir", help="directory of .mhd templates, sorted by name = by age")
    p.add_argument("ages_file", help="text file with one age per line")
    p.add_argument("-o", "--output", required=True, help="model directory")
    _add_dataclass_flags(p, RegistrationParams, "registration")
    _add_build_flags(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("synthesize", help="synthesize the template at an age")
    p.add_argument("model_dir")
    p.add_argument("--age", type=float, required=True)
    p.add_argument("-o", "--output", required=True, help="output .mhd path")
    p.add_argument("--slice", help="also export the middle slice as a PGM image")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("simulate", help="simulate a phantom age series")
    p.add_argument("-o", "--output", required=True, help="output directory")
    _add_dataclass_flags(p, SimulationSpec, "simulation")
    _add_dataclass_flags(p, RegistrationParams, "registration")
    _add_grid_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("validate", help="topology sweep, aging trend and gamma report")
    p.add_argument("model_dir")
    p.add_argument("-o", "--output", required=True, help="report directory")
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--extend", type=float, default=0.2,
                   help="fraction of the age span added on both sides for the sweep")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("dice", help="Dice overlap of two label volumes")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--labels", type=int, nargs="+")
    p.set_defaults(func=cmd_dice)

    p = sub.add_parser("info", help="summarise a saved model")
    p.add_argument("model_dir")
    p.set_defaults(func=cmd_info)
    return parser


def _exit_code(exc):
    if isinstance(exc, StageError):
        exc = exc.cause
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_DATA


def main(argv=None):
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "samples", 2) < 2:
            raise UsageError("--samples must be at least 2")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = _load_config(args.config)
        args.func(args, cfg)
    except (AgeModelError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except (TypeError, ValueError) as exc:
        # malformed parameter values from the config or flags
        print(f"error: invalid parameter: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
