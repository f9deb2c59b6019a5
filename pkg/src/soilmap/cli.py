"""Command-line entry point: ``soilmap run | estimate | index``.

Exit codes: 0 success, 1 invalid scenario or input data, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .errors import NoContact, ScenarioError, SoilMapError
from .estimator import EstimatorConfig, MeasurementWindow, fit_soil_properties, format_estimate
from .fee import PARAM_NAMES
from .fusion import fee_index_layer
from .gridmap import MEAN_LAYERS, GridMap, load_binary, load_layer_csv, save_layer_csv
from .sim import FEE_INDEX, export_run, load_scenario, run_scenario

EXIT_OK, EXIT_INPUT, EXIT_IO = 0, 1, 2

log = logging.getLogger("soilmap")


def _cmd_run(args) -> int:
    sc = load_scenario(args.scenario)
    if args.seed is not None:
        sc.seed = args.seed
    report = run_scenario(sc)
    written = export_run(report, args.out, args.export)
    ok = sum(1 for s in report.sweeps if s.estimate is not None)
    sweep_ms = 1e3 * float(np.median(report.timings["sweep"])) if report.timings["sweep"] else 0.0
    print(f"{len(report.sweeps)} sweeps ({ok} with estimates), {len(written)} files in {args.out}")
    print(f"volume change {report.volume['change']:.6g} m^3, median sweep {sweep_ms:.1f} ms",
          file=sys.stderr)
    return EXIT_OK


def _load_config(path) -> EstimatorConfig:
    if path is None:
        return EstimatorConfig()
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ScenarioError("estimator config must be a mapping")
    return EstimatorConfig.from_dict(data.get("estimator", data))


def _cmd_estimate(args) -> int:
    cfg = _load_config(args.config)
    window = MeasurementWindow.from_csv(args.window)
    try:
        est = fit_soil_properties(window, cfg)
    except NoContact as exc:
        print(f"no contact: {exc}; reporting the prior", file=sys.stderr)
        est = exc.estimate
    if args.json:
        print(json.dumps({"theta": dict(zip(PARAM_NAMES, est.theta.as_array().tolist())),
                          "std": dict(zip(PARAM_NAMES, est.std.tolist()))}, indent=1))
    else:
        print(format_estimate(est))
    return EXIT_OK


def _load_map(path: Path) -> GridMap:
    if path.is_dir():
        layers = {name: load_layer_csv(path / f"{name}.csv") for name in MEAN_LAYERS}
        nx, ny = layers[MEAN_LAYERS[0]].shape
        g, origin = 1.0, (0.0, 0.0)
        report = path / "report.json"
        if report.exists():
            grid = json.loads(report.read_text()).get("grid", {})
            g, origin = float(grid.get("g", g)), tuple(grid.get("origin", origin))
        return GridMap(nx, ny, g, origin, layers)
    return load_binary(path)


def _cmd_index(args) -> int:
    path = Path(args.mapfile)
    if not path.exists():
        raise FileNotFoundError(f"{path} does not exist")
    m = _load_map(path)
    missing = [k for k in MEAN_LAYERS if k not in m.layers]
    if missing:
        raise ScenarioError(f"map lacks property layers {missing}")
    m.layers[FEE_INDEX] = fee_index_layer(m)
    if args.out is not None:
        out = Path(args.out)
    elif path.is_dir():
        out = path / f"{FEE_INDEX}.csv"
    else:
        out = path.with_suffix(f".{FEE_INDEX}.csv")
    save_layer_csv(m, FEE_INDEX, out)
    idx = m.layers[FEE_INDEX]
    finite = idx[np.isfinite(idx)]
    if finite.size:
        print(f"fee index min {finite.min():.6g} mean {finite.mean():.6g} max {finite.max():.6g} N -> {out}")
    else:
        print(f"fee index undefined everywhere -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="soilmap", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario file and export the map")
    run.add_argument("scenario")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--export", choices=("csv", "bin", "pgm"), default="csv")
    run.set_defaults(func=_cmd_run)

    est = sub.add_parser("estimate", help="fit soil properties to a logged force window")
    est.add_argument("window", help="CSV with columns t,alpha,rho,w,d,Q,Fx,Fz")
    est.add_argument("--config", default=None, help="YAML estimator settings")
    est.add_argument("--json", action="store_true", help="print JSON instead of text")
    est.set_defaults(func=_cmd_estimate)

    idx = sub.add_parser("index", help="recompute the FEE index from stored property layers")
    idx.add_argument("mapfile", help="binary map file or directory of CSV layers")
    idx.add_argument("--out", default=None, help="output CSV path")
    idx.set_defaults(func=_cmd_index)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SoilMapError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
