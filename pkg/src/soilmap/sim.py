"""Scenario runner: synthetic terrain, scripted pushes and the per-sweep pipeline.

A scenario file is YAML with these top-level keys (all angles in radians,
lengths in metres)::

    seed: 0
    map: {nx, ny, g, origin, sigma0, prior: {c, phi, c_a, delta, gamma},
          prior_var: {c, phi, c_a, delta, gamma}}
    terrain: {base, bumps: [{center: [x, y], amplitude, std}],
              random_bumps: {count, amplitude: [lo, hi], std: [lo, hi]}}
    regions: [{name, rect: [xmin, ymin, xmax, ymax], soil: {...}}]
    pushes: [{start: [x, y], heading, length, steps, depth: [d0, d1, ...],
              rake, yaw}]
    blade: {width, height}
    noise_std: 0.0
    loose: {gamma_l, c_l, phi_l, swell}
    erosion: {dt, iterations, D_ROI}
    estimator: {bounds: {name: [lo, hi]}, sigma_ambiguity: {...}, ...}
    pipeline: {horizon, min_steps, trans_min, rot_min, c_x, c_d, c_s, x_min,
               lambda_n, sigma_sv}

The first region is the default and must cover the whole raster; later
regions override earlier ones.  ``depth`` is the blade-edge depth below the
initial terrain, interpolated linearly along the push.
"""

from __future__ import annotations

import json
import logging
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from .deform import DEFAULT_LAMBDA_N, DEFAULT_SWELL, cut_and_deposit
from .erosion import ErosionParams, erode_roi
from .errors import (DegenerateGeometry, DegenerateSweep, NoContact, NonFinite,
                     NoStationaryPoint, NoValidSlices, ScenarioError, SingularCovariance)
from .estimator import EstimatorConfig, MeasurementWindow, fit_soil_properties_full, nll_report
from .fee import PARAM_NAMES, CutGeometry, SoilProperties, beta_or_nominal, fee_force, solve_beta
from .fusion import DEFAULT_C_S, DEFAULT_X_MIN, fee_index_layer, update_soil_layers
from .gridmap import GridMap, new_map, save_binary, save_csv_dir, save_pgm, total_volume
from .sweep import (DEFAULT_C_D, DEFAULT_C_X, BladePose, blade_pose_from_edge, check_movement,
                    extract_fee_params, generate_swept_volume, interpolate_fee_params,
                    intersect_heightmap)

log = logging.getLogger(__name__)

FEE_INDEX = "fee_index"


# ---------------------------------------------------------------------------
# Scenario description
# ---------------------------------------------------------------------------

@dataclass
class Bump:
    center: tuple
    amplitude: float
    std: float


@dataclass
class TerrainSpec:
    base: float = 0.0
    bumps: List[Bump] = field(default_factory=list)
    random_count: int = 0
    random_amplitude: tuple = (-0.2, 0.2)
    random_std: tuple = (0.5, 2.0)


@dataclass
class Region:
    name: str
    rect: tuple  # (xmin, ymin, xmax, ymax)
    soil: SoilProperties

    def contains(self, x: float, y: float) -> bool:
        return self.rect[0] <= x <= self.rect[2] and self.rect[1] <= y <= self.rect[3]


@dataclass
class Push:
    start: tuple
    heading: float
    length: float
    steps: int = 50
    depth: tuple = (0.1,)
    rake: float = math.pi / 2
    yaw: float = 0.0


@dataclass
class PipelineConfig:
    horizon: int = 20
    min_steps: int = 3
    trans_min: Optional[float] = None  # defaults to g/2
    rot_min: float = math.radians(2.0)
    c_x: float = DEFAULT_C_X
    c_d: float = DEFAULT_C_D
    c_s: float = DEFAULT_C_S
    x_min: float = DEFAULT_X_MIN
    lambda_n: float = DEFAULT_LAMBDA_N
    sigma_sv: float = 0.0


@dataclass
class Scenario:
    nx: int = 200
    ny: int = 200
    g: float = 0.1
    origin: tuple = (0.0, 0.0)
    sigma0: float = 0.0
    prior: SoilProperties = field(default_factory=lambda: SoilProperties(
        c=1e4, phi=math.radians(30.0), c_a=2e3, delta=math.radians(15.0), gamma=1.6e4))
    prior_var: np.ndarray = field(default_factory=lambda: np.array(
        [2e4 ** 2, math.radians(15.0) ** 2, 5e3 ** 2, math.radians(12.0) ** 2, 6e3 ** 2]))
    terrain: TerrainSpec = field(default_factory=TerrainSpec)
    regions: List[Region] = field(default_factory=list)
    pushes: List[Push] = field(default_factory=list)
    blade_width: float = 1.85
    blade_height: float = 0.6
    noise_std: float = 0.0
    gamma_l: float = 1.5e4
    swell: float = DEFAULT_SWELL
    erosion: ErosionParams = field(default_factory=ErosionParams)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    seed: int = 0

    def validate(self) -> None:
        if self.nx <= 0 or self.ny <= 0 or not self.g > 0:
            raise ScenarioError("map needs positive nx, ny and g")
        if not self.regions:
            raise ScenarioError("at least one (default) soil region is required")
        x0, y0 = self.origin
        x1, y1 = x0 + (self.nx - 1) * self.g, y0 + (self.ny - 1) * self.g
        r = self.regions[0].rect
        if not (r[0] <= x0 and r[1] <= y0 and r[2] >= x1 and r[3] >= y1):
            raise ScenarioError("the first soil region must cover the whole raster")
        for p in self.pushes:
            if p.steps < 2:
                raise ScenarioError("each push needs at least two steps")
            if not p.depth:
                raise ScenarioError("each push needs a depth profile")
        if self.swell < 1.0:
            raise ScenarioError("swell ratio must be >= 1")
        if self.noise_std < 0:
            raise ScenarioError("noise_std must be non-negative")

    def soil_at(self, x: float, y: float) -> SoilProperties:
        """True soil at a world point; the last region containing it wins."""
        soil = self.regions[0].soil
        for reg in self.regions[1:]:
            if reg.contains(x, y):
                soil = reg.soil
        return soil


def _soil(d: dict, where: str) -> SoilProperties:
    try:
        return SoilProperties(**{k: float(d[k]) for k in PARAM_NAMES})
    except KeyError as exc:
        raise ScenarioError(f"{where}: missing soil property {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{where}: {exc}") from None


def scenario_from_dict(data: dict) -> Scenario:
    """Build and validate a :class:`Scenario` from parsed YAML."""
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a mapping")
    try:
        sc = Scenario(seed=int(data.get("seed", 0)))
        mp = data.get("map", {})
        sc.nx, sc.ny = int(mp.get("nx", sc.nx)), int(mp.get("ny", sc.ny))
        sc.g = float(mp.get("g", sc.g))
        sc.origin = tuple(float(v) for v in mp.get("origin", sc.origin))
        sc.sigma0 = float(mp.get("sigma0", sc.sigma0))
        if "prior" in mp:
            sc.prior = _soil(mp["prior"], "map.prior")
        if "prior_var" in mp:
            sc.prior_var = np.array([float(mp["prior_var"][k]) for k in PARAM_NAMES])
        tr = data.get("terrain", {})
        rb = tr.get("random_bumps", {})
        sc.terrain = TerrainSpec(
            base=float(tr.get("base", 0.0)),
            bumps=[Bump(tuple(map(float, b["center"])), float(b["amplitude"]), float(b["std"]))
                   for b in tr.get("bumps", [])],
            random_count=int(rb.get("count", 0)),
            random_amplitude=tuple(map(float, rb.get("amplitude", (-0.2, 0.2)))),
            random_std=tuple(map(float, rb.get("std", (0.5, 2.0)))))
        sc.regions = [Region(str(r.get("name", f"region{k}")),
                             tuple(map(float, r.get("rect", (-math.inf, -math.inf, math.inf, math.inf)))),
                             _soil(r["soil"], f"regions[{k}]"))
                      for k, r in enumerate(data.get("regions", []))]
        sc.pushes = [Push(start=tuple(map(float, p["start"])), heading=float(p.get("heading", 0.0)),
                          length=float(p["length"]), steps=int(p.get("steps", 50)),
                          depth=tuple(map(float, np.atleast_1d(p.get("depth", 0.1)))),
                          rake=float(p.get("rake", math.pi / 2)), yaw=float(p.get("yaw", 0.0)))
                     for p in data.get("pushes", [])]
        bl = data.get("blade", {})
        sc.blade_width = float(bl.get("width", sc.blade_width))
        sc.blade_height = float(bl.get("height", sc.blade_height))
        sc.noise_std = float(data.get("noise_std", 0.0))
        lo = data.get("loose", {})
        sc.gamma_l = float(lo.get("gamma_l", sc.gamma_l))
        sc.swell = float(lo.get("swell", sc.swell))
        er = dict(data.get("erosion", {}))
        er.setdefault("gamma_l", sc.gamma_l)
        for key in ("c_l", "phi_l"):
            if key in lo:
                er.setdefault(key, lo[key])
        sc.erosion = ErosionParams(**er)
        sc.estimator = EstimatorConfig.from_dict(data.get("estimator", {}))
        sc.pipeline = PipelineConfig(**data.get("pipeline", {}))
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"invalid scenario: {exc!r}") from None
    sc.validate()
    return sc


def load_scenario(path) -> Scenario:
    """Parse a YAML scenario file.  I/O problems raise ``OSError``."""
    with open(path) as fh:
        text = fh.read()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    return scenario_from_dict(data or {})


# ---------------------------------------------------------------------------
# Terrain and ground truth
# ---------------------------------------------------------------------------

def generate_terrain(m: GridMap, spec: TerrainSpec, seed: int = 0) -> List[Bump]:
    """Base height plus a sum of Gaussian bumps; returns the bumps used.

    ``spec.random_count`` extra bumps are drawn uniformly over the raster with
    a generator seeded by ``seed``.
    """
    bumps = list(spec.bumps)
    if spec.random_count > 0:
        rng = np.random.default_rng(seed)
        x_hi = m.origin[0] + (m.nx - 1) * m.g
        y_hi = m.origin[1] + (m.ny - 1) * m.g
        for _ in range(spec.random_count):
            bumps.append(Bump((float(rng.uniform(m.origin[0], x_hi)), float(rng.uniform(m.origin[1], y_hi))),
                              float(rng.uniform(*spec.random_amplitude)),
                              float(rng.uniform(*spec.random_std))))
    xs, ys = m.cell_center(np.arange(m.nx), np.arange(m.ny))
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    H = np.full(m.shape, float(spec.base))
    for b in bumps:
        H += b.amplitude * np.exp(-((X - b.center[0]) ** 2 + (Y - b.center[1]) ** 2) / (2.0 * b.std ** 2))
    m.layers["elevation"][...] = H
    return bumps


def sample_height(H: np.ndarray, m: GridMap, x: float, y: float) -> float:
    """Bilinear height between cell centers, clamped to the raster."""
    fx = min(max((x - m.origin[0]) / m.g, 0.0), m.nx - 1.0)
    fy = min(max((y - m.origin[1]) / m.g, 0.0), m.ny - 1.0)
    i0, j0 = min(int(fx), m.nx - 2) if m.nx > 1 else 0, min(int(fy), m.ny - 2) if m.ny > 1 else 0
    i1, j1 = min(i0 + 1, m.nx - 1), min(j0 + 1, m.ny - 1)
    tx, ty = fx - i0, fy - j0
    return float((1 - tx) * (1 - ty) * H[i0, j0] + tx * (1 - ty) * H[i1, j0]
                 + (1 - tx) * ty * H[i0, j1] + tx * ty * H[i1, j1])


def synth_forces(geoms: Sequence[CutGeometry], soils: Sequence[SoilProperties], noise_std: float,
                 rng: np.random.Generator):
    """Ground-truth blade forces ``(P, 2)`` plus a mask of usable steps.

    Each step uses its own true soil with the failure angle from
    :func:`solve_beta`.  Steps whose geometry degenerates are flagged
    ``False`` and carry NaN.  Noise is drawn for every step so that the
    random stream does not depend on which steps fail.
    """
    P = len(geoms)
    F = np.full((P, 2), np.nan)
    ok = np.zeros(P, dtype=bool)
    noise = rng.normal(0.0, noise_std, (P, 2)) if noise_std > 0 else np.zeros((P, 2))
    for k, (geom, soil) in enumerate(zip(geoms, soils)):
        try:
            beta = solve_beta(soil, geom)
            F[k] = fee_force(soil, geom.with_beta(beta))
        except (DegenerateGeometry, NoStationaryPoint):
            continue
        ok[k] = True
    return F + noise, ok


def push_poses(push: Push, H0: np.ndarray, m: GridMap, half_width: float, height: float) -> List[BladePose]:
    """Blade poses along a straight push, edge depth measured from ``H0``."""
    direction = np.array([math.cos(push.heading), math.sin(push.heading)])
    profile = np.asarray(push.depth, dtype=float)
    knots = np.linspace(0.0, 1.0, profile.size) if profile.size > 1 else np.array([0.0])
    poses = []
    for k in range(push.steps):
        f = k / (push.steps - 1)
        xy = np.asarray(push.start, dtype=float) + f * push.length * direction
        depth = float(np.interp(f, knots, profile)) if profile.size > 1 else float(profile[0])
        z = sample_height(H0, m, xy[0], xy[1]) - depth
        poses.append(blade_pose_from_edge([xy[0], xy[1], z], push.heading, push.rake, push.yaw,
                                          half_width, height))
    return poses


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

@dataclass
class SweepRecord:
    index: int
    push: int
    step: int
    status: str
    cut_cells: int = 0
    extracted: Optional[dict] = None
    metrics: Optional[dict] = None
    dVQ: float = 0.0
    new_disturbed: float = 0.0
    window_steps: int = 0
    estimate: Optional[dict] = None
    nll: Optional[float] = None
    fused_cells: int = 0
    slips: int = 0
    error: Optional[str] = None


@dataclass
class RunReport:
    sweeps: List[SweepRecord]
    volume: dict
    map: GridMap
    fusion_pushes: np.ndarray  # (nx, ny) number of distinct pushes that fused each cell
    fusion_count: np.ndarray  # (nx, ny) total fusions per cell
    timings: Dict[str, List[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        """Deterministic summary; wall-clock timings are left out on purpose."""
        return {"sweeps": [asdict(s) for s in self.sweeps], "volume": self.volume,
                "updated_cells": int(np.count_nonzero(self.fusion_count)),
                "grid": {"nx": self.map.nx, "ny": self.map.ny, "g": self.map.g,
                         "origin": list(self.map.origin)}}


def _clean(obj):
    """Replace non-finite floats so the report stays strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def initial_map(sc: Scenario) -> GridMap:
    m = new_map(sc.nx, sc.ny, sc.g, sc.origin, 0.0, sc.sigma0, sc.prior, sc.prior_var)
    generate_terrain(m, sc.terrain, sc.seed)
    return m


class _PushState:
    def __init__(self, horizon: int):
        self.buffer = deque(maxlen=max(1, horizon))
        self.d_prev = 0.0
        self.last_theta = None


def run_scenario(sc: Scenario) -> RunReport:
    """Execute every push of the scenario and return the filled report."""
    sc.validate()
    rng = np.random.default_rng(sc.seed)
    m = initial_map(sc)
    H0 = m.H.copy()
    v_start = total_volume(m)
    pl = sc.pipeline
    trans_min = pl.trans_min if pl.trans_min is not None else 0.5 * m.g
    fusion_pushes = np.zeros(m.shape, dtype=int)
    fusion_count = np.zeros(m.shape, dtype=int)
    records: List[SweepRecord] = []
    timings: Dict[str, List[float]] = {"sweep": [], "estimate": []}
    disturbed_total = 0.0
    half_width = 0.5 * sc.blade_width

    for p_idx, push in enumerate(sc.pushes):
        poses = push_poses(push, H0, m, half_width, sc.blade_height)
        state = _PushState(pl.horizon)
        touched = np.zeros(m.shape, dtype=bool)
        T_last = poses[0]
        history = [T_last]
        for k in range(1, len(poses)):
            T1 = poses[k]
            history.append(T1)
            update, t_hat, n_hat = check_movement(T_last, T1, trans_min, pl.rot_min)
            if not update:
                continue
            rec = SweepRecord(index=len(records), push=p_idx, step=k, status="ok")
            t0 = time.perf_counter()
            try:
                disturbed_total += _sweep(sc, m, T_last, T1, history, t_hat, n_hat, state, rng,
                                          rec, touched, fusion_count, timings)
            except (DegenerateSweep, NonFinite) as exc:
                rec.status, rec.error = "failed", f"{type(exc).__name__}: {exc}"
            timings["sweep"].append(time.perf_counter() - t0)
            records.append(rec)
            T_last = T1
            history = [T1]
        fusion_pushes += touched

    m.layers[FEE_INDEX] = fee_index_layer(m)
    v_end = total_volume(m)
    expected = (sc.swell - 1.0) * disturbed_total
    volume = {"initial": v_start, "final": v_end, "change": v_end - v_start,
              "newly_disturbed": disturbed_total, "expected_change": expected,
              "rel_error": abs((v_end - v_start) - expected) / max(abs(v_start), 1e-12)}
    return RunReport(records, volume, m, fusion_pushes, fusion_count, timings)


def _sweep(sc: Scenario, m: GridMap, T0: BladePose, T1: BladePose, history, t_hat, n_hat,
           state: _PushState, rng, rec: SweepRecord, touched, fusion_count, timings) -> float:
    """One gated sweep; mutates the map and fills ``rec``.  Returns new disturbed volume."""
    pl = sc.pipeline
    sv = generate_swept_volume(T0, T1)
    inter = intersect_heightmap(sv, m)
    rec.cut_cells = int(len(inter.A))
    extracted = None
    if inter.empty:
        rec.status = "no_cut"
        state.d_prev = 0.0
    else:
        try:
            extracted = extract_fee_params(m, T0, inter.A, inter.dH, t_hat, n_hat, pl.c_x, pl.c_d)
        except NoValidSlices as exc:
            rec.status, rec.error = "no_slices", str(exc)
    new_disturbed = 0.0
    m_hat = None
    if not inter.empty:
        dep = cut_and_deposit(m, inter.A, inter.dH, t_hat, n_hat, pl.sigma_sv, sc.swell,
                              pl.lambda_n, footprint=map(tuple, inter.G.tolist()))
        rec.dVQ, rec.new_disturbed = dep.dVQ, dep.new_disturbed
        new_disturbed, m_hat = dep.new_disturbed, dep.m_hat

    if extracted is not None:
        ex = extracted
        rec.extracted = {"alpha": ex.alpha, "rho": ex.rho, "d": ex.d, "w": ex.w, "VQ0": ex.VQ0}
        rec.metrics = dict(ex.metrics)
        series = interpolate_fee_params(ex.alpha, ex.rho, ex.d, history, ex.VQ0, rec.dVQ,
                                        sc.gamma_l, d_start=state.d_prev)
        state.d_prev = ex.d
        geoms, soils = [], []
        for pose, d_t, q_t in zip(history[1:], series.d[1:], series.Q[1:]):
            geoms.append(CutGeometry(ex.alpha, ex.rho, float(d_t), ex.w, float(q_t)))
            e = pose.edge_mid
            soils.append(sc.soil_at(e[0], e[1]))
        F, ok = synth_forces(geoms, soils, sc.noise_std, rng)
        for geom, f, good in zip(geoms, F, ok):
            if good:
                state.buffer.append((geom.alpha, geom.rho, geom.w, geom.d, geom.Q, f[0], f[1]))
        if not ok.all():
            rec.error = f"{int((~ok).sum())} degenerate force steps skipped"
        rec.window_steps = len(state.buffer)
        if len(state.buffer) >= pl.min_steps:
            t_est = time.perf_counter()
            _estimate_and_fuse(sc, m, ex, state, rec, touched, fusion_count)
            timings["estimate"].append(time.perf_counter() - t_est)
        elif rec.status == "ok":
            rec.status = "buffering"

    if m_hat is not None:
        rec.slips = erode_roi(m, T1, m_hat, inter.G, inter.hG, sc.erosion)
    return new_disturbed


def _estimate_and_fuse(sc: Scenario, m: GridMap, ex, state: _PushState, rec: SweepRecord,
                       touched, fusion_count) -> None:
    rows = np.array(state.buffer)
    window = MeasurementWindow(rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3], rows[:, 4],
                               rows[:, 5:7])
    try:
        est = fit_soil_properties_full(window, sc.estimator, warm_start=state.last_theta).estimate
    except NoContact:
        rec.status = "no_contact"
        return
    except NonFinite as exc:
        rec.status, rec.error = "estimate_failed", str(exc)
        return
    state.last_theta = est.theta.as_array()
    rec.estimate = est.to_dict()
    try:
        rec.nll = nll_report(window, est)
    except SingularCovariance:
        rec.nll = None
    beta = beta_or_nominal(est.theta.phi, est.theta.delta, ex.alpha, ex.rho)
    cells, x = ex.samples.cells, ex.samples.x
    valid = update_soil_layers(m, est, cells, x, ex.d, ex.alpha, beta, sc.pipeline.c_s,
                               sc.pipeline.x_min)
    fused = cells[valid]
    rec.fused_cells = int(len(fused))
    touched[fused[:, 0], fused[:, 1]] = True
    np.add.at(fusion_count, (fused[:, 0], fused[:, 1]), 1)


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def export_run(report: RunReport, out_dir, fmt: str = "csv") -> List[Path]:
    """Write map layers in ``fmt`` (csv, bin or pgm) plus ``report.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    m = report.map
    written: List[Path] = []
    if fmt == "csv":
        written += save_csv_dir(m, out)
    elif fmt == "bin":
        p = out / "map.tmap"
        save_binary(m, p)
        written.append(p)
    elif fmt == "pgm":
        for name in m.layers:
            p = out / f"{name}.pgm"
            save_pgm(m, name, p)
            written.append(p)
    else:
        raise ValueError(f"unknown export format {fmt!r}")
    p = out / "report.json"
    with open(p, "w") as fh:
        json.dump(_clean(report.to_dict()), fh, indent=1, sort_keys=True)
        fh.write("\n")
    written.append(p)
    return written
