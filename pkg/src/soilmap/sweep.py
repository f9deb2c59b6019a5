"""Blade sweeps: movement gating, swept-volume meshes, heightmap intersection
and extraction of FEE cut geometry from the terrain around the blade.

Blade frame convention: ``R[:, 0]`` is the face normal pointing into travel,
``R[:, 1]`` runs along the blade width and ``R[:, 2]`` points up the face.
``p`` is the center of the blade face; the cutting edge is the bottom side.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateSweep, NoValidSlices, OutOfBounds, RankDeficientFit
from .gridmap import GridMap, dda_trace, world_to_cell

DEFAULT_C_X = 2.0
DEFAULT_C_D = 5.0
SAMPLE_CELLS = 20

_UP = np.array([0.0, 0.0, 1.0])


@dataclass
class BladePose:
    p: np.ndarray
    R: np.ndarray
    half_width: float = 0.925
    height: float = 0.6

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=float).reshape(3)
        self.R = np.asarray(self.R, dtype=float).reshape(3, 3)
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-9):
            raise ValueError("blade rotation is not orthonormal")
        if not (self.half_width > 0 and self.height > 0):
            raise ValueError("blade width and height must be positive")

    @property
    def normal(self) -> np.ndarray:
        return self.R[:, 0]

    @property
    def lateral(self) -> np.ndarray:
        return self.R[:, 1]

    @property
    def up(self) -> np.ndarray:
        return self.R[:, 2]

    @property
    def edge_mid(self) -> np.ndarray:
        return self.p - 0.5 * self.height * self.up

    @property
    def edge(self) -> Tuple[np.ndarray, np.ndarray]:
        e = self.edge_mid
        return e - self.half_width * self.lateral, e + self.half_width * self.lateral

    def corners(self) -> np.ndarray:
        """Quad corners ``[bottom-left, bottom-right, top-right, top-left]``."""
        hw, hh = self.half_width * self.lateral, 0.5 * self.height * self.up
        return np.array([self.p - hw - hh, self.p + hw - hh, self.p + hw + hh, self.p - hw + hh])


def blade_rotation(heading: float, rake: float = math.pi / 2, yaw: float = 0.0) -> np.ndarray:
    """Rotation for a blade whose normal points along ``heading + yaw``.

    ``rake`` is the angle between the face (edge to top) and the horizontal
    pointing back behind the blade; ``pi/2`` is a vertical blade.
    """
    psi = heading + yaw
    n_h = np.array([math.cos(psi), math.sin(psi), 0.0])
    lateral = np.array([-math.sin(psi), math.cos(psi), 0.0])
    up = math.sin(rake) * _UP - math.cos(rake) * n_h
    normal = np.cross(lateral, up)
    return np.column_stack([normal, lateral, up])


def blade_pose_from_edge(edge_mid, heading: float, rake: float = math.pi / 2, yaw: float = 0.0,
                         half_width: float = 0.925, height: float = 0.6) -> BladePose:
    R = blade_rotation(heading, rake, yaw)
    p = np.asarray(edge_mid, dtype=float) + 0.5 * height * R[:, 2]
    return BladePose(p, R, half_width, height)


def _horizontal_unit(v) -> Optional[np.ndarray]:
    h = np.array([v[0], v[1]], dtype=float)
    n = math.hypot(h[0], h[1])
    return h / n if n > 1e-12 else None


def check_movement(T0: BladePose, T1: BladePose, trans_min: float = 0.05,
                   rot_min: float = math.radians(2.0)):
    """Gate a sweep on blade displacement.

    Returns ``(update, t_hat, n_hat)``.  ``t_hat`` is the unit translation of
    the blade center; under a pure rotation it falls back to the horizontal
    projection of the starting face normal ``n_hat``.
    """
    delta = T1.p - T0.p
    dist = float(np.linalg.norm(delta))
    cos_angle = (np.trace(T0.R.T @ T1.R) - 1.0) / 2.0
    angle = math.acos(min(1.0, max(-1.0, cos_angle)))
    update = dist >= trans_min or angle >= rot_min
    n_hat = T0.normal.copy()
    if dist > 0.0:
        t_hat = delta / dist
    else:
        nh = _horizontal_unit(n_hat)
        t_hat = np.array([nh[0], nh[1], 0.0]) if nh is not None else n_hat.copy()
    return update, t_hat, n_hat


# ---------------------------------------------------------------------------
# Swept volume
# ---------------------------------------------------------------------------

# Quad faces over vertices 0-3 (start quad) and 4-7 (end quad); each edge is
# traversed once in each direction, so the triangulation is consistently wound.
_QUADS = (
    (0, 3, 2, 1),  # start face
    (4, 5, 6, 7),  # end face
    (0, 1, 5, 4),  # bottom (cutting edge path)
    (3, 7, 6, 2),  # top
    (0, 4, 7, 3),  # left side
    (1, 2, 6, 5),  # right side
)
_FACES = np.array([t for a, b, c, d in _QUADS for t in ((a, b, c), (a, c, d))], dtype=int)


@dataclass
class SweptVolume:
    vertices: np.ndarray  # (8, 3)
    faces: np.ndarray  # (12, 3)

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def volume(self) -> float:
        """Enclosed volume by the divergence theorem."""
        t = self.triangles
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)


def generate_swept_volume(T0: BladePose, T1: BladePose) -> SweptVolume:
    v0, v1 = T0.corners(), T1.corners()
    if np.max(np.abs(v1 - v0)) < 1e-12:
        raise DegenerateSweep("start and end blade quads coincide")
    sv = SweptVolume(np.vstack([v0, v1]), _FACES.copy())
    if sv.volume() < 0:
        sv.faces = sv.faces[:, ::-1].copy()
    return sv


def mesh_is_closed(faces: np.ndarray) -> bool:
    """Every undirected edge used by exactly two faces, once per direction."""
    directed = {}
    for a, b, c in faces:
        for e in ((a, b), (b, c), (c, a)):
            directed[e] = directed.get(e, 0) + 1
    if any(n != 1 for n in directed.values()):
        return False
    return all((b, a) in directed for a, b in directed)


# ---------------------------------------------------------------------------
# Heightmap intersection
# ---------------------------------------------------------------------------

@dataclass
class SweepIntersection:
    A: np.ndarray  # (n, 2) intersected cells
    dH: np.ndarray  # (n,) displaced heights
    G: np.ndarray  # (k, 2) shadow cells under the volume footprint
    hG: np.ndarray  # (k,) volume bottom height at shadow cells
    hTop: np.ndarray = field(default=None)  # (k,) volume top height

    @property
    def empty(self) -> bool:
        return len(self.A) == 0


def _vertical_ray_hits(tris: np.ndarray, px: np.ndarray, py: np.ndarray):
    """Heights where vertical lines through (px, py) cross each triangle (nan if missed)."""
    v0 = tris[:, 0]
    e1 = tris[:, 1] - v0
    e2 = tris[:, 2] - v0
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    usable = np.abs(det) > 1e-14
    v0, e1, e2, det = v0[usable], e1[usable], e2[usable], det[usable]
    wx = px[:, None] - v0[None, :, 0]
    wy = py[:, None] - v0[None, :, 1]
    b1 = (wx * e2[None, :, 1] - wy * e2[None, :, 0]) / det[None]
    b2 = (e1[None, :, 0] * wy - e1[None, :, 1] * wx) / det[None]
    eps = 1e-10
    inside = (b1 >= -eps) & (b2 >= -eps) & (b1 + b2 <= 1 + eps)
    z = v0[None, :, 2] + b1 * e1[None, :, 2] + b2 * e2[None, :, 2]
    return np.where(inside, z, np.nan)


def intersect_heightmap(sv: SweptVolume, m: GridMap, tol: float = 1e-9) -> SweepIntersection:
    """Cast vertical rays through cell centers under the volume footprint.

    A shadow cell joins ``A`` when its surface lies above the volume bottom
    and the column actually passes through the volume; the displaced height
    takes the surface down to the volume bottom.
    """
    verts = sv.vertices
    ox, oy = m.origin
    i0 = max(0, math.ceil((verts[:, 0].min() - ox) / m.g - 1e-9))
    i1 = min(m.nx - 1, math.floor((verts[:, 0].max() - ox) / m.g + 1e-9))
    j0 = max(0, math.ceil((verts[:, 1].min() - oy) / m.g - 1e-9))
    j1 = min(m.ny - 1, math.floor((verts[:, 1].max() - oy) / m.g + 1e-9))
    empty2 = np.zeros((0, 2), dtype=int)
    if i1 < i0 or j1 < j0:
        return SweepIntersection(empty2, np.zeros(0), empty2, np.zeros(0), np.zeros(0))
    ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    px, py = m.cell_center(ii, jj)
    z = _vertical_ray_hits(sv.triangles, px, py)
    hit = np.any(~np.isnan(z), axis=1)
    if not hit.any():
        return SweepIntersection(empty2, np.zeros(0), empty2, np.zeros(0), np.zeros(0))
    zh = z[hit]
    bottom = np.nanmin(zh, axis=1)
    top = np.nanmax(zh, axis=1)
    G = np.column_stack([ii[hit], jj[hit]])
    H = m.H[G[:, 0], G[:, 1]]
    cut = (H > bottom + tol) & (bottom < top - tol)
    return SweepIntersection(G[cut], H[cut] - bottom[cut], G, bottom, top)


# ---------------------------------------------------------------------------
# FEE parameter extraction
# ---------------------------------------------------------------------------

@dataclass
class SurfaceSlice:
    lateral: float  # slice coordinate along the horizontal perpendicular of t_hat, m
    edge: np.ndarray  # blade cutting-edge point for this slice (3,)
    cells: np.ndarray  # (k, 2)
    x: np.ndarray  # along-track distance ahead of the edge, m
    z: np.ndarray  # undisturbed surface height, m


@dataclass
class SurfaceSamples:
    slices: List[SurfaceSlice]
    VQ: float
    cells: np.ndarray  # unique sampled cells (n, 2)
    x: np.ndarray  # smallest along-track distance of each unique cell
    empty_slices: int = 0


def _travel_frame(t_hat):
    th = _horizontal_unit(t_hat)
    if th is None:
        raise ValueError("travel direction has no horizontal component")
    return th, np.array([-th[1], th[0]])


def get_surface_points(A: np.ndarray, m: GridMap, t_hat, n_hat, T0: BladePose,
                       horizon: int = SAMPLE_CELLS) -> SurfaceSamples:
    """Sample the surface ahead of the blade edge, one DDA walk per lateral slice.

    Intersected cells are bucketed by their lateral coordinate (bucket width g).
    Each slice walks ``horizon`` cells along +t_hat starting under the blade
    edge and keeps cells ahead of the edge.  Heights are ``H - L`` (the
    undisturbed surface).  ``VQ`` sums the loose soil of every kept cell.
    """
    A = np.asarray(A, dtype=int).reshape(-1, 2)
    th, lat = _travel_frame(t_hat)
    e_mid = T0.edge_mid
    cx, cy = m.cell_center(A[:, 0], A[:, 1])
    s = (cx - e_mid[0]) * lat[0] + (cy - e_mid[1]) * lat[1]
    buckets = np.unique(np.rint(s / m.g).astype(int))
    along = float(T0.lateral[0] * lat[0] + T0.lateral[1] * lat[1])
    surf = m.H - m.L
    slices: List[SurfaceSlice] = []
    seen = {}
    empty = 0
    for k in buckets:
        s_k = k * m.g
        u = s_k / along if abs(along) > 1e-9 else 0.0
        u = min(max(u, -T0.half_width), T0.half_width)
        edge = e_mid + u * T0.lateral
        try:
            start = world_to_cell(m, edge[0], edge[1])
        except OutOfBounds:
            empty += 1
            continue
        cells = np.array([start] + dda_trace(m, start, th, horizon - 1), dtype=int)
        px, py = m.cell_center(cells[:, 0], cells[:, 1])
        x = (px - edge[0]) * th[0] + (py - edge[1]) * th[1]
        ahead = x > 1e-9
        if ahead.sum() == 0:
            empty += 1
            continue
        cells, x = cells[ahead], x[ahead]
        z = surf[cells[:, 0], cells[:, 1]]
        slices.append(SurfaceSlice(float(s_k), edge, cells, x, z))
        for (ci, cj), xv in zip(map(tuple, cells), x):
            if (ci, cj) not in seen or xv < seen[(ci, cj)]:
                seen[(ci, cj)] = float(xv)
    if seen:
        ucells = np.array(list(seen.keys()), dtype=int)
        ux = np.array(list(seen.values()))
        VQ = float(m.g * m.g * np.maximum(m.L[ucells[:, 0], ucells[:, 1]], 0.0).sum())
    else:
        ucells, ux, VQ = np.zeros((0, 2), dtype=int), np.zeros(0), 0.0
    return SurfaceSamples(slices, VQ, ucells, ux, empty)


def wls_line_fit_intersect(x, z, c_x: float, edge_z: float, blade_up, t_hat):
    """Weighted line fit of the surface ahead of one blade slice.

    The line ``z = a x + b`` is fit with weights ``exp(-c_x x)``, where ``x`` is
    measured from the cutting edge along travel.  Returns
    ``(alpha, rho, d, mean_abs_residual)``: surface inclination (uphill ahead
    positive), angle between blade face and the fitted line, and perpendicular
    depth of the edge below the line (0 when the edge is above it).
    """
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if x.size < 2 or np.ptp(x) <= 1e-12:
        raise RankDeficientFit("need at least two distinct sample distances")
    sw = np.sqrt(np.exp(-c_x * x))
    design = np.column_stack([x, np.ones_like(x)]) * sw[:, None]
    (a, b), *_ = np.linalg.lstsq(design, z * sw, rcond=None)
    alpha = math.atan(a)
    th = _horizontal_unit(t_hat)
    up = np.asarray(blade_up, dtype=float)
    u2 = np.array([up[0] * th[0] + up[1] * th[1], up[2]])
    u2 /= np.linalg.norm(u2)
    back = np.array([-1.0, -a]) / math.hypot(1.0, a)
    rho = math.acos(min(1.0, max(-1.0, float(u2 @ back))))
    d = max(0.0, (b - edge_z) / math.hypot(1.0, a))
    resid = float(np.mean(np.abs(z - (a * x + b))))
    return alpha, rho, d, resid


@dataclass
class ExtractedFee:
    alpha: float
    rho: float
    d: float
    w: float
    VQ0: float
    slice_alpha: np.ndarray
    slice_rho: np.ndarray
    slice_d: np.ndarray
    slice_lateral: np.ndarray
    metrics: dict
    samples: SurfaceSamples

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["lateral", "alpha", "rho", "d"])
            for row in zip(self.slice_lateral, self.slice_alpha, self.slice_rho, self.slice_d):
                wr.writerow([f"{v:.10g}" for v in row])


def extract_fee_params(m: GridMap, T0: BladePose, A, dH, t_hat, n_hat,
                       c_x: float = DEFAULT_C_X, c_d: float = DEFAULT_C_D,
                       horizon: int = SAMPLE_CELLS) -> ExtractedFee:
    """One ``(alpha, rho, d, w)`` set plus surcharge volume for a sweep.

    Slice fits are averaged with weights ``exp(c_d * d)`` so deeper slices
    dominate.  The width is the lateral range of the intersected cell centers,
    floored at one cell and capped at the physical blade width.
    """
    A = np.asarray(A, dtype=int).reshape(-1, 2)
    if len(A) == 0:
        raise NoValidSlices("no intersected cells")
    samples = get_surface_points(A, m, t_hat, n_hat, T0, horizon)
    fits, lateral, resid = [], [], []
    failed = samples.empty_slices
    for sl in samples.slices:
        try:
            a, r, d, res = wls_line_fit_intersect(sl.x, sl.z, c_x, sl.edge[2], T0.up, t_hat)
        except RankDeficientFit:
            failed += 1
            continue
        fits.append((a, r, d))
        lateral.append(sl.lateral)
        resid.append(res)
    if not fits:
        raise NoValidSlices("every slice fit failed")
    arr = np.array(fits)
    wd = np.exp(c_d * arr[:, 2])
    alpha, rho, d = (wd @ arr) / wd.sum()

    _, lat = _travel_frame(t_hat)
    cx, cy = m.cell_center(A[:, 0], A[:, 1])
    proj = cx * lat[0] + cy * lat[1]
    w = float(np.ptp(proj)) if len(proj) else 0.0
    w = min(max(w, m.g), 2.0 * T0.half_width)
    metrics = {
        "mean_fit_residual": float(np.mean(resid)),
        "var_alpha": float(np.var(arr[:, 0])),
        "var_rho": float(np.var(arr[:, 1])),
        "var_d": float(np.var(arr[:, 2])),
        "slices": len(fits),
        "failed_slices": int(failed),
    }
    return ExtractedFee(float(alpha), float(rho), float(d), w, samples.VQ,
                        arr[:, 0], arr[:, 1], arr[:, 2], np.array(lateral), metrics, samples)


@dataclass
class SweepSeries:
    d: np.ndarray
    VQ: np.ndarray
    Q: np.ndarray


def interpolate_fee_params(alpha: float, rho: float, d_end: float,
                           pose_history: Sequence[BladePose], VQ_start: float, dVQ: float,
                           gamma_l: float, d_start: float = 0.0) -> SweepSeries:
    """Linear per-pose depth and surcharge series across one sweep.

    ``alpha`` and ``rho`` are constant over the sweep and only carried for
    symmetry with the extraction output.  Surcharge volume is kept non-negative.
    """
    n = len(pose_history)
    if n < 2:
        raise ValueError("pose history needs at least two poses")
    d = np.linspace(d_start, d_end, n)
    VQ = np.maximum(np.linspace(VQ_start, VQ_start + dVQ, n), 0.0)
    return SweepSeries(d, VQ, gamma_l * VQ)
