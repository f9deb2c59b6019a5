"""Slope-stability erosion of the loose soil layer around the blade.

Each cell exchanges soil with two axis neighbours picked from the quadrant of
the deposit direction, so soil only flows away from the blade.  Cells are
split into four colour groups by index parity; within a group no two
exchanges touch the same cell, so a group is updated as one vector operation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .gridmap import GridMap

G_GRAV = 9.81
_COLOR_ORDER = ((0, 0), (1, 0), (0, 1), (1, 1))


@dataclass(frozen=True)
class ErosionParams:
    c_l: float = 25.0
    phi_l: float = 0.26
    gamma_l: float = 15000.0
    dt: float = 0.05
    iterations: int = 10
    D_ROI: float = 3.0

    def __post_init__(self):
        if self.c_l < 0 or not 0 < self.phi_l < math.pi / 2:
            raise ValueError("need c_l >= 0 and 0 < phi_l < pi/2")
        if not (self.gamma_l > 0 and self.dt > 0):
            raise ValueError("need gamma_l > 0 and dt > 0")


def _wedge(dh, alpha, gamma_l):
    """Failure-plane length and wedge weight per unit width."""
    length = dh / np.sin(alpha)
    weight = 0.5 * gamma_l * dh * dh / np.tan(alpha)
    return length, weight


def safety_factor(alpha, dh, params: ErosionParams):
    length, weight = _wedge(dh, alpha, params.gamma_l)
    return ((params.c_l * length + weight * np.cos(alpha) * math.tan(params.phi_l))
            / (weight * np.sin(alpha)))


def min_safety_factor_array(dh, params: ErosionParams, g: float):
    """Vectorised minimum factor of safety over the admissible failure angles.

    The admissible range runs from just above ``phi_l`` up to the angle of the
    free face ``atan(dh / g)``.  F_s is unimodal in alpha with its stationary
    point at ``tan^2(alpha) = 1 + 2 tan(phi_l) / A`` where
    ``A = 4 c_l / (gamma_l dh)``, so the minimiser is that point clipped to
    the range.  Cells with ``dh <= 1e-6`` or an empty range get ``(inf, 0)``.
    """
    dh = np.asarray(dh, dtype=float)
    lo = params.phi_l + 1e-3
    hi = np.minimum(np.arctan2(dh, g), math.pi / 2 - 1e-3)
    valid = (dh > 1e-6) & (hi > lo)
    safe_dh = np.where(valid, dh, 1.0)
    coh = 4.0 * params.c_l / (params.gamma_l * safe_dh)
    tan_phi = math.tan(params.phi_l)
    with np.errstate(divide="ignore", over="ignore"):
        a_star = np.where(coh > 0, np.arctan(np.sqrt(1.0 + 2.0 * tan_phi / np.where(coh > 0, coh, 1.0))),
                          math.pi / 2)
    a_star = np.clip(a_star, lo, np.where(valid, hi, lo))
    f_min = np.where(valid, safety_factor(a_star, safe_dh, params), np.inf)
    return f_min, np.where(valid, a_star, 0.0)


def min_safety_factor(dh: float, params: ErosionParams, g: float) -> Tuple[float, float]:
    """Minimum factor of safety ``(F_min, alpha_star)`` for a free face of height ``dh``."""
    f, a = min_safety_factor_array(np.array([dh]), params, g)
    return float(f[0]), float(a[0])


def compute_slip_array(alpha_star, dh, params: ErosionParams, g: float, dt: float):
    """Slip height after one Euler step of the sliding wedge, capped at ``dh/2``."""
    alpha_star = np.asarray(alpha_star, dtype=float)
    dh = np.asarray(dh, dtype=float)
    ok = (dh > 1e-6) & (alpha_star > 0)
    a_safe = np.where(ok, alpha_star, 0.5)
    dh_safe = np.where(ok, dh, 1.0)
    length, weight = _wedge(dh_safe, a_safe, params.gamma_l)
    accel = (G_GRAV * (np.sin(a_safe) - np.cos(a_safe) * math.tan(params.phi_l))
             - params.c_l * length * G_GRAV / weight)
    h = accel * dt * dt * np.sin(a_safe)
    h = np.clip(np.minimum(h, 0.5 * dh_safe), 0.0, None)
    return np.where(ok, h, 0.0)


def compute_slip(alpha_star: float, dh: float, params: ErosionParams, g: float,
                 dt: Optional[float] = None) -> float:
    """Only meaningful when the minimum factor of safety is below 1."""
    dt = params.dt if dt is None else dt
    return float(compute_slip_array(np.array([alpha_star]), np.array([dh]), params, g, dt)[0])


def exchange_offsets(m_hat) -> Tuple[Tuple[int, int], Tuple[int, int]]:
    """The two axis neighbours (90 degrees apart) in the quadrant of ``m_hat``."""
    sx = 1 if m_hat[0] >= 0 else -1
    sy = 1 if m_hat[1] >= 0 else -1
    return (sx, 0), (0, sy)


def roi_bounds(m: GridMap, center_xy, d_roi: float):
    """Inclusive cell index bounds of a square region around ``center_xy``."""
    ci = (center_xy[0] - m.origin[0]) / m.g
    cj = (center_xy[1] - m.origin[1]) / m.g
    r = d_roi / m.g
    i0 = max(0, math.ceil(ci - r))
    i1 = min(m.nx - 1, math.floor(ci + r))
    j0 = max(0, math.ceil(cj - r))
    j1 = min(m.ny - 1, math.floor(cj + r))
    return i0, i1, j0, j1


def build_mask(m: GridMap, G=None, hG=None):
    E = np.zeros(m.shape, dtype=bool)
    Z = np.zeros(m.shape)
    if G is not None and len(G):
        G = np.asarray(G, dtype=int).reshape(-1, 2)
        E[G[:, 0], G[:, 1]] = True
        Z[G[:, 0], G[:, 1]] = np.asarray(hG, dtype=float)
    return E, Z


def erosion_pass(m: GridMap, bounds, offsets, E, Z, params: ErosionParams) -> int:
    """One pass over the four colour groups; returns the number of slips applied."""
    H, L, sig = m.H, m.L, m.sigma
    i0, i1, j0, j1 = bounds
    slips = 0
    for pi, pj in _COLOR_ORDER:
        si = i0 + ((pi - i0) % 2)
        sj = j0 + ((pj - j0) % 2)
        ia = np.arange(si, i1 + 1, 2)
        ja = np.arange(sj, j1 + 1, 2)
        if ia.size == 0 or ja.size == 0:
            continue
        Ia, Ja = np.meshgrid(ia, ja, indexing="ij")
        Ia, Ja = Ia.ravel(), Ja.ravel()
        Ha = H[Ia, Ja]
        La = L[Ia, Ja]
        ea = E[Ia, Ja]
        total_out = np.zeros(Ia.shape)
        moves = []
        for di, dj in offsets:
            Ib, Jb = Ia + di, Ja + dj
            inside = (Ib >= 0) & (Ib < m.nx) & (Jb >= 0) & (Jb < m.ny)
            Ibc = np.clip(Ib, 0, m.nx - 1)
            Jbc = np.clip(Jb, 0, m.ny - 1)
            Hb = H[Ibc, Jbc]
            dh = np.minimum(Ha - Hb, La)
            dh = np.where(inside & ~ea, dh, 0.0)
            f_min, a_star = min_safety_factor_array(dh, params, m.g)
            h_slip = np.where(f_min < 1.0, compute_slip_array(a_star, dh, params, m.g, params.dt), 0.0)
            eb = E[Ibc, Jbc]
            cap = np.maximum(Z[Ibc, Jbc] - Hb, 0.0)
            h_slip = np.where(eb, np.minimum(h_slip, cap), h_slip)
            h_slip = np.where(inside & ~ea, h_slip, 0.0)
            moves.append((Ibc, Jbc, h_slip))
            total_out += h_slip
        if not np.any(total_out > 0):
            continue
        H[Ia, Ja] = Ha - total_out
        L[Ia, Ja] = La - total_out
        sig[Ia, Ja] = np.maximum(sig[Ia, Ja] - total_out, 0.0)
        for Ib, Jb, h_slip in moves:
            nz = h_slip > 0
            if not nz.any():
                continue
            Ib, Jb, h_slip = Ib[nz], Jb[nz], h_slip[nz]
            H[Ib, Jb] += h_slip
            L[Ib, Jb] += h_slip
            sig[Ib, Jb] += h_slip
            slips += int(nz.sum())
    # Rounding can leave -1e-18 after removing exactly all loose soil.
    np.maximum(L, 0.0, out=L)
    return slips


def erode_roi(m: GridMap, center_xy, m_hat, G=None, hG=None,
              params: ErosionParams = ErosionParams(), iterations: Optional[int] = None) -> int:
    """Run ``iterations`` erosion passes in the square ROI around ``center_xy``.

    ``G``/``hG`` are the shadow cells of the last swept volume and the volume
    bottom height there: no soil leaves a shadowed cell, and soil flowing into
    one may only fill up to the volume bottom.  Returns the total slip count.
    """
    if hasattr(center_xy, "p"):
        center_xy = center_xy.p[:2]
    E, Z = build_mask(m, G, hG)
    bounds = roi_bounds(m, center_xy, params.D_ROI)
    offsets = exchange_offsets(m_hat)
    n = params.iterations if iterations is None else iterations
    total = 0
    for _ in range(n):
        total += erosion_pass(m, bounds, offsets, E, Z, params)
    return total
