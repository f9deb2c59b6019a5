"""Moving intersected soil out of the swept footprint, with swell."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Set, Tuple

import numpy as np

from .errors import DegenerateDirection
from .gridmap import CellIndex, GridMap, dda_trace

log = logging.getLogger(__name__)

DEFAULT_SWELL = 1.2
DEFAULT_LAMBDA_N = 0.5


def deposit_direction(n_hat, t_hat, lambda_n: float = DEFAULT_LAMBDA_N) -> np.ndarray:
    """Horizontal unit blend of blade normal and translation direction."""
    if not 0.0 <= lambda_n <= 1.0:
        raise ValueError("lambda_n must lie in [0, 1]")
    m = lambda_n * np.asarray(n_hat, float)[:2] + (1.0 - lambda_n) * np.asarray(t_hat, float)[:2]
    norm = math.hypot(m[0], m[1])
    if norm < 1e-9:
        raise DegenerateDirection("deposit direction has no horizontal component")
    return m / norm


def get_deposit_cell(m_hat, a: CellIndex, footprint: Set[CellIndex], m: GridMap
                     ) -> Tuple[CellIndex, bool]:
    """First cell along the DDA ray from ``a`` that lies outside ``footprint``.

    Returns ``(cell, ok)``.  When the ray reaches the raster edge without
    leaving the footprint, the last in-bounds ray cell is returned with
    ``ok=False`` (``a`` itself if the ray is empty).
    """
    last = (int(a[0]), int(a[1]))
    for cell in dda_trace(m, a, m_hat, m.nx + m.ny):
        if cell not in footprint:
            return cell, True
        last = cell
    return last, False


@dataclass
class DepositResult:
    B: np.ndarray  # (n, 2) deposit cell per intersected cell
    dVQ: float  # change of loose volume ahead of the blade, m^3
    m_hat: np.ndarray
    new_disturbed: float  # undisturbed volume newly loosened (before swell), m^3
    flagged: int  # deposits that fell back to the raster edge


def cut_and_deposit(m: GridMap, A, dH, t_hat, n_hat, sigma_sv: float,
                    s: float = DEFAULT_SWELL, lambda_n: float = DEFAULT_LAMBDA_N,
                    footprint: Optional[Iterable[CellIndex]] = None) -> DepositResult:
    """Remove ``dH`` from every intersected cell and deposit it outside the footprint.

    Material that was already loose is moved as-is; only the undisturbed
    remainder is swelled by ``s``.  Updates ``H``, ``L`` and ``sigma`` in place.
    ``footprint`` defaults to the intersected cells themselves.
    """
    if s < 1.0:
        raise ValueError("swell ratio must be >= 1")
    A = np.asarray(A, dtype=int).reshape(-1, 2)
    dH = np.asarray(dH, dtype=float).reshape(-1)
    m_hat = deposit_direction(n_hat, t_hat, lambda_n)
    fp = {tuple(c) for c in (footprint if footprint is not None else A.tolist())}
    fp.update(map(tuple, A.tolist()))
    H, L, sig = m.H, m.L, m.sigma
    g2 = m.g * m.g

    B = np.zeros_like(A)
    flagged = 0
    undisturbed_total = 0.0
    loose_pre_a = 0.0
    L_before_b = {}
    for k, ((ai, aj), dh) in enumerate(zip(A.tolist(), dH)):
        (bi, bj), ok = get_deposit_cell(m_hat, (ai, aj), fp, m)
        if not ok:
            flagged += 1
            log.warning("no deposit cell outside the footprint from (%d, %d)", ai, aj)
        B[k] = (bi, bj)
        L_before_b.setdefault((bi, bj), L[bi, bj])

        l_pre = L[ai, aj]
        sig_pre = sig[ai, aj]
        loose_part = min(dh, l_pre)
        undisturbed = dh - loose_part
        loose_pre_a += l_pre
        undisturbed_total += undisturbed

        H[ai, aj] -= dh
        L[ai, aj] = max(l_pre - dh, 0.0)
        sig[ai, aj] = max(max(sig_pre - dh, 0.0), sigma_sv)

        added = loose_part + s * undisturbed
        H[bi, bj] += added
        L[bi, bj] += added
        dh_max = s * (dh + sig_pre) + sigma_sv
        sig[bi, bj] = math.sqrt(sig[bi, bj] ** 2 + (0.5 * dh_max) ** 2)

    # Loose soil now in front of the blade minus what it held ahead at sweep start.
    gained = sum(L[b] - l0 for b, l0 in L_before_b.items() if b not in fp)
    dVQ = g2 * (gained - loose_pre_a)
    return DepositResult(B, float(dVQ), m_hat, g2 * undisturbed_total, flagged)
