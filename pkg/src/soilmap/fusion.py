"""Per-cell Bayesian fusion of soil-property estimates into the map."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateWedge
from .fee import (INDEX_ALPHA, INDEX_DEPTH, INDEX_RHO, INDEX_WIDTH, PARAM_NAMES,
                  SoilProperties, fee_magnitude_raw, solve_beta_array)
from .gridmap import MEAN_LAYERS, VAR_LAYERS, GridMap

DEFAULT_C_S = 1.0
DEFAULT_X_MIN = 0.2


@dataclass(frozen=True)
class SoilEstimate:
    theta: SoilProperties
    var: np.ndarray  # (5,) variances in PARAM_NAMES order

    def __post_init__(self):
        var = np.asarray(self.var, dtype=float).reshape(-1)
        if var.shape != (5,) or np.any(~(var > 0)):
            raise ValueError("estimate variances must be five positive values")
        object.__setattr__(self, "var", var)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)

    def to_dict(self) -> dict:
        return {"theta": dict(zip(PARAM_NAMES, map(float, self.theta.as_array()))),
                "var": dict(zip(PARAM_NAMES, map(float, self.var)))}


def wedge_extent(d: float, alpha: float, beta: float) -> float:
    """Horizontal reach of the failure wedge ahead of the blade edge."""
    if alpha + beta >= math.pi / 2:
        raise DegenerateWedge("alpha + beta reaches pi/2")
    denom = math.cos(alpha) * (math.tan(alpha + beta) - math.tan(alpha))
    if denom <= 1e-9:
        raise DegenerateWedge(f"wedge denominator {denom!r} underflows")
    return d / denom


def fuse_gaussian(mu_prior, var_prior, mu_meas, var_meas):
    """Scalar Gaussian product, elementwise; returns ``(mu_post, var_post)``."""
    var_prior = np.asarray(var_prior, dtype=float)
    var_meas = np.asarray(var_meas, dtype=float)
    with np.errstate(invalid="ignore", over="ignore"):
        gain = var_prior / (var_prior + var_meas)
        mu = mu_prior + gain * (np.asarray(mu_meas, dtype=float) - mu_prior)
        # An infinite measurement variance leaves the prior unchanged.
        var = np.where(np.isinf(var_meas), var_prior, var_meas * gain)
    if mu.ndim == 0:
        return float(mu), float(var)
    return mu, var


def update_soil_layers(m: GridMap, est: SoilEstimate, cells, x, d: float, alpha: float,
                       beta: float, c_s: float = DEFAULT_C_S,
                       x_min: float = DEFAULT_X_MIN) -> np.ndarray:
    """Fuse ``est`` into the cells of the failure wedge ahead of the blade.

    ``x`` is each cell's along-track distance ahead of the cutting edge.  A
    cell is valid when ``x < x_max`` or ``x < x_min``; its measurement
    variance is inflated by ``exp(c_s * x / x_max)``.  Returns the boolean
    mask of updated entries of ``cells``.
    """
    cells = np.asarray(cells, dtype=int).reshape(-1, 2)
    x = np.asarray(x, dtype=float).reshape(-1)
    try:
        x_max = wedge_extent(d, alpha, beta) if d > 1e-9 else 0.0
    except DegenerateWedge:
        x_max = 0.0
    valid = (x < x_max) | (x < x_min)
    if not valid.any():
        return valid
    scale = x_max if x_max > 1e-9 else x_min
    ii, jj = cells[valid, 0], cells[valid, 1]
    with np.errstate(over="ignore"):
        inflate = np.exp(c_s * np.maximum(x[valid], 0.0) / scale)
    means = est.theta.as_array()
    for k, (mk, vk) in enumerate(zip(MEAN_LAYERS, VAR_LAYERS)):
        mu, var = fuse_gaussian(m.layers[mk][ii, jj], m.layers[vk][ii, jj],
                                means[k], inflate * est.var[k])
        m.layers[mk][ii, jj] = mu
        m.layers[vk][ii, jj] = var
    return valid


def fee_index_layer(m: GridMap) -> np.ndarray:
    """FEE index of every cell's fused means; NaN where the geometry degenerates."""
    c, phi, c_a, delta, gamma = np.moveaxis(m.property_means(), -1, 0)
    beta = solve_beta_array(phi, delta, INDEX_ALPHA, INDEX_RHO)
    with np.errstate(all="ignore"):
        out = fee_magnitude_raw(c, phi, c_a, delta, gamma, INDEX_ALPHA, INDEX_RHO,
                                INDEX_DEPTH, INDEX_WIDTH, 0.0, beta)
        eta = delta + INDEX_RHO + phi + beta
        bad = (np.abs(np.sin(beta)) < 1e-9) | (np.abs(np.sin(eta)) < 1e-9) | ~np.isfinite(out)
    return np.where(bad, np.nan, out)
