"""Fundamental equation of earthmoving (FEE): forces, N-factors and uncertainty.

Soil-property vectors are always ordered ``(c, phi, c_a, delta, gamma)``.
Angles are radians, ``c`` and ``c_a`` are Pa, ``gamma`` is a unit weight in
N/m^3, so every FEE term is a force in N.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from .errors import DegenerateGeometry, NoStationaryPoint, SingularCovariance

PARAM_NAMES = ("c", "phi", "c_a", "delta", "gamma")

_SIN_FLOOR = 1e-9
_DET_FLOOR = 1e-12

# Index geometry used to turn fused soil properties into a comparable force.
INDEX_ALPHA = 0.0
INDEX_RHO = math.radians(80.0)
INDEX_WIDTH = 1.85
INDEX_DEPTH = 0.2


@dataclass(frozen=True)
class SoilProperties:
    """Unknown soil parameters of the FEE."""

    c: float
    phi: float
    c_a: float
    delta: float
    gamma: float

    def __post_init__(self):
        if not (self.c >= 0 and self.c_a >= 0):
            raise ValueError("cohesion and adhesion must be non-negative")
        if not (0 <= self.phi < math.pi / 2 and 0 <= self.delta < math.pi / 2):
            raise ValueError("phi and delta must lie in [0, pi/2)")
        if not self.gamma > 0:
            raise ValueError("unit weight gamma must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.c, self.phi, self.c_a, self.delta, self.gamma], dtype=float)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "SoilProperties":
        c, phi, c_a, delta, gamma = (float(v) for v in values)
        return cls(c=c, phi=phi, c_a=c_a, delta=delta, gamma=gamma)


@dataclass(frozen=True)
class CutGeometry:
    """Known cut parameters: surface inclination, rake, depth, width, surcharge, failure angle.

    ``beta`` may be left as ``None`` and resolved later with :func:`solve_beta`.
    """

    alpha: float
    rho: float
    d: float
    w: float
    Q: float = 0.0
    beta: Optional[float] = None

    def with_beta(self, beta: float) -> "CutGeometry":
        return replace(self, beta=float(beta))


class ForceVec(NamedTuple):
    fx: float
    fz: float


@dataclass(frozen=True)
class FeeLimits:
    """Clipping limits beyond which the FEE is treated as invalid."""

    beta: Tuple[float, float] = (0.01, math.pi / 2 - 0.01)
    rho: Tuple[float, float] = (0.1, math.pi - 0.1)
    eta: Tuple[float, float] = (0.05, math.pi - 0.05)


DEFAULT_LIMITS = FeeLimits()


# ---------------------------------------------------------------------------
# Raw (array-friendly) kernels
# ---------------------------------------------------------------------------

def n_factors_raw(phi, delta, alpha, rho, beta):
    """N-factors for broadcastable arrays; no degeneracy checks.

    Returns ``(N_gamma, N_c, N_Q, N_ca)``.
    """
    eta = delta + rho + phi + beta
    sin_eta = np.sin(eta)
    s_apb = np.sin(alpha + phi + beta)
    n_gamma = (1.0 / np.tan(rho) + 1.0 / np.tan(beta)) * s_apb / (2.0 * sin_eta)
    n_c = np.cos(phi) / (np.sin(beta) * sin_eta)
    n_q = s_apb / sin_eta
    n_ca = -np.cos(rho + phi + beta) / (np.sin(rho) * sin_eta)
    return n_gamma, n_c, n_q, n_ca


def fee_magnitude_raw(c, phi, c_a, delta, gamma, alpha, rho, d, w, Q, beta):
    n_gamma, n_c, n_q, n_ca = n_factors_raw(phi, delta, alpha, rho, beta)
    return gamma * d * d * w * n_gamma + c * d * w * n_c + Q * n_q + c_a * d * w * n_ca


def fee_force_raw(c, phi, c_a, delta, gamma, alpha, rho, d, w, Q, beta):
    """Force components ``(fx, fz)`` for broadcastable inputs."""
    f = fee_magnitude_raw(c, phi, c_a, delta, gamma, alpha, rho, d, w, Q, beta)
    ang = rho + delta - alpha
    return f * np.sin(ang), f * np.cos(ang)


def _check_sines(phi, delta, rho, beta):
    eta = delta + rho + phi + beta
    for name, value in (("beta", beta), ("rho", rho), ("eta", eta)):
        if abs(math.sin(value)) < _SIN_FLOOR:
            raise DegenerateGeometry(f"sin({name}) vanishes ({name}={value!r})")


def _resolved_beta(soil: SoilProperties, geom: CutGeometry) -> float:
    if geom.beta is not None:
        return geom.beta
    try:
        return solve_beta(soil, geom)
    except NoStationaryPoint:
        return beta_nominal(soil.phi)


# ---------------------------------------------------------------------------
# Public scalar API
# ---------------------------------------------------------------------------

def n_factors(soil: SoilProperties, geom: CutGeometry) -> Tuple[float, float, float, float]:
    """Dimensionless FEE factors ``(N_gamma, N_c, N_Q, N_ca)``.

    Raises
    ------
    DegenerateGeometry
        If ``sin(beta)``, ``sin(rho)`` or ``sin(eta)`` is below 1e-9 in magnitude.
    """
    beta = _resolved_beta(soil, geom)
    _check_sines(soil.phi, soil.delta, geom.rho, beta)
    return tuple(float(v) for v in n_factors_raw(soil.phi, soil.delta, geom.alpha, geom.rho, beta))


def fee_magnitude(soil: SoilProperties, geom: CutGeometry) -> float:
    n_gamma, n_c, n_q, n_ca = n_factors(soil, geom)
    dw = geom.d * geom.w
    return (soil.gamma * geom.d * dw * n_gamma + soil.c * dw * n_c
            + geom.Q * n_q + soil.c_a * dw * n_ca)


def fee_force(soil: SoilProperties, geom: CutGeometry) -> ForceVec:
    """Blade force along travel (``fx``) and vertical (``fz``, positive up)."""
    f = fee_magnitude(soil, geom)
    ang = geom.rho + soil.delta - geom.alpha
    return ForceVec(f * math.sin(ang), f * math.cos(ang))


def beta_nominal(phi: float) -> float:
    """Failure angle for a frictionless vertical blade in flat cohesionless soil."""
    return math.pi / 4 - 0.5 * phi


def n_gamma_dbeta(phi: float, delta: float, alpha: float, rho: float, beta: float) -> float:
    """Analytic partial derivative of N_gamma with respect to beta."""
    eta = delta + rho + phi + beta
    sin_eta = math.sin(eta)
    k = 1.0 / math.tan(rho) + 1.0 / math.tan(beta)
    s = math.sin(alpha + phi + beta)
    dk = -1.0 / math.sin(beta) ** 2
    return ((dk * s + k * math.cos(alpha + phi + beta)) / (2.0 * sin_eta)
            - k * s * math.cos(eta) / (2.0 * sin_eta * sin_eta))


def solve_beta_raw(phi: float, delta: float, alpha: float, rho: float,
                   limits: FeeLimits = DEFAULT_LIMITS) -> float:
    """Failure angle minimizing N_gamma, searched inside the beta clipping range.

    The minimum is located as the sign change of the analytic derivative.
    When the seed ``beta_nominal(phi)`` is already stationary (N_gamma flat in
    beta, e.g. a frictionless vertical blade with phi = 0) the seed is returned.
    """
    lo = limits.beta[0]
    hi = min(limits.beta[1], limits.eta[1] - (delta + rho + phi))
    if not hi > lo:
        raise NoStationaryPoint("beta bracket is empty for this configuration")
    seed = min(max(beta_nominal(phi), lo), hi)
    n_seed = float(n_factors_raw(phi, delta, alpha, rho, seed)[0])
    d_seed = n_gamma_dbeta(phi, delta, alpha, rho, seed)
    if abs(d_seed) <= 1e-12 * max(abs(n_seed), 1e-300):
        return seed
    d_lo = n_gamma_dbeta(phi, delta, alpha, rho, lo)
    d_hi = n_gamma_dbeta(phi, delta, alpha, rho, hi)
    if not (d_lo < 0.0 < d_hi):
        raise NoStationaryPoint("N_gamma has no interior minimum in the beta bracket")
    # The seed splits the bracket; the root lies on the side where the slope flips.
    if d_seed > 0.0:
        a, b = lo, seed
    else:
        a, b = seed, hi
    return brentq(lambda x: n_gamma_dbeta(phi, delta, alpha, rho, x), a, b,
                  xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)


def solve_beta(soil: SoilProperties, geom: CutGeometry,
               limits: FeeLimits = DEFAULT_LIMITS) -> float:
    """Stationary point of N_gamma in beta; raises :class:`NoStationaryPoint`."""
    return solve_beta_raw(soil.phi, soil.delta, geom.alpha, geom.rho, limits)


def beta_or_nominal(phi: float, delta: float, alpha: float, rho: float) -> float:
    try:
        return solve_beta_raw(phi, delta, alpha, rho)
    except NoStationaryPoint:
        return beta_nominal(phi)


def _n_gamma_dbeta_raw(phi, delta, alpha, rho, beta):
    eta = delta + rho + phi + beta
    sin_eta = np.sin(eta)
    k = 1.0 / np.tan(rho) + 1.0 / np.tan(beta)
    s = np.sin(alpha + phi + beta)
    dk = -1.0 / np.sin(beta) ** 2
    return ((dk * s + k * np.cos(alpha + phi + beta)) / (2.0 * sin_eta)
            - k * s * np.cos(eta) / (2.0 * sin_eta * sin_eta))


def solve_beta_array(phi, delta, alpha, rho, limits: FeeLimits = DEFAULT_LIMITS,
                     iterations: int = 100, xtol: float = 1e-14) -> np.ndarray:
    """Vectorised :func:`beta_or_nominal` using Illinois false position on the N_gamma slope.

    Entries without an interior minimum get the (clipped) nominal angle.
    """
    phi, delta, alpha, rho = np.broadcast_arrays(*(np.asarray(v, dtype=float)
                                                   for v in (phi, delta, alpha, rho)))
    lo = np.full(phi.shape, limits.beta[0])
    hi = np.minimum(limits.beta[1], limits.eta[1] - (delta + rho + phi))
    nominal = np.pi / 4 - 0.5 * phi
    ok = hi > lo
    hi_s = np.where(ok, hi, lo + 1.0)

    def slope(b):
        return _n_gamma_dbeta_raw(phi, delta, alpha, rho, b)

    with np.errstate(all="ignore"):
        d_lo, d_hi = slope(lo), slope(hi_s)
        seed = np.clip(nominal, lo, hi_s)
        d_seed = slope(seed)
        n_seed = n_factors_raw(phi, delta, alpha, rho, seed)[0]
        flat = ok & (np.abs(d_seed) <= 1e-12 * np.maximum(np.abs(n_seed), 1e-300))
        bracket = ok & (d_lo < 0.0) & (d_hi > 0.0) & ~flat
        right = d_seed > 0.0
        a = np.where(right, lo, seed)
        b = np.where(right, seed, hi_s)
        fa = np.where(right, d_lo, d_seed)
        fb = np.where(right, d_seed, d_hi)
        side = np.zeros(phi.shape, dtype=int)
        active = bracket & (fa < 0.0) & (fb > 0.0)
        c_prev = np.full(phi.shape, np.inf)
        for _ in range(iterations):
            if not active.any():
                break
            c = b - fb * (b - a) / (fb - fa)
            c = np.where(np.isfinite(c) & (c > a) & (c < b), c, 0.5 * (a + b))
            fc = slope(c)
            pos = fc > 0.0
            # Illinois: halve the stale end point to keep superlinear convergence.
            fa = np.where(pos & (side == 1), 0.5 * fa, fa)
            fb = np.where(~pos & (side == -1), 0.5 * fb, fb)
            b = np.where(active & pos, c, b)
            fb = np.where(active & pos, fc, fb)
            a = np.where(active & ~pos, c, a)
            fa = np.where(active & ~pos, fc, fa)
            side = np.where(pos, 1, -1)
            active &= (b - a > xtol) & (fc != 0.0) & (np.abs(c - c_prev) > xtol)
            c_prev = c
        root = np.where(np.abs(fa) < np.abs(fb), a, b)
    return np.where(bracket, root, np.where(flat, seed, nominal))


def fee_jacobian(soil: SoilProperties, geom: CutGeometry,
                 rel_step: float = 1e-6, abs_floor: float = 1e-9) -> np.ndarray:
    """2x5 Jacobian of ``(fx, fz)`` w.r.t. ``(c, phi, c_a, delta, gamma)``.

    Central differences with a per-parameter step ``max(rel_step*|theta|, abs_floor)``.
    beta is resolved once and held fixed while differentiating.
    """
    beta = _resolved_beta(soil, geom)
    theta = soil.as_array()
    jac = np.empty((2, 5))
    for j in range(5):
        h = max(rel_step * abs(theta[j]), abs_floor)
        tp = theta.copy()
        tm = theta.copy()
        tp[j] += h
        tm[j] -= h
        for t in (tp, tm):
            _check_sines(t[1], t[3], geom.rho, beta)
        fp = fee_force_raw(*tp, geom.alpha, geom.rho, geom.d, geom.w, geom.Q, beta)
        fm = fee_force_raw(*tm, geom.alpha, geom.rho, geom.d, geom.w, geom.Q, beta)
        jac[0, j] = (fp[0] - fm[0]) / (2 * h)
        jac[1, j] = (fp[1] - fm[1]) / (2 * h)
    return jac


# ---------------------------------------------------------------------------
# Uncertainty machinery
# ---------------------------------------------------------------------------

def propagate_covariance(J: np.ndarray, S_theta: np.ndarray) -> np.ndarray:
    """Force covariance ``J diag(exp(S)) J^T`` from log-variances ``S``.

    ``J`` is 2k x 5 (k stacked timesteps); the per-step 2x2 diagonal blocks are
    returned with shape ``(k, 2, 2)``.
    """
    J = np.atleast_2d(np.asarray(J, dtype=float))
    var = np.exp(np.asarray(S_theta, dtype=float))
    k = J.shape[0] // 2
    Jk = J.reshape(k, 2, J.shape[1])
    cov = np.einsum("kip,p,kjp->kij", Jk, var, Jk)
    return 0.5 * (cov + np.swapaxes(cov, 1, 2))


def truncated_pinv(J: np.ndarray, a_tol: float = 1500.0, r_tol: float = 0.05):
    """Pseudo-inverse discarding singular values below ``max(a_tol, r_tol*s_max)``.

    Returns ``(J_pinv, V_kept)`` where ``V_kept`` holds the retained right
    singular vectors as columns.
    """
    J = np.atleast_2d(np.asarray(J, dtype=float))
    u, s, vt = np.linalg.svd(J, full_matrices=False)
    cutoff = max(a_tol, r_tol * (s[0] if s.size else 0.0))
    keep = s >= cutoff
    uk, sk, vk = u[:, keep], s[keep], vt[keep].T
    pinv = vk @ (uk.T / sk[:, None]) if sk.size else np.zeros((J.shape[1], J.shape[0]))
    return pinv, vk


def nullspace_inflate(J: np.ndarray, sigma_theta: np.ndarray, sigma_ambiguity: np.ndarray,
                      a_tol: float = 1500.0, r_tol: float = 0.05) -> np.ndarray:
    """Raise parameter variances along directions the Jacobian cannot observe.

    The ambiguity covariance is projected onto the (truncated) nullspace,
    ``(I - J^+ J) Sigma_a``, and each variance is floored at the diagonal of
    that projection.
    """
    sigma_theta = np.asarray(sigma_theta, dtype=float)
    sigma_ambiguity = np.asarray(sigma_ambiguity, dtype=float)
    pinv, _ = truncated_pinv(J, a_tol, r_tol)
    proj = np.eye(sigma_theta.size) - pinv @ np.atleast_2d(J)
    sigma_null = np.diag(proj @ np.diag(sigma_ambiguity))
    return np.maximum(sigma_theta, sigma_null)


def nll_loss(F: np.ndarray, F_hat: np.ndarray, Sigma_F: np.ndarray) -> float:
    """Gaussian negative log-likelihood averaged over timesteps (constant dropped)."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    F_hat = np.atleast_2d(np.asarray(F_hat, dtype=float))
    Sigma_F = np.asarray(Sigma_F, dtype=float).reshape(-1, 2, 2)
    det = np.linalg.det(Sigma_F)
    if np.any(~(det > _DET_FLOOR)):
        raise SingularCovariance(f"force covariance determinant below {_DET_FLOOR}")
    r = F - F_hat
    maha = np.einsum("ki,kij,kj->k", r, np.linalg.inv(Sigma_F), r)
    return float(np.mean(0.5 * (maha + np.log(det))))


def wmae_loss(F, F_hat, w_xz=(1.0, 0.5)) -> float:
    r = np.abs(np.atleast_2d(np.asarray(F, float)) - np.atleast_2d(np.asarray(F_hat, float)))
    return float(np.mean(r @ np.asarray(w_xz, dtype=float)))


def fee_validity(soil: SoilProperties, geom: CutGeometry,
                 limits: FeeLimits = DEFAULT_LIMITS) -> bool:
    if not geom.d >= 0:
        return False
    if not limits.rho[0] <= geom.rho <= limits.rho[1]:
        return False
    beta = geom.beta if geom.beta is not None else beta_nominal(soil.phi)
    if not limits.beta[0] <= beta <= limits.beta[1]:
        return False
    eta = soil.delta + geom.rho + soil.phi + beta
    return limits.eta[0] <= eta <= limits.eta[1]


def index_geometry(soil: SoilProperties) -> CutGeometry:
    geom = CutGeometry(alpha=INDEX_ALPHA, rho=INDEX_RHO, d=INDEX_DEPTH, w=INDEX_WIDTH, Q=0.0)
    return geom.with_beta(beta_or_nominal(soil.phi, soil.delta, geom.alpha, geom.rho))


def fee_index(soil: SoilProperties) -> float:
    """FEE force at the fixed reference cut; a scalar soil-strength comparator."""
    return fee_magnitude(soil, index_geometry(soil))
