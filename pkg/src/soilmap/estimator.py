"""Bound-constrained least-squares inversion of the FEE for soil properties.

The unknowns ``(c, phi, c_a, delta, gamma)`` are fitted to a window of
measured blade forces with a Levenberg-Marquardt loop in box-scaled
variables.  The failure angle is re-solved at every iterate, so the
Jacobian is the total derivative of the force.  Parameter variances come from
the Gauss-Newton normal matrix and are then raised along unobservable
directions by nullspace inflation.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import lsq_linear

from .errors import NoContact, NonFinite
from .fee import (PARAM_NAMES, SoilProperties, beta_or_nominal, fee_force_raw, n_factors_raw,
                  nll_loss, nullspace_inflate, propagate_covariance, solve_beta_array)
from .fusion import SoilEstimate

log = logging.getLogger(__name__)

DEFAULT_LOWER = np.array([0.0, 0.0, 0.0, 0.0, 5e3])
DEFAULT_UPPER = np.array([1e5, math.radians(50.0), 1e4, math.radians(40.0), 2.5e4])
DEFAULT_SIGMA_AMBIGUITY = np.array([5e3 ** 2, math.radians(10.0) ** 2, 2e3 ** 2,
                                    math.radians(8.0) ** 2, 5e3 ** 2])
WINDOW_COLUMNS = ("t", "alpha", "rho", "w", "d", "Q", "Fx", "Fz")

_CONTACT_EPS = 1e-6
_FD_STEP = 1e-6  # central-difference step in box-scaled units
_SCALAR_BETA_MAX = 8  # below this many distinct geometries brentq beats vector bisection


@dataclass
class MeasurementWindow:
    """Per-step cut geometry and measured forces over one prediction horizon.

    ``alpha``, ``rho`` and ``w`` may be scalars (held over the window) or
    per-step arrays; ``F`` has shape ``(P, 2)`` holding ``(Fx, Fz)``.
    """

    alpha: np.ndarray
    rho: np.ndarray
    w: np.ndarray
    d: np.ndarray
    Q: np.ndarray
    F: np.ndarray
    w_xz: tuple = (1.0, 0.5)
    t: Optional[np.ndarray] = None

    def __post_init__(self):
        self.d = np.atleast_1d(np.asarray(self.d, dtype=float))
        P = self.d.size
        self.alpha, self.rho, self.w, self.Q = (
            np.broadcast_to(np.asarray(v, dtype=float), (P,)).copy()
            for v in (self.alpha, self.rho, self.w, self.Q))
        self.F = np.asarray(self.F, dtype=float).reshape(P, 2)
        self.t = np.arange(P, dtype=float) if self.t is None else np.asarray(self.t, float).reshape(P)
        if P < 1:
            raise ValueError("a window needs at least one step")
        stacked = np.concatenate([self.alpha, self.rho, self.w, self.d, self.Q, self.F.ravel()])
        if not np.all(np.isfinite(stacked)):
            raise NonFinite("window contains non-finite values")
        if np.any(self.d < 0) or np.any(self.Q < 0) or np.any(self.w <= 0):
            raise ValueError("need d >= 0, Q >= 0 and w > 0 at every step")
        if np.any(np.sin(self.rho) < 1e-9):
            raise ValueError("rho must lie strictly inside (0, pi)")

    @property
    def P(self) -> int:
        return self.d.size

    @property
    def has_contact(self) -> bool:
        return bool(np.any(self.d > _CONTACT_EPS) or np.any(self.Q > _CONTACT_EPS))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(WINDOW_COLUMNS)
            for k in range(self.P):
                row = (self.t[k], self.alpha[k], self.rho[k], self.w[k], self.d[k], self.Q[k],
                       self.F[k, 0], self.F[k, 1])
                wr.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path, w_xz=(1.0, 0.5)) -> "MeasurementWindow":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: no measurement rows")
        missing = set(WINDOW_COLUMNS) - set(rows[0])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        col = {k: np.array([float(r[k]) for r in rows]) for k in WINDOW_COLUMNS}
        return cls(col["alpha"], col["rho"], col["w"], col["d"], col["Q"],
                   np.column_stack([col["Fx"], col["Fz"]]), tuple(w_xz), col["t"])


@dataclass
class EstimatorConfig:
    lower: np.ndarray = field(default_factory=lambda: DEFAULT_LOWER.copy())
    upper: np.ndarray = field(default_factory=lambda: DEFAULT_UPPER.copy())
    initial: Optional[SoilProperties] = None
    max_iterations: int = 100
    step_tol: float = 1e-10
    cost_tol: float = 1e-12
    fit_floor: float = 1e-16  # stop once cost <= fit_floor * cost of the zero model
    sigma_ambiguity: np.ndarray = field(default_factory=lambda: DEFAULT_SIGMA_AMBIGUITY.copy())
    a_tol: float = 1500.0
    r_tol: float = 0.05
    phi_grid_step: float = math.radians(1.0)
    gn_rcond: float = 1e-10  # relative eigenvalue cutoff of the Gauss-Newton pseudo-inverse

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float).reshape(5)
        self.upper = np.asarray(self.upper, dtype=float).reshape(5)
        self.sigma_ambiguity = np.asarray(self.sigma_ambiguity, dtype=float).reshape(5)
        if np.any(~(self.lower < self.upper)):
            raise ValueError("every lower bound must be below its upper bound")
        if np.any(~(self.sigma_ambiguity > 0)):
            raise ValueError("ambiguity variances must be positive")

    @property
    def span(self) -> np.ndarray:
        return self.upper - self.lower

    def prior(self) -> SoilProperties:
        if self.initial is not None:
            return self.initial
        return SoilProperties.from_array(0.5 * (self.lower + self.upper))

    @classmethod
    def from_dict(cls, data: dict) -> "EstimatorConfig":
        """Build from a plain mapping; ``bounds`` maps parameter names to ``[lo, hi]``."""
        kw = {}
        base = cls()
        bounds = data.get("bounds", {})
        unknown = set(bounds) - set(PARAM_NAMES)
        if unknown:
            raise ValueError(f"unknown bound names {sorted(unknown)}")
        lower, upper = base.lower.copy(), base.upper.copy()
        for k, name in enumerate(PARAM_NAMES):
            if name in bounds:
                lower[k], upper[k] = map(float, bounds[name])
        kw["lower"], kw["upper"] = lower, upper
        if "sigma_ambiguity" in data:
            sa = data["sigma_ambiguity"]
            kw["sigma_ambiguity"] = [float(sa[n]) for n in PARAM_NAMES] if isinstance(sa, dict) else sa
        if "initial" in data:
            kw["initial"] = SoilProperties(**{k: float(v) for k, v in data["initial"].items()})
        for key in ("max_iterations", "step_tol", "cost_tol", "fit_floor", "a_tol", "r_tol", "phi_grid_step",
                    "gn_rcond"):
            if key in data:
                kw[key] = type(getattr(base, key))(data[key])
        return cls(**kw)


# ---------------------------------------------------------------------------
# Forward model
# ---------------------------------------------------------------------------

def window_betas(phi, delta, window: MeasurementWindow) -> np.ndarray:
    """Failure angle at every step.

    ``phi`` and ``delta`` may be equal-length 1-D arrays of candidate values;
    the result then has shape ``(len(phi), P)``, otherwise ``(P,)``.
    """
    scalar = np.ndim(phi) == 0
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    delta = np.broadcast_to(np.asarray(delta, dtype=float), phi.shape)
    geo = np.column_stack([window.alpha, window.rho])
    uniq, inverse = np.unique(geo, axis=0, return_inverse=True)
    if phi.size * len(uniq) <= _SCALAR_BETA_MAX:
        betas = np.array([[beta_or_nominal(p, dl, a, r) for a, r in uniq]
                          for p, dl in zip(phi, delta)])
    else:
        betas = solve_beta_array(phi[:, None], delta[:, None], uniq[None, :, 0], uniq[None, :, 1])
    out = betas[:, inverse.reshape(-1)]
    return out[0] if scalar else out


def predict_forces(theta, window: MeasurementWindow, beta=None) -> np.ndarray:
    """Model forces ``(P, 2)`` for parameters ``theta`` in PARAM_NAMES order."""
    theta = np.asarray(theta, dtype=float)
    if beta is None:
        beta = window_betas(theta[1], theta[3], window)
    with np.errstate(all="ignore"):
        fx, fz = fee_force_raw(*theta, window.alpha, window.rho, window.d, window.w, window.Q, beta)
    return np.column_stack([fx, fz])


def _sqrt_weights(window: MeasurementWindow) -> np.ndarray:
    return np.sqrt(np.asarray(window.w_xz, dtype=float))


def _residual(theta, window: MeasurementWindow, sw):
    """Weighted residual vector and the failure angles it used."""
    beta = window_betas(theta[1], theta[3], window)
    return ((predict_forces(theta, window, beta) - window.F) * sw).ravel(), beta


def _jacobian(theta, window: MeasurementWindow, span, lower, upper, beta=None) -> np.ndarray:
    """Unweighted total-derivative force Jacobian ``(2P, 5)`` in physical units.

    The cohesion, adhesion and unit-weight columns are exact (the force is
    linear in them); the friction columns are central differences with the
    failure angle re-solved on both sides.
    """
    if beta is None:
        beta = window_betas(theta[1], theta[3], window)
    with np.errstate(all="ignore"):
        n_g, n_c, _, n_ca = n_factors_raw(theta[1], theta[3], window.alpha, window.rho, beta)
    ang = window.rho + theta[3] - window.alpha
    direction = np.column_stack([np.sin(ang), np.cos(ang)])
    dw = window.d * window.w
    J = np.empty((2 * window.P, 5))
    for k, coeff in ((0, dw * n_c), (2, dw * n_ca), (4, window.d * dw * n_g)):
        J[:, k] = (direction * coeff[:, None]).ravel()
    thetas = []
    for k in (1, 3):
        h = _FD_STEP * span[k]
        tp, tm = theta.copy(), theta.copy()
        tp[k] = min(theta[k] + h, upper[k] + h)
        tm[k] = max(theta[k] - h, lower[k] - h)
        thetas += [tp, tm]
    thetas = np.array(thetas)
    betas = window_betas(thetas[:, 1], thetas[:, 3], window)
    for n, k in enumerate((1, 3)):
        tp, tm = thetas[2 * n], thetas[2 * n + 1]
        fp = predict_forces(tp, window, betas[2 * n])
        fm = predict_forces(tm, window, betas[2 * n + 1])
        J[:, k] = ((fp - fm) / (tp[k] - tm[k])).ravel()
    return J


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def _initial_guess(window: MeasurementWindow, cfg: EstimatorConfig) -> np.ndarray:
    """Force direction gives delta; a friction-angle scan with bounded linear
    solves for the remaining (linear) parameters gives the rest."""
    lo, hi = cfg.lower, cfg.upper
    mag = np.hypot(window.F[:, 0], window.F[:, 1])
    strong = mag > 1e-9
    if strong.any():
        raw = np.arctan2(window.F[strong, 0], window.F[strong, 1]) - window.rho[strong] + window.alpha[strong]
        delta0 = float(np.clip(np.median(raw), lo[3], hi[3]))
    else:
        delta0 = float(0.5 * (lo[3] + hi[3]))
    sw = _sqrt_weights(window)
    ang = window.rho + delta0 - window.alpha
    direction = np.column_stack([np.sin(ang), np.cos(ang)]) * sw
    dw = window.d * window.w
    lin_idx = [0, 2, 4]
    lin_scale = cfg.span[lin_idx]
    best = None
    phis = np.arange(lo[1], hi[1] + 0.5 * cfg.phi_grid_step, cfg.phi_grid_step)
    phis = np.clip(phis, lo[1], hi[1])
    all_betas = window_betas(phis, np.full(phis.shape, delta0), window)
    for phi, beta in zip(phis, all_betas):
        with np.errstate(all="ignore"):
            n_g, n_c, n_q, n_ca = n_factors_raw(phi, delta0, window.alpha, window.rho, beta)
        cols = [dw * n_c, dw * n_ca, window.d * dw * n_g]
        X = np.column_stack([(direction * c[:, None]).ravel() for c in cols]) * lin_scale
        y = (window.F * sw).ravel() - (direction * (window.Q * n_q)[:, None]).ravel()
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            continue
        sol = lsq_linear(X, y, bounds=(lo[lin_idx] / lin_scale, hi[lin_idx] / lin_scale),
                         method="bvls")
        cost = float(np.sum((X @ sol.x - y) ** 2))
        if best is None or cost < best[0]:
            best = (cost, phi, sol.x * lin_scale)
    if best is None:
        return 0.5 * (lo + hi)
    _, phi0, (c0, ca0, g0) = best
    return np.clip(np.array([c0, phi0, ca0, delta0, g0]), lo, hi)


@dataclass
class FitResult:
    estimate: SoilEstimate
    theta: np.ndarray
    cost: float
    iterations: int
    converged: bool
    jacobian: np.ndarray
    rank_deficient: bool


def _levenberg_marquardt(theta0, window: MeasurementWindow, cfg: EstimatorConfig):
    lo, span = cfg.lower, cfg.span
    sw = _sqrt_weights(window)
    wvec = np.tile(sw, window.P)
    u = (theta0 - lo) / span
    theta = lo + u * span
    r, beta = _residual(theta, window, sw)
    if not np.all(np.isfinite(r)):
        raise NonFinite("objective is not finite at the initial guess")
    cost = 0.5 * float(r @ r)
    floor = cfg.fit_floor * 0.5 * float(np.sum((window.F * sw) ** 2))
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        J = _jacobian(theta, window, span, cfg.lower, cfg.upper, beta) * wvec[:, None] * span[None, :]
        g = J.T @ r
        A = J.T @ J
        # Variables pinned at a bound with the gradient pushing outward stay fixed.
        active = ((u <= 0.0) & (g > 0.0)) | ((u >= 1.0) & (g < 0.0))
        free = ~active
        if not free.any() or cost <= floor:
            converged = True
            break
        Af, gf = A[np.ix_(free, free)], g[free]
        diag = np.maximum(np.diag(Af), 1e-12 * max(np.max(np.diag(Af)), 1e-300))
        accepted = False
        while lam < 1e14:
            try:
                s = np.linalg.solve(Af + lam * np.diag(diag), -gf)
            except np.linalg.LinAlgError:
                lam *= 4.0
                continue
            u_new = u.copy()
            u_new[free] += s
            u_new = np.clip(u_new, 0.0, 1.0)
            theta_new = lo + u_new * span
            r_new, beta_new = _residual(theta_new, window, sw)
            cost_new = 0.5 * float(r_new @ r_new) if np.all(np.isfinite(r_new)) else math.inf
            if cost_new <= cost:
                accepted = True
                step = float(np.linalg.norm(u_new - u))
                gain = cost - cost_new
                u, theta, r, cost, beta = u_new, theta_new, r_new, cost_new, beta_new
                lam = max(lam / 3.0, 1e-12)
                break
            lam *= 4.0
        if not accepted or step < cfg.step_tol or gain <= cfg.cost_tol * (cost + gain):
            converged = accepted or cost == 0.0
            break
    return theta, cost, it, converged


def _covariance(theta, window: MeasurementWindow, cfg: EstimatorConfig, cost: float):
    J = _jacobian(theta, window, cfg.span, cfg.lower, cfg.upper)
    wvec = np.tile(np.asarray(window.w_xz, dtype=float), window.P)
    dof = max(2 * window.P - 5, 1)
    s2 = 2.0 * cost / dof
    Js = J * cfg.span[None, :]
    normal = Js.T @ (Js * wvec[:, None])
    cov_s = s2 * np.linalg.pinv(normal, rcond=cfg.gn_rcond, hermitian=True)
    var = np.diag(cov_s) * cfg.span ** 2
    floor = (1e-9 * cfg.span) ** 2
    var = np.maximum(var, floor)
    var = nullspace_inflate(J, var, cfg.sigma_ambiguity, cfg.a_tol, cfg.r_tol)
    return var, J


def is_rank_deficient(window: MeasurementWindow) -> bool:
    """Constant depth and no surcharge: the force cannot separate the terms."""
    mean_d = float(np.mean(window.d))
    cv = float(np.std(window.d) / mean_d) if mean_d > 0 else 0.0
    return cv < 0.05 and float(np.max(window.Q)) <= _CONTACT_EPS


def fit_soil_properties_full(window: MeasurementWindow, cfg: Optional[EstimatorConfig] = None,
                             warm_start=None) -> FitResult:
    """Like :func:`fit_soil_properties` but also returns solver diagnostics.

    ``warm_start`` (e.g. the previous estimate) competes with the scanned
    initial guess; whichever has the lower cost seeds the solver.
    """
    cfg = cfg or EstimatorConfig()
    if not window.has_contact:
        prior = SoilEstimate(cfg.prior(), cfg.sigma_ambiguity.copy())
        raise NoContact("no blade contact in the measurement window", estimate=prior)
    theta0 = _initial_guess(window, cfg)
    if warm_start is not None:
        sw = _sqrt_weights(window)
        ws = np.clip(np.asarray(warm_start, dtype=float), cfg.lower, cfg.upper)
        r_ws, _ = _residual(ws, window, sw)
        r_0, _ = _residual(theta0, window, sw)
        if np.all(np.isfinite(r_ws)) and not float(r_0 @ r_0) <= float(r_ws @ r_ws):
            theta0 = ws
    theta, cost, iters, converged = _levenberg_marquardt(theta0, window, cfg)
    var, J = _covariance(theta, window, cfg, cost)
    deficient = is_rank_deficient(window)
    if deficient:
        var = np.maximum(var, cfg.sigma_ambiguity)
    if not np.all(np.isfinite(var)) or not np.all(np.isfinite(theta)):
        raise NonFinite("estimate is not finite")
    theta = np.clip(theta, cfg.lower, cfg.upper)
    est = SoilEstimate(SoilProperties.from_array(theta), var)
    if not converged:
        log.debug("estimator stopped after %d iterations without converging", iters)
    return FitResult(est, theta, cost, iters, converged, J, deficient)


def fit_soil_properties(window: MeasurementWindow,
                        cfg: Optional[EstimatorConfig] = None) -> SoilEstimate:
    """Soil properties and variances that best explain the window's forces.

    Raises
    ------
    NoContact
        If every step has zero depth and zero surcharge; the exception carries
        the prior with the ambiguity variances as ``estimate``.
    NonFinite
        If the objective cannot be evaluated.
    """
    return fit_soil_properties_full(window, cfg).estimate


def step_jacobian(theta, window: MeasurementWindow, beta=None) -> np.ndarray:
    """Stacked ``(2P, 5)`` force Jacobian with the failure angle held fixed."""
    theta = np.asarray(theta, dtype=float)
    if beta is None:
        beta = window_betas(theta[1], theta[3], window)
    J = np.empty((2 * window.P, 5))
    for k in range(5):
        h = max(1e-6 * abs(theta[k]), 1e-9)
        tp, tm = theta.copy(), theta.copy()
        tp[k] += h
        tm[k] -= h
        J[:, k] = ((predict_forces(tp, window, beta) - predict_forces(tm, window, beta)) / (2 * h)).ravel()
    return J


def nll_report(window: MeasurementWindow, est: SoilEstimate) -> float:
    """Mean Gaussian NLL of the window's forces under the propagated estimate."""
    theta = est.theta.as_array()
    beta = window_betas(theta[1], theta[3], window)
    J = step_jacobian(theta, window, beta)
    sigma_f = propagate_covariance(J, np.log(est.var))
    return nll_loss(window.F, predict_forces(theta, window, beta), sigma_f)


def synth_window(soil: SoilProperties, alpha, rho, w, d, Q, noise_std: float = 0.0,
                 rng: Optional[np.random.Generator] = None, w_xz=(1.0, 0.5)) -> MeasurementWindow:
    """Window whose forces are the FEE at ``soil`` plus optional Gaussian noise."""
    d = np.atleast_1d(np.asarray(d, dtype=float))
    geo = MeasurementWindow(alpha, rho, w, d, Q, np.zeros((d.size, 2)), w_xz)
    F = predict_forces(soil.as_array(), geo)
    if noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng()
        F = F + rng.normal(0.0, noise_std, F.shape)
    geo.F = F
    return geo


def format_estimate(est: SoilEstimate) -> str:
    lines = [f"{name:>6s} = {mean:.6g} +- {std:.3g}"
             for name, mean, std in zip(PARAM_NAMES, est.theta.as_array(), est.std)]
    return "\n".join(lines)
