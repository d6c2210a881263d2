"""Chance-constraint tightening, per-constraint trust regions and the design solve.

Designs are handled in normalized coordinates v in [-1, 1]^n_u. A chance
constraint P(g(v) <= 0) >= 1 - eps on a GP-modelled observable is replaced by
the distribution-free Cantelli bound m(v) + r sqrt(S(v)) <= 0.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .errors import NotFittedError, OptimizationError, SafeDoeError
from .gp import GpModel

log = logging.getLogger(__name__)

RHO_GUARD = 1e-6


def cantelli_r(eps):
    """Tightening factor r = sqrt((1 - eps) / eps) for violation probability eps."""
    eps = float(eps)
    if not 0.0 < eps < 1.0:
        raise SafeDoeError(f"violation probability must lie in (0, 1), got {eps}")
    return float(np.sqrt((1.0 - eps) / eps))


@dataclass
class ChanceConstraint:
    """Observable g_i modelled by a GP whose prior mean is the model prediction."""

    index: int
    name: str
    epsilon: float
    gp: GpModel = None

    def __post_init__(self):
        cantelli_r(self.epsilon)

    @property
    def r(self):
        return cantelli_r(self.epsilon)

    def tightened(self, v):
        if self.gp is None or not self.gp.fitted:
            raise NotFittedError(f"constraint {self.name} has no fitted GP")
        m, s = self.gp.predict(np.asarray(v, dtype=float))
        return m + self.r * np.sqrt(s)


def tightened_constraint(c: ChanceConstraint, v):
    """m(v) + r sqrt(S(v)); the design is deemed safe when this is <= 0."""
    return c.tightened(v)


@dataclass(frozen=True)
class TrustRegion:
    """Radius (normalized design units) and update parameters of one constraint."""

    radius: float
    eta1: float = 1e-3
    eta2: float = 1e-2
    t1: float = 2.0
    t2: float = 0.5
    t3: float = 0.5

    def __post_init__(self):
        if not self.radius > 0:
            raise SafeDoeError("trust-region radius must be positive")
        if not (self.t2 < 1.0 < self.t1 and 0.0 < self.t2 and 0.0 < self.t3 < 1.0):
            raise SafeDoeError("need 0 < t2 < 1 < t1 and 0 < t3 < 1")
        if not 0.0 <= self.eta1 <= self.eta2:
            raise SafeDoeError("need 0 <= eta1 <= eta2")


def accuracy_ratio(g_obs, g_pred, guard=RHO_GUARD):
    """rho = ((g_obs - g_pred) / g_obs)^2, with |g_obs| floored at ``guard``."""
    den = max(abs(float(g_obs)), guard)
    return float(((g_obs - g_pred) / den) ** 2)


def tr_update(tr: TrustRegion, rho) -> TrustRegion:
    """Grow the radius when the prediction was accurate, shrink it when poor."""
    if rho < 0:
        raise SafeDoeError("accuracy ratio must be non-negative")
    if rho <= tr.eta1:
        return replace(tr, radius=tr.radius * tr.t1)
    if rho >= tr.eta2:
        return replace(tr, radius=tr.radius * tr.t2)
    return tr


def tr_backtrack(tr: TrustRegion) -> TrustRegion:
    """Shrink after an observed violation."""
    return replace(tr, radius=tr.radius * tr.t3)


@dataclass
class DesignResult:
    v: np.ndarray
    feasible: bool
    value: float
    constraint_values: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def _ball_starts(center, radius, lower, upper, n, seed):
    """Center plus Latin-hypercube points mapped into the ball and clipped to the box."""
    d = center.size
    pts = [center.copy()]
    if n > 1:
        cube = 2.0 * qmc.LatinHypercube(d=d, seed=seed).random(n - 1) - 1.0
        norms = np.linalg.norm(cube, axis=1)
        inf = np.max(np.abs(cube), axis=1)
        # radial map from the unit cube onto the unit ball
        scale = np.where(norms > 0, inf / np.where(norms > 0, norms, 1.0), 0.0)
        pts.extend(np.clip(center + radius * cube * scale[:, None], lower, upper))
    return pts


def solve_constrained(objective, constraints, center, radius, lower=-1.0, upper=1.0, n_starts=10,
                      seed=0, feas_tol=1e-6, maxiter=100, starts=None):
    """Minimize ``objective`` over box  and ball ||v - center|| <= radius s.t. c(v) <= 0.

    Each entry of ``constraints`` maps v to a scalar that must be <= 0. Local
    SLSQP solves start from the center and Latin-hypercube points inside the
    ball; the best point passing the post-hoc check (constraints <= feas_tol,
    inside ball and box) wins. When no start is feasible the center is returned
    flagged infeasible. ``starts`` overrides the generated starting points.
    """
    center = np.asarray(center, dtype=float)
    d = center.size
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (d,))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (d,))
    radius = float(radius)

    def cvals(v):
        return np.array([float(c(v)) for c in constraints])

    def in_region(v):
        return (np.linalg.norm(v - center) <= radius + 1e-8
                and np.all(v >= lower - 1e-12) and np.all(v <= upper + 1e-12))

    cons = [{"type": "ineq", "fun": lambda v, c=c: -float(c(v))} for c in constraints]
    cons.append({"type": "ineq", "fun": lambda v: radius ** 2 - float(np.sum((v - center) ** 2))})
    best, n_fail, messages = None, 0, []
    if starts is None:
        starts = _ball_starts(center, radius, lower, upper, n_starts, seed)
    n_starts = len(starts)
    for v0 in starts:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                res = minimize(objective, v0, method="SLSQP", bounds=list(zip(lower, upper)),
                               constraints=cons, options={"maxiter": maxiter, "ftol": 1e-9})
            v = np.clip(res.x, lower, upper)
            step = np.linalg.norm(v - center)
            if step > radius:
                v = center + (v - center) * (radius / step)
            f = float(objective(v))
            g = cvals(v)
        except (SafeDoeError, np.linalg.LinAlgError, ValueError) as exc:
            n_fail += 1
            messages.append(str(exc))
            continue
        if not np.isfinite(f) or not in_region(v) or (g.size and np.max(g) > feas_tol):
            continue
        if best is None or f < best[1]:
            best = (v, f, g)
    if n_fail == n_starts:
        raise OptimizationError("every design start failed", diagnostics={"errors": messages})
    if best is None:
        try:
            g0 = cvals(center)
            f0 = float(objective(center))
        except SafeDoeError:
            g0, f0 = np.full(len(constraints), np.nan), np.nan
        log.info("no feasible design inside the trust region; holding the current point")
        return DesignResult(center.copy(), False, f0, g0, {"n_failed": n_fail})
    return DesignResult(best[0], True, best[1], best[2], {"n_failed": n_fail})


def restore_feasibility(constraints, center, lower=-1.0, upper=1.0, n_starts=10, seed=0, feas_tol=1e-6,
                        maxiter=100):
    """Nearest point to ``center`` (within the box) satisfying every constraint c(v) <= 0.

    Returns ``None`` when no start reaches a feasible point.
    """
    center = np.asarray(center, dtype=float)
    d = center.size
    lower = np.broadcast_to(np.asarray(lower, dtype=float), (d,))
    upper = np.broadcast_to(np.asarray(upper, dtype=float), (d,))
    if all(float(c(center)) <= feas_tol for c in constraints):
        return center.copy()
    starts = [center.copy()]
    if n_starts > 1:
        cube = qmc.LatinHypercube(d=d, seed=seed).random(n_starts - 1)
        starts.extend(lower + cube * (upper - lower))
    cons = [{"type": "ineq", "fun": lambda v, c=c: -float(c(v))} for c in constraints]
    best = None
    for v0 in starts:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                res = minimize(lambda v: float(np.sum((v - center) ** 2)), v0, method="SLSQP",
                               jac=lambda v: 2.0 * (v - center), bounds=list(zip(lower, upper)),
                               constraints=cons, options={"maxiter": maxiter, "ftol": 1e-12})
            v = np.clip(res.x, lower, upper)
            if max(float(c(v)) for c in constraints) > feas_tol:
                continue
        except (SafeDoeError, np.linalg.LinAlgError, ValueError):
            continue
        dist = float(np.linalg.norm(v - center))
        if best is None or dist < best[1]:
            best = (v, dist)
    return None if best is None else best[0]


def solve_design(surrogate, constraints, trust_regions, u_k, mu_theta, Sigma_theta, alpha_J=None,
                 n_starts=10, seed=0) -> DesignResult:
    """Safe D-optimal design step.

    Minimizes m_hat_J - alpha_J sqrt(S_hat_J) (propagated objective surrogate)
    subject to every tightened chance constraint and the ball of radius
    min_i R_i around the current normalized design ``u_k``.
    """
    alpha = surrogate.alpha_J if alpha_J is None else alpha_J
    Sz = surrogate.scaled_covariance(mu_theta, Sigma_theta)

    def objective(v):
        m, s = surrogate.propagate_normalized(v, mu_theta, Sigma_theta, Sz)
        return m - alpha * np.sqrt(s)

    radius = min(tr.radius for tr in trust_regions)
    funcs = [c.tightened for c in constraints]
    return solve_constrained(objective, funcs, u_k, radius, n_starts=n_starts, seed=seed)
