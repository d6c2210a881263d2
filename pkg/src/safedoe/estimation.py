"""Maximum-likelihood estimation, Laplace posterior and adequacy statistics.

Models are duck-typed: anything with ``n_theta``, ``n_outputs``,
``predict(U, theta) -> (n, n_y)`` and ``jacobian(U, theta) -> (n, n_y, n_theta)``
works. ``log_params()`` (optional) marks strictly positive parameters that are
searched on a log scale.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.optimize import least_squares
from scipy.stats import qmc

from .errors import EstimationError, IntegrationError, StatisticsError

log = logging.getLogger(__name__)


@dataclass
class PosteriorGaussian:
    """Laplace approximation N(mean, cov) around the MLE."""

    mean: np.ndarray
    cov: np.ndarray
    dof: int
    singular: bool = False

    @property
    def std(self):
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def wald_contains(self, theta, alpha=0.05):
        """Membership of ``theta`` in the 100(1-alpha)% Wald ellipsoid."""
        d = np.asarray(theta, dtype=float) - self.mean
        q = d @ np.linalg.pinv(self.cov) @ d
        return bool(q <= stats.chi2.ppf(1 - alpha, self.mean.size))


@dataclass
class FitReport:
    theta: np.ndarray
    cov: np.ndarray
    chi2_sample: float
    chi2_ref: float
    t_values: np.ndarray
    t_ref: float
    dof: int
    alpha: float = 0.05
    chi2_pass: bool = field(init=False)
    t_pass: np.ndarray = field(init=False)

    def __post_init__(self):
        self.chi2_pass = bool(self.chi2_sample < self.chi2_ref)
        self.t_pass = np.asarray(self.t_values) > self.t_ref

    @property
    def passed(self):
        return bool(self.chi2_pass and np.all(self.t_pass))

    def to_dict(self):
        return {
            "theta": self.theta.tolist(),
            "cov_diag": np.diag(self.cov).tolist(),
            "chi2_sample": self.chi2_sample,
            "chi2_ref": self.chi2_ref,
            "t_values": np.asarray(self.t_values).tolist(),
            "t_ref": self.t_ref,
            "dof": self.dof,
            "alpha": self.alpha,
            "chi2_pass": self.chi2_pass,
            "t_pass": self.t_pass.tolist(),
        }


@dataclass
class MleResult:
    theta: np.ndarray
    chi2: float
    underdetermined: bool
    n_converged: int


def _weighted(model, U, Y, sigma):
    def resid(theta):
        return ((model.predict(U, theta) - Y) / sigma).ravel()

    def jac(theta):
        return (model.jacobian(U, theta) / sigma[None, :, None]).reshape(-1, theta.size)

    return resid, jac


def _screen(model, U, Y, sigma, thetas):
    """Weighted residual sum for many parameter sets at once (inf on failure)."""
    n, m = len(thetas), len(U)
    Ut, Tt = np.tile(U, (n, 1)), np.repeat(thetas, m, axis=0)
    with np.errstate(all="ignore"):
        try:
            pred = model.predict(Ut, Tt, check=False)
        except TypeError:
            try:
                pred = model.predict(Ut, Tt)
            except IntegrationError:
                return np.full(n, np.inf)
        r = (pred.reshape(n, m, -1) - Y[None]) / sigma
        c = np.sum(r * r, axis=(1, 2))
    return np.where(np.isfinite(c), c, np.inf)


def weighted_chi2(model, U, Y, sigma, theta):
    """Sum of squared residuals weighted by the measurement variances."""
    r = (model.predict(U, theta) - Y) / sigma
    return float(np.sum(r * r))


def mle_fit(model, U, Y, sigma, bounds=None, theta0=None, n_starts=10, seed=0,
            max_nfev=200, screen_factor=5) -> MleResult:
    """Multi-start weighted least squares (Gaussian MLE with known noise).

    Parameters
    ----------
    U : (n, n_u) designs; Y : (n, n_y) measurements; sigma : (n_y,) noise stds.
    bounds : (lower, upper) in parameter units; defaults to ``model.default_bounds()``.
    theta0 : optional extra starting point, tried first.
    """
    U = np.atleast_2d(np.asarray(U, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    sigma = np.asarray(sigma, dtype=float)
    lo, hi = bounds if bounds is not None else model.default_bounds()
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    mask = model.log_params() if hasattr(model, "log_params") else np.zeros(lo.size, bool)

    def to_z(theta):
        return np.where(mask, np.log(np.where(mask, theta, 1.0)), theta)

    def to_theta(z):
        return np.where(mask, np.exp(np.where(mask, z, 0.0)), z)

    zlo, zhi = to_z(lo), to_z(hi)
    resid, jac = _weighted(model, U, Y, sigma)
    n_res = Y.size

    def fz(z):
        try:
            r = resid(to_theta(z))
        except IntegrationError:
            r = None
        if r is None or not np.all(np.isfinite(r)):
            # rejected trial point: large but finite so the trust region shrinks
            return np.full(n_res, 1e6)
        return r

    def jz(z):
        th = to_theta(z)
        return jac(th) * np.where(mask, th, 1.0)[None, :]

    starts = []
    if theta0 is not None:
        starts.append(np.clip(to_z(np.asarray(theta0, dtype=float)), zlo, zhi))
    n_lhs = max(n_starts - len(starts), 0)
    if n_lhs:
        # screen an oversampled hypercube in one batched simulation, keep the best
        cand = qmc.scale(qmc.LatinHypercube(d=lo.size, seed=seed).random(screen_factor * n_lhs), zlo, zhi)
        costs = _screen(model, U, Y, sigma, to_theta(cand))
        order = np.argsort(costs, kind="stable")
        starts.extend(cand[i] for i in order[:n_lhs] if np.isfinite(costs[i]))

    best, n_ok = None, 0
    for z0 in starts:
        try:
            res = least_squares(fz, z0, jac=jz, bounds=(zlo, zhi), method="trf",
                                x_scale="jac", ftol=1e-12, xtol=1e-12, gtol=1e-12,
                                max_nfev=max_nfev)
        except (IntegrationError, FloatingPointError) as exc:
            log.debug("estimation start failed: %s", exc)
            continue
        if not np.isfinite(res.cost):
            continue
        n_ok += res.status > 0
        if best is None or res.cost < best.cost:
            best = res
    if best is None:
        raise EstimationError("every estimation start failed", best=None)
    theta = to_theta(best.x)
    if n_ok == 0:
        raise EstimationError("no estimation start converged", best=theta)
    n_obs = Y.size
    return MleResult(theta=theta, chi2=2.0 * float(best.cost),
                     underdetermined=n_obs < theta.size, n_converged=int(n_ok))


def information_matrix(model, U, theta, sigma):
    """Gauss-Newton information J^T Sigma^-1 J summed over experiments."""
    S = model.jacobian(np.atleast_2d(U), theta) / np.asarray(sigma)[None, :, None]
    J = S.reshape(-1, S.shape[-1])
    M = J.T @ J
    return 0.5 * (M + M.T)


def laplace_posterior(theta_hat, model, U, Y, sigma) -> PosteriorGaussian:
    """Gaussian posterior with covariance from the inverse Gauss-Newton information."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    M = information_matrix(model, U, theta_hat, sigma)
    n = M.shape[0]
    w, Q = np.linalg.eigh(M)
    singular = bool(w.min() <= 1e-12 * max(w.max(), 1e-300) * n)
    if singular:
        log.warning("information matrix is singular; using pseudo-inverse")
        V = np.linalg.pinv(M, rcond=1e-12, hermitian=True)
    else:
        V = (Q / w) @ Q.T
    V = 0.5 * (V + V.T)
    vw, vQ = np.linalg.eigh(V)
    floor = 1e-12 * max(np.trace(V), 0.0) / n
    V = (vQ * np.maximum(vw, floor)) @ vQ.T
    dof = int(np.asarray(Y).size - n)
    return PosteriorGaussian(mean=theta_hat.copy(), cov=0.5 * (V + V.T), dof=dof, singular=singular)


def chi2_quantile(p, dof):
    return float(stats.chi2.ppf(p, dof))


def t_quantile(p, dof):
    return float(stats.t.ppf(p, dof))


def statistics(theta_hat, V, chi2_sample, n_obs, alpha=0.05) -> FitReport:
    """Goodness-of-fit and per-parameter t-tests.

    t_j = |theta_j| / (sqrt(V_jj) * t(1 - alpha/2, dof)) is compared with the
    one-sided reference t(1 - alpha, dof); the chi-square test compares the
    weighted residual sum with its (1 - alpha) quantile.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    dof = int(n_obs - theta_hat.size)
    if dof <= 0:
        raise StatisticsError(f"degrees of freedom must be positive (got {dof})")
    sd = np.sqrt(np.clip(np.diag(V), 0.0, None))
    half = t_quantile(1 - alpha / 2, dof)
    with np.errstate(divide="ignore"):
        tv = np.where(sd > 0, np.abs(theta_hat) / (np.where(sd > 0, sd, 1.0) * half), np.inf)
    return FitReport(theta=theta_hat, cov=np.asarray(V, dtype=float), chi2_sample=float(chi2_sample),
                     chi2_ref=chi2_quantile(1 - alpha, dof), t_values=tv,
                     t_ref=t_quantile(1 - alpha, dof), dof=dof, alpha=alpha)
