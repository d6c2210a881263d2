"""Fisher information, D-optimal loss and the objective surrogate over (u, theta).

The design loss is J(u, theta) = -log det(FIM(u, theta) + M0), so smaller is
more informative. A GP trained on in-silico evaluations of J lets the
parametric uncertainty be marginalized analytically: for a Gaussian input
block the surrogate mean and variance are pushed through a first/second order
Taylor expansion (see :func:`gaussian_propagate`).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .gp import GpModel, HyperFitConfig, gp_fit
from .kinetics import DesignSpace, sensitivities

log = logging.getLogger(__name__)


@dataclass
class FimSpec:
    """Measurement weighting diag(1/sigma^2) and accumulated prior information M0."""

    weights: np.ndarray
    prior: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.prior = np.asarray(self.prior, dtype=float)
        if np.any(self.weights <= 0):
            raise ValueError("measurement weights must be positive")
        if self.prior.ndim != 2 or self.prior.shape[0] != self.prior.shape[1]:
            raise ValueError("prior information must be a square matrix")

    @classmethod
    def from_noise(cls, noise_std, n_theta, prior=None):
        w = 1.0 / np.asarray(noise_std, dtype=float) ** 2
        return cls(w, np.zeros((n_theta, n_theta)) if prior is None else prior)


def fim_from_jacobian(J, spec: FimSpec):
    """J^T W J + M0 for one (n_y, p) or a batch (n, n_y, p) of sensitivity matrices."""
    J = np.asarray(J, dtype=float)
    M = np.einsum("...ia,i,...ib->...ab", J, spec.weights, J) + spec.prior
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def fim(model, u, theta, spec: FimSpec):
    """Expected information of one experiment at ``u`` plus the prior information."""
    return fim_from_jacobian(sensitivities(model, u, theta), spec)


def d_metric(M):
    """D-optimal loss -log det(M + eps I) with eps = 1e-10 trace(M)/n.

    Works on a single matrix or a stack; lower is better.
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[-1]
    eps = 1e-10 * np.trace(M, axis1=-2, axis2=-1) / n
    A = M + eps[..., None, None] * np.eye(n)
    sign, logdet = np.linalg.slogdet(A)
    bad = sign <= 0
    if np.any(bad):
        # numerically indefinite: fall back on clipped eigenvalues
        w = np.linalg.eigvalsh(0.5 * (A + np.swapaxes(A, -1, -2)))
        alt = np.sum(np.log(np.maximum(w, 1e-300)), axis=-1)
        logdet = np.where(bad, alt, logdet)
    return -logdet


def gaussian_propagate(gp: GpModel, x_mean, cov, idx=None):
    """Mean and variance of a GP output when some inputs are Gaussian.

    Parameters
    ----------
    gp : fitted GpModel
    x_mean : (d,) input; entries ``idx`` are the means of the random inputs.
    cov : (q, q) covariance of the random block.
    idx : indices of the random inputs (default: all).

    Returns
    -------
    m_hat = m(x_mean),
    S_hat = S(x_mean) + 1/2 tr(H_S cov) + g_m^T cov g_m, floored at 0,
    with g_m and H_S the mean gradient and variance Hessian on the random block.
    """
    x_mean = np.asarray(x_mean, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    idx = np.arange(x_mean.size) if idx is None else np.asarray(idx)
    if not np.any(cov):
        return gp.predict(x_mean)
    m, s, g, H = gp.propagation_terms(x_mean)
    g = g[idx]
    H = H[np.ix_(idx, idx)]
    s_hat = s + 0.5 * np.sum(H * cov) + g @ cov @ g
    return m, max(float(s_hat), 0.0)


class IdentityCoordinates:
    """Surrogate parameter coordinates equal to theta itself."""

    @staticmethod
    def to_reference(theta):
        return np.array(theta, dtype=float)

    @staticmethod
    def from_reference(w):
        return np.array(w, dtype=float)

    @staticmethod
    def reference_jacobian(theta):
        return np.eye(np.size(theta))


@dataclass
class ObjectiveSurrogate:
    """GP over (normalized design, scaled parameters) approximating J.

    Inputs are ``[v, z]`` with v in [-1, 1]^n_u the normalized design and
    z = (w - center) / half_width, where w = coords.to_reference(theta). For
    kinetic models w is (log k at 90 degC, E) per reaction, which removes the
    pre-exponential/activation-energy correlation that makes J hard to fit.
    A Gaussian theta block N(mu, Sigma) is mapped to w by the delta method.
    The GP is fitted on standardized J.
    """

    gp: GpModel
    space: DesignSpace
    center: np.ndarray
    half_width: np.ndarray
    j_mean: float
    j_std: float
    alpha_J: float = 0.5
    coords: object = field(default_factory=IdentityCoordinates)
    samples: np.ndarray = field(default=None, repr=False)
    values: np.ndarray = field(default=None, repr=False)

    @property
    def n_u(self):
        return self.space.dim

    def scale_theta(self, theta):
        return (self.coords.to_reference(theta) - self.center) / self.half_width

    def unscale_theta(self, z):
        return self.coords.from_reference(self.center + self.half_width * np.asarray(z, dtype=float))

    def predict(self, v, theta):
        """Surrogate mean and variance of J at a normalized design and fixed theta."""
        x = np.concatenate([np.asarray(v, dtype=float), self.scale_theta(theta)])
        m, s = self.gp.predict(x)
        return self.j_mean + self.j_std * m, self.j_std ** 2 * s

    def scaled_covariance(self, mu, Sigma):
        A = self.coords.reference_jacobian(mu) / self.half_width[:, None]
        return A @ np.asarray(Sigma, dtype=float) @ A.T

    def propagate_normalized(self, v, mu, Sigma, Sz=None):
        """Propagated (mean, variance) of J; ``Sz`` may pass a precomputed scaled covariance."""
        x = np.concatenate([np.asarray(v, dtype=float), self.scale_theta(mu)])
        if Sz is None:
            Sz = self.scaled_covariance(mu, Sigma)
        idx = np.arange(self.n_u, x.size)
        m, s = gaussian_propagate(self.gp, x, Sz, idx)
        return self.j_mean + self.j_std * m, self.j_std ** 2 * s

    def lower_bound(self, v, mu, Sigma, Sz=None):
        """Optimistic design objective m_hat - alpha_J sqrt(S_hat)."""
        m, s = self.propagate_normalized(v, mu, Sigma, Sz)
        return m - self.alpha_J * np.sqrt(s)

    def to_csv(self, path, theta_names=None):
        """Write the training set (design in physical units, theta, J)."""
        p = self.center.size
        names = list(self.space.names) + list(theta_names or [f"theta_{i + 1}" for i in range(p)]) + ["J"]
        U = self.space.denormalize(self.samples[:, :self.n_u])
        T = self.unscale_theta(self.samples[:, self.n_u:])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for row in np.column_stack([U, T, self.values]):
                w.writerow([repr(float(x)) for x in row])


def propagate(surrogate: ObjectiveSurrogate, u, mu, Sigma):
    """Propagated (mean, variance) of J at a physical design ``u``."""
    return surrogate.propagate_normalized(surrogate.space.normalize(u), mu, Sigma)


def theta_box(mu, Sigma, coords=None, bounds=None, width=3.0):
    """Box mu_w +- width*sd_w in surrogate coordinates, as (center, half_width).

    ``bounds`` (theta units) clip the coordinates that ``coords`` leaves
    unchanged; the spread of transformed coordinates comes from the delta method.
    """
    coords = coords or IdentityCoordinates()
    mu = np.asarray(mu, dtype=float)
    A = coords.reference_jacobian(mu)
    sd = np.sqrt(np.clip(np.diag(A @ np.atleast_2d(Sigma) @ A.T), 0.0, None))
    w = coords.to_reference(mu)
    lo, hi = w - width * sd, w + width * sd
    if bounds is not None:
        same = np.all(np.isclose(A, np.eye(mu.size)), axis=1)
        lo = np.where(same, np.maximum(lo, bounds[0]), lo)
        hi = np.where(same, np.minimum(hi, bounds[1]), hi)
    half = np.maximum(0.5 * (hi - lo), 1e-6 * np.maximum(np.abs(w), 1.0))
    return 0.5 * (hi + lo), half


def train_objective_surrogate(model, space: DesignSpace, posterior, spec: FimSpec, size=200, seed=0,
                              bounds=None, family="matern52", alpha_J=0.5, hyper: HyperFitConfig = None,
                              max_resample=5) -> ObjectiveSurrogate:
    """Fit the objective surrogate on a Latin hypercube over designs x parameter box.

    The parameter box is the posterior mean +- 3 sd in the model's reference
    coordinates (see ``KineticModel.to_reference``), clipped to ``bounds`` where
    the coordinate is theta itself. Samples whose simulation fails are
    replaced by fresh uniform draws, up to ``max_resample`` rounds.
    """
    if family not in ("se", "matern52"):
        raise ValueError("the objective surrogate needs a twice differentiable kernel ('se' or 'matern52')")
    coords = model if hasattr(model, "to_reference") else IdentityCoordinates()
    center, half = theta_box(posterior.mean, posterior.cov, coords, bounds)
    n_u, p = space.dim, center.size
    rng = np.random.default_rng(seed)
    shell = ObjectiveSurrogate(None, space, center, half, 0.0, 1.0, coords=coords)
    X = 2.0 * qmc.LatinHypercube(d=n_u + p, seed=rng).random(size) - 1.0
    J = _losses(model, shell, X, spec)
    for _ in range(max_resample):
        bad = ~np.isfinite(J)
        if not np.any(bad):
            break
        log.info("resampling %d objective samples with failed simulations", int(bad.sum()))
        X[bad] = 2.0 * rng.random((int(bad.sum()), n_u + p)) - 1.0
        J[bad] = _losses(model, shell, X[bad], spec)
    ok = np.isfinite(J)
    X, J = X[ok], J[ok]
    j_mean = float(np.mean(J))
    j_std = float(np.std(J))
    if j_std < 1e-12:
        j_std = 1.0
    gp = gp_fit(X, (J - j_mean) / j_std, family=family, cfg=hyper)
    return ObjectiveSurrogate(gp=gp, space=space, center=center, half_width=half, j_mean=j_mean,
                              j_std=j_std, alpha_J=alpha_J, coords=coords, samples=X, values=J)


def _losses(model, shell, X, spec):
    n_u = shell.n_u
    U = shell.space.denormalize(X[:, :n_u])
    T = shell.unscale_theta(X[:, n_u:])
    with np.errstate(all="ignore"):
        S = sensitivities(model, U, T, check=False)
        J = np.full(len(X), np.nan)
        good = np.all(np.isfinite(S), axis=(1, 2))
        if np.any(good):
            J[good] = d_metric(fim_from_jacobian(S[good], spec))
    return J

