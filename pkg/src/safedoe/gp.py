"""Gaussian-process regression with an optional parametric prior mean.

Kernels are stationary functions of the scaled squared distance

    r2 = (x - x')^T diag(lam) (x - x'),

where ``lam`` holds inverse squared lengthscales (larger means faster decay).
The GP models the residual ``y - prior_mean(X)``; predictions add the prior
back, so far from the data the posterior mean reverts to the prior mean.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg
from scipy.linalg import lapack
from scipy.optimize import minimize
from scipy.spatial.distance import cdist
from scipy.stats import qmc

from .errors import ConditioningError, DimensionError, NotFittedError, SafeDoeError

log = logging.getLogger(__name__)

FAMILIES = ("se", "matern32", "matern52")
_SQRT3 = np.sqrt(3.0)
_SQRT5 = np.sqrt(5.0)
# relative to the mean Gram diagonal
_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass(frozen=True)
class KernelSpec:
    """Covariance function and its hyperparameters.

    Parameters
    ----------
    family : {"se", "matern32", "matern52"}
    signal_variance : float
        Prior variance, ``k(x, x)``, in squared output units.
    inv_sq_lengthscales : array_like
        Diagonal of the input weighting matrix, one entry per input dimension.
    noise_variance : float
        Observation noise variance added to the Gram diagonal.
    """

    family: str
    signal_variance: float
    inv_sq_lengthscales: np.ndarray
    noise_variance: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        lam = np.atleast_1d(np.asarray(self.inv_sq_lengthscales, dtype=float))
        object.__setattr__(self, "inv_sq_lengthscales", lam)
        if not self.signal_variance > 0:
            raise ValueError("signal_variance must be > 0")
        if not self.noise_variance >= 0:
            raise ValueError("noise_variance must be >= 0")
        if lam.ndim != 1 or np.any(~(lam > 0)):
            raise ValueError("inverse squared lengthscales must be a vector of positive values")

    @property
    def dim(self):
        return self.inv_sq_lengthscales.size


def _profile(family, r2, s):
    """Kernel value and its first two derivatives with respect to ``r2``."""
    if family == "se":
        k = s * np.exp(-0.5 * r2)
        return k, -0.5 * k, 0.25 * k
    r = np.sqrt(r2)
    if family == "matern52":
        e = np.exp(-_SQRT5 * r)
        k = s * (1.0 + _SQRT5 * r + (5.0 / 3.0) * r2) * e
        k1 = -(5.0 / 6.0) * s * (1.0 + _SQRT5 * r) * e
        k2 = (25.0 / 12.0) * s * e
        return k, k1, k2
    e = np.exp(-_SQRT3 * r)
    k = s * (1.0 + _SQRT3 * r) * e
    k1 = -1.5 * s * e
    with np.errstate(divide="ignore"):
        k2 = np.where(r > 0, (3.0 * _SQRT3 / 4.0) * s * e / np.where(r > 0, r, 1.0), np.inf)
    return k, k1, k2


def _sqdist(A, B, lam):
    w = np.sqrt(lam)
    return cdist(A * w, B * w, "sqeuclidean")


def kernel_eval(spec: KernelSpec, x, xp) -> float:
    """Covariance between two single points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xp = np.atleast_1d(np.asarray(xp, dtype=float))
    if x.shape != (spec.dim,) or xp.shape != (spec.dim,):
        raise DimensionError(
            f"points of shape {x.shape} and {xp.shape} do not match kernel dimension {spec.dim}")
    d = x - xp
    r2 = float(np.sum(spec.inv_sq_lengthscales * d * d))
    return float(_profile(spec.family, r2, spec.signal_variance)[0])


def gram(spec: KernelSpec, A, B=None):
    """Noise-free cross-covariance matrix ``k(A, B)``."""
    A = np.atleast_2d(A)
    B = A if B is None else np.atleast_2d(B)
    return _profile(spec.family, _sqdist(A, B, spec.inv_sq_lengthscales), spec.signal_variance)[0]


def _cholesky(K, jitters=_JITTERS):
    """Cholesky with escalating diagonal jitter; returns (factor, jitter used)."""
    scale = float(np.mean(np.diag(K)))
    n = K.shape[0]
    for j in jitters:
        try:
            L = linalg.cholesky(K + (j * scale) * np.eye(n), lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)):
            return L, j * scale
    raise ConditioningError(
        f"Gram matrix ({n}x{n}) is not positive definite even with jitter "
        f"{jitters[-1]:g} x mean diagonal; inputs may be duplicated or lengthscales too long")


class GpModel:
    """Fitted GP posterior.

    Parameters
    ----------
    kernel : KernelSpec
    X : (n, d) array
    y : (n,) array
    prior_mean : callable, optional
        Maps an (m, d) array to (m,) prior means. Zero when omitted.
    prior_grad : callable, optional
        Maps a (d,) point to the (d,) gradient of ``prior_mean``. Central
        finite differences are used when omitted.

    The instance is treated as immutable after construction; the only mutable
    field is ``n_clamped``, a diagnostic counter of negative variances clamped
    to zero.
    """

    def __init__(self, kernel: KernelSpec, X=None, y=None, prior_mean=None, prior_grad=None):
        self.kernel = kernel
        self.prior_mean = prior_mean
        self.prior_grad = prior_grad
        self.n_clamped = 0
        self.X = None
        if X is None:
            return
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=float).ravel()
        if X.shape[1] != kernel.dim:
            raise DimensionError(f"inputs have {X.shape[1]} columns, kernel expects {kernel.dim}")
        if X.shape[0] != y.size:
            raise DimensionError(f"{X.shape[0]} inputs but {y.size} targets")
        self.X = X
        self.y = y
        self.residual = y - self._prior(X)
        K = gram(kernel, X) + kernel.noise_variance * np.eye(len(y))
        self.L, self.jitter = _cholesky(K)
        self._Kinv = None
        self.alpha = linalg.cho_solve((self.L, True), self.residual, check_finite=False)

    @property
    def fitted(self):
        return self.X is not None

    def _require(self, x):
        if not self.fitted:
            raise NotFittedError("GP has no training data")
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.kernel.dim:
            raise DimensionError(f"point dimension {x.shape[-1]} != kernel dimension {self.kernel.dim}")
        return x

    def _prior(self, X):
        if self.prior_mean is None:
            return np.zeros(len(X))
        return np.asarray(self.prior_mean(X), dtype=float).reshape(len(X))

    def _prior_gradient(self, x):
        if self.prior_mean is None:
            return np.zeros_like(x)
        if self.prior_grad is not None:
            return np.asarray(self.prior_grad(x), dtype=float)
        h = 1e-6 * np.maximum(1.0, np.abs(x))
        steps = np.diag(h)
        f = self._prior(np.vstack([x + steps, x - steps]))
        d = x.size
        return (f[:d] - f[d:]) / (2 * h)

    def predict(self, Xs):
        """Posterior mean and latent variance.

        A single (d,) point returns scalars; an (m, d) array returns vectors.
        """
        Xs = self._require(Xs)
        single = Xs.ndim == 1
        Xs = np.atleast_2d(Xs)
        Ks = gram(self.kernel, Xs, self.X)
        m = self._prior(Xs) + Ks @ self.alpha
        v = linalg.solve_triangular(self.L, Ks.T, lower=True, check_finite=False)
        var = self.kernel.signal_variance - np.sum(v * v, axis=0)
        neg = var < 0
        if np.any(neg):
            self.n_clamped += int(np.sum(neg))
            var = np.where(neg, 0.0, var)
        if single:
            return float(m[0]), float(var[0])
        return m, var

    def _local(self, x):
        x = self._require(x)
        if x.ndim != 1:
            raise DimensionError("derivatives are evaluated at a single point")
        lam = self.kernel.inv_sq_lengthscales
        D = x[None, :] - self.X
        r2 = np.sum(lam * D * D, axis=1)
        k, k1, k2 = _profile(self.kernel.family, r2, self.kernel.signal_variance)
        G = 2.0 * k1[:, None] * (D * lam)
        return x, D, k, k1, k2, G

    def mean_grad(self, x):
        """Gradient of the posterior mean at a single point."""
        x, _, _, _, _, G = self._local(x)
        return self._prior_gradient(x) + G.T @ self.alpha

    def var_grad_hess(self, x):
        """Gradient and Hessian of the posterior variance at a single point."""
        x, D, k, k1, k2, G = self._local(x)
        if not np.all(np.isfinite(k2)):
            raise SafeDoeError(
                f"{self.kernel.family} variance Hessian is undefined at a training input")
        lam = self.kernel.inv_sq_lengthscales
        v = linalg.cho_solve((self.L, True), k, check_finite=False)
        W = linalg.solve_triangular(self.L, G, lower=True, check_finite=False)
        LD = D * lam
        grad = -2.0 * G.T @ v
        hess = -2.0 * (W.T @ W + 4.0 * (LD * (v * k2)[:, None]).T @ LD
                       + 2.0 * float(v @ k1) * np.diag(lam))
        return grad, 0.5 * (hess + hess.T)

    def propagation_terms(self, x):
        """Mean, latent variance, mean gradient and variance Hessian at one point.

        Shares the kernel evaluations of :meth:`predict`, :meth:`mean_grad` and
        :meth:`var_grad_hess`; used in the inner loop of the design solves.
        """
        x, D, k, k1, k2, G = self._local(x)
        if not np.all(np.isfinite(k2)):
            raise SafeDoeError(
                f"{self.kernel.family} variance Hessian is undefined at a training input")
        if getattr(self, "_Kinv", None) is None:
            Kinv, _ = lapack.dpotri(self.L, lower=1)
            self._Kinv = np.tril(Kinv) + np.tril(Kinv, -1).T
        lam = self.kernel.inv_sq_lengthscales
        m = float(self._prior(x[None, :])[0] + k @ self.alpha)
        v = self._Kinv @ k
        var = self.kernel.signal_variance - float(k @ v)
        if var < 0:
            self.n_clamped += 1
            var = 0.0
        grad_m = self._prior_gradient(x) + G.T @ self.alpha
        LD = D * lam
        hess = -2.0 * (G.T @ (self._Kinv @ G) + 4.0 * (LD * (v * k2)[:, None]).T @ LD
                       + 2.0 * float(v @ k1) * np.diag(lam))
        return m, var, grad_m, 0.5 * (hess + hess.T)


def gp_predict(model: GpModel, x):
    return model.predict(x)


def gp_mean_grad(model: GpModel, x):
    return model.mean_grad(x)


def gp_var_grad_hess(model: GpModel, x):
    return model.var_grad_hess(x)


@dataclass
class HyperFitConfig:
    """Settings for marginal-likelihood hyperparameter fitting.

    Bounds are natural logs of the hyperparameters in *standardized* units
    (residuals divided by their RMS).
    """

    n_multistarts: int = 10
    seed: int = 0
    log_signal_bounds: tuple = (np.log(1e-4), np.log(1e2))
    log_lam_bounds: tuple = (np.log(1e-3), np.log(1e3))
    log_noise_bounds: tuple = (np.log(1e-8), np.log(1.0))
    fixed_noise: Optional[float] = None
    maxiter: int = 200
    max_fit_points: Optional[int] = None
    initial: Optional[KernelSpec] = field(default=None, repr=False)

    def __post_init__(self):
        if self.n_multistarts < 1:
            raise ValueError("n_multistarts must be >= 1")
        for b in (self.log_signal_bounds, self.log_lam_bounds, self.log_noise_bounds):
            if not (np.all(np.isfinite(b)) and b[0] <= b[1]):
                raise ValueError(f"invalid bounds {b}")


def _neg_log_marglik(p, family, sq, r, noise):
    """Negative log marginal likelihood and gradient over log hyperparameters.

    ``sq`` holds per-dimension squared differences (d, n, n); ``noise`` is a
    fixed noise variance or None when it is the last entry of ``p``.
    """
    d = sq.shape[0]
    s = np.exp(p[0])
    lam = np.exp(p[1:1 + d])
    sn = np.exp(p[-1]) if noise is None else noise
    r2 = np.tensordot(lam, sq, axes=1)
    k, k1, _ = _profile(family, r2, s)
    n = r.size
    try:
        L, _ = _cholesky(k + sn * np.eye(n), jitters=(1e-10, 1e-8, 1e-6))
    except ConditioningError:
        return 1e10, np.zeros_like(p)
    a = linalg.cho_solve((L, True), r, check_finite=False)
    nll = 0.5 * r @ a + np.sum(np.log(np.diag(L))) + 0.5 * n * np.log(2 * np.pi)
    Kinv, _ = lapack.dpotri(L, lower=1)
    Kinv = np.tril(Kinv) + np.tril(Kinv, -1).T
    Wm = np.outer(a, a) - Kinv
    g = np.empty_like(p)
    g[0] = -0.5 * np.sum(Wm * k)
    Wk1 = Wm * k1
    for i in range(d):
        g[1 + i] = -0.5 * lam[i] * np.sum(Wk1 * sq[i])
    if noise is None:
        g[-1] = -0.5 * sn * np.trace(Wm)
    return nll, g


def gp_fit(X, y, family="se", prior_mean=None, cfg: HyperFitConfig | None = None,
           prior_grad=None) -> GpModel:
    """Fit kernel hyperparameters by maximizing the marginal likelihood.

    Residuals ``y - prior_mean(X)`` are divided by their RMS before fitting,
    and the fitted variances are rescaled afterwards. Starting points come from
    a Latin hypercube in log-hyperparameter space; the best local optimum over
    all starts is kept.
    """
    cfg = cfg or HyperFitConfig()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise DimensionError(f"{X.shape[0]} inputs but {y.size} targets")
    if y.size < 2:
        raise DimensionError("need at least two observations to fit a GP")
    n, d = X.shape
    prior = GpModel(KernelSpec(family, 1.0, np.ones(d)), prior_mean=prior_mean)
    resid = y - prior._prior(X)
    rms = float(np.sqrt(np.mean(resid ** 2)))
    scale = rms if rms > 1e-12 else 1.0
    r = resid / scale
    noise = None if cfg.fixed_noise is None else max(cfg.fixed_noise / scale ** 2, 1e-12)

    Xf, rf = X, r
    if cfg.max_fit_points is not None and n > cfg.max_fit_points:
        # tune hyperparameters on a seeded subset, condition on everything
        keep = np.sort(np.random.default_rng(cfg.seed).choice(n, cfg.max_fit_points, replace=False))
        Xf, rf = X[keep], r[keep]
    sq = (Xf.T[:, :, None] - Xf.T[:, None, :]) ** 2
    lo = [cfg.log_signal_bounds[0]] + [cfg.log_lam_bounds[0]] * d
    hi = [cfg.log_signal_bounds[1]] + [cfg.log_lam_bounds[1]] * d
    if noise is None:
        lo.append(cfg.log_noise_bounds[0])
        hi.append(cfg.log_noise_bounds[1])
    lo, hi = np.array(lo), np.array(hi)
    starts = qmc.scale(qmc.LatinHypercube(d=lo.size, seed=cfg.seed).random(cfg.n_multistarts), lo, hi)
    if cfg.initial is not None and cfg.initial.dim == d:
        p0 = [np.log(cfg.initial.signal_variance / scale ** 2)]
        p0 += list(np.log(cfg.initial.inv_sq_lengthscales))
        if noise is None:
            p0.append(np.log(max(cfg.initial.noise_variance / scale ** 2, 1e-300)))
        starts = np.vstack([np.clip(p0, lo, hi), starts])

    best = None
    for p0 in starts:
        res = minimize(_neg_log_marglik, p0, args=(family, sq, rf, noise), jac=True,
                       method="L-BFGS-B", bounds=list(zip(lo, hi)),
                       options={"maxiter": cfg.maxiter})
        if best is None or res.fun < best.fun:
            best = res
    p = best.x
    sn = np.exp(p[-1]) if noise is None else noise
    kernel = KernelSpec(family, float(np.exp(p[0]) * scale ** 2), np.exp(p[1:1 + d]),
                        float(sn * scale ** 2))
    model = GpModel(kernel, X, y, prior_mean=prior_mean, prior_grad=prior_grad)
    model.nll = float(best.fun)
    return model
