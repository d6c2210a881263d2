"""Independent brute-force checks used by the tests and the ``oracle`` command.

Each oracle recomputes a library quantity by a different route (closed form,
sampling or finite differences) and reports both values with their relative
error.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .gp import GpModel, HyperFitConfig, KernelSpec, gp_fit
from .kinetics import sensitivities
from .objective import gaussian_propagate
from .safeopt import cantelli_r

TWO_POINT_DEFAULT = {
    "family": "se",
    "signal_variance": 1.3,
    "inv_sq_lengthscales": [2.0],
    "noise_variance": 1e-2,
    "X": [[0.0], [0.7]],
    "y": [0.4, -0.3],
    "x": [[0.25], [1.5]],
}

SIN_DEFAULT = {"n": 20, "lower": -3.0, "upper": 3.0, "noise": 0.01, "seed": 0, "mean": 0.1, "var": 0.01}


def _rel(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))


def read_fixture(path, default):
    """Fixture dict from a JSON file, or a copy of ``default`` when ``path`` is None."""
    if path is None:
        return dict(default)
    fx = dict(default)
    fx.update(json.loads(Path(path).read_text()))
    return fx


def cantelli_oracle(eps):
    """Cantelli factor next to the one-sided Chebyshev bound solved for r by bisection."""
    eps = float(eps)
    lo, hi = 0.0, 1e6
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        # Cantelli: P(X - mu >= r sd) <= 1 / (1 + r^2)
        if 1.0 / (1.0 + mid * mid) > eps:
            lo = mid
        else:
            hi = mid
    ref = 0.5 * (lo + hi)
    lib = cantelli_r(eps)
    return {"oracle": ref, "library": lib, "rel_err": _rel(lib, ref)}


def two_point_closed_form(k11, k12, k22, noise, y, ks1, ks2, kss):
    """GP posterior at one test point from two data points by explicit 2x2 algebra."""
    a, b, d = k11 + noise, k12, k22 + noise
    det = a * d - b * b
    inv = np.array([[d, -b], [-b, a]]) / det
    ks = np.array([ks1, ks2])
    mean = ks @ inv @ np.asarray(y, dtype=float)
    var = kss - ks @ inv @ ks
    return float(mean), float(var)


def _se(s, lam, x, xp):
    return s * np.exp(-0.5 * float(np.sum(np.asarray(lam) * (np.asarray(x) - np.asarray(xp)) ** 2)))


def gp_two_point_oracle(fixture=None):
    """Library posterior on a two-point SE dataset against the 2x2 closed form."""
    fx = read_fixture(fixture, TWO_POINT_DEFAULT)
    if fx["family"] != "se":
        raise ValueError("the two-point oracle is written for the SE kernel")
    s, lam, sn = fx["signal_variance"], np.asarray(fx["inv_sq_lengthscales"]), fx["noise_variance"]
    X = np.asarray(fx["X"], dtype=float)
    y = np.asarray(fx["y"], dtype=float)
    spec = KernelSpec("se", s, lam, sn)
    model = GpModel(spec, X, y)
    rows = []
    for x in np.asarray(fx["x"], dtype=float):
        ref = two_point_closed_form(_se(s, lam, X[0], X[0]), _se(s, lam, X[0], X[1]), _se(s, lam, X[1], X[1]),
                                    sn, y, _se(s, lam, x, X[0]), _se(s, lam, x, X[1]), s)
        lib = model.predict(x)
        rows.append({"x": x.tolist(), "oracle": ref, "library": lib, "rel_err": _rel(lib, ref)})
    return rows


def sin_fixture(fixture=None):
    """GP fitted to noisy samples of sin(x) with SE kernel and multistart hyperparameters."""
    fx = read_fixture(fixture, SIN_DEFAULT)
    rng = np.random.default_rng(fx["seed"])
    X = np.linspace(fx["lower"], fx["upper"], int(fx["n"]))[:, None]
    y = np.sin(X[:, 0]) + fx["noise"] * rng.standard_normal(X.shape[0])
    gp = gp_fit(X, y, family="se", cfg=HyperFitConfig(n_multistarts=10, seed=fx["seed"]))
    return gp, fx


def mc_propagate_oracle(fixture=None, samples=100_000, seed=1):
    """Gaussian-approximation moments of a GP under a Gaussian input against sampling.

    The sampled mean is E[m(x)], the sampled variance E[S(x)] + Var[m(x)]
    (law of total variance).
    """
    gp, fx = sin_fixture(fixture)
    mu = np.array([fx["mean"]])
    cov = np.array([[fx["var"]]])
    m_hat, s_hat = gaussian_propagate(gp, mu, cov)
    xs = np.random.default_rng(seed).normal(fx["mean"], np.sqrt(fx["var"]), size=int(samples))
    m, s = gp.predict(xs[:, None])
    ref_m, ref_s = float(np.mean(m)), float(np.mean(s) + np.var(m))
    return {"oracle": [ref_m, ref_s], "library": [m_hat, s_hat],
            "rel_err": [_rel(m_hat, ref_m), _rel(s_hat, ref_s)]}


def fd_sensitivity_oracle(model, u, theta, step=1e-5):
    """Library sensitivities against central differences of the outlet state."""
    theta = np.asarray(theta, dtype=float)
    lib = sensitivities(model, u, theta)
    ref = np.empty_like(lib)
    for j in range(theta.size):
        h = step * max(abs(theta[j]), 1.0)
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        ref[:, j] = (model.predict(u, tp) - model.predict(u, tm)) / (2 * h)
    scale = np.maximum(np.abs(ref), 1e-8 * np.max(np.abs(ref)))
    return {"oracle": ref.tolist(), "library": lib.tolist(),
            "rel_err": float(np.max(np.abs(lib - ref) / scale))}


ORACLES = ("cantelli", "gp2pt", "mc-propagate", "fd-sens")
