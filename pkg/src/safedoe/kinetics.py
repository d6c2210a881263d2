"""Flow-reactor kinetic models, in-silico plant and parameter sensitivities.

Both case studies reduce to an autonomous ODE in residence time,

    dc/dtau = S @ r(c, k(T)),   tau in [0, tau_end(u)],

which is integrated in the normalized coordinate s = tau / tau_end so a batch
of designs shares one fixed step grid. For the tubular reactor of case 1 this
is the spatial balance dc/dz = (A/F) S r over the length L, with
tau_end = L A / F.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numba
import numpy as np
from scipy.integrate import solve_ivp

from .errors import DimensionError, IntegrationError

R_GAS = 8.314  # J/(mol K)
T_REF_C = 90.0
KELVIN = 273.15

PARAMETRIZATIONS = ("standard", "centered", "reference")


def arrhenius(k0, E, T, form="standard"):
    """Rate constant from Arrhenius parameters.

    Parameters
    ----------
    k0 : array_like
        Pre-exponential factor (``standard``), log rate constant at 90 degC
        (``centered``) or rate constant at 90 degC (``reference``).
    E : array_like
        Activation energy in kJ/mol; for ``centered`` in units of 10 kJ/mol
        (the energy is ``E * 1e4`` J/mol).
    T : array_like
        Temperature in degC.
    """
    invT = 1.0 / (np.asarray(T, dtype=float) + KELVIN)
    if form == "standard":
        return k0 * np.exp(-E * 1e3 / R_GAS * invT)
    dinv = invT - 1.0 / (T_REF_C + KELVIN)
    if form == "centered":
        return np.exp(k0 - E * 1e4 / R_GAS * dinv)
    if form == "reference":
        return k0 * np.exp(-E * 1e3 / R_GAS * dinv)
    raise ValueError(f"unknown parametrization {form!r}")


@dataclass(frozen=True)
class DesignSpace:
    """Named box-bounded design variables with [-1, 1] normalization."""

    names: tuple
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float))
        if not np.all(self.upper > self.lower):
            raise ValueError("design upper bounds must exceed lower bounds")

    @property
    def dim(self):
        return len(self.names)

    def normalize(self, u):
        return 2.0 * (np.asarray(u, dtype=float) - self.lower) / (self.upper - self.lower) - 1.0

    def denormalize(self, v):
        return self.lower + (np.asarray(v, dtype=float) + 1.0) * 0.5 * (self.upper - self.lower)

    def contains(self, u, tol=1e-9):
        u = np.asarray(u, dtype=float)
        span = self.upper - self.lower
        return bool(np.all(u >= self.lower - tol * span) and np.all(u <= self.upper + tol * span))


def _first_order_chain(c, k):
    # A->B (k1 cA), B->C (k2 cB), A->C (k3 cA)
    r = [k[:, 0] * c[:, 0], k[:, 1] * c[:, 1]]
    if k.shape[1] > 2:
        r.append(k[:, 2] * c[:, 0])
    return np.stack(r, axis=1)


def _snar_bilinear(c, k):
    c1, c2, c3, c4 = c[:, 0], c[:, 1], c[:, 2], c[:, 3]
    return np.stack([k[:, 0] * c1 * c2, k[:, 1] * c1 * c2,
                     k[:, 2] * c2 * c3, k[:, 3] * c2 * c4], axis=1)


RATE_LAWS = {"first_order_chain": _first_order_chain, "snar_bilinear": _snar_bilinear}
_LAW_ID = {"first_order_chain": 0, "snar_bilinear": 1}


@numba.njit(cache=True)
def _rk4_batch(law, c0, k, tau, S, n):
    B, ns = c0.shape
    nr = S.shape[1]
    out = np.empty_like(c0)
    stages = np.empty((4, ns))
    tmp = np.empty(ns)
    r = np.empty(nr)
    h = 1.0 / n
    for b in range(B):
        c = c0[b].copy()
        tb = tau[b]
        for _ in range(n):
            for st in range(4):
                if st == 0:
                    for i in range(ns):
                        tmp[i] = c[i]
                else:
                    a = h if st == 3 else 0.5 * h
                    for i in range(ns):
                        tmp[i] = c[i] + a * stages[st - 1, i]
                if law == 0:
                    r[0] = k[b, 0] * tmp[0]
                    r[1] = k[b, 1] * tmp[1]
                    if nr > 2:
                        r[2] = k[b, 2] * tmp[0]
                else:
                    r[0] = k[b, 0] * tmp[0] * tmp[1]
                    r[1] = k[b, 1] * tmp[0] * tmp[1]
                    r[2] = k[b, 2] * tmp[1] * tmp[2]
                    r[3] = k[b, 3] * tmp[1] * tmp[3]
                for i in range(ns):
                    acc = 0.0
                    for j in range(nr):
                        acc += S[i, j] * r[j]
                    stages[st, i] = tb * acc
            for i in range(ns):
                c[i] += (h / 6.0) * (stages[0, i] + 2.0 * stages[1, i] + 2.0 * stages[2, i] + stages[3, i])
        out[b] = c
    return out


@dataclass(frozen=True)
class KineticModel:
    """Reaction network with Arrhenius rate constants.

    ``theta`` is laid out as (k0_1, E_1, k0_2, E_2, ...), one pair per
    reaction in the order of the stoichiometry columns.

    Attributes
    ----------
    reactor : {"pfr", "cstr_mix"}
        ``pfr``: single inlet stream, design u = (T, F), tau = length*area/F.
        ``cstr_mix``: design u = (T, F_1..F_m); stream j carries
        ``feed_conc[j]`` of species ``feed_species[j]`` (0 for a pure solvent),
        inlet concentrations are flow-weighted and tau = volume / sum(F).
    """

    name: str
    species: tuple
    stoich: np.ndarray
    rate_law: str
    parametrization: str = "standard"
    reactor: str = "pfr"
    inlet: tuple = ()
    length: float = 25.0
    area: float = 1.2
    volume: float = 2.0
    feed_species: tuple = ()
    feed_conc: tuple = ()
    n_steps: int = 200

    def __post_init__(self):
        object.__setattr__(self, "stoich", np.asarray(self.stoich, dtype=float))
        if self.stoich.shape[0] != len(self.species):
            raise DimensionError("stoichiometry rows must match species")
        if self.rate_law not in RATE_LAWS:
            raise ValueError(f"unknown rate law {self.rate_law!r}")
        if self.parametrization not in PARAMETRIZATIONS:
            raise ValueError(f"unknown parametrization {self.parametrization!r}")
        if self.reactor not in ("pfr", "cstr_mix"):
            raise ValueError(f"unknown reactor {self.reactor!r}")

    @property
    def n_species(self):
        return len(self.species)

    @property
    def n_reactions(self):
        return self.stoich.shape[1]

    @property
    def n_theta(self):
        return 2 * self.n_reactions

    @property
    def param_names(self):
        names = []
        for j in range(self.n_reactions):
            names += [f"k0_{j + 1}", f"Ea_{j + 1}"]
        return tuple(names)

    def rate_constants(self, u, theta):
        T = u[:, 0:1]
        return arrhenius(theta[:, 0::2], theta[:, 1::2], T, self.parametrization)

    def initial_state(self, u):
        n = u.shape[0]
        if self.reactor == "pfr":
            return np.tile(np.asarray(self.inlet, dtype=float), (n, 1))
        F = u[:, 1:]
        c0 = np.zeros((n, self.n_species))
        total = F.sum(axis=1)
        for j, (sp, conc) in enumerate(zip(self.feed_species, self.feed_conc)):
            if sp is not None and sp >= 0:
                c0[:, sp] += conc * F[:, j] / total
        return c0

    def residence_time(self, u):
        if self.reactor == "pfr":
            return self.length * self.area / u[:, 1]
        return self.volume / u[:, 1:].sum(axis=1)

    def rhs(self, c, k, tau):
        """Derivative with respect to normalized position s for a batch."""
        r = RATE_LAWS[self.rate_law](c, k)
        return tau[:, None] * (r @ self.stoich.T)

    # estimation/design adapter: every model used for fitting exposes these
    @property
    def n_outputs(self):
        return self.n_species

    def predict(self, U, theta, check=True):
        return integrate(self, np.atleast_2d(U), theta, check=check)

    def jacobian(self, U, theta):
        return sensitivities(self, np.atleast_2d(U), theta)

    def log_params(self):
        """Mask of parameters optimized on a log scale (strictly positive ones)."""
        mask = np.zeros(self.n_theta, dtype=bool)
        if self.parametrization != "centered":
            mask[0::2] = True
        return mask

    def to_reference(self, theta):
        """Map theta to (log k at 90 degC, E) pairs.

        Pre-exponential factor and activation energy are strongly correlated
        in the standard form; the log rate constant at a mid-range temperature
        and the activation energy are nearly independent.
        """
        w = np.array(theta, dtype=float)
        k0, E = w[..., 0::2], w[..., 1::2]
        with np.errstate(divide="ignore", invalid="ignore"):
            if self.parametrization == "standard":
                w[..., 0::2] = np.log(k0) - E * 1e3 / (R_GAS * (T_REF_C + KELVIN))
            elif self.parametrization == "reference":
                w[..., 0::2] = np.log(k0)
        return w

    def from_reference(self, w):
        theta = np.array(w, dtype=float)
        lk, E = theta[..., 0::2], theta[..., 1::2]
        if self.parametrization == "standard":
            theta[..., 0::2] = np.exp(lk + E * 1e3 / (R_GAS * (T_REF_C + KELVIN)))
        elif self.parametrization == "reference":
            theta[..., 0::2] = np.exp(lk)
        return theta

    def reference_jacobian(self, theta):
        """d to_reference / d theta at a single parameter vector."""
        theta = np.asarray(theta, dtype=float)
        A = np.eye(theta.size)
        if self.parametrization != "centered":
            for j in range(0, theta.size, 2):
                A[j, j] = 1.0 / theta[j]
                if self.parametrization == "standard":
                    A[j, j + 1] = -1e3 / (R_GAS * (T_REF_C + KELVIN))
        return A

    def default_bounds(self):
        lo = np.empty(self.n_theta)
        hi = np.empty(self.n_theta)
        if self.parametrization == "centered":
            lo[0::2], hi[0::2] = np.log(1e-4), np.log(50.0)
            lo[1::2], hi[1::2] = 0.1, 8.0
        else:
            lo[0::2], hi[0::2] = 1e-4, 50.0
            lo[1::2], hi[1::2] = 1.0, 80.0
        return lo, hi


def _batch(model, u, theta):
    u = np.atleast_2d(np.asarray(u, dtype=float))
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    if theta.shape[1] != model.n_theta:
        raise DimensionError(f"theta has {theta.shape[1]} entries, model {model.name} needs {model.n_theta}")
    if u.shape[0] == 1 and theta.shape[0] > 1:
        u = np.repeat(u, theta.shape[0], axis=0)
    if theta.shape[0] == 1 and u.shape[0] > 1:
        theta = np.repeat(theta, u.shape[0], axis=0)
    if u.shape[0] != theta.shape[0]:
        raise DimensionError(f"batch sizes differ: {u.shape[0]} designs vs {theta.shape[0]} parameter sets")
    return u, theta


def integrate(model: KineticModel, u, theta, n_steps=None, check=True):
    """Outlet concentrations by fixed-step classical RK4.

    ``u`` and ``theta`` may be single vectors or row-batches (a single row is
    broadcast against the other argument). Returns ``(n_species,)`` for single
    inputs, otherwise ``(n, n_species)``. With ``check=False`` non-finite rows
    are returned as-is instead of raising.
    """
    single = np.ndim(u) == 1 and np.ndim(theta) == 1
    u, theta = _batch(model, u, theta)
    n = n_steps or model.n_steps
    k = model.rate_constants(u, theta)
    tau = model.residence_time(u)
    c = model.initial_state(u)
    c = _rk4_batch(_LAW_ID[model.rate_law], np.ascontiguousarray(c), np.ascontiguousarray(k),
                   np.ascontiguousarray(tau), model.stoich, n)
    if check and not np.all(np.isfinite(c)):
        bad = np.flatnonzero(~np.all(np.isfinite(c), axis=1))[0]
        raise IntegrationError("non-finite outlet state", u=u[bad], theta=theta[bad])
    return c[0] if single else c


def integrate_reference(model: KineticModel, u, theta, rtol=1e-10, atol=1e-12):
    """Adaptive high-accuracy integration of one design, for oracles."""
    u, theta = _batch(model, u, theta)
    out = []
    for ui, ti in zip(u, theta):
        k = model.rate_constants(ui[None], ti[None])
        tau = model.residence_time(ui[None])
        c0 = model.initial_state(ui[None])[0]
        sol = solve_ivp(lambda s, c: model.rhs(c[None], k, tau)[0], (0.0, 1.0), c0,
                        method="DOP853", rtol=rtol, atol=atol)
        if not sol.success:
            raise IntegrationError(sol.message, u=ui, theta=ti)
        out.append(sol.y[:, -1])
    return np.array(out)


def sensitivities(model: KineticModel, u, theta, rel_step=1e-6, check=True):
    """Jacobian of outlet concentrations with respect to theta.

    Forward differences with step ``rel_step * max(|theta_j|, 1)``, all
    perturbations integrated as one batch. Returns ``(n_species, n_theta)``
    for a single design or ``(n, n_species, n_theta)`` for a batch. With
    ``check=False`` failed simulations give non-finite rows instead of raising.
    """
    single = np.ndim(u) == 1 and np.ndim(theta) == 1
    u, theta = _batch(model, u, theta)
    n, p = theta.shape
    h = rel_step * np.maximum(np.abs(theta), 1.0)
    pert = np.repeat(theta[:, None, :], p + 1, axis=1)
    idx = np.arange(p)
    pert[:, idx + 1, idx] += h
    out = integrate(model, np.repeat(u, p + 1, axis=0), pert.reshape(-1, p), check=check).reshape(n, p + 1, -1)
    S = (out[:, 1:, :] - out[:, :1, :]) / h[:, :, None]
    S = np.transpose(S, (0, 2, 1))
    return S[0] if single else S


@dataclass(frozen=True)
class LinearConstraint:
    """Constraint observable g(y) = coef * y[species] + offset, feasible when <= 0."""

    name: str
    species: int
    coef: float
    offset: float

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        return self.coef * y[..., self.species] + self.offset


@dataclass
class Measurement:
    u: np.ndarray
    y: np.ndarray
    g: np.ndarray
    index: int

    def to_dict(self):
        return {"u": self.u.tolist(), "y": self.y.tolist(), "g": self.g.tolist(), "index": self.index}


@dataclass(frozen=True)
class PlantSpec:
    """In-silico plant: true model, disturbance and measurement noise.

    disturbance : ("additive", value) adds ``value`` to every concentration;
        ("multiplicative", factor, species) scales one measured species;
        ("none",) disables it.
    """

    model: KineticModel
    theta: np.ndarray
    noise_std: np.ndarray
    constraints: tuple
    disturbance: tuple = ("none",)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        object.__setattr__(self, "noise_std", np.asarray(self.noise_std, dtype=float))
        if np.any(self.noise_std < 0):
            raise ValueError("noise standard deviations must be >= 0")
        if self.noise_std.size != self.model.n_species:
            raise DimensionError("one noise standard deviation per measured species")

    def rng(self):
        return np.random.default_rng(self.seed)

    def disturbed(self, y):
        kind = self.disturbance[0]
        y = np.array(y, dtype=float)
        if kind == "additive":
            y = y + self.disturbance[1]
        elif kind == "multiplicative":
            y[..., int(self.disturbance[2])] *= self.disturbance[1]
        elif kind != "none":
            raise ValueError(f"unknown disturbance {kind!r}")
        return y


def run_experiment(plant: PlantSpec, u, rng=None, index=0) -> Measurement:
    """Execute one experiment on the plant.

    With ``rng`` omitted a fresh generator seeded from ``plant.seed`` is used,
    so repeated calls are identical.
    """
    rng = plant.rng() if rng is None else rng
    u = np.asarray(u, dtype=float)
    y = plant.disturbed(integrate(plant.model, u, plant.theta))
    y = y + plant.noise_std * rng.standard_normal(y.shape)
    g = np.array([c(y) for c in plant.constraints])
    return Measurement(u=u.copy(), y=y, g=g, index=index)
