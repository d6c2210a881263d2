"""Closed-loop design campaigns: GP-MBDoE and the MC-backoff / disturbance baselines.

Every campaign follows the same skeleton::

    run the preliminary experiments
    repeat:
        fit theta (weighted least squares), Laplace posterior, statistics
        stop if the statistics pass or the iteration budget is spent
        design the next experiment (method specific)
        stop if the design moved less than tol1 (normalized units)
        run it on the plant, update method state

All randomness comes from one seed split into named streams, so a campaign is
reproducible bit for bit, and the three methods see identical plant noise.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .errors import CampaignAborted, SafeDoeError, StatisticsError
from .estimation import laplace_posterior, mle_fit, statistics, t_quantile
from .gp import HyperFitConfig, gp_fit
from .kinetics import Measurement, run_experiment
from .objective import FimSpec, fim_from_jacobian, train_objective_surrogate
from .safeopt import (ChanceConstraint, TrustRegion, accuracy_ratio, restore_feasibility, solve_constrained,
                      solve_design, tr_backtrack, tr_update)

log = logging.getLogger(__name__)

METHODS = ("gp", "mc", "de")
STREAMS = {"plant-noise": 1, "lhs": 2, "optimizer-starts": 3, "mc-backoff": 4}


def stream(seed, name):
    """Independent generator for a named purpose under one campaign seed."""
    return np.random.default_rng([int(seed), STREAMS[name]])


@dataclass
class Termination:
    stop: bool
    reason: str = ""


def check_termination(report, v_prev=None, v_new=None, tol1=1e-3) -> Termination:
    """STOP when the statistics pass or the design moved at most ``tol1``."""
    if report is not None and report.passed:
        return Termination(True, "statistics")
    if v_prev is not None and v_new is not None:
        if np.linalg.norm(np.asarray(v_new) - np.asarray(v_prev)) <= tol1:
            return Termination(True, "design_converged")
    return Termination(False, "")


@dataclass
class CampaignState:
    """Experiment log, current estimates, trust regions and the iteration trace."""

    method: str
    case: str
    seed: int
    n_preliminary: int = 0
    measurements: list = field(default_factory=list)
    theta: np.ndarray = None
    posterior: object = None
    reports: list = field(default_factory=list)
    trust_regions: list = field(default_factory=list)
    v_k: np.ndarray = None
    trace: list = field(default_factory=list)
    timing: list = field(default_factory=list)
    termination: str = ""
    iterations: int = 0

    @property
    def U(self):
        return np.array([m.u for m in self.measurements])

    @property
    def Y(self):
        return np.array([m.y for m in self.measurements])

    @property
    def G(self):
        return np.array([m.g for m in self.measurements])

    @property
    def designed(self):
        return self.measurements[self.n_preliminary:]

    def violations(self):
        """Per-constraint count of designed experiments with a measured g > 0."""
        if not self.designed:
            return np.zeros(len(self.measurements[0].g), dtype=int) if self.measurements else np.zeros(0, int)
        return np.sum(np.array([m.g for m in self.designed]) > 0, axis=0)

    def to_dict(self):
        return {
            "method": self.method,
            "case": self.case,
            "seed": self.seed,
            "n_preliminary": self.n_preliminary,
            "measurements": [m.to_dict() for m in self.measurements],
            "theta": None if self.theta is None else self.theta.tolist(),
            "cov": None if self.posterior is None else self.posterior.cov.tolist(),
            "reports": [r for r in self.reports],
            "radii": [tr.radius for tr in self.trust_regions],
            "v_k": None if self.v_k is None else self.v_k.tolist(),
            "termination": self.termination,
            "iterations": self.iterations,
        }

    def trace_lines(self):
        """NDJSON text of the trace (deterministic for a given config and seed)."""
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.trace)


def _clean(x):
    """JSON-safe copy (NaN/inf become None)."""
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if np.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def posterior_samples(model, post, n, rng, bounds=None):
    """Parameter draws from the Laplace posterior.

    Draws are taken in the model's reference coordinates (log k at the
    reference temperature, E), where the posterior is close to Gaussian, and
    mapped back; the covariance is transformed by the delta method. Models
    without reference coordinates are sampled in theta and clipped to ``bounds``.
    """
    if hasattr(model, "to_reference"):
        A = model.reference_jacobian(post.mean)
        W = rng.multivariate_normal(model.to_reference(post.mean), A @ post.cov @ A.T, size=n, method="eigh")
        return np.array([model.from_reference(w) for w in W])
    S = rng.multivariate_normal(post.mean, post.cov, size=n, method="eigh")
    return S if bounds is None else np.clip(S, bounds[0], bounds[1])


def empirical_backoff(G, nominal, eps):
    """b_i = (1 - eps_i) sample quantile of g_i minus the nominal g_i.

    ``G`` holds constraint values over parameter samples (n_samples, n_g);
    non-finite samples (failed simulations) are ignored.
    """
    G = np.atleast_2d(G)
    b = np.zeros(G.shape[1])
    for i in range(G.shape[1]):
        gi = G[:, i][np.isfinite(G[:, i])]
        if gi.size:
            b[i] = np.quantile(gi, 1.0 - eps[i]) - nominal[i]
    return b


class _Runner:
    """Shared machinery of the three methods; subclasses implement ``design``."""

    method = ""

    def __init__(self, case, seed=None, max_iter=None):
        self.case = case
        self.alg = case.algorithm
        self.seed = case.seed if seed is None else int(seed)
        self.max_iter = case.max_iter if max_iter is None else int(max_iter)
        self.model = case.model
        self.space = case.space
        self.sigma = case.sigma
        self.noise_rng = stream(self.seed, "plant-noise")
        self.lhs_rng = stream(self.seed, "lhs")
        self.opt_rng = stream(self.seed, "optimizer-starts")
        self.mc_rng = stream(self.seed, "mc-backoff")
        self.state = CampaignState(self.method, case.name, self.seed)
        self._surrogate_kernel = None
        self._fit_count = 0

    # -- helpers ---------------------------------------------------------
    def g_hat(self, U, theta):
        """Model-predicted constraint observables (n, n_g) at physical designs."""
        Y = self.model.predict(np.atleast_2d(U), theta)
        return np.column_stack([c(Y) for c in self.case.constraints])

    def g_hat_v(self, V, theta):
        return self.g_hat(self.space.denormalize(np.atleast_2d(V)), theta)

    def nominal_constraints(self, theta, offsets):
        """Scalar callables v -> g_hat_i(v) + offsets_i sharing one simulation per point."""
        cache = {}

        def gv(v):
            key = np.asarray(v, dtype=float).tobytes()
            if key not in cache:
                if len(cache) > 256:
                    cache.clear()
                cache[key] = self.g_hat_v(v, theta)[0]
            return cache[key]
        return [lambda v, i=i: float(gv(v)[i] + offsets[i]) for i in range(len(offsets))]

    def execute(self, u):
        m = run_experiment(self.case.plant, u, self.noise_rng, index=len(self.state.measurements))
        self.state.measurements.append(m)
        return m

    def next_seed(self, rng):
        return int(rng.integers(2 ** 31 - 1))

    # -- estimation --------------------------------------------------------
    def estimate(self):
        st = self.state
        U, Y = st.U, st.Y
        first = st.theta is None
        n_starts = self.alg["n_mle_starts"] if first else self.alg["n_mle_warm_starts"]
        fit = mle_fit(self.model, U, Y, self.sigma, bounds=self.case.theta_bounds, theta0=st.theta,
                      n_starts=n_starts, seed=self.seed + self._fit_count)
        self._fit_count += 1
        post = laplace_posterior(fit.theta, self.model, U, Y, self.sigma)
        st.theta, st.posterior = fit.theta, post
        try:
            report = statistics(fit.theta, post.cov, fit.chi2, Y.size, alpha=self.alg["alpha_stats"])
        except StatisticsError:
            report = None
        st.reports.append(None if report is None else _clean(report.to_dict()))
        return fit, post, report

    def prior_information(self, theta):
        S = self.model.jacobian(self.state.U, theta)
        return fim_from_jacobian(S, FimSpec.from_noise(self.sigma, theta.size)).sum(axis=0)

    def surrogate(self, post):
        """Objective surrogate for the current posterior (identical across methods)."""
        spec = FimSpec.from_noise(self.sigma, post.mean.size, self.prior_information(post.mean))
        warm = self._surrogate_kernel is not None
        hyper = HyperFitConfig(
            n_multistarts=self.alg["surrogate_warm_starts"] if warm else self.alg["gp_multistarts"],
            seed=self.next_seed(self.lhs_rng), max_fit_points=self.alg["surrogate_fit_points"],
            initial=self._surrogate_kernel)
        sur = train_objective_surrogate(self.model, self.space, post, spec, size=self.alg["n_surrogate"],
                                        seed=self.next_seed(self.lhs_rng), bounds=self.case.theta_bounds,
                                        family=self.alg["surrogate_kernel"], alpha_J=self.alg["alpha_J"],
                                        hyper=hyper)
        self._surrogate_kernel = sur.gp.kernel
        return sur

    def objective(self, sur, post):
        Sz = sur.scaled_covariance(post.mean, post.cov)

        def f(v):
            m, s = sur.propagate_normalized(v, post.mean, post.cov, Sz)
            return m - sur.alpha_J * np.sqrt(s)
        return f

    def box_starts(self, v_k):
        n = self.alg["n_starts"]
        pts = [np.asarray(v_k, dtype=float)]
        if n > 1:
            pts.extend(2.0 * qmc.LatinHypercube(d=self.space.dim, seed=self.next_seed(self.opt_rng)).random(n - 1) - 1.0)
        return pts

    # -- loop ------------------------------------------------------------
    def initial_point(self):
        """Most feasible preliminary experiment (smallest worst-case constraint)."""
        G = self.state.G
        i = int(np.argmin(np.max(G, axis=1)))
        return self.space.normalize(self.state.U[i])

    def setup(self):
        pass

    def run(self) -> CampaignState:
        st = self.state
        try:
            for u in self.case.preliminary:
                self.execute(u)
            st.n_preliminary = len(st.measurements)
            st.v_k = self.initial_point()
            self.setup()
            it = 0
            while True:
                t0 = time.perf_counter()
                fit, post, report = self.estimate()
                t_est = time.perf_counter() - t0
                decision = check_termination(report)
                if decision.stop:
                    st.termination = decision.reason
                    break
                if it >= self.max_iter:
                    st.termination = "max_iter"
                    break
                t1 = time.perf_counter()
                v_new, info = self.design(post)
                t_design = time.perf_counter() - t1
                decision = check_termination(None, st.v_k, v_new, self.alg["tol1"])
                if not info.get("feasible_solve", True):
                    decision = Termination(True, "no_safe_design")
                rec = {"iteration": it, "method": self.method, "v_k": st.v_k, "v_new": v_new,
                       "theta": fit.theta, "cov_diag": np.diag(post.cov), "chi2": fit.chi2,
                       "report": st.reports[-1], **info}
                if decision.stop:
                    st.termination = decision.reason
                    rec["terminated"] = decision.reason
                    st.trace.append(_clean(rec))
                    st.timing.append({"iteration": it, "estimate_s": t_est, "design_s": t_design})
                    break
                m = self.execute(self.space.denormalize(v_new))
                rec.update({"u": m.u, "y": m.y, "g": m.g, "index": m.index})
                rec.update(self.update(v_new, m, info))
                st.trace.append(_clean(rec))
                st.timing.append({"iteration": it, "estimate_s": t_est, "design_s": t_design,
                                  "total_s": time.perf_counter() - t0})
                it += 1
            st.iterations = it
        except SafeDoeError as exc:
            st.termination = f"aborted: {exc}"
            raise CampaignAborted(str(exc), checkpoint=st) from exc
        return st

    def design(self, post):
        raise NotImplementedError

    def update(self, v_new, m, info):
        self.state.v_k = np.asarray(v_new, dtype=float)
        return {}


class GpMbdoe(_Runner):
    """Safe design with GP mismatch models, Cantelli tightening and trust regions."""

    method = "gp"

    def setup(self):
        a = self.alg
        self.state.trust_regions = [
            TrustRegion(a["radius"], a["eta1"], a["eta2"], a["t1"], a["t2"], a["t3"])
            for _ in self.case.constraints]
        self._mismatch_kernels = [None] * len(self.case.constraints)

    def mismatch_models(self, theta):
        st = self.state
        V = self.space.normalize(st.U)
        G = st.G
        noise = self.case.constraint_noise
        out = []
        for i, c in enumerate(self.case.constraints):
            def prior(Vb, i=i):
                return self.g_hat_v(Vb, theta)[:, i]
            hyper = HyperFitConfig(n_multistarts=self.alg["gp_multistarts"], seed=self.next_seed(self.lhs_rng),
                                   fixed_noise=float(noise[i] ** 2), initial=self._mismatch_kernels[i])
            gp = gp_fit(V, G[:, i], family=self.alg["mismatch_kernel"], prior_mean=prior, cfg=hyper)
            self._mismatch_kernels[i] = gp.kernel
            out.append(ChanceConstraint(i, c.name, float(self.case.epsilons[i]), gp))
        return out

    def design(self, post):
        st = self.state
        self._constraints = self.mismatch_models(post.mean)
        sur = self.surrogate(post)
        # an unsafe center is moved to the nearest point passing the tightened constraints
        center = restore_feasibility([c.tightened for c in self._constraints], st.v_k,
                                     n_starts=self.alg["n_starts"], seed=self.next_seed(self.opt_rng))
        if center is None:
            return st.v_k.copy(), {"feasible_solve": False, "center": st.v_k,
                                   "radii_before": [tr.radius for tr in st.trust_regions]}
        res = solve_design(sur, self._constraints, st.trust_regions, center, post.mean, post.cov,
                           alpha_J=self.alg["alpha_J"], n_starts=self.alg["n_starts"],
                           seed=self.next_seed(self.opt_rng))
        pred = [c.gp.predict(res.v) for c in self._constraints]
        info = {"feasible_solve": res.feasible, "objective": res.value,
                "tightened": [c.tightened(res.v) for c in self._constraints],
                "gp_mean": [p[0] for p in pred], "gp_var": [p[1] for p in pred],
                "center": center, "recentered": bool(np.any(center != st.v_k)),
                "radii_before": [tr.radius for tr in st.trust_regions]}
        return res.v, info

    def update(self, v_new, m, info):
        st = self.state
        rho, violated = [], []
        new = []
        for i, tr in enumerate(st.trust_regions):
            r = accuracy_ratio(m.g[i], info["gp_mean"][i])
            tr = tr_update(tr, r)
            bad = bool(m.g[i] > 0)
            if bad:
                tr = tr_backtrack(tr)
            rho.append(r)
            violated.append(bad)
            new.append(tr)
        st.trust_regions = new
        backtrack = any(violated)
        if not backtrack:
            st.v_k = np.asarray(v_new, dtype=float)
        return {"rho": rho, "violated": violated, "backtrack": backtrack,
                "radii_after": [tr.radius for tr in new]}


class McMbdoe(_Runner):
    """Nominal-model design with Monte Carlo backoffs from the parameter posterior."""

    method = "mc"

    def design(self, post):
        st = self.state
        sur = self.surrogate(post)
        f = self.objective(sur, post)
        samples = posterior_samples(self.model, post, self.alg["mc_samples"], self.mc_rng,
                                    self.case.theta_bounds)
        eps = self.case.epsilons
        n_g = len(self.case.constraints)
        b = np.zeros(n_g)
        starts = self.box_starts(st.v_k)
        history = []
        res = None
        radius = 2.0 * np.sqrt(self.space.dim)
        for _ in range(self.alg["mc_max_passes"]):
            cons = self.nominal_constraints(post.mean, b.copy())
            res = solve_constrained(f, cons, st.v_k, radius, starts=starts)
            # later passes refine from the current candidate
            starts = [res.v, st.v_k] if res.feasible else starts
            b_new = self.backoffs(res.v, post.mean, samples, eps)
            history.append(b_new.tolist())
            change = float(np.max(np.abs(b_new - b)))
            b = b_new
            if change < self.alg["mc_tol"]:
                break
        info = {"feasible_solve": res.feasible, "objective": res.value, "backoffs": b,
                "backoff_passes": len(history),
                "nominal": self.g_hat_v(res.v, post.mean)[0]}
        return res.v, info

    def backoffs(self, v, theta, samples, eps):
        u = self.space.denormalize(v)
        with np.errstate(all="ignore"):
            Y = self.model.predict(u, samples, check=False)
        G = np.column_stack([c(Y) for c in self.case.constraints])
        return empirical_backoff(G, self.g_hat(u, theta)[0], eps)

    def update(self, v_new, m, info):
        self.state.v_k = np.asarray(v_new, dtype=float)
        return {"violated": [bool(g > 0) for g in m.g]}


class DeMbdoe(_Runner):
    """Nominal-model design corrected by a constant disturbance from the last experiment."""

    method = "de"

    def design(self, post):
        st = self.state
        sur = self.surrogate(post)
        f = self.objective(sur, post)
        last = st.measurements[-1]
        d = last.g - self.g_hat(last.u, post.mean)[0]
        cons = self.nominal_constraints(post.mean, d)
        res = solve_constrained(f, cons, st.v_k, 2.0 * np.sqrt(self.space.dim), starts=self.box_starts(st.v_k))
        return res.v, {"feasible_solve": res.feasible, "objective": res.value, "disturbance": d}

    def update(self, v_new, m, info):
        self.state.v_k = np.asarray(v_new, dtype=float)
        return {"violated": [bool(g > 0) for g in m.g]}


RUNNERS = {"gp": GpMbdoe, "mc": McMbdoe, "de": DeMbdoe}


def run_campaign(case, method, seed=None, max_iter=None) -> CampaignState:
    if method not in RUNNERS:
        raise SafeDoeError(f"unknown method {method!r}")
    return RUNNERS[method](case, seed=seed, max_iter=max_iter).run()


def run_gp_mbdoe(case, seed=None, max_iter=None) -> CampaignState:
    return run_campaign(case, "gp", seed, max_iter)


def run_mc_mbdoe(case, seed=None, max_iter=None) -> CampaignState:
    return run_campaign(case, "mc", seed, max_iter)


def run_de_mbdoe(case, seed=None, max_iter=None) -> CampaignState:
    return run_campaign(case, "de", seed, max_iter)


def ci95(report):
    """Half-widths of the 95 % parameter intervals from a serialized FitReport."""
    sd = np.sqrt(np.asarray(report["cov_diag"]))
    return t_quantile(1 - report["alpha"] / 2, report["dof"]) * sd
