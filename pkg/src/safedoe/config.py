"""Case-study configuration: TOML schema, validation and object construction.

A config has five sections. ``[plant]`` describes the true system, ``[model]``
the fitted kinetic model (it shares species, reactor and feed with the plant),
``[constraints.<name>]`` the linear output constraints, ``[algorithm]`` the
design-loop settings and ``[campaign]`` the design space, preliminary runs and
iteration budget. ``resolve`` fills every default so that the resolved dict
round-trips through ``dumps``/``loads`` unchanged.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from .errors import ConfigError
from .kinetics import (PARAMETRIZATIONS, RATE_LAWS, DesignSpace, KineticModel, LinearConstraint,
                       PlantSpec)

ENV_PREFIX = "SAFEDOE_"

ALGORITHM_DEFAULTS = {
    "alpha_J": 0.5,
    "eta1": 1e-3,
    "eta2": 1e-2,
    "t1": 2.0,
    "t2": 0.5,
    "t3": 0.5,
    "radius": 0.3,
    "tol1": 1e-3,
    "n_surrogate": 200,
    "surrogate_kernel": "matern52",
    "mismatch_kernel": "se",
    "n_starts": 10,
    "n_mle_starts": 10,
    "gp_multistarts": 10,
    "mc_samples": 1000,
    "mc_max_passes": 10,
    "mc_tol": 1e-3,
    "alpha_stats": 0.05,
    "n_mle_warm_starts": 3,
    "surrogate_fit_points": 100,
    "surrogate_warm_starts": 2,
}

CAMPAIGN_DEFAULTS = {"max_iter": 20, "seed": 0}

PLANT_DEFAULTS = {
    "parametrization": "standard",
    "reactor": "pfr",
    "inlet": [],
    "length": 25.0,
    "area": 1.2,
    "volume": 2.0,
    "feed_species": [],
    "feed_conc": [],
    "n_steps": 200,
    "disturbance": {"kind": "none"},
}

_PLANT_REQUIRED = ("name", "species", "rate_law", "stoich", "theta", "noise_std")
_CAMPAIGN_REQUIRED = ("design_names", "design_lower", "design_upper", "preliminary")


def _need(section, key, path):
    if key not in section:
        raise ConfigError("missing required field", path=f"{path}.{key}")
    return section[key]


def _matrix(value, path, rows=None, cols=None):
    try:
        a = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError("expected a numeric matrix", path=path) from None
    if a.ndim != 2 or (rows is not None and a.shape[0] != rows) or (cols is not None and a.shape[1] != cols):
        raise ConfigError(f"expected shape ({rows}, {cols}), got {a.shape}", path=path)
    if not np.all(np.isfinite(a)):
        raise ConfigError("entries must be finite", path=path)
    return a


def _vector(value, path, size=None, positive=False):
    try:
        a = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError("expected a numeric list", path=path) from None
    if a.ndim != 1 or (size is not None and a.size != size):
        raise ConfigError(f"expected {size} numbers, got shape {a.shape}", path=path)
    if not np.all(np.isfinite(a)):
        raise ConfigError("entries must be finite", path=path)
    if positive and np.any(a <= 0):
        raise ConfigError("entries must be positive", path=path)
    return a


def resolve(raw: dict) -> dict:
    """Validate a raw config and fill defaults. Raises ConfigError with a field path."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a table")
    unknown = set(raw) - {"plant", "model", "constraints", "algorithm", "campaign"}
    if unknown:
        raise ConfigError("unknown section", path=sorted(unknown)[0])
    cfg = copy.deepcopy(raw)
    plant = {**PLANT_DEFAULTS, **cfg.get("plant", {})}
    for key in _PLANT_REQUIRED:
        _need(plant, key, "plant")
    ns = len(plant["species"])
    if plant["rate_law"] not in RATE_LAWS:
        raise ConfigError(f"unknown rate law {plant['rate_law']!r}", path="plant.rate_law")
    if plant["parametrization"] not in PARAMETRIZATIONS:
        raise ConfigError("unknown parametrization", path="plant.parametrization")
    if plant["reactor"] not in ("pfr", "cstr_mix"):
        raise ConfigError("reactor must be 'pfr' or 'cstr_mix'", path="plant.reactor")
    S = _matrix(plant["stoich"], "plant.stoich", rows=ns)
    _vector(plant["theta"], "plant.theta", size=2 * S.shape[1])
    _vector(plant["noise_std"], "plant.noise_std", size=ns)
    if np.any(np.asarray(plant["noise_std"], dtype=float) < 0):
        raise ConfigError("noise standard deviations must be >= 0", path="plant.noise_std")
    if plant["reactor"] == "pfr":
        _vector(plant["inlet"], "plant.inlet", size=ns)
    dist = plant["disturbance"]
    if not isinstance(dist, dict) or dist.get("kind") not in ("none", "additive", "multiplicative"):
        raise ConfigError("kind must be none, additive or multiplicative", path="plant.disturbance.kind")
    if dist["kind"] != "none" and "value" not in dist:
        raise ConfigError("missing required field", path="plant.disturbance.value")
    if dist["kind"] == "multiplicative" and "species" not in dist:
        raise ConfigError("missing required field", path="plant.disturbance.species")

    model = dict(cfg.get("model", {}))
    model.setdefault("rate_law", plant["rate_law"])
    model.setdefault("parametrization", plant["parametrization"])
    model.setdefault("stoich", plant["stoich"])
    model.setdefault("noise_std", plant["noise_std"])
    _vector(model["noise_std"], "model.noise_std", size=ns, positive=True)
    if model["rate_law"] not in RATE_LAWS:
        raise ConfigError(f"unknown rate law {model['rate_law']!r}", path="model.rate_law")
    if model["parametrization"] not in PARAMETRIZATIONS:
        raise ConfigError("unknown parametrization", path="model.parametrization")
    Sm = _matrix(model["stoich"], "model.stoich", rows=ns)
    fitted = _fitted_model(plant, model)
    lo, hi = fitted.default_bounds()
    model.setdefault("theta_lower", lo.tolist())
    model.setdefault("theta_upper", hi.tolist())
    lo = _vector(model["theta_lower"], "model.theta_lower", size=2 * Sm.shape[1])
    hi = _vector(model["theta_upper"], "model.theta_upper", size=2 * Sm.shape[1])
    if np.any(hi <= lo):
        raise ConfigError("upper bounds must exceed lower bounds", path="model.theta_upper")

    cons = cfg.get("constraints", {})
    if not isinstance(cons, dict) or not cons:
        raise ConfigError("at least one constraint is required", path="constraints")
    for name, c in cons.items():
        p = f"constraints.{name}"
        for key in ("species", "coef", "offset"):
            _need(c, key, p)
        if isinstance(c["species"], str) and c["species"] not in plant["species"]:
            raise ConfigError(f"unknown species {c['species']!r}", path=f"{p}.species")
        c.setdefault("epsilon", 0.1)
        if not 0.0 < float(c["epsilon"]) < 1.0:
            raise ConfigError("epsilon must lie in (0, 1)", path=f"{p}.epsilon")

    alg = {**ALGORITHM_DEFAULTS, **cfg.get("algorithm", {})}
    unknown = set(alg) - set(ALGORITHM_DEFAULTS)
    if unknown:
        raise ConfigError("unknown field", path=f"algorithm.{sorted(unknown)[0]}")
    for key in ("alpha_J", "eta1", "eta2", "t1", "t2", "t3", "radius", "tol1", "mc_tol"):
        if not float(alg[key]) > 0:
            raise ConfigError("must be positive", path=f"algorithm.{key}")
    if not alg["t2"] < 1 < alg["t1"]:
        raise ConfigError("need t2 < 1 < t1", path="algorithm.t1")
    if not alg["t3"] < 1:
        raise ConfigError("need t3 < 1", path="algorithm.t3")
    if not alg["eta1"] <= alg["eta2"]:
        raise ConfigError("need eta1 <= eta2", path="algorithm.eta2")
    for key in ("n_surrogate", "n_starts", "n_mle_starts", "gp_multistarts", "mc_samples", "mc_max_passes",
                "n_mle_warm_starts", "surrogate_fit_points", "surrogate_warm_starts"):
        if int(alg[key]) < 1:
            raise ConfigError("must be >= 1", path=f"algorithm.{key}")
    if alg["surrogate_kernel"] not in ("se", "matern52"):
        raise ConfigError("objective surrogate needs 'se' or 'matern52'", path="algorithm.surrogate_kernel")
    if alg["mismatch_kernel"] not in ("se", "matern32", "matern52"):
        raise ConfigError("unknown kernel family", path="algorithm.mismatch_kernel")

    camp = {**CAMPAIGN_DEFAULTS, **cfg.get("campaign", {})}
    for key in _CAMPAIGN_REQUIRED:
        _need(camp, key, "campaign")
    nu = len(camp["design_names"])
    dlo = _vector(camp["design_lower"], "campaign.design_lower", size=nu)
    dhi = _vector(camp["design_upper"], "campaign.design_upper", size=nu)
    if np.any(dhi <= dlo):
        raise ConfigError("upper bounds must exceed lower bounds", path="campaign.design_upper")
    P = _matrix(camp["preliminary"], "campaign.preliminary", cols=nu)
    if P.shape[0] < nu + 1:
        raise ConfigError(f"need at least {nu + 1} preliminary experiments", path="campaign.preliminary")
    if np.any(P < dlo) or np.any(P > dhi):
        raise ConfigError("preliminary experiments must lie in the design box", path="campaign.preliminary")
    if plant["reactor"] == "pfr" and nu != 2:
        raise ConfigError("a tubular reactor has designs (T, F)", path="campaign.design_names")
    if plant["reactor"] == "cstr_mix" and nu != 1 + len(plant["feed_species"]):
        raise ConfigError("designs must be T plus one flow per feed", path="campaign.design_names")
    if int(camp["max_iter"]) < 0:
        raise ConfigError("must be >= 0", path="campaign.max_iter")

    return {"plant": plant, "model": model, "constraints": cons, "algorithm": alg, "campaign": camp}


def _model_kwargs(plant):
    return dict(species=tuple(plant["species"]), reactor=plant["reactor"],
                inlet=tuple(float(v) for v in plant["inlet"]), length=float(plant["length"]),
                area=float(plant["area"]), volume=float(plant["volume"]),
                feed_species=tuple(int(v) for v in plant["feed_species"]),
                feed_conc=tuple(float(v) for v in plant["feed_conc"]), n_steps=int(plant["n_steps"]))


def _fitted_model(plant, model):
    return KineticModel(name=f"{plant['name']}-model", stoich=model["stoich"], rate_law=model["rate_law"],
                        parametrization=model["parametrization"], **_model_kwargs(plant))


def _species_index(plant, s):
    return plant["species"].index(s) if isinstance(s, str) else int(s)


@dataclass
class CaseStudy:
    """Everything a campaign needs, built from a resolved config."""

    name: str
    plant: PlantSpec
    model: KineticModel
    space: DesignSpace
    preliminary: np.ndarray
    constraints: tuple
    epsilons: np.ndarray
    theta_bounds: tuple
    algorithm: dict
    max_iter: int
    seed: int
    config: dict

    @property
    def sigma(self):
        """Assumed measurement noise std per output (weights for estimation and information)."""
        return np.asarray(self.config["model"]["noise_std"], dtype=float)

    @property
    def constraint_noise(self):
        """Assumed measurement std of each constraint observable."""
        sd = self.sigma
        return np.array([abs(c.coef) * sd[c.species] for c in self.constraints])


def build_case(cfg: dict) -> CaseStudy:
    cfg = resolve(cfg)
    plant, model, alg, camp = cfg["plant"], cfg["model"], cfg["algorithm"], cfg["campaign"]
    true_model = KineticModel(name=f"{plant['name']}-plant", stoich=plant["stoich"], rate_law=plant["rate_law"],
                              parametrization=plant["parametrization"], **_model_kwargs(plant))
    d = plant["disturbance"]
    if d["kind"] == "additive":
        dist = ("additive", float(d["value"]))
    elif d["kind"] == "multiplicative":
        dist = ("multiplicative", float(d["value"]), _species_index(plant, d["species"]))
    else:
        dist = ("none",)
    constraints = tuple(
        LinearConstraint(name, _species_index(plant, c["species"]), float(c["coef"]), float(c["offset"]))
        for name, c in cfg["constraints"].items())
    plant_spec = PlantSpec(true_model, np.asarray(plant["theta"], dtype=float),
                           np.asarray(plant["noise_std"], dtype=float), constraints, dist,
                           seed=int(camp["seed"]))
    return CaseStudy(
        name=plant["name"], plant=plant_spec, model=_fitted_model(plant, model),
        space=DesignSpace(tuple(camp["design_names"]), camp["design_lower"], camp["design_upper"]),
        preliminary=np.asarray(camp["preliminary"], dtype=float), constraints=constraints,
        epsilons=np.array([float(c["epsilon"]) for c in cfg["constraints"].values()]),
        theta_bounds=(np.asarray(model["theta_lower"], dtype=float), np.asarray(model["theta_upper"], dtype=float)),
        algorithm=alg, max_iter=int(camp["max_iter"]), seed=int(camp["seed"]), config=cfg)


def loads(text: str) -> dict:
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None


def dumps(cfg: dict) -> str:
    return tomli_w.dumps(_plain(cfg))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def apply_env(cfg: dict, environ=None) -> dict:
    """Override fields from ``SAFEDOE_<SECTION>_<FIELD>`` variables (values parsed as TOML)."""
    environ = os.environ if environ is None else environ
    cfg = copy.deepcopy(cfg)
    for var, text in environ.items():
        if not var.startswith(ENV_PREFIX):
            continue
        rest = var[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section not in ("plant", "model", "algorithm", "campaign") or not key:
            continue
        table = cfg.setdefault(section, {})
        known = {k.lower(): k for k in list(table) + list(
            {"algorithm": ALGORITHM_DEFAULTS, "campaign": CAMPAIGN_DEFAULTS,
             "plant": PLANT_DEFAULTS}.get(section, {}))}
        try:
            value = tomli.loads(f"v = {text}")["v"]
        except tomli.TOMLDecodeError:
            value = text
        table[known.get(key, key)] = value
    return cfg


def load(path, environ=None) -> dict:
    """Read a config file, apply environment overrides and resolve defaults."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return resolve(apply_env(loads(text), environ))


def bundled(name: str) -> dict:
    """Resolved bundled case study (``case1`` or ``case2``)."""
    files = resources.files("safedoe") / "configs" / f"{name}.toml"
    if not files.is_file():
        raise ConfigError(f"no bundled config named {name!r}")
    return resolve(loads(files.read_text()))


def load_case(name_or_path, environ=None) -> CaseStudy:
    p = Path(str(name_or_path))
    if p.suffix == ".toml" or p.exists():
        return build_case(load(p, environ))
    return build_case(resolve(apply_env(bundled(name_or_path), environ)))
