import numpy as np
import pytest

from safedoe.config import build_case, bundled

FAST = {"n_surrogate": 60, "gp_multistarts": 3, "n_starts": 4, "n_mle_starts": 5, "mc_samples": 200,
        "surrogate_fit_points": 60, "surrogate_warm_starts": 1}


def fast_config(name="case1", max_iter=3, **algorithm):
    """Bundled case with reduced sample counts, for quick campaign tests."""
    cfg = bundled(name)
    cfg["algorithm"].update(FAST)
    cfg["algorithm"].update(algorithm)
    cfg["campaign"]["max_iter"] = max_iter
    return cfg


def self_consistent_config(max_iter=10):
    """Case-1 kinetics with plant equal to model: no noise, no disturbance.

    Rate constants use the reference form (k at 90 degC, E) so every
    parameter can become statistically significant.
    """
    cfg = bundled("case1")
    plant, model = cfg["plant"], cfg["model"]
    plant["stoich"] = model["stoich"]
    plant["parametrization"] = model["parametrization"] = "reference"
    k_ref = lambda k0, E: k0 * np.exp(-E * 1e3 / (8.314 * 363.15))
    plant["theta"] = [k_ref(8.0, 29.0), 29.0, k_ref(5.0, 35.0), 35.0]
    plant["noise_std"] = [0.0, 0.0, 0.0]
    plant["disturbance"] = {"kind": "none"}
    model["noise_std"] = [0.039, 0.14, 0.05]
    model["theta_lower"] = [1e-7, 1.0, 1e-7, 1.0]
    model["theta_upper"] = [1.0, 80.0, 1.0, 80.0]
    cfg["campaign"]["max_iter"] = max_iter
    return cfg


@pytest.fixture
def fast_case1():
    return build_case(fast_config("case1"))


ACCEPTANCE = {}


def record(number, ok, detail):
    """Store one acceptance verdict; printed in the terminal summary."""
    ACCEPTANCE[number] = (bool(ok), detail)
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
