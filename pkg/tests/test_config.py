import copy

import numpy as np
import pytest

from safedoe.config import (ALGORITHM_DEFAULTS, apply_env, build_case, bundled, dumps, load, load_case, loads,
                            resolve)
from safedoe.errors import ConfigError


@pytest.mark.parametrize("name", ["case1", "case2"])
def test_resolved_config_round_trips(name):
    cfg = bundled(name)
    assert resolve(loads(dumps(cfg))) == cfg
    assert loads(dumps(cfg)) == loads(dumps(resolve(loads(dumps(cfg)))))


def test_trust_region_defaults():
    alg = bundled("case1")["algorithm"]
    assert (alg["alpha_J"], alg["eta1"], alg["eta2"]) == (0.5, 1e-3, 1e-2)
    assert (alg["t1"], alg["t2"], alg["t3"], alg["radius"], alg["tol1"]) == (2.0, 0.5, 0.5, 0.3, 1e-3)
    assert alg["n_surrogate"] == 200 and alg["n_starts"] == 10


def test_case1_constraints():
    case = load_case("case1")
    assert [c.name for c in case.constraints] == ["g1", "g2"]
    np.testing.assert_allclose(case.epsilons, [0.1, 0.1])
    y = np.array([[0.0, 0.0, 0.25]])
    np.testing.assert_allclose([c(y)[0] for c in case.constraints], [-0.15, -0.15])


def _broken(mutate):
    cfg = copy.deepcopy(bundled("case1"))
    mutate(cfg)
    return cfg


@pytest.mark.parametrize("mutate, path", [
    (lambda c: c["plant"].pop("theta"), "plant.theta"),
    (lambda c: c["plant"].update(theta=[1.0, 2.0]), "plant.theta"),
    (lambda c: c["plant"].update(rate_law="nope"), "plant.rate_law"),
    (lambda c: c["plant"].update(noise_std=[0.1, -0.1, 0.1]), "plant.noise_std"),
    (lambda c: c["constraints"]["g1"].update(epsilon=1.5), "constraints.g1.epsilon"),
    (lambda c: c["constraints"]["g1"].update(species="Z"), "constraints.g1.species"),
    (lambda c: c["algorithm"].update(t1=0.9), "algorithm.t1"),
    (lambda c: c["algorithm"].update(bogus=1), "algorithm.bogus"),
    (lambda c: c["algorithm"].update(radius=-0.1), "algorithm.radius"),
    (lambda c: c["campaign"].update(design_upper=[50.0, 0.008]), "campaign.design_upper"),
    (lambda c: c["campaign"].update(preliminary=[[79.6, 0.0069]]), "campaign.preliminary"),
    (lambda c: c["campaign"].update(preliminary=[[200.0, 0.0069]] * 3), "campaign.preliminary"),
    (lambda c: c["model"].update(theta_upper=[1e-5, 80.0, 50.0, 80.0]), "model.theta_upper"),
])
def test_invalid_fields_report_their_path(mutate, path):
    with pytest.raises(ConfigError) as info:
        resolve(_broken(mutate))
    assert info.value.path == path
    assert str(info.value).startswith(path)


def test_unknown_section_rejected():
    with pytest.raises(ConfigError):
        resolve({**bundled("case1"), "extra": {}})


def test_bad_toml_raises_config_error(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[plant\n")
    with pytest.raises(ConfigError):
        load(p)


def test_env_overrides_typed_values():
    env = {"SAFEDOE_ALGORITHM_RADIUS": "0.2", "SAFEDOE_ALGORITHM_ALPHA_J": "0.7",
           "SAFEDOE_CAMPAIGN_MAX_ITER": "4", "OTHER_VAR": "x"}
    cfg = resolve(apply_env(bundled("case1"), env))
    assert cfg["algorithm"]["radius"] == 0.2
    assert cfg["algorithm"]["alpha_J"] == 0.7
    assert cfg["campaign"]["max_iter"] == 4


def test_env_override_is_validated():
    with pytest.raises(ConfigError) as info:
        resolve(apply_env(bundled("case1"), {"SAFEDOE_ALGORITHM_T3": "2.0"}))
    assert info.value.path == "algorithm.t3"


def test_load_from_file_applies_env(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text(dumps(bundled("case2")))
    case = build_case(load(p, {"SAFEDOE_CAMPAIGN_SEED": "9"}))
    assert case.seed == 9 and case.name == "case2"


def test_every_algorithm_default_is_resolved():
    assert set(bundled("case2")["algorithm"]) == set(ALGORITHM_DEFAULTS)
