import numpy as np
import pytest
from conftest import fast_config, self_consistent_config
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from safedoe.campaign import (DeMbdoe, GpMbdoe, McMbdoe, check_termination, empirical_backoff, run_campaign,
                              stream)
from safedoe.config import build_case
from safedoe.estimation import FitReport
from safedoe.objective import FimSpec, fim_from_jacobian
from safedoe.safeopt import TrustRegion, tr_backtrack, tr_update


def _report(passed):
    t = np.array([5.0, 5.0]) if passed else np.array([5.0, 0.5])
    return FitReport(np.ones(2), np.eye(2), 1.0, 10.0, t, 1.8, 10)


@pytest.fixture(scope="module")
def gp_state():
    # seed 5 runs four designs including one violation and backtrack
    return run_campaign(build_case(fast_config("case1", max_iter=4)), "gp", seed=5)


def test_identical_designs_stop():
    assert check_termination(None, np.zeros(2), np.zeros(2)).reason == "design_converged"


def test_passing_statistics_stop():
    assert check_termination(_report(True), np.zeros(2), np.ones(2)).reason == "statistics"


def test_changed_design_failing_t_test_continues():
    assert not check_termination(_report(False), np.zeros(2), np.ones(2) * 0.1).stop


def test_max_iter_zero_returns_preliminaries_only():
    case = build_case(fast_config("case1", max_iter=0))
    st_ = run_campaign(case, "gp", seed=0)
    assert len(st_.measurements) == len(case.preliminary)
    assert len(st_.reports) == 1
    assert st_.termination in ("max_iter", "statistics")


def test_streams_are_independent():
    a = stream(0, "plant-noise").standard_normal(3)
    b = stream(0, "lhs").standard_normal(3)
    c = stream(0, "plant-noise").standard_normal(3)
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(a, c)


def test_trace_replays_trust_region_radii(gp_state):
    alg = build_case(fast_config("case1")).algorithm
    radii = [TrustRegion(alg["radius"], alg["eta1"], alg["eta2"], alg["t1"], alg["t2"], alg["t3"])] * 2
    for rec in gp_state.trace:
        if "radii_after" not in rec:
            continue
        assert [tr.radius for tr in radii] == rec["radii_before"]
        nxt = []
        for tr, rho, bad in zip(radii, rec["rho"], rec["violated"]):
            tr = tr_update(tr, rho)
            nxt.append(tr_backtrack(tr) if bad else tr)
        radii = nxt
        assert [tr.radius for tr in radii] == rec["radii_after"]


def test_safety_accounting(gp_state):
    trace = gp_state.trace
    for i, rec in enumerate(trace):
        if "g" not in rec:
            continue
        # executed designs passed the tightened constraints when solved
        assert max(rec["tightened"]) <= 1e-6
        assert np.linalg.norm(np.subtract(rec["v_new"], rec["center"])) <= min(rec["radii_before"]) + 1e-8
        if rec["backtrack"] and i + 1 < len(trace):
            np.testing.assert_allclose(trace[i + 1]["v_k"], rec["v_k"])


def test_designs_stay_in_bounds(gp_state):
    case = build_case(fast_config("case1"))
    for m in gp_state.measurements:
        assert case.space.contains(m.u)


def test_trace_is_deterministic(gp_state):
    again = run_campaign(build_case(fast_config("case1", max_iter=4)), "gp", seed=5)
    assert again.trace_lines() == gp_state.trace_lines()


def test_methods_share_preliminary_data():
    case = build_case(fast_config("case1", max_iter=0))
    states = [run_campaign(case, m, seed=5) for m in ("gp", "mc", "de")]
    for s in states[1:]:
        for a, b in zip(states[0].measurements, s.measurements):
            np.testing.assert_array_equal(a.y, b.y)


@pytest.mark.parametrize("method", ["gp", "mc", "de"])
def test_information_is_monotone(method):
    case = build_case(fast_config("case1", max_iter=3))
    st_ = run_campaign(case, method, seed=1)
    spec = FimSpec.from_noise(case.sigma, 4)
    F = fim_from_jacobian(case.model.jacobian(st_.U, st_.theta), spec)
    logdets = [np.linalg.slogdet(F[:k].sum(axis=0) + 1e-12 * np.eye(4))[1] for k in range(1, len(F) + 1)]
    assert np.all(np.diff(logdets) >= -1e-9)


def test_zero_covariance_gives_zero_backoff():
    G = np.tile([[-0.2, 0.1]], (50, 1))
    np.testing.assert_allclose(empirical_backoff(G, np.array([-0.2, 0.1]), [0.1, 0.1]), 0.0)


def test_linear_gaussian_backoff_matches_quantile():
    # g = a @ theta with theta ~ N(mu, S): backoff is z_(1-eps) sqrt(a S a)
    rng = np.random.default_rng(0)
    a, mu, S = np.array([0.3, -0.2]), np.array([1.0, 2.0]), np.array([[0.04, 0.01], [0.01, 0.09]])
    theta = rng.multivariate_normal(mu, S, size=1000)
    b = empirical_backoff((theta @ a)[:, None], np.array([a @ mu]), [0.1])[0]
    sd = np.sqrt(a @ S @ a)
    assert b == pytest.approx(stats.norm.ppf(0.9) * sd, abs=3 * sd / np.sqrt(1000))


def test_mc_backoff_zero_for_point_posterior():
    case = build_case(fast_config("case1"))
    runner = McMbdoe(case)
    theta = np.array([8.0, 29.0, 5.0, 35.0])
    b = runner.backoffs(np.zeros(2), theta, np.tile(theta, (20, 1)), case.epsilons)
    np.testing.assert_allclose(b, 0.0, atol=1e-12)


def test_de_disturbance_is_last_residual():
    cfg = fast_config("case1", max_iter=1)
    cfg["plant"]["noise_std"] = [0.0, 0.0, 0.0]
    case = build_case(cfg)
    runner = DeMbdoe(case, seed=0)
    st_ = runner.run()
    rec = st_.trace[0]
    last = st_.measurements[st_.n_preliminary - 1]
    expected = last.g - runner.g_hat(last.u, np.array(rec["theta"]))[0]
    np.testing.assert_allclose(rec["disturbance"], expected, rtol=1e-10)


def test_self_consistent_campaign_recovers_truth():
    case = build_case(self_consistent_config())
    st_ = run_campaign(case, "gp", seed=0)
    assert st_.termination == "statistics"
    np.testing.assert_allclose(st_.theta, case.plant.theta, rtol=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=1, max_size=15))
def test_trust_region_radius_stays_positive(events):
    tr = TrustRegion(0.3)
    for rho, bad in events:
        tr = tr_update(tr, rho)
        if bad:
            tr = tr_backtrack(tr)
        assert tr.radius > 0


def test_fixture_campaign_exercises_backtrack(gp_state):
    assert gp_state.iterations == 4
    assert any(rec.get("backtrack") for rec in gp_state.trace)
