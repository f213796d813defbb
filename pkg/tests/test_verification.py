"""Scenario sample bound, gauges, reachable-set scaling and safety verdicts."""
import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from _helpers import small_model
from stablernn import verification as V


def zero_gru(n_y=2):
    m = small_model("gru", n_y=n_y)
    return m.with_parameters(**{k: np.zeros_like(v) for k, v in m.parameters().items()})


@pytest.mark.parametrize("eps,beta,S", [(0.05, 1e-6, 593), (0.025, 1e-6, 1186), (0.5, math.exp(-1), 8)])
def test_required_samples(eps, beta, S):
    assert V.required_samples(eps, beta) == S


@given(eps=st.floats(1e-3, 0.999), beta=st.floats(1e-12, 0.999))
def test_required_samples_is_smallest_integer_above_bound(eps, beta):
    S = V.required_samples(eps, beta)
    bound = 2 / eps * (math.log(1 / beta) + 1)
    assert S >= bound and S - 1 < bound


@pytest.mark.parametrize("eps,beta", [(0, 0.1), (1, 0.1), (0.1, 0), (0.1, 1.5)])
def test_required_samples_rejects_bad_probabilities(eps, beta):
    with pytest.raises(ValueError):
        V.required_samples(eps, beta)


def test_box_gauge_examples():
    t = V.BoxTemplate([0.0, 0.0], [1.0, 1.0])
    assert V.gauge(t, [0.0, 0.0]) == 0.0
    assert V.gauge(t, [0.5, -0.8]) == pytest.approx(0.8)
    with pytest.raises(ValueError):
        V.BoxTemplate([0.0], [0.0])


def test_ellipsoid_gauge():
    t = V.EllipsoidTemplate([1.0, 0.0], np.diag([4.0, 1.0]))
    assert V.gauge(t, [1.5, 0.0]) == pytest.approx(1.0)
    np.testing.assert_allclose(t.half_widths(), [0.5, 1.0])
    with pytest.raises(ValueError):
        V.EllipsoidTemplate([0.0, 0.0], np.diag([1.0, -1.0]))


@given(rho=st.floats(0, 50), y=st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_gauge_is_positively_homogeneous(rho, y):
    c = np.array([0.2, -0.1, 0.3])
    for t in (V.BoxTemplate(c, [1.0, 2.0, 0.5]), V.EllipsoidTemplate(c, np.diag([1.0, 0.3, 2.0]))):
        scaled = rho * (np.array(y) - c) + c
        assert V.gauge(t, scaled) == pytest.approx(rho * V.gauge(t, y), rel=1e-9, abs=1e-9)


def test_zero_weight_gru_has_zero_scaling():
    m = zero_gru()
    cfg = V.ScenarioConfig(K=20, template=V.BoxTemplate(m.b_o, [1.0, 1.0]),
                           safe_set=V.SafeBox([-1.0, -2.0], [3.0, 2.0]))
    res = V.scenario_reachable(m, cfg, seed=0)
    assert res.rho == 0.0 and res.S == 593 and not res.advisory
    assert res.safe and res.margin == pytest.approx(1.0)


def test_rho_is_tight_and_covers_every_sample():
    m = small_model("gru", seed=3)
    t = V.BoxTemplate([0.0, 0.0], [0.5, 2.0])
    res = V.scenario_reachable(m, V.ScenarioConfig(K=15, template=t), seed=4)
    assert res.rho == res.sample_max.max()
    # brute-force re-simulation of the reported worst sample
    rng = V.substream(4, "scenario")
    unit = rng.uniform(-1, 1, size=(res.S, m.state_size))
    u = V.certificates.draw_inputs(rng, (res.S, 16, 2), "multilevel")
    lo, hi = V.default_x0_box(m)
    y, _ = m.forward((lo + hi) / 2 + (hi - lo) / 2 * unit, u)
    g = V.gauge(t, y)
    assert np.all(g <= res.rho)
    assert g.max() == res.rho


def test_single_sample_hand_trace():
    m = small_model("gru", seed=8)
    x0 = np.array([0.1, -0.2, 0.3])
    u = np.array([[0.5, -0.5], [1.0, 0.0], [-1.0, 1.0]])
    y, _ = m.simulate(x0, u)
    t = V.BoxTemplate([0.0, 0.0], [1.0, 1.0])
    hand = max(max(abs(y[k, 0]), abs(y[k, 1])) for k in range(3))
    assert V.gauge(t, y).max() == pytest.approx(hand, rel=1e-15)


def test_larger_initial_box_never_shrinks_rho():
    m = small_model("gru", seed=2)
    t = V.BoxTemplate([0.0, 0.0], [1.0, 1.0])
    small = V.scenario_reachable(m, V.ScenarioConfig(K=10, template=t, x0_lo=-0.2, x0_hi=0.2), seed=7)
    big = V.scenario_reachable(m, V.ScenarioConfig(K=10, template=t, x0_lo=-0.8, x0_hi=0.8), seed=7)
    assert big.rho >= small.rho


def test_running_max_over_samples():
    m = small_model("gru", seed=2)
    t = V.BoxTemplate([0.0, 0.0], [1.0, 1.0])
    res = V.scenario_reachable(m, V.ScenarioConfig(K=10, template=t), seed=1)
    assert np.all(np.diff(np.maximum.accumulate(res.sample_max)) >= 0)
    assert np.maximum.accumulate(res.sample_max)[-1] == res.rho


def test_deterministic_for_fixed_seed():
    m = small_model("lstm", seed=2)
    cfg = V.ScenarioConfig(K=10, template=V.BoxTemplate([0.0, 0.0], [1.0, 1.0]))
    a, b = V.scenario_reachable(m, cfg, seed=3), V.scenario_reachable(m, cfg, seed=3)
    assert a.dumps() == b.dumps()
    c = V.scenario_reachable(m, cfg, seed=4)
    assert c.S == a.S and c.rho != a.rho


def test_uncertified_model_is_advisory():
    m = small_model("gru", seed=0, n_x=6)
    m = m.with_parameters(U_r=np.eye(6) * 5)
    res = V.scenario_reachable(m, V.ScenarioConfig(K=5, template=V.BoxTemplate([0, 0], [1, 1])))
    assert res.advisory and res.certificate == "none"


def test_sample_count_cannot_undercut_bound():
    with pytest.raises(ValueError):
        V.ScenarioConfig(n_samples=10)
    assert V.ScenarioConfig(n_samples=700).S == 700


def _vertex_oracle(center, half, rho, lo, hi):
    for signs in itertools.product([-1, 1], repeat=len(center)):
        v = center + rho * half * np.array(signs)
        if np.any(v < lo) or np.any(v > hi):
            return False
    return True


@given(rho=st.floats(0, 3), c=st.lists(st.floats(-1, 1), min_size=3, max_size=3),
       r=st.lists(st.floats(0.1, 1), min_size=3, max_size=3))
def test_safety_verdict_matches_vertex_enumeration(rho, c, r):
    t = V.BoxTemplate(c, r)
    safe = V.SafeBox([-2.0, -1.5, -2.5], [2.0, 1.5, 2.5])
    res = V.ScenarioResult(1, rho, np.zeros(1), (0, 0), 0.05, 1e-6, 1, t, "both", False, 0)
    ok, margin = V.safety_verdict(res, safe)
    assert ok == _vertex_oracle(t.center, t.radii, rho, safe.lo, safe.hi)
    assert ok == (margin >= 0)


def test_touching_face_is_safe():
    t = V.BoxTemplate([0.0], [1.0])
    res = V.ScenarioResult(1, 2.0, np.zeros(1), (0, 0), 0.05, 1e-6, 1, t, "both", False, 0)
    assert V.safety_verdict(res, V.SafeBox([-2.0], [3.0])) == (True, 0.0)


def test_default_template_from_data(tiny_dataset):
    t = V.default_template(tiny_dataset.train)
    y = np.concatenate([s.y for s in tiny_dataset.train])
    np.testing.assert_allclose(t.center, y.mean(axis=0))
    assert np.all(V.gauge(t, y) <= 2.0)
