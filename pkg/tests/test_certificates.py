"""Weight certificates, their gradients and the empirical stability probes.

Margins are recomputed here from numpy norms following the listed
inequalities term by term.
"""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _helpers import rel_err, small_model
from stablernn import certificates as C
from stablernn.models.base import Dims
from stablernn.models.esn import generate_reservoir

sig = lambda a: 1.0 / (1.0 + np.exp(-a))
inf = lambda a: np.abs(a).sum(axis=1).max()
two = lambda a: np.linalg.norm(a, 2)


def stacked(m, g):
    return inf(np.hstack([getattr(m, f"W_{g}"), getattr(m, f"U_{g}"), getattr(m, f"b_{g}")[:, None]]))


def zeroed(m):
    return m.with_parameters(**{k: np.zeros_like(v) for k, v in m.parameters().items()})


def hand_gru(m):
    sf, sz, pr = sig(stacked(m, "f")), sig(stacked(m, "z")), np.tanh(stacked(m, "r"))
    iss = inf(m.U_r) * sf - 1
    diss = inf(m.U_r) * (inf(m.U_f) / 4 + sf) + (1 + pr) / (4 * (1 - sz)) * inf(m.U_z) - 1
    return iss, diss


def hand_lstm(m):
    sf, si, so = (sig(stacked(m, g)) for g in "fio")
    pc = np.tanh(stacked(m, "c"))
    iss = sf + so * si * two(m.U_c) - 1
    alpha = two(m.U_f) / 4 * si * pc / (1 - sf) + si * two(m.U_c) + two(m.U_i) / 4 * pc
    px = np.tanh(si * pc / (1 - sf))
    d1 = -1 + sf + alpha * so + px * two(m.U_o) / 4 - sf * px * two(m.U_o) / 4
    d2 = sf * px * two(m.U_o) / 4 - 1
    return iss, (d1, d2)


def test_zero_weight_gru_margins():
    iss, diss = C.nu_gru(zeroed(small_model("gru")))
    assert iss == pytest.approx(-1.0, abs=1e-12)
    assert diss == pytest.approx(-1.0, abs=1e-12)


def test_zero_weight_lstm_margins():
    iss, (d1, d2) = C.nu_lstm(zeroed(small_model("lstm")))
    assert iss == pytest.approx(-0.5, abs=1e-12)
    assert d1 == pytest.approx(-0.5, abs=1e-12)
    assert d2 == pytest.approx(-1.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_gru_margins_match_hand_evaluation(seed):
    m = small_model("gru", seed=seed, n_x=4)
    np.testing.assert_allclose(C.nu_gru(m), hand_gru(m), rtol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_lstm_margins_match_hand_evaluation(seed):
    m = small_model("lstm", seed=seed, n_x=4)
    iss, (d1, d2) = C.nu_lstm(m)
    h_iss, (h1, h2) = hand_lstm(m)
    np.testing.assert_allclose([iss, d1, d2], [h_iss, h1, h2], rtol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_nnarx_margin_matches_hand_evaluation(seed):
    m = small_model("nnarx", seed=seed, n_x=5, N=3)
    hand = two(m.U0) * two(m.U1) - 1 / (1.0 * np.sqrt(3))
    assert C.nu_nnarx(m) == pytest.approx(hand, abs=1e-12)


def test_esn_margin_and_reservoir_precondition():
    m = generate_reservoir(Dims(2, 2, 20), seed=1)
    m = m.with_parameters(W_out1=np.random.default_rng(0).normal(size=(2, 20)))
    assert C.nu_esn(m) == pytest.approx(two(m.W_x - m.W_y @ m.W_out1) - 1, abs=1e-12)
    bad = m.with_parameters(W_x=np.eye(20) * 1.5)
    with pytest.raises(ValueError):
        C.nu_esn(bad)


@pytest.mark.parametrize("arch", ["gru", "lstm", "nnarx", "esn"])
@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_margin_gradients_match_finite_differences(arch, seed):
    m = small_model(arch, seed=seed, n_x=4, N=2)
    rng = np.random.default_rng(seed)
    m = m.with_parameters(**{k: v + 0.1 * rng.normal(size=v.shape) for k, v in m.parameters().items()})
    grads = C.margin_gradients(m)
    h = 1e-6
    for name, per_weight in grads.items():
        for wname, g in per_weight.items():
            p = getattr(m, wname)
            for idx in list(np.ndindex(p.shape))[:8]:
                a, b = p.copy(), p.copy()
                a[idx] += h
                b[idx] -= h
                fd = (C.margins(m.with_parameters(**{wname: a}))[name]
                      - C.margins(m.with_parameters(**{wname: b}))[name]) / (2 * h)
                assert abs(fd - g[idx]) < 1e-6 * max(1.0, abs(fd))


def test_report_property_and_round_trip():
    rep = C.certify(zeroed(small_model("lstm")))
    assert rep.passed and rep.property == "both" and rep.holds("ISS")
    assert rep.notes, "the LSTM report explains how the candidate bound is used"
    back = C.CertificateReport.loads(rep.dumps())
    assert back.margins == rep.margins and back.dumps() == rep.dumps()


def test_report_iss_only():
    rep = C.CertificateReport("gru", {"iss": -0.2, "delta_iss": 0.3})
    assert rep.property == "ISS" and not rep.passed


def test_margin_on_the_boundary_fails():
    rep = C.CertificateReport("esn", {"delta_iss": -1e-12})
    assert not rep.passed


def test_non_finite_weights_rejected():
    with pytest.raises(ValueError):
        small_model("gru").with_parameters(b_z=np.array([np.inf, 0, 0]))


def test_gru_margin_survives_saturated_gate():
    m = zeroed(small_model("gru")).with_parameters(b_z=np.full(3, 40.0), U_z=np.full((3, 3), 1e-3))
    iss, diss = C.nu_gru(m)
    assert np.isfinite(diss) and diss > 1e10


def _certified(arch, seed):
    m = small_model(arch, seed=seed, n_x=4, N=2)
    while not C.certify(m).passed:
        m = m.with_parameters(**{k: 0.8 * v for k, v in m.parameters().items()})
    return m


@pytest.mark.parametrize("arch", ["gru", "lstm", "nnarx"])
def test_certified_models_forget_initial_state(arch):
    for seed in range(3):
        probe = C.probe_delta_iss(_certified(arch, seed), trials=20, horizon=200, seed=seed)
        assert probe.verdict, probe.max_distance


def test_probe_flags_unstable_model():
    m = small_model("gru", n_x=3).with_parameters(
        U_r=np.eye(3) * 8, U_z=np.zeros((3, 3)), b_z=np.full(3, -4.0), b_f=np.full(3, 6.0))
    probe = C.probe_delta_iss(m, trials=30, horizon=200, seed=0)
    assert not C.certify(m).passed and not probe.verdict


def test_multilevel_inputs_are_piecewise_constant():
    u = C.draw_inputs(np.random.default_rng(0), (2, 300, 3), "multilevel")
    assert np.all(np.abs(u) <= 1)
    changes = np.sum(np.diff(u, axis=1) != 0, axis=1)
    assert np.all(changes <= 300 // 5)


def test_gain_estimate_is_monotone_and_vanishes_at_zero():
    m = _certified("gru", 1)
    est = C.estimate_gain(m, [0.0, 0.05, 0.2, 0.1], trials=10, horizon=50, seed=2)
    assert est.gain[0] == 0.0
    assert np.all(np.diff(est.gain) >= 0)
    assert not est.advisory
