"""Model simulation, gradients and file format.

Forward passes are checked against plain per-step loops written from the
state equations; gradients against central finite differences.
"""
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _helpers import max_grad_error, small_model
from stablernn.exceptions import ModelFileError, NonFiniteError, ShapeError, UnknownArchitectureError
from stablernn.models import ARCHITECTURES, bptt_gradient, init_model, simulate, step
from stablernn.models.base import Dims
from stablernn.models.esn import generate_reservoir
from stablernn.models.io import dumps, load_model, loads, save_model

sig = lambda a: 1.0 / (1.0 + np.exp(-a))


def gru_oracle(m, x, u_seq):
    ys = []
    for u in u_seq:
        ys.append(m.U_o @ x + m.b_o)
        z = sig(m.W_z @ u + m.U_z @ x + m.b_z)
        f = sig(m.W_f @ u + m.U_f @ x + m.b_f)
        x = z * x + (1 - z) * np.tanh(m.W_r @ u + m.U_r @ (f * x) + m.b_r)
    return np.array(ys), x


def lstm_oracle(m, x, u_seq):
    n = m.dims.n_x
    chi, xi = x[:n], x[n:]
    ys = []
    for u in u_seq:
        ys.append(m.U_y @ xi + m.b_y)
        f = sig(m.W_f @ u + m.U_f @ xi + m.b_f)
        i = sig(m.W_i @ u + m.U_i @ xi + m.b_i)
        o = sig(m.W_o @ u + m.U_o @ xi + m.b_o)
        chi = f * chi + i * np.tanh(m.W_c @ u + m.U_c @ xi + m.b_c)
        xi = o * np.tanh(chi)
    return np.array(ys), np.r_[chi, xi]


def nnarx_oracle(m, x, u_seq):
    ny, nu, N = m.dims.n_y, m.dims.n_u, m.dims.N
    window = [x[j * (ny + nu): (j + 1) * (ny + nu)] for j in range(N)]
    ys = []
    for u in u_seq:
        ys.append(window[-1][:ny].copy())
        y_next = m.U0 @ np.tanh(m.W1 @ u + m.U1 @ np.concatenate(window) + m.b1) + m.b0
        window = window[1:] + [np.r_[y_next, u]]
    return np.array(ys), np.concatenate(window)


def esn_oracle(m, x, u_seq):
    nx = m.dims.n_x
    r, p = x[:nx], x[nx:]
    ys = []
    for u in u_seq:
        y = m.W_out1 @ r + m.W_out2 @ p
        ys.append(y)
        r = sig(m.W_x @ r + m.W_u @ u + m.W_y @ y)
        p = u
    return np.array(ys), np.r_[r, p]


ORACLES = {"gru": gru_oracle, "lstm": lstm_oracle, "nnarx": nnarx_oracle, "esn": esn_oracle}


def _randomize(model, rng):
    return model.with_parameters(**{k: rng.normal(scale=0.5, size=v.shape) for k, v in model.parameters().items()})


@pytest.mark.parametrize("arch", sorted(ORACLES))
def test_forward_matches_step_equations(arch, rng):
    m = _randomize(small_model(arch, seed=3, n_x=4, N=3), rng)
    lo, hi = m.state_box()
    x0 = rng.uniform(lo, hi)
    u = rng.uniform(-1, 1, size=(12, m.dims.n_u))
    y, X = m.simulate(x0, u)
    y_ref, x_ref = ORACLES[arch](m, x0, u)
    np.testing.assert_allclose(y, y_ref, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(X[-1], x_ref, rtol=1e-12, atol=1e-12)
    assert X.shape == (13, m.state_size)
    np.testing.assert_array_equal(X[0], x0)


@pytest.mark.parametrize("arch", sorted(ORACLES))
def test_step_loop_equals_simulate(arch, rng):
    m = small_model(arch, seed=5)
    x = m.zero_state()
    u = rng.uniform(-1, 1, size=(7, m.dims.n_u))
    ys = []
    for k in range(7):
        x, y = step(m, x, u[k])
        ys.append(y)
    y_sim, X = simulate(m, m.zero_state(), u)
    np.testing.assert_allclose(np.array(ys), y_sim, rtol=1e-14, atol=1e-14)
    np.testing.assert_allclose(x, X[-1], rtol=1e-14, atol=1e-14)


def test_batched_forward_equals_single(rng):
    m = small_model("lstm", seed=2)
    x0 = rng.uniform(-0.5, 0.5, size=(3, m.state_size))
    u = rng.uniform(-1, 1, size=(3, 9, m.dims.n_u))
    y, _ = m.forward(x0, u)
    for b in range(3):
        np.testing.assert_allclose(y[b], m.simulate(x0[b], u[b])[0], rtol=1e-14, atol=1e-14)


def test_nnarx_output_is_newest_block(rng):
    m = small_model("nnarx", seed=1, N=3)
    y_past, u_past = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    x = m.window_state(y_past, u_past)
    _, y = m.step(x, np.zeros(2))
    np.testing.assert_array_equal(y, y_past[-1])
    assert m.state_size == 3 * (2 + 2)


def test_esn_output_uses_previous_input(rng):
    m = small_model("esn", seed=4, n_x=6)
    m = m.with_parameters(W_out1=np.zeros_like(m.W_out1), W_out2=np.eye(2))
    u = rng.uniform(-1, 1, size=(5, 2))
    y, _ = m.simulate(m.zero_state(), u)
    np.testing.assert_array_equal(y[0], np.zeros(2))
    np.testing.assert_array_equal(y[1:], u[:-1])


@pytest.mark.parametrize("arch", ["gru", "lstm", "nnarx", "esn"])
@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_bptt_matches_finite_differences(arch, seed):
    rng = np.random.default_rng(seed)
    m = small_model(arch, seed=seed % 1000, n_x=3, N=2)
    assert max_grad_error(m, rng) < 1e-4


def test_bptt_gradient_api_matches_backward(rng):
    m = small_model("gru", seed=9)
    x0 = rng.uniform(-0.5, 0.5, size=m.state_size)
    u = rng.uniform(-1, 1, size=(6, 2))
    tail = rng.normal(size=(6, 2))
    g = bptt_gradient(m, x0, u, tail)
    _, cache = m.forward(x0, u)
    ref = m.backward(cache, tail[None])
    assert set(g) == set(m.weight_names)
    for k in g:
        np.testing.assert_array_equal(g[k], ref[k])


def test_lstm_output_bias_gradient_is_column_sum(rng):
    m = small_model("lstm", seed=0)
    u = rng.uniform(-1, 1, size=(1, 8, 2))
    dy = rng.normal(size=(1, 8, 2))
    _, cache = m.forward(m.zero_state(1), u)
    np.testing.assert_allclose(m.backward(cache, dy)["b_y"], dy.sum(axis=(0, 1)), rtol=0, atol=1e-15)


def test_esn_fixed_weights_get_no_gradient(rng):
    m = small_model("esn", seed=0, n_x=5)
    _, cache = m.forward(m.zero_state(1), rng.uniform(-1, 1, (1, 4, 2)))
    g = m.backward(cache, np.ones((1, 4, 2)))
    assert not np.any(g["W_x"]) and not np.any(g["W_u"]) and not np.any(g["W_y"])
    assert set(m.parameters()) == {"W_out1", "W_out2"}


def test_dims_validation():
    with pytest.raises(ValueError):
        Dims(0, 1, 1)
    with pytest.raises(ValueError):
        Dims(1, 1, 1, N=0)
    with pytest.raises(ValueError):
        init_model("nnarx", Dims(1, 1, 2))


def test_shape_errors(rng):
    m = small_model("gru")
    with pytest.raises(ShapeError):
        m.with_parameters(U_r=np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        m.forward(m.zero_state(1), np.zeros((1, 4, 3)))
    with pytest.raises(ShapeError):
        m.forward(np.zeros((1, 5)), np.zeros((1, 4, 2)))
    with pytest.raises(ValueError):
        m.forward(m.zero_state(1), np.zeros((1, 0, 2)))


def test_weights_are_read_only():
    m = small_model("lstm")
    with pytest.raises(ValueError):
        m.U_c[0, 0] = 1.0


def test_non_finite_input_reports_step():
    m = small_model("gru")
    u = np.zeros((1, 5, 2))
    u[0, 3, 1] = np.nan
    with pytest.raises(NonFiniteError) as info:
        m.forward(m.zero_state(1), u)
    assert info.value.step == 3


def test_nnarx_divergence_is_reported():
    m = small_model("nnarx", seed=0, activation="relu")
    m = m.with_parameters(U0=np.full_like(m.U0, 1e3), U1=np.full_like(m.U1, 1e3), b1=np.ones_like(m.b1))
    with pytest.raises(NonFiniteError):
        m.forward(m.zero_state(1), np.ones((1, 200, 2)))


def test_reservoir_generation():
    dims = Dims(2, 1, 40)
    m = generate_reservoir(dims, sparsity=0.8, target_norm=0.9, seed=3)
    assert np.sum(m.W_x == 0) >= round(0.8 * 40 * 40)
    assert m.spectral_norm_Wx == pytest.approx(0.9, rel=1e-12)
    again = generate_reservoir(dims, sparsity=0.8, target_norm=0.9, seed=3)
    np.testing.assert_array_equal(m.W_x, again.W_x)


@pytest.mark.parametrize("arch", sorted(ARCHITECTURES))
def test_file_round_trip_is_exact(arch, tmp_path):
    m = small_model(arch, seed=17)
    path = tmp_path / "m.json"
    save_model(m, path)
    back = load_model(path)
    assert type(back) is type(m) and back.dims == m.dims
    for k, v in m.weights().items():
        np.testing.assert_array_equal(back.weights()[k], v)
    assert dumps(back) == dumps(m)


def test_corrupt_file_reports_location():
    with pytest.raises(ModelFileError) as info:
        loads('{"format": "stablernn-model",\n "version": 1,\n oops}')
    assert info.value.location == "3:2"


def test_unknown_architecture_tag():
    text = dumps(small_model("gru")).replace('"gru"', '"transformer"')
    with pytest.raises(UnknownArchitectureError):
        loads(text)


def test_missing_weight_is_reported():
    obj = json.loads(dumps(small_model("gru")))
    del obj["weights"]["U_z"]
    with pytest.raises(ModelFileError):
        loads(json.dumps(obj))


def test_init_is_seeded():
    a, b = small_model("gru", seed=4), small_model("gru", seed=4)
    c = small_model("gru", seed=5)
    assert all(np.array_equal(a.weights()[k], b.weights()[k]) for k in a.weight_names)
    assert not np.array_equal(a.U_r, c.U_r)
