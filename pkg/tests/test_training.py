"""Losses, optimizers, certified training, ESN least squares and FIT."""
import numpy as np
import pytest

from _helpers import small_model
from stablernn import certificates
from stablernn.data import Sequence, stack
from stablernn.models.base import Dims
from stablernn.models.esn import generate_reservoir
from stablernn.training import (Adam, RMSProp, TrainConfig, fit_metric, minibatch_gradient, mse, penalty_rho,
                                restore_feasibility, solve_ridge, squared_error, train, train_esn)
from stablernn.models import bptt_gradient


def _seqs(rng, n=4, T=30, n_u=2, n_y=2):
    return [Sequence(rng.uniform(-1, 1, (T, n_u)), rng.uniform(-1, 1, (T, n_y)), i) for i in range(n)]


def _mse_loop(model, seqs, T_w):
    total = 0.0
    for s in seqs:
        y, _ = model.simulate(model.zero_state(), s.u)
        for k in range(T_w, len(s)):
            total += sum((y[k, j] - s.y[k, j]) ** 2 for j in range(s.y.shape[1]))
    return total / (len(seqs) * (len(seqs[0]) - T_w))


def test_mse_matches_double_loop(rng):
    m, seqs = small_model("gru", seed=1), _seqs(rng)
    for T_w in (0, 5, 10):
        assert mse(m, seqs, T_w) == pytest.approx(_mse_loop(m, seqs, T_w), rel=1e-12)


def test_mse_zero_for_exact_data(rng):
    m = small_model("lstm", seed=2)
    u = rng.uniform(-1, 1, (20, 2))
    y, _ = m.simulate(m.zero_state(), u)
    assert mse(m, [Sequence(u, y, 0)], 3) == 0.0


def test_washout_must_be_shorter():
    with pytest.raises(ValueError):
        squared_error(np.zeros((1, 5, 1)), np.zeros((1, 5, 1)), 5)


def test_early_targets_do_not_affect_gradient(rng):
    m = small_model("gru", seed=3)
    seqs = _seqs(rng, n=2, T=20)
    _, g1 = minibatch_gradient(m, seqs, T_w=6)
    changed = [Sequence(s.u, np.r_[s.y[:6] + 5.0, s.y[6:]], s.id) for s in seqs]
    _, g2 = minibatch_gradient(m, changed, T_w=6)
    for k in g1:
        np.testing.assert_array_equal(g1[k], g2[k])


def test_minibatch_gradient_is_sum_of_per_sequence_gradients(rng):
    m = small_model("lstm", seed=4)
    seqs = _seqs(rng, n=3, T=15)
    T_w = 4
    _, g = minibatch_gradient(m, seqs, T_w)
    ref = {k: 0.0 for k in g}
    for s in seqs:
        y, _ = m.simulate(m.zero_state(), s.u)
        tail = 2 * (y - s.y) / (3 * (15 - T_w))
        tail[:T_w] = 0
        for k, v in bptt_gradient(m, m.zero_state(), s.u, tail).items():
            ref[k] = ref[k] + v
    for k in g:
        np.testing.assert_allclose(g[k], ref[k], rtol=1e-10, atol=1e-14)


def test_penalty_rho():
    assert penalty_rho([-0.5, -0.01], 1.0, 0.02) == pytest.approx(0.01)
    assert penalty_rho([-0.5], 1.0, 0.02) == 0.0
    assert penalty_rho([0.1, 0.2], [2.0, 1.0], 0.0) == pytest.approx(0.4)
    with pytest.raises(ValueError):
        penalty_rho([0.1], -1.0)


def test_rmsprop_and_adam_first_steps():
    p, g = {"w": np.array([1.0, -2.0])}, {"w": np.array([0.5, -0.1])}
    r = RMSProp(lr=0.1, alpha=0.9, eps=0.0).step(p, g)["w"]
    np.testing.assert_allclose(r, p["w"] - 0.1 * g["w"] / np.sqrt(0.1 * g["w"] ** 2))
    a = Adam(lr=0.1, eps=0.0).step(p, g)["w"]
    np.testing.assert_allclose(a, p["w"] - 0.1 * np.sign(g["w"]))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")
    assert TrainConfig.from_dict(TrainConfig(lr=0.5).to_dict()).lr == 0.5


def _teacher_student(rng, arch="gru"):
    teacher = small_model(arch, seed=99, n_x=4)
    seqs = []
    for i in range(8):
        u = rng.uniform(-1, 1, (40, 2))
        y, _ = teacher.simulate(teacher.zero_state(), u)
        seqs.append(Sequence(u, y, i))
    return seqs[:6], seqs[6:]


def test_training_reduces_loss_and_is_deterministic(rng):
    tr, va = _teacher_student(rng)
    m = small_model("gru", seed=1, n_x=4)
    cfg = TrainConfig(epochs=15, batch_size=2, seed=5)
    a = train(m, tr, cfg, val=va, T_w=5)
    b = train(m, tr, cfg, val=va, T_w=5)
    assert a.trace.to_csv() == b.trace.to_csv()
    assert min(a.trace.val_mse) < mse(m, va, 5)
    assert a.trace.val_mse[a.best_epoch] == min(a.trace.val_mse)


@pytest.mark.parametrize("arch", ["gru", "lstm", "nnarx"])
def test_certified_training_returns_certified_snapshot(arch, rng):
    tr, va = _teacher_student(rng, "gru")
    m = small_model(arch, seed=2, n_x=4, N=2)
    res = train(m, tr, TrainConfig(epochs=10, batch_size=3), "dISS", val=va, T_w=5)
    assert res.certified and res.ok
    assert certificates.certify(res.model).holds("dISS")


def test_restore_feasibility_reaches_slack():
    m = small_model("gru", seed=0, n_x=5)
    assert not certificates.certify(m).holds("dISS")
    fixed = restore_feasibility(m, ("iss", "delta_iss"), slack=0.02, max_iter=500)
    marg = certificates.certify(fixed).margins
    assert max(marg.values()) <= -0.02 + 1e-12


def test_uncertified_outcome_keeps_best_snapshot(rng):
    tr, va = _teacher_student(rng)
    m = small_model("gru", seed=1, n_x=4)
    cfg = TrainConfig(epochs=3, restore=False, penalty_weight=0.0)
    res = train(m, tr, cfg, "dISS", val=va, T_w=5)
    assert not res.certified and not res.ok
    assert res.model is not None and res.best_epoch is not None


def test_esn_least_squares_normal_equations(rng):
    esn = generate_reservoir(Dims(2, 2, 30), seed=3)
    seqs = _seqs(rng, n=3, T=80)
    fit = train_esn(esn, seqs, T_w=10, ridge=1e-3)
    phi = np.vstack([esn.teacher_forced_states(s.u, s.y)[10:] for s in seqs])
    target = np.vstack([s.y[10:] for s in seqs])
    W = np.hstack([fit.W_out1, fit.W_out2])
    resid = phi.T @ (target - phi @ W.T) - 1e-3 * W.T
    assert np.abs(resid).max() / np.abs(phi.T @ target).max() < 1e-8


def test_esn_zero_ridge_rank_check(rng):
    phi = np.ones((10, 3))
    with pytest.raises(np.linalg.LinAlgError):
        solve_ridge(phi, np.ones((10, 1)), 0.0)
    full = rng.normal(size=(10, 3))
    np.testing.assert_allclose(solve_ridge(full, full @ [[1.0], [2.0], [3.0]], 0.0).ravel(), [1, 2, 3])


def test_esn_certified_readout(rng):
    esn = generate_reservoir(Dims(2, 2, 30), seed=1)
    seqs = [Sequence(s.u, 20 * s.y, s.id) for s in _seqs(rng, n=3, T=60)]
    fit = train_esn(esn, seqs, T_w=5, ridge=0.0 + 1e-9, target_property="dISS")
    assert certificates.nu_esn(fit) < 0


def test_fit_perfect_and_mean_predictor(rng):
    m = small_model("gru", seed=6)
    u = rng.uniform(-1, 1, (1, 50, 2))
    y, _ = m.forward(m.zero_state(1), u)
    seqs = [Sequence(u[0], y[0], 0)]
    np.testing.assert_array_equal(fit_metric(m, seqs, 5).per_channel, [100.0, 100.0])
    mean = np.broadcast_to(y[:, 5:].mean(axis=(0, 1)), y.shape)
    res = fit_metric(m, seqs, 5, y_hat=mean)
    assert res.overall <= 0.5
    np.testing.assert_allclose(fit_metric(m, seqs, 5, y_hat=mean, mode="trajectory").per_channel, 0, atol=1e-9)


def test_fit_floors_zero_denominators():
    y = np.zeros((6, 1))
    y[3] = 1.0
    s = Sequence(np.zeros((6, 1)), y, 0)
    res = fit_metric(None, [s], 0, y_hat=np.zeros((1, 6, 1)))
    assert res.floored == 0
    s_const = Sequence(np.zeros((6, 1)), np.ones((6, 1)), 0)
    res = fit_metric(None, [s_const], 0, y_hat=np.ones((1, 6, 1)))
    assert res.floored == 6 and res.per_channel[0] == 100.0


def test_clip_gradients_caps_global_norm():
    from stablernn.training import clip_gradients

    g = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    out = clip_gradients(g, 1.0)
    np.testing.assert_allclose(out["a"], [0.6, 0.0])
    np.testing.assert_allclose(out["b"], [[0.8]])
    assert clip_gradients(g, 10.0) is g
    with pytest.raises(ValueError):
        TrainConfig(clip_norm=0.0)
