"""Loss, optimizers and training loops.

Models are trained on the simulation error over subsequences: each
subsequence is simulated from an initial state (zero by default), the first
``T_w`` outputs are discarded as washout and the squared error of the rest
is averaged.  Certificate violations can be penalised with a hinge term.
"""
import csv
import io
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import certificates
from ._utils import substream
from .data import Dataset, stack


# -- losses --------------------------------------------------------------------------


def _initial_states(model, batch, policy, rng):
    if policy == "zero":
        return model.zero_state(batch)
    if policy == "random":
        return certificates.draw_states(rng, model, batch)
    raise ValueError(f"unknown initial-state policy {policy!r}")


def squared_error(y_hat, y, T_w):
    """MSE over steps k >= T_w and its gradient w.r.t. ``y_hat``."""
    B, T, _ = y.shape
    if not 0 <= T_w < T:
        raise ValueError(f"washout T_w={T_w} must be smaller than the sequence length {T}")
    err = y_hat - y
    err[:, :T_w] = 0.0
    scale = 1.0 / (B * (T - T_w))
    return float(np.sum(err * err) * scale), 2.0 * scale * err


def mse(model, sequences, T_w, x0_policy="zero", seed=0):
    """Mean over sequences and post-washout steps of the squared output error norm."""
    if not sequences:
        raise ValueError("mse needs at least one sequence")
    u, y = stack(sequences)
    x0 = _initial_states(model, len(sequences), x0_policy, substream(seed, "init"))
    y_hat, _ = model.forward(x0, u)
    return squared_error(y_hat, y, T_w)[0]


def penalty_rho(nu_margins, weights=1.0, slack=0.02):
    """Hinge penalty sum_j w_j max(nu_j + slack, 0)."""
    nu = np.asarray(nu_margins, dtype=float)
    w = np.broadcast_to(np.asarray(weights, dtype=float), nu.shape)
    if np.any(w < 0):
        raise ValueError("penalty weights must be nonnegative")
    return float(np.sum(w * np.maximum(nu + slack, 0.0)))


def penalty_gradient(model, names, weight, slack):
    """Gradient of ``weight * sum_j max(nu_j + slack, 0)`` over the named margins."""
    report = certificates.certify(model)
    active = [n for n in names if report.margins[n] + slack > 0]
    if not active:
        return {}, 0.0
    table = certificates.margin_gradients(model)
    grads = {}
    for n in active:
        for wname, g in table[n].items():
            grads[wname] = grads.get(wname, 0.0) + weight * g
    value = penalty_rho([report.margins[n] for n in names], weight, slack)
    return grads, value


def restore_feasibility(model, names, slack=0.02, max_iter=200, frozen=()):
    """Move the weights back inside ``nu_j <= -slack`` by Polyak steps on the margins.

    Each iteration takes the violated margin with the largest value and steps
    along its negative gradient to the linearised boundary (overshooting by
    ``slack``).  Stops early once every margin is at most ``-slack``.
    """
    for _ in range(max_iter):
        m = certificates.certify(model).margins
        worst = max(names, key=lambda n: m[n])
        excess = m[worst] + slack
        if excess <= 0:
            break
        g = {k: v for k, v in certificates.margin_gradients(model)[worst].items() if k not in frozen}
        sq = sum(float(np.sum(v * v)) for v in g.values())
        if sq == 0.0:
            break
        step = (excess + slack) / sq
        params = model.parameters()
        model = model.with_parameters(**{k: params[k] - step * v for k, v in g.items()})
    return model


def minibatch_gradient(model, sequences, T_w, x0=None, output_penalty=None):
    """Loss value and gradient of the (unpenalised) minibatch loss."""
    u, y = stack(sequences)
    x0 = model.zero_state(len(sequences)) if x0 is None else x0
    y_hat, cache = model.forward(x0, u)
    loss, dy = squared_error(y_hat, y, T_w)
    if output_penalty is not None:
        extra, d_extra = output_penalty(y_hat, T_w)
        loss += extra
        dy = dy + d_extra
    grads = model.backward(cache, dy)
    return loss, {k: grads[k] for k in model.parameters()}


def clip_gradients(grads, max_norm):
    """Rescale a gradient dict so its global Euclidean norm is at most ``max_norm``."""
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm:
        return grads
    return {k: g * (max_norm / norm) for k, g in grads.items()}


# -- optimizers ----------------------------------------------------------------------


class RMSProp:
    def __init__(self, lr=1e-3, alpha=0.99, eps=1e-8):
        self.lr, self.alpha, self.eps = lr, alpha, eps
        self.sq = {}

    def step(self, params, grads):
        out = {}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = p
                continue
            s = self.sq.get(k, np.zeros_like(p))
            s = self.alpha * s + (1.0 - self.alpha) * g * g
            self.sq[k] = s
            out[k] = p - self.lr * g / (np.sqrt(s) + self.eps)
        return out


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        out = {}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = p
                continue
            m = self.beta1 * self.m.get(k, np.zeros_like(p)) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(k, np.zeros_like(p)) + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


@dataclass
class TrainConfig:
    optimizer: str = "rmsprop"
    lr: float = 1e-2
    epochs: int = 200
    batch_size: int = 16
    patience: int = 50
    x0_policy: str = "zero"
    penalty_weight: float = 1.0
    penalty_slack: float = 0.02
    penalty_ramp: float = 1.5
    ramp_every: int = 50
    restore: bool = True
    restore_iters: int = 200
    clip_norm: float | None = None  # global norm cap on the loss gradient
    ridge: float = 1e-6  # ESN least squares only
    seed: int = 0
    frozen: tuple = ()  # parameter names left untouched
    optimizer_args: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.optimizer not in ("rmsprop", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        self.frozen = tuple(self.frozen)

    def make_optimizer(self):
        cls = RMSProp if self.optimizer == "rmsprop" else Adam
        return cls(lr=self.lr, **self.optimizer_args)

    def to_dict(self):
        d = asdict(self)
        d["frozen"] = list(self.frozen)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class TrainTrace:
    epoch: list = field(default_factory=list)
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    margins: list = field(default_factory=list)
    wall: list = field(default_factory=list)

    def __len__(self):
        return len(self.epoch)

    def to_csv(self):
        names = list(self.margins[0]) if self.margins and self.margins[0] else []
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "val_mse"] + names)
        for j in range(len(self)):
            w.writerow([self.epoch[j], repr(self.train_mse[j]), repr(self.val_mse[j])]
                       + [repr(self.margins[j][n]) for n in names])
        return buf.getvalue()


@dataclass
class TrainResult:
    model: object
    trace: TrainTrace
    certified: bool
    best_epoch: int | None
    target_property: str | None = None

    @property
    def ok(self):
        return self.target_property is None or self.certified


def _split_sets(data, val):
    if isinstance(data, Dataset):
        return data.train, data.val, data.split.T_w
    raise TypeError("pass a Dataset with a split, or use train(..., val=..., T_w=...)")


def train(model0, data, config=None, target_property=None, val=None, T_w=None, output_penalty=None):
    """Minibatch gradient training with validation-based snapshot selection.

    ``target_property`` (``'ISS'`` or ``'dISS'``) adds the certificate hinge
    penalty; the returned snapshot is then the best-validation epoch among those
    whose margins are all negative.  If no such epoch exists the result carries
    the best uncertified snapshot with ``certified=False``.
    """
    config = TrainConfig() if config is None else config
    if isinstance(data, Dataset):
        train_set, val_set, T_w = _split_sets(data, val)
    else:
        train_set, val_set = list(data), list(val if val is not None else data)
        if T_w is None:
            raise ValueError("T_w is required when training on plain sequence lists")
    if target_property not in (None, "ISS", "dISS"):
        raise ValueError("target_property must be None, 'ISS' or 'dISS'")
    if getattr(model0, "arch", None) == "esn":
        return _train_esn_result(model0, train_set, val_set, T_w, config, target_property)
    names = certificates.margins_for(model0, target_property) if target_property else ()
    certifiable = model0.arch in certificates.PROPERTY_MARGINS

    trace = TrainTrace()
    if config.epochs == 0:
        return TrainResult(model0, trace, _certified(model0, names), None, target_property)

    rng = substream(config.seed, "minibatch")
    opt = config.make_optimizer()
    model = model0
    pen_w = config.penalty_weight
    best = {"cert": (np.inf, None, None), "any": (np.inf, None, None)}
    stale = 0
    t0 = time.perf_counter()
    ids = np.arange(len(train_set))
    for epoch in range(config.epochs):
        perm = rng.permutation(ids)
        total, count = 0.0, 0
        for start in range(0, len(perm), config.batch_size):
            batch = [train_set[i] for i in np.sort(perm[start: start + config.batch_size])]
            x0 = _initial_states(model, len(batch), config.x0_policy, rng)
            loss, grads = minibatch_gradient(model, batch, T_w, x0, output_penalty)
            if config.clip_norm is not None:
                grads = clip_gradients(grads, config.clip_norm)
            if names:
                pgrads, _ = penalty_gradient(model, names, pen_w, config.penalty_slack)
                for k, g in pgrads.items():
                    grads[k] = grads[k] + g
            for k in config.frozen:
                grads.pop(k, None)
            model = model.with_parameters(**opt.step(model.parameters(), grads))
            if names and config.restore:
                model = restore_feasibility(model, names, config.penalty_slack, config.restore_iters,
                                            frozen=config.frozen)
            total += loss * len(batch)
            count += len(batch)
        val_loss = _val_loss(model, val_set, T_w, output_penalty)
        marg = certificates.certify(model).margins if certifiable else {}
        trace.epoch.append(epoch)
        trace.train_mse.append(total / count)
        trace.val_mse.append(val_loss)
        trace.margins.append(marg)
        trace.wall.append(time.perf_counter() - t0)

        ok = _certified(model, names)
        improved = False
        if val_loss < best["any"][0]:
            best["any"] = (val_loss, model, epoch)
            improved = not names
        if names and ok and val_loss < best["cert"][0]:
            best["cert"] = (val_loss, model, epoch)
            improved = True
        stale = 0 if improved else stale + 1
        if names and not ok and (epoch + 1) % config.ramp_every == 0:
            pen_w *= config.penalty_ramp
        if stale >= config.patience and (not names or ok):
            break

    key = "cert" if names else "any"
    _, snap, epoch = best[key]
    if snap is None:
        _, snap, epoch = best["any"]
        return TrainResult(snap, trace, False, epoch, target_property)
    return TrainResult(snap, trace, _certified(snap, names), epoch, target_property)


def _certified(model, names):
    if not names:
        return False
    m = certificates.certify(model)
    return all(m.margins[n] < -m.tolerance for n in names)


def _val_loss(model, val_set, T_w, output_penalty):
    u, y = stack(val_set)
    y_hat, _ = model.forward(model.zero_state(len(val_set)), u)
    loss = squared_error(y_hat, y, T_w)[0]
    if output_penalty is not None:
        loss += output_penalty(y_hat, T_w)[0]
    return loss


# -- echo state networks -------------------------------------------------------------


def _esn_regression(esn, sequences, T_w):
    rows, targets = [], []
    for s in sequences:
        phi = esn.teacher_forced_states(s.u, s.y)
        rows.append(phi[T_w:])
        targets.append(s.y[T_w:])
    return np.vstack(rows), np.vstack(targets)


def solve_ridge(phi, target, ridge):
    """Least squares ``min ||phi W' - target||^2 + ridge ||W||^2``; returns W'."""
    if ridge == 0:
        rank = np.linalg.matrix_rank(phi)
        if rank < phi.shape[1]:
            raise np.linalg.LinAlgError(
                f"regressor matrix has rank {rank} < {phi.shape[1]}; use a positive ridge parameter"
            )
        return np.linalg.lstsq(phi, target, rcond=None)[0]
    gram = phi.T @ phi + ridge * np.eye(phi.shape[1])
    return np.linalg.solve(gram, phi.T @ target)


def train_esn(esn, sequences, T_w=0, ridge=1e-6, target_property=None, max_ridge_steps=40):
    """Fit the ESN readout by (ridge) least squares on teacher-forced states.

    With ``target_property`` set, the ridge parameter is raised tenfold until
    the incremental-stability margin is negative; shrinking ``W_out1`` always
    reaches ``||W_x||_2 - 1 < 0`` eventually.
    """
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    phi, target = _esn_regression(esn, sequences, T_w)
    nx = esn.dims.n_x
    lam = ridge
    for _ in range(max_ridge_steps):
        W = solve_ridge(phi, target, lam).T
        fitted = esn.with_parameters(W_out1=W[:, :nx], W_out2=W[:, nx:])
        fitted.meta.update({"ridge": float(lam)})
        if target_property is None or certificates.nu_esn(fitted) < -certificates.PASS_TOL:
            return fitted
        lam = max(10.0 * lam, 1e-6)
    raise RuntimeError("no ridge parameter produced a certified readout")


def _train_esn_result(esn, train_set, val_set, T_w, config, target_property):
    t0 = time.perf_counter()
    fitted = train_esn(esn, train_set, T_w, config.ridge, target_property)
    trace = TrainTrace([0], [mse(fitted, train_set, T_w)], [mse(fitted, val_set, T_w)],
                       [certificates.certify(fitted).margins], [time.perf_counter() - t0])
    cert = certificates.certify(fitted).passed
    return TrainResult(fitted, trace, cert, 0, target_property)


# -- goodness of fit -----------------------------------------------------------------


@dataclass
class FitResult:
    per_channel: np.ndarray
    overall: float
    floored: int


def fit_metric(model, sequences, T_w, floor=1e-9, y_hat=None, mode="pointwise"):
    """FIT[%] per output channel.

    ``mode='pointwise'`` averages per-step ratios,
    100 (1 - mean_k |y_k - y_m,k| / |y_m,k - y_avg|); denominators below
    ``floor`` are raised to it and counted in ``floored``.  ``mode='trajectory'``
    uses the usual norm ratio 100 (1 - ||y - y_m|| / ||y_m - y_avg||).
    In both, averages run over all sequences and post-washout steps and
    ``y_avg`` is the measured channel mean over the same steps.
    """
    if not sequences:
        raise ValueError("fit_metric needs at least one sequence")
    if mode not in ("pointwise", "trajectory"):
        raise ValueError(f"unknown FIT mode {mode!r}")
    u, y = stack(sequences)
    if y_hat is None:
        y_hat, _ = model.forward(model.zero_state(len(sequences)), u)
    y, y_hat = y[:, T_w:], np.asarray(y_hat)[:, T_w:]
    y_avg = y.mean(axis=(0, 1))
    if mode == "trajectory":
        den = np.sqrt(np.sum((y - y_avg) ** 2, axis=(0, 1)))
        floored = int(np.sum(den < floor))
        num = np.sqrt(np.sum((y_hat - y) ** 2, axis=(0, 1)))
        per_channel = 100.0 * (1.0 - num / np.maximum(den, floor))
    else:
        den = np.abs(y - y_avg)
        floored = int(np.sum(den < floor))
        ratio = np.abs(y_hat - y) / np.maximum(den, floor)
        per_channel = 100.0 * (1.0 - ratio.mean(axis=(0, 1)))
    return FitResult(per_channel, float(per_channel.mean()), floored)
