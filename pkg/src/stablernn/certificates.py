"""Sufficient weight conditions for ISS / incremental ISS and empirical probes.

Each architecture has a set of scalar margins; a margin below zero means the
corresponding inequality holds.  Margins are differentiable (a.e.) in the
weights, and :func:`margin_gradients` returns their gradients so training can
penalise violations.
"""
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ._utils import inf_norm, inf_norm_grad, sigmoid, spectral_norm, spectral_norm_grad, substream
from .exceptions import ModelFileError

PASS_TOL = 1e-9
DEFAULT_PROBE_HORIZON = 100

LSTM_NOTE = (
    "the tanh bound of the candidate block [W_c U_c b_c] is used both where the "
    "listed bounds name it phi_f and where the incremental conditions use phi_c"
)

# which margins each property needs, per architecture
PROPERTY_MARGINS = {
    "nnarx": {"ISS": ("iss_delta_iss",), "dISS": ("iss_delta_iss",)},
    "esn": {"ISS": ("delta_iss",), "dISS": ("delta_iss",)},
    "lstm": {"ISS": ("iss",), "dISS": ("iss", "delta_iss_1", "delta_iss_2")},
    "gru": {"ISS": ("iss",), "dISS": ("iss", "delta_iss")},
}


def _stack(*blocks):
    return np.hstack([np.atleast_2d(b) if b.ndim == 2 else b[:, None] for b in blocks])


def _stacked_inf(model, gate):
    W, U, b = (getattr(model, f"{k}_{gate}") for k in ("W", "U", "b"))
    return inf_norm(_stack(W, U, b))


def _stacked_inf_grad(model, gate):
    W, U, b = (getattr(model, f"{k}_{gate}") for k in ("W", "U", "b"))
    g = inf_norm_grad(_stack(W, U, b))
    nu, nx = W.shape[1], U.shape[1]
    return {f"W_{gate}": g[:, :nu], f"U_{gate}": g[:, nu: nu + nx], f"b_{gate}": g[:, -1]}


# -- NNARX / ESN -------------------------------------------------------------------


def nu_nnarx(p):
    """||U0||_2 ||U1||_2 - 1 / (L_psi sqrt(N))."""
    return spectral_norm(p.U0) * spectral_norm(p.U1) - 1.0 / (p.L_psi * np.sqrt(p.dims.N))


def _nnarx_grads(p):
    return {
        "iss_delta_iss": {
            "U0": spectral_norm(p.U1) * spectral_norm_grad(p.U0),
            "U1": spectral_norm(p.U0) * spectral_norm_grad(p.U1),
        }
    }


def _check_reservoir(p):
    if spectral_norm(p.W_x) >= 1.0:
        raise ValueError(f"reservoir spectral norm {spectral_norm(p.W_x):.6g} >= 1; regenerate W_x")


def nu_esn(p):
    """||W_x - W_y W_out1||_2 - 1; requires ||W_x||_2 < 1."""
    _check_reservoir(p)
    return spectral_norm(p.W_x - p.W_y @ p.W_out1) - 1.0


def _esn_grads(p):
    g = spectral_norm_grad(p.W_x - p.W_y @ p.W_out1)
    return {"delta_iss": {"W_out1": -p.W_y.T @ g}}


# -- LSTM ----------------------------------------------------------------------------


def _lstm_atoms(p):
    return {
        "s_f": _stacked_inf(p, "f"),
        "s_i": _stacked_inf(p, "i"),
        "s_o": _stacked_inf(p, "o"),
        "s_c": _stacked_inf(p, "c"),
        "n_Uc": spectral_norm(p.U_c),
        "n_Uf": spectral_norm(p.U_f),
        "n_Ui": spectral_norm(p.U_i),
        "n_Uo": spectral_norm(p.U_o),
    }


def _lstm_eval(a):
    """Margins, auxiliary bounds and d(margin)/d(atom) for the LSTM conditions."""
    sf, si, so = sigmoid(a["s_f"]), sigmoid(a["s_i"]), sigmoid(a["s_o"])
    pc = np.tanh(a["s_c"])
    sf_c = sigmoid(-a["s_f"])  # 1 - sigma_f without cancellation
    nUc, nUf, nUi, nUo = a["n_Uc"], a["n_Uf"], a["n_Ui"], a["n_Uo"]
    q = si * pc / sf_c
    alpha = 0.25 * nUf * q + si * nUc + 0.25 * nUi * pc
    px = np.tanh(q)

    m_iss = sf + so * si * nUc - 1.0
    m1 = -1.0 + sf + alpha * so + 0.25 * px * nUo * (1.0 - sf)
    m2 = 0.25 * sf * px * nUo - 1.0

    # partials w.r.t. the bound values, then chained to the atoms
    dq = {"sf": si * pc / sf_c ** 2, "si": pc / sf_c, "pc": si / sf_c}
    dpx = 1.0 - px * px

    d_iss = {"sf": 1.0, "si": so * nUc, "so": si * nUc, "n_Uc": so * si}

    d1_alpha = so
    d1_px = 0.25 * nUo * (1.0 - sf)
    d1_q = d1_alpha * 0.25 * nUf + d1_px * dpx
    d1 = {
        "sf": 1.0 - 0.25 * px * nUo + d1_q * dq["sf"],
        "si": d1_alpha * nUc + d1_q * dq["si"],
        "so": alpha,
        "pc": d1_alpha * 0.25 * nUi + d1_q * dq["pc"],
        "n_Uf": d1_alpha * 0.25 * q,
        "n_Uc": d1_alpha * si,
        "n_Ui": d1_alpha * 0.25 * pc,
        "n_Uo": 0.25 * px * (1.0 - sf),
    }
    d2_q = 0.25 * sf * nUo * dpx
    d2 = {
        "sf": 0.25 * px * nUo + d2_q * dq["sf"],
        "si": d2_q * dq["si"],
        "pc": d2_q * dq["pc"],
        "n_Uo": 0.25 * sf * px,
    }
    slope = {"sf": sf * (1 - sf), "si": si * (1 - si), "so": so * (1 - so), "pc": 1 - pc * pc}
    to_atom = {"sf": "s_f", "si": "s_i", "so": "s_o", "pc": "s_c"}

    def chain(d):
        out = {}
        for k, v in d.items():
            if k in to_atom:
                out[to_atom[k]] = out.get(to_atom[k], 0.0) + v * slope[k]
            else:
                out[k] = out.get(k, 0.0) + v
        return out

    margins = {"iss": m_iss, "delta_iss_1": m1, "delta_iss_2": m2}
    aux = {"sigma_f": sf, "sigma_i": si, "sigma_o": so, "phi_c": pc, "phi_x": px, "alpha": alpha}
    partials = {"iss": chain(d_iss), "delta_iss_1": chain(d1), "delta_iss_2": chain(d2)}
    return margins, aux, partials


def nu_lstm(p):
    """Returns ``(iss_margin, (delta_iss_margin_1, delta_iss_margin_2))``."""
    _require_finite(p)
    m, _, _ = _lstm_eval(_lstm_atoms(p))
    return m["iss"], (m["delta_iss_1"], m["delta_iss_2"])


def _lstm_grads(p):
    _, _, partials = _lstm_eval(_lstm_atoms(p))
    atom_grads = {
        "s_f": _stacked_inf_grad(p, "f"),
        "s_i": _stacked_inf_grad(p, "i"),
        "s_o": _stacked_inf_grad(p, "o"),
        "s_c": _stacked_inf_grad(p, "c"),
        "n_Uc": {"U_c": spectral_norm_grad(p.U_c)},
        "n_Uf": {"U_f": spectral_norm_grad(p.U_f)},
        "n_Ui": {"U_i": spectral_norm_grad(p.U_i)},
        "n_Uo": {"U_o": spectral_norm_grad(p.U_o)},
    }
    return {name: _combine(d, atom_grads) for name, d in partials.items()}


# -- GRU -----------------------------------------------------------------------------


def _gru_atoms(p):
    return {
        "s_f": _stacked_inf(p, "f"),
        "s_z": _stacked_inf(p, "z"),
        "s_r": _stacked_inf(p, "r"),
        "n_Ur": inf_norm(p.U_r),
        "n_Uf": inf_norm(p.U_f),
        "n_Uz": inf_norm(p.U_z),
    }


def _gru_eval(a):
    sf, sz, pr = sigmoid(a["s_f"]), sigmoid(a["s_z"]), np.tanh(a["s_r"])
    sz_c = sigmoid(-a["s_z"])  # 1 - sigma_z without cancellation
    nUr, nUf, nUz = a["n_Ur"], a["n_Uf"], a["n_Uz"]
    m_iss = nUr * sf - 1.0
    c = 0.25 * (1.0 + pr) / sz_c
    m_d = nUr * (0.25 * nUf + sf) + c * nUz - 1.0
    partials = {
        "iss": {"n_Ur": sf, "s_f": nUr * sf * (1 - sf)},
        "delta_iss": {
            "n_Ur": 0.25 * nUf + sf,
            "n_Uf": 0.25 * nUr,
            "n_Uz": c,
            "s_f": nUr * sf * (1 - sf),
            "s_r": 0.25 / sz_c * nUz * (1 - pr * pr),
            "s_z": c * nUz * sz,
        },
    }
    aux = {"sigma_f": sf, "sigma_z": sz, "phi_r": pr}
    return {"iss": m_iss, "delta_iss": m_d}, aux, partials


def nu_gru(p):
    """Returns ``(iss_margin, delta_iss_margin)``."""
    _require_finite(p)
    m, _, _ = _gru_eval(_gru_atoms(p))
    return m["iss"], m["delta_iss"]


def _gru_grads(p):
    _, _, partials = _gru_eval(_gru_atoms(p))
    atom_grads = {
        "s_f": _stacked_inf_grad(p, "f"),
        "s_z": _stacked_inf_grad(p, "z"),
        "s_r": _stacked_inf_grad(p, "r"),
        "n_Ur": {"U_r": inf_norm_grad(p.U_r)},
        "n_Uf": {"U_f": inf_norm_grad(p.U_f)},
        "n_Uz": {"U_z": inf_norm_grad(p.U_z)},
    }
    return {name: _combine(d, atom_grads) for name, d in partials.items()}


def _combine(dmargin_datom, atom_grads):
    out = {}
    for atom, coef in dmargin_datom.items():
        for wname, g in atom_grads[atom].items():
            out[wname] = out.get(wname, 0.0) + coef * g
    return out


def _require_finite(p):
    for name, w in p.weights().items():
        if not np.all(np.isfinite(w)):
            raise ValueError(f"{name} has non-finite entries")


# -- reports -------------------------------------------------------------------------


@dataclass
class CertificateReport:
    architecture: str
    margins: dict
    aux: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    tolerance: float = PASS_TOL

    def __post_init__(self):
        self.margins = {k: float(v) for k, v in self.margins.items()}
        self.aux = {k: float(v) for k, v in self.aux.items()}

    @property
    def passed(self):
        return all(v < -self.tolerance for v in self.margins.values())

    def holds(self, prop):
        names = PROPERTY_MARGINS[self.architecture][prop]
        return all(self.margins[n] < -self.tolerance for n in names)

    @property
    def property(self):
        """Strongest property certified: ``'both'``, ``'ISS'`` or ``'none'``."""
        if self.holds("dISS"):
            return "both"
        if self.holds("ISS"):
            return "ISS"
        return "none"

    def to_dict(self):
        d = asdict(self)
        d["property"] = self.property
        d["pass"] = self.passed
        return d

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ModelFileError(f"invalid JSON: {exc.msg}", f"{exc.lineno}:{exc.colno}") from exc
        return cls(
            architecture=d["architecture"],
            margins=d["margins"],
            aux=d.get("aux", {}),
            notes=d.get("notes", []),
            tolerance=d.get("tolerance", PASS_TOL),
        )


def margins(model):
    """All certificate margins of ``model`` as ``{name: value}``."""
    return certify(model).margins


def certify(model):
    arch = model.arch
    if arch == "nnarx":
        m = {"iss_delta_iss": nu_nnarx(model)}
        aux = {"norm_U0": spectral_norm(model.U0), "norm_U1": spectral_norm(model.U1), "L_psi": model.L_psi}
        return CertificateReport(arch, m, aux)
    if arch == "esn":
        m = {"delta_iss": nu_esn(model)}
        return CertificateReport(arch, m, {"norm_W_x": spectral_norm(model.W_x)})
    if arch == "lstm":
        _require_finite(model)
        m, aux, _ = _lstm_eval(_lstm_atoms(model))
        return CertificateReport(arch, m, aux, [LSTM_NOTE])
    if arch == "gru":
        _require_finite(model)
        m, aux, _ = _gru_eval(_gru_atoms(model))
        return CertificateReport(arch, m, aux)
    raise ValueError(f"no certificate for architecture {arch!r}")


def margin_gradients(model):
    """``{margin_name: {weight_name: d margin / d weight}}``."""
    table = {"nnarx": _nnarx_grads, "esn": _esn_grads, "lstm": _lstm_grads, "gru": _gru_grads}
    if model.arch not in table:
        raise ValueError(f"no certificate for architecture {model.arch!r}")
    return table[model.arch](model)


def margins_for(model, prop):
    """Margin names relevant to ``prop`` (``'ISS'`` or ``'dISS'``)."""
    return PROPERTY_MARGINS[model.arch][prop]


# -- empirical probes ----------------------------------------------------------------


def draw_inputs(rng, shape, input_class="uniform"):
    """Random unity-bounded input sequences of shape (B, K, n_u)."""
    if input_class == "uniform":
        return rng.uniform(-1.0, 1.0, size=shape)
    if input_class == "multilevel":
        B, K, n = shape
        holds = rng.integers(5, 21, size=(B, K, n))
        levels = rng.uniform(-1.0, 1.0, size=(B, K, n))
        out = np.empty(shape)
        for b in range(B):
            for j in range(n):
                k = 0
                idx = 0
                while k < K:
                    out[b, k: k + holds[b, idx, j], j] = levels[b, idx, j]
                    k += holds[b, idx, j]
                    idx += 1
        return out
    raise ValueError(f"unknown input class {input_class!r}")


def draw_states(rng, model, count, scale=1.0):
    lo, hi = model.state_box()
    mid, half = (lo + hi) / 2, (hi - lo) / 2 * scale
    return mid + half * rng.uniform(-1.0, 1.0, size=(count, lo.shape[0]))


@dataclass
class EmpiricalStabilityProbe:
    trials: int
    horizon: int
    distances: np.ndarray
    input_class: str
    tolerance: float = 1e-3

    @property
    def max_distance(self):
        return float(np.max(self.distances)) if len(self.distances) else 0.0

    @property
    def verdict(self):
        return self.max_distance < self.tolerance


def probe_delta_iss(model, trials=100, horizon=DEFAULT_PROBE_HORIZON, input_class="uniform", seed=0,
                    tolerance=1e-3):
    """Terminal distance of trajectory pairs started apart and fed the same input.

    Initial states are drawn uniformly in the model's admissible state box.
    """
    if horizon < 1:
        raise ValueError("probe horizon must be >= 1")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = substream(seed, "probe")
    xa = draw_states(rng, model, trials)
    xb = draw_states(rng, model, trials)
    u = draw_inputs(rng, (trials, horizon, model.dims.n_u), input_class)
    _, cache = model.forward(np.vstack([xa, xb]), np.concatenate([u, u]))
    xK = cache["x"][:, -1]
    d = np.linalg.norm(xK[:trials] - xK[trials:], axis=1)
    return EmpiricalStabilityProbe(trials, horizon, d, input_class, tolerance)


@dataclass
class GainEstimate:
    levels: np.ndarray
    raw: np.ndarray
    gain: np.ndarray
    advisory: bool

    def as_dict(self):
        return {float(l): float(g) for l, g in zip(self.levels, self.gain)}


def estimate_gain(model, levels, trials=50, horizon=100, seed=0, input_class="uniform"):
    """Sampled bound of the state deviation caused by bounded input perturbations.

    For each level ``delta`` the perturbation has ``||du_k||_2 = delta`` with a
    random direction at every step; both trajectories share the initial state.
    The returned ``gain`` is made nondecreasing by a running maximum over levels.
    """
    levels = np.asarray(sorted(float(l) for l in levels))
    if levels.size == 0:
        raise ValueError("at least one perturbation level is required")
    if np.any(levels < 0):
        raise ValueError("perturbation levels must be nonnegative")
    advisory = not certify(model).holds("dISS")
    rng = substream(seed, "probe")
    n_u = model.dims.n_u
    x0 = draw_states(rng, model, trials)
    u = draw_inputs(rng, (trials, horizon, n_u), input_class)
    v = rng.normal(size=(trials, horizon, n_u))
    v /= np.linalg.norm(v, axis=2, keepdims=True)
    _, base = model.forward(x0, u)
    raw = np.empty(levels.size)
    for j, lev in enumerate(levels):
        _, pert = model.forward(x0, u + lev * v)
        raw[j] = np.linalg.norm(base["x"] - pert["x"], axis=2).max()
    return GainEstimate(levels, raw, np.maximum.accumulate(raw), advisory)
