"""Scenario-based probabilistic bounds on the output reachable set.

Random initial states and input sequences are drawn, the model is simulated
for K steps, and the smallest scaling rho of a convex template that covers
every sampled output is computed.  With S >= (2/eps)(ln(1/beta) + 1)
samples, the scaled template contains the outputs of a fresh random
experiment with probability at least 1 - eps, at confidence 1 - beta.

The covering program is one-dimensional, so its optimum is the largest
Minkowski gauge over all samples and time steps.
"""
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import certificates
from ._utils import substream
from .exceptions import NonFiniteError


def required_samples(eps, beta):
    """Smallest integer S with S >= (2 / eps) (ln(1 / beta) + 1)."""
    for name, v in (("eps", eps), ("beta", beta)):
        if not 0.0 < v < 1.0:
            raise ValueError(f"{name} must lie in (0, 1), got {v!r}")
    return math.ceil(2.0 / eps * (math.log(1.0 / beta) + 1.0))


# -- templates ------------------------------------------------------------------------


@dataclass
class BoxTemplate:
    """Axis-aligned box ``{y : |y_j - c_j| <= r_j}``."""

    center: np.ndarray
    radii: np.ndarray
    kind = "box"

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.radii = np.asarray(self.radii, dtype=float)
        if self.center.shape != self.radii.shape or self.center.ndim != 1:
            raise ValueError("center and radii must be vectors of equal length")
        if not np.all(self.radii > 0) or not np.all(np.isfinite(self.radii)):
            raise ValueError("box radii must be positive and finite")

    def gauge(self, y):
        return np.max(np.abs(np.asarray(y) - self.center) / self.radii, axis=-1)

    def half_widths(self):
        """Half extent of the unit template along each axis."""
        return self.radii.copy()

    def to_dict(self):
        return {"kind": self.kind, "center": self.center.tolist(), "radii": self.radii.tolist()}


@dataclass
class EllipsoidTemplate:
    """Ellipsoid ``{y : (y - c)^T M (y - c) <= 1}`` with M symmetric positive definite."""

    center: np.ndarray
    M: np.ndarray
    kind = "ellipsoid"

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.M = np.asarray(self.M, dtype=float)
        n = self.center.shape[0]
        if self.M.shape != (n, n) or not np.allclose(self.M, self.M.T):
            raise ValueError("M must be a symmetric matrix matching the center")
        if np.linalg.eigvalsh(self.M).min() <= 0:
            raise ValueError("M must be positive definite")

    def gauge(self, y):
        d = np.asarray(y) - self.center
        return np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", d, self.M, d), 0.0))

    def half_widths(self):
        return np.sqrt(np.diag(np.linalg.inv(self.M)))

    def to_dict(self):
        return {"kind": self.kind, "center": self.center.tolist(), "M": self.M.tolist()}


def template_from_dict(d):
    if d["kind"] == "box":
        return BoxTemplate(d["center"], d["radii"])
    if d["kind"] == "ellipsoid":
        return EllipsoidTemplate(d["center"], d["M"])
    raise ValueError(f"unknown template kind {d['kind']!r}")


def gauge(template, y):
    """Minkowski gauge of ``y`` with respect to ``template`` (scaled about its center)."""
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("gauge needs finite outputs")
    return template.gauge(y)


def default_template(sequences):
    """Box centered at the mean measured output with radii from the output ranges."""
    y = np.concatenate([s.y for s in sequences])
    lo, hi = y.min(axis=0), y.max(axis=0)
    radii = np.where(hi > lo, (hi - lo) / 2.0, 1.0)
    return BoxTemplate(y.mean(axis=0), radii)


@dataclass
class SafeBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != self.hi.shape or np.any(self.lo > self.hi):
            raise ValueError("safe box needs lo <= hi componentwise")

    def to_dict(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}


# -- scenario program ------------------------------------------------------------------


def default_x0_box(model):
    """(lo, hi) box for initial states: (-0.5, 0.5) for gated models, the state box otherwise."""
    lo, hi = model.state_box()
    if model.arch in ("lstm", "gru", "composite", "blackbox"):
        return np.full_like(lo, -0.5), np.full_like(hi, 0.5)
    return lo, hi


@dataclass
class ScenarioConfig:
    eps: float = 0.05
    beta: float = 1e-6
    K: int = 100
    x0_lo: np.ndarray | None = None
    x0_hi: np.ndarray | None = None
    input_class: str = "multilevel"
    template: object = None
    safe_set: SafeBox | None = None
    n_samples: int | None = None  # more than the bound is allowed, never fewer

    def __post_init__(self):
        required_samples(self.eps, self.beta)
        if int(self.K) != self.K or self.K < 1:
            raise ValueError("horizon K must be a positive integer")
        if self.n_samples is not None and self.n_samples < required_samples(self.eps, self.beta):
            raise ValueError("n_samples is below the scenario bound")
        if isinstance(self.template, dict):
            self.template = template_from_dict(self.template)
        if isinstance(self.safe_set, dict):
            self.safe_set = SafeBox(**self.safe_set)

    @property
    def S(self):
        return self.n_samples or required_samples(self.eps, self.beta)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("x0_lo", "x0_hi"):
            if d.get(k) is not None:
                d[k] = np.asarray(d[k], dtype=float)
        return cls(**d)


@dataclass
class ScenarioResult:
    S: int
    rho: float
    sample_max: np.ndarray
    argmax: tuple
    eps: float
    beta: float
    K: int
    template: object
    certificate: str
    advisory: bool
    seed: int
    measures: dict = field(default_factory=dict)
    safe: bool | None = None
    margin: float | None = None

    def to_dict(self):
        return {
            "S": self.S, "rho": self.rho, "eps": self.eps, "beta": self.beta, "K": self.K,
            "argmax_sample": int(self.argmax[0]), "argmax_step": int(self.argmax[1]),
            "template": self.template.to_dict(), "certificate": self.certificate,
            "advisory": self.advisory, "seed": self.seed, "measures": self.measures,
            "safe": self.safe, "margin": self.margin,
        }

    def dumps(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def certificate_status(model):
    """'both', 'ISS' or 'none' (models without weight conditions report 'none')."""
    try:
        return certificates.certify(model).property
    except ValueError:
        return "none"


def scenario_reachable(model, cfg, seed=0, template=None, chunk=256):
    """Estimate ``rho*``: the smallest template scaling covering all sampled outputs.

    Outputs at every step k = 0..K are included.  The result is flagged
    ``advisory`` when the model carries no ISS certificate.
    """
    template = template or cfg.template
    if template is None:
        raise ValueError("a template set is required")
    status = certificate_status(model)
    lo, hi = default_x0_box(model)
    lo = lo if cfg.x0_lo is None else np.broadcast_to(cfg.x0_lo, lo.shape)
    hi = hi if cfg.x0_hi is None else np.broadcast_to(cfg.x0_hi, hi.shape)
    rng = substream(seed, "scenario")
    S, K, n_u = cfg.S, cfg.K, model.dims.n_u
    # unit draws, then scaled: nested boxes see coupled samples
    unit_x = rng.uniform(-1.0, 1.0, size=(S, lo.shape[0]))
    inputs = certificates.draw_inputs(rng, (S, K + 1, n_u), cfg.input_class)
    x0 = (lo + hi) / 2 + (hi - lo) / 2 * unit_x
    g = np.empty((S, K + 1))
    for start in range(0, S, chunk):
        sl = slice(start, start + chunk)
        try:
            y, _ = model.forward(x0[sl], inputs[sl])
        except NonFiniteError as exc:
            raise NonFiniteError(exc.step, f"model output (certificate status: {status})") from exc
        g[sl] = gauge(template, y)
    flat = int(np.argmax(g))
    result = ScenarioResult(
        S=S, rho=float(g.flat[flat]), sample_max=g.max(axis=1), argmax=divmod(flat, K + 1),
        eps=cfg.eps, beta=cfg.beta, K=K, template=template, certificate=status,
        advisory=status == "none", seed=seed,
        measures={"x0": "uniform on box", "inputs": f"{cfg.input_class} on [-1, 1]"},
    )
    if cfg.safe_set is not None:
        result.safe, result.margin = safety_verdict(result, cfg.safe_set)
    return result


def safety_verdict(result, safe_set):
    """Whether ``rho* Y~`` lies inside the safe box, and the smallest face slack.

    Containment is closed: touching a face gives margin 0 and verdict True.
    """
    t = result.template
    c, w = t.center, result.rho * t.half_widths()
    slack = np.minimum(c - w - safe_set.lo, safe_set.hi - c - w)
    margin = float(slack.min())
    return margin >= 0.0, margin
