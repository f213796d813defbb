"""Two reactors in series with a separator and recycle.

State (12): for vessels 1-3 ``[H, x_A, x_B, T]``; input (6):
``[Q1, Q2, Q3, F_f1, F_f2, F_R]``.  Reactors convert A -> B -> C with
Arrhenius rates; the separator returns a relative-volatility distillate, part
of which is recycled (F_R) and part withdrawn as product (constant F_p).
Outflows are linear in level.  x_C is implied by x_A + x_B + x_C = 1.

All functions broadcast over leading batch dimensions.
"""
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ._utils import substream
from .data import Dataset, DatasetSplit, Normalizer, Sequence
from .exceptions import PlantEventError

log = logging.getLogger(__name__)

STATE_NAMES = ("H1", "xA1", "xB1", "T1", "H2", "xA2", "xB2", "T2", "H3", "xA3", "xB3", "T3")
INPUT_NAMES = ("Q1", "Q2", "Q3", "Ff1", "Ff2", "FR")


@dataclass
class PlantConfig:
    """Physical coefficients.  Units: kg, m, s, K, kJ."""

    rho_area: tuple = (50.0, 50.0, 50.0)  # liquid density x cross-section, kg/m
    valve: tuple = (5.0, 7.5, 4.0)  # outflow F_i = valve_i * H_i, kg/(s m)
    F_p: float = 2.0  # product withdrawal, kg/s
    x_A0: float = 1.0  # feed is pure A
    T_0: float = 300.0
    cp: float = 4.0  # kJ/(kg K)
    k1_ref: float = 0.12  # A -> B rate at T_ref, 1/s
    k2_ref: float = 0.009  # B -> C rate at T_ref, 1/s
    E1: float = 5000.0  # activation temperatures E/R, K
    E2: float = 6000.0
    T_ref: float = 400.0
    heat1: float = 60.0  # heat released per kg converted, kJ/kg
    heat2: float = 40.0
    volatility: tuple = (3.5, 1.0, 0.5)  # relative volatilities of A, B, C
    latent: float = 40.0  # heat removed with the distillate, kJ/kg
    u_nominal: tuple = (2500.0, 1000.0, 1200.0, 5.0, 5.0, 5.0)
    u_low: tuple = (1500.0, 500.0, 800.0, 3.5, 3.5, 3.5)
    u_high: tuple = (3500.0, 1500.0, 1600.0, 6.5, 6.5, 6.5)
    T_band: tuple = (250.0, 700.0)
    H_min: float = 1e-3
    dt: float = 0.01  # integration step, s

    def __post_init__(self):
        positive = ("F_p", "cp", "k1_ref", "k2_ref", "E1", "E2", "T_ref", "dt", "T_0")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if min(self.rho_area) <= 0 or min(self.valve) <= 0:
            raise ValueError("vessel areas and valve coefficients must be positive")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def rhs(cfg, x, u):
    """Time derivative of the state."""
    H1, xA1, xB1, T1, H2, xA2, xB2, T2, H3, xA3, xB3, T3 = np.moveaxis(x, -1, 0)
    Q1, Q2, Q3, Ff1, Ff2, FR = np.moveaxis(u, -1, 0)
    a1, a2, a3 = cfg.rho_area
    kv1, kv2, kv3 = cfg.valve
    aA, aB, aC = cfg.volatility
    cp = cfg.cp

    F1, F2, F3 = kv1 * H1, kv2 * H2, kv3 * H3
    M1, M2, M3 = a1 * H1, a2 * H2, a3 * H3

    xC3 = 1.0 - xA3 - xB3
    mix = aA * xA3 + aB * xB3 + aC * xC3
    xAR, xBR = aA * xA3 / mix, aB * xB3 / mix

    def rates(T):
        return (cfg.k1_ref * np.exp(-cfg.E1 * (1.0 / T - 1.0 / cfg.T_ref)),
                cfg.k2_ref * np.exp(-cfg.E2 * (1.0 / T - 1.0 / cfg.T_ref)))

    r11, r21 = rates(T1)
    r12, r22 = rates(T2)

    dH1 = (Ff1 + FR - F1) / a1
    dxA1 = (Ff1 * (cfg.x_A0 - xA1) + FR * (xAR - xA1)) / M1 - r11 * xA1
    dxB1 = (-Ff1 * xB1 + FR * (xBR - xB1)) / M1 + r11 * xA1 - r21 * xB1
    dT1 = ((Ff1 * (cfg.T_0 - T1) + FR * (T3 - T1)) / M1
           + (cfg.heat1 * r11 * xA1 + cfg.heat2 * r21 * xB1) / cp + Q1 / (M1 * cp))

    dH2 = (F1 + Ff2 - F2) / a2
    dxA2 = (F1 * (xA1 - xA2) + Ff2 * (cfg.x_A0 - xA2)) / M2 - r12 * xA2
    dxB2 = (F1 * (xB1 - xB2) - Ff2 * xB2) / M2 + r12 * xA2 - r22 * xB2
    dT2 = ((F1 * (T1 - T2) + Ff2 * (cfg.T_0 - T2)) / M2
           + (cfg.heat1 * r12 * xA2 + cfg.heat2 * r22 * xB2) / cp + Q2 / (M2 * cp))

    D = FR + cfg.F_p
    dH3 = (F2 - D - F3) / a3
    dxA3 = (F2 * (xA2 - xA3) - D * (xAR - xA3)) / M3
    dxB3 = (F2 * (xB2 - xB3) - D * (xBR - xB3)) / M3
    dT3 = F2 * (T2 - T3) / M3 + (Q3 - D * cfg.latent) / (M3 * cp)

    return np.stack([dH1, dxA1, dxB1, dT1, dH2, dxA2, dxB2, dT2, dH3, dxA3, dxB3, dT3], axis=-1)


def _rk4(cfg, x, u, dt):
    k1 = rhs(cfg, x, u)
    k2 = rhs(cfg, x + 0.5 * dt * k1, u)
    k3 = rhs(cfg, x + 0.5 * dt * k2, u)
    k4 = rhs(cfg, x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def violations(cfg, x):
    """Boolean mask (over leading dims) of states outside the admissible region."""
    v = np.asarray(x).reshape(x.shape[:-1] + (3, 4))
    H, xA, xB, T = v[..., 0], v[..., 1], v[..., 2], v[..., 3]
    bad = (
        ~np.isfinite(v).all(axis=-1)
        | (H <= cfg.H_min)
        | (xA <= 0) | (xA >= 1) | (xB <= 0) | (xB >= 1) | (xA + xB > 1)
        | (T < cfg.T_band[0]) | (T > cfg.T_band[1])
    )
    return bad.any(axis=-1)


def check_state(cfg, x):
    """Raise :class:`PlantEventError` naming the first offending vessel/variable."""
    v = np.asarray(x, dtype=float).reshape(-1, 3, 4)
    names = ("H", "x_A", "x_B", "T")
    for row in v:
        for i in range(3):
            H, xA, xB, T = row[i]
            tests = (
                (0, H > cfg.H_min, H),
                (1, 0 < xA < 1, xA),
                (2, 0 < xB < 1 and xA + xB <= 1, xB),
                (3, cfg.T_band[0] <= T <= cfg.T_band[1], T),
            )
            for j, ok, val in tests:
                if not ok:
                    raise PlantEventError(i + 1, names[j], float(val))


def plant_step(cfg, x, u, dt=None):
    """One RK4 step; raises :class:`PlantEventError` if the result is inadmissible."""
    x = np.asarray(x, dtype=float)
    check_state(cfg, x)
    x_next = _rk4(cfg, x, np.asarray(u, dtype=float), cfg.dt if dt is None else dt)
    check_state(cfg, x_next)
    return x_next


def mass_fractions(x):
    """(x_A, x_B, x_C) per vessel, shape (..., 3, 3); x_C is derived."""
    v = np.asarray(x).reshape(np.shape(x)[:-1] + (3, 4))
    xA, xB = v[..., 1], v[..., 2]
    return np.stack([xA, xB, 1.0 - xA - xB], axis=-1)


def steady_state(cfg, u=None, x0=None, step=1.0, tol=1e-13, max_iter=200000):
    """Equilibrium under constant input by damped fixed-point iteration x <- x + step*f(x)."""
    u = np.asarray(cfg.u_nominal if u is None else u, dtype=float)
    x = np.array([2.0, 0.5, 0.3, 400.0] * 3) if x0 is None else np.array(x0, dtype=float)
    for _ in range(max_iter):
        f = rhs(cfg, x, u)
        x = x + step * f
        if np.max(np.abs(f) / np.maximum(1.0, np.abs(x))) < tol:
            return x
    raise RuntimeError("steady-state iteration did not converge")


# -- excitation ----------------------------------------------------------------------


@dataclass
class ExcitationSpec:
    """Multilevel pseudo-random signal, one entry per input channel."""

    levels: tuple = (5, 5, 5, 5, 5, 5)
    low: tuple = PlantConfig.u_low
    high: tuple = PlantConfig.u_high
    min_hold: tuple = (20, 20, 20, 20, 20, 20)
    max_hold: tuple = (120, 120, 120, 120, 120, 120)
    seed: int = 0

    def __post_init__(self):
        n = len(self.levels)
        for name in ("low", "high", "min_hold", "max_hold"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} must have one entry per channel")
        if min(self.levels) < 2:
            raise ValueError("each channel needs at least two levels")
        if min(self.min_hold) < 1 or any(a > b for a, b in zip(self.min_hold, self.max_hold)):
            raise ValueError("hold durations must satisfy 1 <= min_hold <= max_hold")

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def generate_excitation(spec, T, rng=None):
    """Piecewise-constant (T, n) signal; levels evenly spaced in [low, high]."""
    if T < max(spec.max_hold):
        raise ValueError(f"T={T} shorter than the longest hold {max(spec.max_hold)}")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    n = len(spec.levels)
    out = np.empty((T, n))
    for j in range(n):
        grid = np.linspace(spec.low[j], spec.high[j], spec.levels[j])
        k = 0
        while k < T:
            hold = int(rng.integers(spec.min_hold[j], spec.max_hold[j] + 1))
            out[k: k + hold, j] = grid[rng.integers(spec.levels[j])]
            k += hold
    return out


# -- data collection -----------------------------------------------------------------


def simulate_plant(cfg, x0, u_samples, dt_sample):
    """Sampled trajectories; ``u_samples`` is (B, T, 6), held over each sample period.

    Returns states (B, T, 12) at the sample instants and a per-row failure mask.
    """
    sub = int(round(dt_sample / cfg.dt))
    if sub < 1 or abs(sub * cfg.dt - dt_sample) > 1e-12 * dt_sample:
        raise ValueError("integration step must divide the sampling time")
    B, T, _ = u_samples.shape
    x = np.broadcast_to(np.asarray(x0, dtype=float), (B, 12)).copy()
    out = np.empty((B, T, 12))
    failed = np.zeros(B, dtype=bool)
    with np.errstate(all="ignore"):
        for k in range(T):
            out[:, k] = x
            for _ in range(sub):
                x = _rk4(cfg, x, u_samples[:, k], cfg.dt)
            failed |= violations(cfg, x)
            x[failed] = out[failed, k]  # freeze failed rows; they are discarded
    return out, failed


def _sequence_rng(seed, index, attempt):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0, int(index), int(attempt))))


def collect_dataset(cfg, spec, n_sequences, T_s, dt_sample=0.1, seed=None, split=None):
    """Normalized sequences from the plant started at its nominal steady state.

    Every sequence gets fresh excitation from its own seed substream; a
    sequence whose trajectory leaves the admissible region is discarded and
    regenerated with the next attempt's seed.
    """
    seed = spec.seed if seed is None else seed
    x_ss = steady_state(cfg)
    attempt = np.zeros(n_sequences, dtype=int)
    u_all = np.empty((n_sequences, T_s, len(spec.levels)))
    y_all = np.empty((n_sequences, T_s, 12))
    todo = np.arange(n_sequences)
    while todo.size:
        u_batch = np.stack([generate_excitation(spec, T_s, _sequence_rng(seed, j, attempt[j])) for j in todo])
        y_batch, failed = simulate_plant(cfg, x_ss, u_batch, dt_sample)
        u_all[todo], y_all[todo] = u_batch, y_batch
        for j in todo[failed]:
            log.warning("sequence %d attempt %d left the admissible region; regenerating", j, attempt[j])
        attempt[todo[failed]] += 1
        todo = todo[failed]
        if attempt.max() > 50:
            raise RuntimeError("plant keeps leaving the admissible region; check the excitation bounds")
    u_norm = Normalizer().fit(u_all.reshape(-1, u_all.shape[-1]))
    y_norm = Normalizer().fit(y_all.reshape(-1, 12))
    seqs = [Sequence(u_norm.apply(u_all[j]), y_norm.apply(y_all[j]), id=j) for j in range(n_sequences)]
    return Dataset(seqs, u_norm, y_norm, split, dt_sample)


def benchmark_dataset(n_train=100, n_val=36, n_test=1, T_s=1000, T_w=100, seed=0, cfg=None, spec=None):
    """Train/validation/test collection with the 100/36/1 x 1000-step layout by default."""
    cfg = PlantConfig() if cfg is None else cfg
    spec = ExcitationSpec(low=cfg.u_low, high=cfg.u_high, seed=seed) if spec is None else spec
    n = n_train + n_val + n_test
    ds = collect_dataset(cfg, spec, n, T_s, seed=seed)
    ds.split = DatasetSplit.random(range(n), n_train, n_val, n_test, T_s, T_w, seed=seed)
    return ds
