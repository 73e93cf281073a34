"""Dynamical models for the twin experiments.

Two testbeds live here: the 40-variable cyclic Lorenz-96 system used for the
gridpoint experiments, and a stochastic single-column cloud model whose state
is four thermodynamic variables plus three cloud area fractions. The column
model is a structural stand-in with the right qualitative behavior
(intermittent cloudiness driven by an instability proxy, damped thermodynamic
anomalies); none of the downstream machinery depends on its details.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import accel
from ._util import config_hash, to_jsonable, write_csv

__all__ = [
    "IntegratorConfig",
    "lorenz96_tendency",
    "rk4_step",
    "integrate_l96",
    "temperature_profile",
    "CloudColumnState",
    "CloudModelConfig",
    "cloud_column_step",
    "simulate_cloud_column",
    "save_trajectory",
    "load_trajectory",
]

L96_DIM = 40
L96_FORCING = 8.0

# index layout of the column state vector
CLOUD_FIELDS = ("theta1", "theta2", "theta_eb", "q", "f_c", "f_d", "f_s")
THERMO_SLICE = slice(0, 4)
FRACTION_SLICE = slice(4, 7)


@dataclass(frozen=True)
class IntegratorConfig:
    """Time-stepping layout: internal step, internal steps per observation."""

    dt: float = 0.05
    steps_per_obs: int = 2
    seed: int | None = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.steps_per_obs < 1:
            raise ValueError(f"steps_per_obs must be >= 1, got {self.steps_per_obs}")


def lorenz96_tendency(x: np.ndarray, forcing: float = L96_FORCING) -> np.ndarray:
    """Lorenz-96 tendency with cyclic indexing.

    Parameters
    ----------
    x : ndarray, shape (..., n)
        State or batch of states. n >= 4 is required for the cyclic stencil
        to make sense.
    forcing : float
        Constant forcing term.

    Returns
    -------
    ndarray with the same shape as ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 4:
        raise ValueError(f"state dimension must be >= 4, got {x.shape[-1]}")
    return accel.l96_tendency(x, float(forcing))


def rk4_step(state: np.ndarray, tendency, dt: float) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step for a generic tendency."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    hdt = 0.5 * dt
    k1 = tendency(state)
    k2 = tendency(state + hdt * k1)
    k3 = tendency(state + hdt * k2)
    k4 = tendency(state + dt * k3)
    return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_l96(x0: np.ndarray, cfg: IntegratorConfig, n_obs_steps: int,
                  forcing: float = L96_FORCING) -> np.ndarray:
    """Integrate Lorenz-96 and record the state at every observation time.

    Returns an array of shape (n_obs_steps + 1, n); row 0 is ``x0`` and row t
    is the state after t * steps_per_obs RK4 substeps of length cfg.dt.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 1:
        raise ValueError("integrate_l96 expects a single state vector")
    return accel.l96_trajectory(x0, cfg.dt, int(n_obs_steps), cfg.steps_per_obs, float(forcing))


def advance_members(members: np.ndarray, cfg: IntegratorConfig,
                    forcing: float = L96_FORCING) -> np.ndarray:
    """Advance an ensemble (K, n) by one observation interval."""
    return accel.l96_advance_members(members, cfg.dt, cfg.steps_per_obs, float(forcing))


# ---------------------------------------------------------------------------
# Vertical temperature structure shared with the radiative transfer model.


def temperature_profile(theta1, theta2, z, z_t: float = 16.0):
    """First two baroclinic temperature modes at height z (km).

    T(z) = theta1 * sin(pi z / z_t) + 2 * theta2 * sin(2 pi z / z_t).
    Heights outside [0, z_t] are an error; above the tropopause the radiative
    transfer code treats the anomaly as zero and never calls this.
    """
    z = np.asarray(z, dtype=np.float64)
    if np.any(z < 0) or np.any(z > z_t):
        raise ValueError(f"height out of range [0, {z_t}]")
    theta1 = np.asarray(theta1, dtype=np.float64)
    theta2 = np.asarray(theta2, dtype=np.float64)
    return theta1 * np.sin(np.pi * z / z_t) + 2.0 * theta2 * np.sin(2.0 * np.pi * z / z_t)


# ---------------------------------------------------------------------------
# Stochastic single-column cloud model.


@dataclass(frozen=True)
class CloudColumnState:
    """Typed view of one column state; arrays use the CLOUD_FIELDS layout."""

    theta1: float
    theta2: float
    theta_eb: float
    q: float
    f_c: float
    f_d: float
    f_s: float

    def to_array(self) -> np.ndarray:
        return np.array([self.theta1, self.theta2, self.theta_eb, self.q,
                         self.f_c, self.f_d, self.f_s])

    @classmethod
    def from_array(cls, arr) -> "CloudColumnState":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (7,):
            raise ValueError(f"expected shape (7,), got {arr.shape}")
        return cls(*map(float, arr))


@dataclass(frozen=True)
class CloudModelConfig:
    """Surrogate column dynamics parameters.

    Thermodynamic anomalies relax linearly toward ``means`` at rates ``damping``
    with additive noise ``noise`` (per sqrt time unit); deep cloud cover feeds
    back on the first temperature mode through ``heating``. Cloud fractions are
    site counts on a lattice of ``n_sites`` columns; per internal substep each
    clear site becomes congestus with probability rate*dt*instability, and
    congestus sites either deepen or decay, deep sites either detrain into
    stratiform or decay, stratiform sites decay. The instability proxy is
    exp(instab_eb * theta_eb + instab_q * q), capped at instab_cap.
    """

    dt: float = 0.0035
    n_substeps: int = 5
    means: tuple = (0.0, 0.0, 0.0, 0.0)
    damping: tuple = (1.0, 1.0, 0.5, 0.5)
    noise: tuple = (1.0, 0.5, 1.0, 0.35)
    heating: float = 2.0
    n_sites: int = 40
    rate_birth_congestus: float = 12.0
    rate_congestus_to_deep: float = 10.0
    rate_congestus_decay: float = 8.0
    rate_deep_to_stratiform: float = 8.0
    rate_deep_decay: float = 4.0
    rate_stratiform_decay: float = 6.0
    instab_eb: float = 0.7
    instab_q: float = 1.5
    instab_cap: float = 4.0

    def __post_init__(self):
        if self.dt <= 0 or self.n_substeps < 1 or self.n_sites < 1:
            raise ValueError("dt, n_substeps and n_sites must be positive")
        dt_sub = self.dt / self.n_substeps
        worst = max(
            self.rate_birth_congestus * self.instab_cap,
            self.rate_congestus_to_deep * self.instab_cap + self.rate_congestus_decay,
            self.rate_deep_to_stratiform + self.rate_deep_decay,
            self.rate_stratiform_decay,
        ) * dt_sub
        if min(self.rate_birth_congestus, self.rate_congestus_to_deep,
               self.rate_congestus_decay, self.rate_deep_to_stratiform,
               self.rate_deep_decay, self.rate_stratiform_decay) < 0:
            raise ValueError("transition rates must be nonnegative")
        if worst > 1.0:
            raise ValueError(
                f"transition probabilities exceed 1 per substep (worst case {worst:.3f}); "
                "reduce rates, instab_cap, or dt")

    @property
    def dt_sub(self) -> float:
        return self.dt / self.n_substeps


def _instability(theta_eb, q, cfg: CloudModelConfig):
    return np.minimum(np.exp(cfg.instab_eb * theta_eb + cfg.instab_q * q), cfg.instab_cap)


def cloud_column_step(state: np.ndarray, cfg: CloudModelConfig,
                      rng: np.random.Generator) -> np.ndarray:
    """Advance column state(s) by one observation interval (cfg.n_substeps substeps).

    ``state`` is (7,) or (B, 7). Fractions are snapped to the site lattice on
    entry, evolved as site counts, and returned as fractions; the three counts
    can never exceed the lattice size, so f_c + f_d + f_s <= 1 holds exactly.
    """
    arr = np.atleast_2d(np.asarray(state, dtype=np.float64)).copy()
    squeeze = np.asarray(state).ndim == 1
    if arr.shape[1] != 7:
        raise ValueError(f"expected 7 state variables, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite state")

    ns = cfg.n_sites
    frac = np.clip(arr[:, FRACTION_SLICE], 0.0, 1.0)
    # renormalize any analysis overshoot before snapping to counts
    tot = frac.sum(axis=1)
    over = tot > 1.0
    if np.any(over):
        frac[over] /= tot[over, None]
    counts = np.rint(frac * ns).astype(np.int64)
    excess = counts.sum(axis=1) - ns
    counts[excess > 0, 0] -= excess[excess > 0]  # rounding can overshoot by one site
    np.clip(counts, 0, ns, out=counts)

    mean = np.asarray(cfg.means)
    gam = np.asarray(cfg.damping)
    sig = np.asarray(cfg.noise)
    dt_sub = cfg.dt_sub
    sq = np.sqrt(dt_sub)

    for _ in range(cfg.n_substeps):
        lam = _instability(arr[:, 2], arr[:, 3], cfg)
        n_c, n_d, n_s = counts[:, 0].copy(), counts[:, 1].copy(), counts[:, 2].copy()
        n_clear = ns - n_c - n_d - n_s

        born = rng.binomial(n_clear, np.minimum(cfg.rate_birth_congestus * lam * dt_sub, 1.0))
        p_cd = cfg.rate_congestus_to_deep * lam * dt_sub
        p_c0 = cfg.rate_congestus_decay * dt_sub
        cong_moves = _multinomial_rows(rng, n_c, p_cd, p_c0)
        deep_moves = _multinomial_rows(rng, n_d, np.full_like(lam, cfg.rate_deep_to_stratiform * dt_sub),
                                       cfg.rate_deep_decay * dt_sub)
        strat_decay = rng.binomial(n_s, min(cfg.rate_stratiform_decay * dt_sub, 1.0))

        counts[:, 0] = n_c + born - cong_moves[:, 0] - cong_moves[:, 1]
        counts[:, 1] = n_d + cong_moves[:, 0] - deep_moves[:, 0] - deep_moves[:, 1]
        counts[:, 2] = n_s + deep_moves[:, 0] - strat_decay

        drift = -gam * (arr[:, THERMO_SLICE] - mean)
        drift[:, 0] = drift[:, 0] + cfg.heating * counts[:, 1] / ns
        arr[:, THERMO_SLICE] += dt_sub * drift + sq * sig * rng.standard_normal((arr.shape[0], 4))

    arr[:, FRACTION_SLICE] = counts / ns
    return arr[0] if squeeze else arr


def _multinomial_rows(rng, n, p1, p2):
    """Draw (move1, move2) counts out of n per row with probabilities (p1, p2)."""
    p1 = np.broadcast_to(np.asarray(p1, dtype=np.float64), n.shape)
    p2 = np.broadcast_to(np.asarray(p2, dtype=np.float64), n.shape)
    stay = 1.0 - p1 - p2
    if np.any(stay < 0):
        raise ValueError("competing transition probabilities exceed 1")
    pv = np.stack([p1, p2, stay], axis=-1)
    draws = rng.multinomial(n, pv)
    return draws[:, :2]


def simulate_cloud_column(x0, n_steps: int, cfg: CloudModelConfig,
                          rng: np.random.Generator) -> np.ndarray:
    """Trajectory of shape (n_steps + 1, 7) sampled at the observation interval."""
    x0 = np.asarray(x0, dtype=np.float64)
    out = np.empty((n_steps + 1, 7))
    out[0] = x0
    x = x0
    for t in range(1, n_steps + 1):
        x = cloud_column_step(x, cfg, rng)
        out[t] = x
    return out


# ---------------------------------------------------------------------------
# Trajectory persistence: CSV for humans, npz for exact round-trips. Both
# carry the RNG seed and the config hash.


def save_trajectory(path_prefix, traj: np.ndarray, dt_obs: float, seed, config) -> None:
    traj = np.asarray(traj, dtype=np.float64)
    meta = {
        "format_version": 1,
        "dt_obs": dt_obs,
        "seed": seed,
        "config_hash": config_hash(config),
        "config": to_jsonable(config),
        "n_steps": traj.shape[0] - 1,
        "n_vars": traj.shape[1],
    }
    np.savez_compressed(str(path_prefix) + ".npz", traj=traj, meta=json.dumps(meta, sort_keys=True))
    header = ["t"] + [f"x{j}" for j in range(traj.shape[1])]
    rows = ([i * dt_obs] + list(row) for i, row in enumerate(traj))
    write_csv(str(path_prefix) + ".csv", header, rows)


def load_trajectory(path_prefix) -> tuple[np.ndarray, dict]:
    with np.load(str(path_prefix) + ".npz") as data:
        traj = data["traj"]
        meta = json.loads(str(data["meta"]))
    return traj, meta
