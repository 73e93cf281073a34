"""Observation operators, synthetic-bias generation, and training-pair assembly.

The filters are given a trusted but wrong observation model (identity on the
observed gridpoints for Lorenz-96, clear-sky radiances for the column model).
The true observations come from a richer operator: randomly obstructed and
rescaled gridpoint readings, or radiances through two cloud decks. The
difference b = y - h_trusted(x) along a training trajectory is the raw
material for the nonparametric error model.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._util import config_hash, read_json, to_jsonable, write_csv, write_json
from . import rtm as rtm_mod
from .dynamics import (CloudModelConfig, IntegratorConfig, integrate_l96,
                       simulate_cloud_column)

__all__ = [
    "ObstructionConfig",
    "NoiseSpec",
    "TrainingPairs",
    "cloudy_observe_l96",
    "observe_rtm",
    "implied_bias",
    "generate_training_l96",
    "generate_training_cloud",
    "generate_training_set",
    "save_training_set",
    "load_training_set",
]


@dataclass(frozen=True)
class ObstructionConfig:
    """Random gridpoint obstruction for the Lorenz-96 testbed.

    Per step, a number of observed sites is chosen (uniform on {0..count_max},
    or exactly count_max when count_mode="fixed"). Each chosen site draws a
    uniform coin xi; values xi <= clear_prob scale the reading by a Gaussian
    factor and shift it, otherwise the site reports cleanly. With
    shared_xi=True a single coin per step covers all chosen sites.
    """

    count_max: int = 7
    clear_prob: float = 0.8
    beta_mean: float = 0.5
    beta_var: float = 1.0 / 50.0
    shift: float = -8.0
    stride: int = 2
    count_mode: str = "uniform"
    shared_xi: bool = False

    def __post_init__(self):
        if not (0.0 <= self.clear_prob <= 1.0):
            raise ValueError("clear_prob must be in [0, 1]")
        if self.count_max < 0 or self.beta_var < 0 or self.stride < 1:
            raise ValueError("count_max, beta_var must be >= 0 and stride >= 1")
        if self.count_mode not in ("uniform", "fixed"):
            raise ValueError(f"unknown count_mode {self.count_mode!r}")


@dataclass(frozen=True)
class NoiseSpec:
    """Measurement noise variance; scalar or one value per observed coordinate."""

    variance: float | tuple

    def std(self, m: int) -> np.ndarray:
        v = np.broadcast_to(np.asarray(self.variance, dtype=np.float64), (m,))
        if np.any(v < 0):
            raise ValueError("noise variance must be nonnegative")
        return np.sqrt(v)

    def var(self, m: int) -> np.ndarray:
        return self.std(m) ** 2


def cloudy_observe_l96(x: np.ndarray, cfg: ObstructionConfig, noise: NoiseSpec,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Observe every ``stride``-th gridpoint through random obstructions.

    Returns (y, mask). ``mask`` flags the sites whose reading was actually
    scaled and shifted this step; it exists for diagnostics and training-free
    verification only and is never shown to a filter.

    Draw order (fixed for reproducibility): site count, site subset, clear
    coins, scale factors, measurement noise.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a single state vector")
    sites = x[::cfg.stride].copy()
    m = sites.shape[0]
    if cfg.count_max > m:
        raise ValueError("count_max exceeds the number of observed sites")

    if cfg.count_mode == "uniform":
        c = int(rng.integers(0, cfg.count_max + 1))
    else:
        c = cfg.count_max
    chosen = rng.choice(m, size=c, replace=False)
    if cfg.shared_xi:
        xi = np.repeat(rng.uniform(), c)
    else:
        xi = rng.uniform(size=c)
    beta = rng.normal(cfg.beta_mean, np.sqrt(cfg.beta_var), size=c)

    obstructed = chosen[xi <= cfg.clear_prob]
    h = sites
    h[obstructed] = beta[xi <= cfg.clear_prob] * h[obstructed] + cfg.shift
    y = h + rng.normal(0.0, noise.std(m))
    mask = np.zeros(m, dtype=bool)
    mask[obstructed] = True
    return y, mask


def observe_rtm(x, fractions, cfg: rtm_mod.RtmConfig, noise: NoiseSpec,
                rng: np.random.Generator) -> np.ndarray:
    """Noisy two-deck radiances for column state(s)."""
    h = rtm_mod.brightness_cloudy(x, fractions, cfg)
    h = np.atleast_2d(h)
    y = h + rng.normal(0.0, noise.std(h.shape[1]), size=h.shape)
    return y[0] if np.asarray(x).ndim == 1 else y


def implied_bias(y: np.ndarray, x, h_trusted) -> np.ndarray:
    """Observation-model error sample b = y - h_trusted(x) (noise included)."""
    return np.asarray(y, dtype=np.float64) - np.asarray(h_trusted(x), dtype=np.float64)


# ---------------------------------------------------------------------------
# Training sets


@dataclass
class TrainingPairs:
    """Pooled (b, y) samples per observation coordinate group.

    ``b`` and ``y`` have shape (n_groups, n_samples). The Lorenz-96 testbed is
    spatially homogeneous, so all sites pool into one group; the column testbed
    keeps one group per radiance channel.
    """

    b: np.ndarray
    y: np.ndarray
    coordinate_ids: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.b = np.atleast_2d(np.asarray(self.b, dtype=np.float64))
        self.y = np.atleast_2d(np.asarray(self.y, dtype=np.float64))
        if self.b.shape != self.y.shape:
            raise ValueError("b and y must have matching shapes")
        if len(self.coordinate_ids) != self.b.shape[0]:
            raise ValueError("one coordinate id per group is required")

    @property
    def n_samples(self) -> int:
        return self.b.shape[1]


def generate_training_l96(n_pairs: int, integrator: IntegratorConfig,
                          obstruction: ObstructionConfig, noise: NoiseSpec,
                          seed, spinup_steps: int = 200,
                          forcing: float = 8.0) -> TrainingPairs:
    """Run a truth trajectory and pool obstructed-site pairs across gridpoints.

    ``n_pairs`` total samples are collected from ceil(n_pairs / n_sites)
    observation steps, every observed site contributing one (b, y) pair per
    step. The trusted operator is the identity on observed sites.
    """
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng_ic, rng_obs = [np.random.default_rng(s) for s in ss.spawn(2)]
    n_state = 40
    m = n_state // obstruction.stride
    n_steps = int(np.ceil(n_pairs / m))

    x0 = forcing + 0.5 * rng_ic.standard_normal(n_state)
    traj = integrate_l96(x0, integrator, spinup_steps + n_steps, forcing)[spinup_steps + 1:]
    bs = np.empty((n_steps, m))
    ys = np.empty((n_steps, m))
    for t in range(n_steps):
        y, _ = cloudy_observe_l96(traj[t], obstruction, noise, rng_obs)
        ys[t] = y
        bs[t] = y - traj[t][::obstruction.stride]
    b = bs.ravel()[:n_pairs]
    y = ys.ravel()[:n_pairs]
    meta = {
        "testbed": "l96",
        "seed": seed if isinstance(seed, (int, type(None))) else str(seed),
        "n_pairs": n_pairs,
        "n_steps": n_steps,
        "spinup_steps": spinup_steps,
        "config_hash": config_hash({"integrator": integrator, "obstruction": obstruction,
                                    "noise": noise}),
    }
    return TrainingPairs(b[None, :], y[None, :], (0,), meta)


def generate_training_cloud(n_steps: int, model_cfg: CloudModelConfig,
                            rtm_cfg: rtm_mod.RtmConfig, noise_frac: float,
                            seed, spinup_steps: int = 200
                            ) -> tuple[TrainingPairs, rtm_mod.RtmConfig, NoiseSpec, np.ndarray]:
    """Column-model training run; one (b, y) group per radiance channel.

    The humidity band of the radiative transfer config and the per-channel
    noise floor (noise_frac times the clear variance of each channel) are
    frozen from this trajectory and returned alongside the pairs, so that the
    downstream experiment observes through exactly the operator the model was
    trained on. Also returns the post-spinup trajectory for reuse.
    """
    if not (0 < noise_frac):
        raise ValueError("noise_frac must be positive")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng_truth, rng_obs = [np.random.default_rng(s) for s in ss.spawn(2)]

    x0 = np.zeros(7)
    traj = simulate_cloud_column(x0, spinup_steps + n_steps, model_cfg, rng_truth)[spinup_steps + 1:]
    lo, hi = float(traj[:, 3].min()), float(traj[:, 3].max())
    if hi <= lo:
        raise ValueError("degenerate humidity range in training trajectory")
    rtm_cfg = replace(rtm_cfg, humidity_lo=lo, humidity_hi=hi)

    h_true = rtm_mod.brightness_cloudy(traj, traj[:, 4:7], rtm_cfg)
    h_trusted = rtm_mod.brightness_clear(traj, rtm_cfg)
    ro = noise_frac * h_true.var(axis=0)
    if np.any(ro <= 0):
        raise ValueError("zero radiance variance; training trajectory too short")
    noise = NoiseSpec(tuple(ro))
    y = h_true + rng_obs.normal(0.0, np.sqrt(ro), size=h_true.shape)
    b = y - h_trusted

    meta = {
        "testbed": "cloud",
        "seed": seed if isinstance(seed, (int, type(None))) else str(seed),
        "n_pairs": n_steps,
        "spinup_steps": spinup_steps,
        "humidity_lo": lo,
        "humidity_hi": hi,
        "noise_frac": noise_frac,
        "ro": [float(v) for v in ro],
        "config_hash": config_hash({"model": model_cfg, "rtm": rtm_cfg, "noise_frac": noise_frac}),
    }
    pairs = TrainingPairs(b.T, y.T, tuple(range(len(rtm_cfg.channels))), meta)
    return pairs, rtm_cfg, noise, traj


def generate_training_set(testbed: str, n_pairs: int, seed, **kwargs) -> TrainingPairs:
    """Dispatch on testbed name; see the per-testbed generators for kwargs."""
    if testbed == "l96":
        return generate_training_l96(n_pairs, seed=seed, **kwargs)
    if testbed == "cloud":
        return generate_training_cloud(n_pairs, seed=seed, **kwargs)[0]
    raise ValueError(f"unknown testbed {testbed!r}")


def save_training_set(path_prefix, pairs: TrainingPairs) -> None:
    rows = []
    for g, cid in enumerate(pairs.coordinate_ids):
        for l in range(pairs.n_samples):
            rows.append((cid, pairs.b[g, l], pairs.y[g, l]))
    write_csv(str(path_prefix) + ".csv", ["coordinate_id", "b", "y"], rows)
    write_json(str(path_prefix) + ".json", {
        "format_version": 1,
        "coordinate_ids": list(pairs.coordinate_ids),
        "n_samples": pairs.n_samples,
        "meta": to_jsonable(pairs.meta),
    })


def load_training_set(path_prefix) -> TrainingPairs:
    side = read_json(str(path_prefix) + ".json")
    data = np.loadtxt(str(path_prefix) + ".csv", delimiter=",", skiprows=1)
    cids = side["coordinate_ids"]
    n = side["n_samples"]
    b = np.empty((len(cids), n))
    y = np.empty((len(cids), n))
    for g, cid in enumerate(cids):
        sel = data[:, 0] == cid
        b[g] = data[sel, 1]
        y[g] = data[sel, 2]
    return TrainingPairs(b, y, tuple(cids), side.get("meta", {}))
