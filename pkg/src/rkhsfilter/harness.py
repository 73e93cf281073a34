"""Experiment orchestration: generation, training, filter runs, sweeps, reports.

A sweep point is a pure function of (config, master seed, grid indices): it
generates its own truth and observations, trains its own error model, runs the
configured filter variants, and returns metric rows. That purity is what makes
parallel sweeps byte-identical to serial ones. The filter-facing path receives
only observations, operators, and configuration; the truth array is touched
exclusively by generation and metric code.

Seed derivation (counter-based, order-independent): every point owns the
SeedSequence with entropy [master_seed, replicate_seed, r_index, dt_index],
spawned internally into generation / training / init / per-variant filter
streams. Re-running any subset of points reproduces them exactly.
"""

from __future__ import annotations

import dataclasses
import json
import time
import warnings

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla

from . import rtm as rtm_mod
from ._util import config_hash, env_stamp, to_jsonable, write_csv, write_json
from .dynamics import (CLOUD_FIELDS, L96_FORCING, CloudModelConfig,
                       IntegratorConfig, advance_members, cloud_column_step,
                       integrate_l96, simulate_cloud_column)
from .embedding import EmbeddingConfig, EmbeddingModel
from .embedding import train as train_embedding
from .enkf import AdaptiveQR, FilterConfig, FilterModels, filter_step
from .observation import (NoiseSpec, ObstructionConfig, cloudy_observe_l96,
                          generate_training_cloud, generate_training_l96)

__all__ = [
    "ExperimentConfig",
    "PointResult",
    "PRESETS",
    "preset",
    "load_config",
    "config_from_dict",
    "point_seed_sequence",
    "rmse",
    "generate_l96_point",
    "train_l96_model",
    "train_cloud_models",
    "run_filter_sequence",
    "run_l96",
    "run_cloud",
    "sweep",
    "report",
    "save_results",
    "load_results",
]

VARIANTS = {
    "l96": ("enkf_clear", "enkf_cloudy", "rkhs"),
    "cloud": ("enkf_perfect", "enkf_imperfect", "rkhs"),
}


def _steps_per_obs(dt: float, dt_model: float) -> int:
    ratio = dt / dt_model
    spo = int(round(ratio))
    if spo < 1 or abs(ratio - spo) > 1e-9:
        raise ValueError(f"observation interval {dt} is not a multiple of dt_model {dt_model}")
    return spo


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment family: a testbed, its sweep grids, and all knob settings.

    Grid semantics differ by testbed. For "l96", r_grid entries are the
    measurement noise variance and dt_grid entries are the observation
    interval in model time (must be integer multiples of dt_model). For
    "cloud", r_grid entries are the noise level as a fraction of each
    channel's radiance variance and dt_grid entries are integer model steps
    per observation. n_steps counts total assimilation cycles; the first
    ``spinup`` cycles are excluded from every metric.
    """

    testbed: str = "l96"
    variants: tuple = VARIANTS["l96"]
    r_grid: tuple = (2.0 ** -5,)
    dt_grid: tuple = (0.1,)
    seeds: tuple = (1, 2, 3)
    n_steps: int = 2200
    spinup: int = 200
    n_train: int = 10000
    n_modes: int = 250
    n_members: int = 80
    qr_mode: str = "adaptive"
    z_floor: float = 1e-10
    # the innovation-centered prior with the broad climatological variance
    # lets small innovations pass through uncorrected at clean coordinates
    # (the error posterior stays near zero there), which is what keeps the
    # primary filter coupled to the observations; the forecast-spread variance
    # is available for setups whose spread stays wide relative to the error
    # branch widths, but here it would swallow the innovation itself once the
    # filter converges
    prior_mode: str = "climatological"
    q_fixed: float = 1e-3
    r_inflation: float = 1.0      # filter R = r_inflation * true R (cloud runs inflate by 5)
    r_init: float = 0.1           # adaptive-mode initial R guess, deliberately off
    q_init: float = 1e-3
    forget: float = 0.99
    q_gain: float = 0.02
    # adaptive-Q search band. Twin truths carry no process noise, and with a
    # small ensemble the innovation sequence keeps some memory no matter how
    # much noise is injected, so an unbounded whiteness controller ratchets Q
    # upward until tracking breaks; the L96 presets pin the band to values
    # validated for spread health (too little collapses the ensemble during
    # spinup, too much swamps the signal).
    q_bounds: tuple = (1e-8, 1e3)
    regen: str = "resample"
    k_nn: int = 32
    n_sparse: int = 64
    init_spread: float = 0.25     # l96: absolute; cloud: multiple of climatological std
    train_spinup: int = 200
    truth_spinup: int = 200       # l96: observation steps; cloud: model steps
    dt_model: float = 0.05
    count_max: int = 7
    count_mode: str = "uniform"
    divergence_factor: float = 5.0

    def __post_init__(self):
        if self.testbed not in VARIANTS:
            raise ValueError(f"unknown testbed {self.testbed!r}")
        allowed = VARIANTS[self.testbed]
        if not self.variants:
            raise ValueError("variants must be nonempty")
        if len(set(self.variants)) != len(self.variants):
            raise ValueError("duplicate variants")
        for v in self.variants:
            if v not in allowed:
                raise ValueError(f"variant {v!r} not valid for testbed {self.testbed!r}")
        if not self.r_grid or not self.dt_grid or not self.seeds:
            raise ValueError("r_grid, dt_grid and seeds must be nonempty")
        if any(r <= 0 for r in self.r_grid):
            raise ValueError("noise grid entries must be positive")
        if not (0 <= self.spinup < self.n_steps):
            raise ValueError("need 0 <= spinup < n_steps")
        if self.testbed == "l96":
            for dt in self.dt_grid:
                _steps_per_obs(dt, self.dt_model)
        else:
            if any(int(d) != d or d < 1 for d in self.dt_grid):
                raise ValueError("cloud dt_grid entries are integer model steps >= 1")
        if self.n_train <= self.n_modes:
            raise ValueError("n_train must exceed n_modes")
        if self.n_members < 2:
            raise ValueError("need at least 2 ensemble members")
        if self.qr_mode not in ("fixed", "adaptive"):
            raise ValueError(f"unknown qr_mode {self.qr_mode!r}")
        if self.r_inflation <= 0 or self.divergence_factor <= 0:
            raise ValueError("r_inflation and divergence_factor must be positive")
        lo, hi = self.q_bounds
        if not (0 < lo <= hi):
            raise ValueError("q_bounds must satisfy 0 < lo <= hi")
        if any(s < 0 for s in self.seeds):
            raise ValueError("seeds must be nonnegative")


PRESETS = {
    "l96-paper": ExperimentConfig(n_steps=5200, spinup=200,
                                  q_init=2.5e-3, q_bounds=(2e-3, 4e-3)),
    "l96-desk": ExperimentConfig(n_steps=2200, spinup=200,
                                 q_init=2.5e-3, q_bounds=(2e-3, 4e-3)),
    "cloud-paper": ExperimentConfig(
        testbed="cloud", variants=VARIANTS["cloud"],
        r_grid=(0.001, 0.005, 0.02), dt_grid=(1,), seeds=(1,),
        n_steps=2600, spinup=100, n_train=5000, n_modes=400, n_members=14,
        qr_mode="fixed", prior_mode="time_dependent", r_inflation=5.0,
        init_spread=0.5, train_spinup=500, truth_spinup=500),
    "cloud-desk": ExperimentConfig(
        testbed="cloud", variants=VARIANTS["cloud"],
        r_grid=(0.001,), dt_grid=(1,), seeds=(1,),
        n_steps=1100, spinup=100, n_train=5000, n_modes=400, n_members=14,
        qr_mode="fixed", prior_mode="time_dependent", r_inflation=5.0,
        init_spread=0.5, train_spinup=500, truth_spinup=500),
}

_TUPLE_FIELDS = ("variants", "r_grid", "dt_grid", "seeds")


def preset(name: str) -> ExperimentConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; have {sorted(PRESETS)}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build a config from a plain dict, optionally on top of a named preset."""
    data = dict(data)
    base = preset(data.pop("preset")) if "preset" in data else ExperimentConfig()
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key in _TUPLE_FIELDS:
        if key in data:
            data[key] = tuple(data[key])
    return dataclasses.replace(base, **data)


def load_config(path) -> ExperimentConfig:
    """Read a TOML or JSON config file (keys mirror ExperimentConfig fields)."""
    p = Path(path)
    text = p.read_text()
    data = tomllib.loads(text) if p.suffix == ".toml" else json.loads(text)
    if not isinstance(data, dict):
        raise ValueError(f"config root must be a table/object, got {type(data).__name__}")
    return config_from_dict(data)


def point_seed_sequence(master_seed: int, replicate: int, r_index: int,
                        dt_index: int) -> np.random.SeedSequence:
    """Counter-based split: entropy [master, replicate, r_index, dt_index]."""
    return np.random.SeedSequence(
        [int(master_seed), int(replicate), int(r_index), int(dt_index)])


def rmse(estimates, truth) -> float:
    """Root-mean-square error over all entries of two equally shaped series."""
    est = np.asarray(estimates, dtype=np.float64)
    tru = np.asarray(truth, dtype=np.float64)
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {tru.shape}")
    return float(np.sqrt(np.mean((est - tru) ** 2)))


# ---------------------------------------------------------------------------
# Metric rows


@dataclass
class PointResult:
    """One metric row: a single filter variant at a single sweep point."""

    testbed: str
    variant: str
    r_obs: float
    dt: float
    seed: int
    rmse: float | None = None
    rel_mse: dict | None = None
    divergent: bool = False
    q_mean: float = float("nan")
    r_mean: float = float("nan")
    wall_time: float = 0.0
    n_steps: int = 0
    spinup: int = 0
    applied_frac: float = 0.0
    sigma_clim: float = float("nan")
    error: str | None = None


# ---------------------------------------------------------------------------
# Model adapters: how the filter advances members and maps them to observations.


class L96Advance:
    """Ensemble propagator for the cyclic 40-variable model."""

    def __init__(self, dt_model: float, forcing: float = L96_FORCING):
        self.dt_model = dt_model
        self.forcing = forcing

    def advance_members(self, members, steps, dt, rng):
        cfg = IntegratorConfig(dt=dt, steps_per_obs=int(steps))
        return advance_members(members, cfg, self.forcing)


class CloudAdvance:
    """Ensemble propagator for the stochastic column model; dt comes from cfg."""

    def __init__(self, model_cfg: CloudModelConfig):
        self.model_cfg = model_cfg

    def advance_members(self, members, steps, dt, rng):
        out = np.asarray(members, dtype=np.float64)
        for _ in range(int(steps)):
            out = cloud_column_step(out, self.model_cfg, rng)
        return out


class SiteObserver:
    """Trusted Lorenz-96 operator: read every stride-th gridpoint as-is."""

    def __init__(self, stride: int = 2):
        self.stride = stride

    def __call__(self, ens):
        return np.asarray(ens, dtype=np.float64)[:, ::self.stride]


def _project_fractions(frac):
    frac = np.clip(frac, 0.0, 1.0)
    tot = frac.sum(axis=-1, keepdims=True)
    return frac / np.maximum(tot, 1.0)


class ClearSkyObserver:
    """Trusted-but-wrong column operator: radiances as if no cloud existed."""

    def __init__(self, rtm_cfg: rtm_mod.RtmConfig):
        self.rtm_cfg = rtm_cfg

    def __call__(self, ens):
        return rtm_mod.brightness_clear(np.asarray(ens, dtype=np.float64), self.rtm_cfg)


class CloudySkyObserver:
    """True column operator applied to each member's own (projected) fractions."""

    def __init__(self, rtm_cfg: rtm_mod.RtmConfig):
        self.rtm_cfg = rtm_cfg

    def __call__(self, ens):
        ens = np.asarray(ens, dtype=np.float64)
        return rtm_mod.brightness_cloudy(ens, _project_fractions(ens[:, 4:7]), self.rtm_cfg)


# ---------------------------------------------------------------------------
# Generation and training


@dataclass
class L96PointData:
    """Everything one Lorenz-96 sweep point observes, plus the hidden truth."""

    truth: np.ndarray       # (n_steps + 1, 40) at observation times; row 0 is t=0
    y_clear: np.ndarray     # (n_steps, 20) unobstructed readings + noise
    y_cloudy: np.ndarray    # (n_steps, 20) obstructed readings + the same noise
    masks: np.ndarray       # (n_steps, 20) which sites were obstructed (diagnostics only)
    obs_sites: np.ndarray
    sigma_clim: float


def generate_l96_point(cfg: ExperimentConfig, r_obs: float, dt: float,
                       seed_seq: np.random.SeedSequence) -> L96PointData:
    """Truth plus paired clear/cloudy observation streams sharing one noise draw."""
    spo = _steps_per_obs(dt, cfg.dt_model)
    ss_truth, ss_obs, ss_noise = seed_seq.spawn(3)
    rng_truth = np.random.default_rng(ss_truth)
    rng_obs = np.random.default_rng(ss_obs)
    rng_noise = np.random.default_rng(ss_noise)

    integ = IntegratorConfig(dt=cfg.dt_model, steps_per_obs=spo)
    x0 = L96_FORCING + 0.5 * rng_truth.standard_normal(40)
    truth = integrate_l96(x0, integ, cfg.truth_spinup + cfg.n_steps)[cfg.truth_spinup:]

    obstruction = ObstructionConfig(count_max=cfg.count_max, count_mode=cfg.count_mode)
    m = 40 // obstruction.stride
    noiseless = NoiseSpec(0.0)
    eta = rng_noise.normal(0.0, np.sqrt(r_obs), size=(cfg.n_steps, m))
    y_clear = np.empty((cfg.n_steps, m))
    y_cloudy = np.empty((cfg.n_steps, m))
    masks = np.empty((cfg.n_steps, m), dtype=bool)
    for t in range(cfg.n_steps):
        xt = truth[t + 1]
        reading, mask = cloudy_observe_l96(xt, obstruction, noiseless, rng_obs)
        y_cloudy[t] = reading + eta[t]
        y_clear[t] = xt[::obstruction.stride] + eta[t]
        masks[t] = mask
    return L96PointData(truth, y_clear, y_cloudy, masks,
                        np.arange(0, 40, obstruction.stride),
                        float(truth[1:].std()))


def train_l96_model(cfg: ExperimentConfig, r_obs: float, seed) -> EmbeddingModel:
    """One spatially pooled error model shared by all observed gridpoints.

    The training trajectory is always sampled at a 0.1 observation interval;
    the pooled pairs only sample the attractor's marginal statistics, so the
    assimilation interval of the eventual run does not enter.
    """
    integ = IntegratorConfig(dt=cfg.dt_model, steps_per_obs=_steps_per_obs(0.1, cfg.dt_model))
    obstruction = ObstructionConfig(count_max=cfg.count_max, count_mode=cfg.count_mode)
    pairs = generate_training_l96(cfg.n_train, integ, obstruction, NoiseSpec(r_obs),
                                  seed, spinup_steps=cfg.train_spinup)
    ecfg = EmbeddingConfig(n_modes=cfg.n_modes, k_nn=cfg.k_nn, n_sparse=cfg.n_sparse)
    return train_embedding(pairs.b[0], pairs.y[0], ecfg)


@dataclass
class CloudTrained:
    """Per-channel error models plus everything frozen from the training run."""

    models: list
    rtm_cfg: rtm_mod.RtmConfig
    noise: NoiseSpec            # per-channel true observation noise variance
    clim_std: np.ndarray        # per-variable std of the training trajectory
    meta: dict = field(default_factory=dict)


def train_cloud_models(cfg: ExperimentConfig, r_frac: float, seed) -> CloudTrained:
    pairs, rtm_cfg, noise, traj = generate_training_cloud(
        cfg.n_train, CloudModelConfig(), rtm_mod.RtmConfig(), r_frac, seed,
        spinup_steps=cfg.train_spinup)
    ecfg = EmbeddingConfig(n_modes=cfg.n_modes, k_nn=cfg.k_nn, n_sparse=cfg.n_sparse)
    models = [train_embedding(pairs.b[i], pairs.y[i], ecfg)
              for i in range(pairs.b.shape[0])]
    return CloudTrained(models, rtm_cfg, noise, traj.std(axis=0), pairs.meta)


# ---------------------------------------------------------------------------
# Filtering


@dataclass
class FilterRunResult:
    means: np.ndarray        # (n_steps, n) analysis means; NaN rows after divergence
    q_trace: np.ndarray      # mean Q diagonal in effect per step
    r_trace: np.ndarray      # mean R diagonal in effect per step
    applied_frac: np.ndarray # per-step fraction of coordinates with an applied correction
    n_done: int
    failed: bool             # non-finite state or analysis breakdown before the end


def run_filter_sequence(y_seq: np.ndarray, models: FilterModels, fcfg: FilterConfig,
                        init_ens: np.ndarray, rng: np.random.Generator,
                        steps_per_obs: int, dt_model: float) -> FilterRunResult:
    """Assimilate observations in order; sees only (y, operators, config).

    Divergence is survivable: once the ensemble stops being finite (or the
    analysis solve breaks down on a blown-up state) the run is cut short and
    the remaining rows stay NaN. Early failures, within the first two steps,
    are re-raised since they indicate a setup error rather than filter
    collapse.
    """
    y_seq = np.asarray(y_seq, dtype=np.float64)
    n_steps, m = y_seq.shape
    k, n = init_ens.shape
    means = np.full((n_steps, n), np.nan)
    q_trace = np.full(n_steps, np.nan)
    r_trace = np.full(n_steps, np.nan)
    applied = np.zeros(n_steps)
    qr = AdaptiveQR.from_config(fcfg, n, m) if fcfg.adaptive else None

    ens = np.array(init_ens, dtype=np.float64)
    failed = False
    n_done = 0
    with np.errstate(over="ignore", invalid="ignore", under="ignore"), \
            warnings.catch_warnings():
        # a blown-up state produces ill-conditioned analysis solves right
        # before the divergence flag trips; the solver warnings add nothing
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        for t in range(n_steps):
            if not np.all(np.isfinite(ens)):
                failed = True
                break
            try:
                ens, sd = filter_step(ens, y_seq[t], models, fcfg, rng,
                                      steps=steps_per_obs, dt=dt_model, qr=qr)
            except (np.linalg.LinAlgError, ValueError, FloatingPointError):
                if t < 2:
                    raise
                failed = True
                break
            means[t] = sd.analysis.mean
            if qr is not None:
                q_trace[t] = float(np.mean(qr.q_var))
                r_trace[t] = float(np.mean(qr.r_var))
            else:
                q_trace[t] = float(np.mean(sd.q_var))
                r_trace[t] = float(np.mean(sd.r_var))
            applied[t] = float(sd.applied.mean())
            n_done = t + 1
    if not failed and not np.all(np.isfinite(means[:n_done])):
        failed = True
    return FilterRunResult(means, q_trace, r_trace, applied, n_done, failed)


def _filter_config(cfg: ExperimentConfig, r_true) -> FilterConfig:
    adaptive = cfg.qr_mode == "adaptive"
    if adaptive:
        q0, r0 = cfg.q_init, cfg.r_init
    else:
        q0 = cfg.q_fixed
        r_arr = cfg.r_inflation * np.asarray(r_true, dtype=np.float64)
        r0 = float(r_arr) if r_arr.ndim == 0 else tuple(r_arr)
    # innovation screening is part of the self-managed noise machinery; fixed
    # mode stays the textbook filter so reference runs keep their behavior,
    # catastrophic failures included
    clip = 4.0 if adaptive else np.inf
    return FilterConfig(n_members=cfg.n_members, q_var=q0, r_var=r0,
                        adaptive=adaptive, forget=cfg.forget, q_gain=cfg.q_gain,
                        q_bounds=cfg.q_bounds, regen=cfg.regen,
                        z_floor=cfg.z_floor, innov_clip=clip,
                        prior_mode=cfg.prior_mode)


def _variant_rngs(cfg: ExperimentConfig, ss_filter: np.random.SeedSequence) -> dict:
    """One stream per canonical variant name, stable under variant subsets."""
    canonical = VARIANTS[cfg.testbed]
    children = ss_filter.spawn(len(canonical))
    return {name: np.random.default_rng(child)
            for name, child in zip(canonical, children)}


def _run_point_l96(cfg: ExperimentConfig, master_seed: int, r_idx: int, dt_idx: int,
                   rep_idx: int, model: EmbeddingModel | None = None) -> list:
    r_obs = float(cfg.r_grid[r_idx])
    dt = float(cfg.dt_grid[dt_idx])
    replicate = int(cfg.seeds[rep_idx])
    spo = _steps_per_obs(dt, cfg.dt_model)

    ss = point_seed_sequence(master_seed, replicate, r_idx, dt_idx)
    ss_gen, ss_train, ss_init, ss_filter = ss.spawn(4)
    data = generate_l96_point(cfg, r_obs, dt, ss_gen)
    if model is None:
        model = train_l96_model(cfg, r_obs, ss_train)
    init_ens = data.truth[0] + cfg.init_spread * (
        np.random.default_rng(ss_init).standard_normal((cfg.n_members, 40)))
    rngs = _variant_rngs(cfg, ss_filter)

    advance = L96Advance(cfg.dt_model)
    h = SiteObserver(stride=2)
    fcfg = _filter_config(cfg, r_obs)
    truth_eval = data.truth[1 + cfg.spinup:]
    results = []
    for variant in cfg.variants:
        t0 = time.perf_counter()
        secondary = model if variant == "rkhs" else None
        fm = FilterModels(advance=advance, h=h, secondary=secondary)
        y_seq = data.y_clear if variant == "enkf_clear" else data.y_cloudy
        run = run_filter_sequence(y_seq, fm, fcfg, init_ens, rngs[variant],
                                  spo, cfg.dt_model)
        row = PointResult(testbed="l96", variant=variant, r_obs=r_obs, dt=dt,
                          seed=replicate, n_steps=cfg.n_steps, spinup=cfg.spinup,
                          sigma_clim=data.sigma_clim)
        finished = run.n_done == cfg.n_steps and not run.failed
        if finished:
            row.rmse = rmse(run.means[cfg.spinup:], truth_eval)
            row.divergent = row.rmse > cfg.divergence_factor * data.sigma_clim
            row.q_mean = float(np.mean(run.q_trace[cfg.spinup:]))
            row.r_mean = float(np.mean(run.r_trace[cfg.spinup:]))
            row.applied_frac = float(np.mean(run.applied_frac[cfg.spinup:]))
        else:
            row.divergent = True
        row.wall_time = time.perf_counter() - t0
        results.append(row)
    return results


def _run_point_cloud(cfg: ExperimentConfig, master_seed: int, r_idx: int, dt_idx: int,
                     rep_idx: int, trained: CloudTrained | None = None) -> list:
    r_frac = float(cfg.r_grid[r_idx])
    dt_steps = int(cfg.dt_grid[dt_idx])
    replicate = int(cfg.seeds[rep_idx])

    ss = point_seed_sequence(master_seed, replicate, r_idx, dt_idx)
    ss_train, ss_truth, ss_obs, ss_init, ss_filter = ss.spawn(5)
    if trained is None:
        trained = train_cloud_models(cfg, r_frac, ss_train)
    model_cfg = CloudModelConfig()
    n_channels = len(trained.rtm_cfg.channels)

    rng_truth = np.random.default_rng(ss_truth)
    total = cfg.truth_spinup + cfg.n_steps * dt_steps
    traj = simulate_cloud_column(np.zeros(7), total, model_cfg, rng_truth)
    truth = traj[cfg.truth_spinup::dt_steps][:cfg.n_steps + 1]

    ro = trained.noise.var(n_channels)
    rng_obs = np.random.default_rng(ss_obs)
    h_true = rtm_mod.brightness_cloudy(truth[1:], truth[1:, 4:7], trained.rtm_cfg)
    y_seq = h_true + rng_obs.normal(0.0, np.sqrt(ro), size=h_true.shape)

    spread = cfg.init_spread * trained.clim_std
    init_ens = truth[0] + spread * (
        np.random.default_rng(ss_init).standard_normal((cfg.n_members, 7)))
    rngs = _variant_rngs(cfg, ss_filter)

    advance = CloudAdvance(model_cfg)
    h_clear = ClearSkyObserver(trained.rtm_cfg)
    h_cloudy = CloudySkyObserver(trained.rtm_cfg)
    fcfg = _filter_config(cfg, ro)
    truth_eval = truth[1 + cfg.spinup:]
    truth_var = truth_eval.var(axis=0)
    results = []
    for variant in cfg.variants:
        t0 = time.perf_counter()
        h = h_cloudy if variant == "enkf_perfect" else h_clear
        secondary = trained.models if variant == "rkhs" else None
        fm = FilterModels(advance=advance, h=h, secondary=secondary)
        run = run_filter_sequence(y_seq, fm, fcfg, init_ens, rngs[variant],
                                  dt_steps, model_cfg.dt)
        row = PointResult(testbed="cloud", variant=variant, r_obs=r_frac,
                          dt=float(dt_steps), seed=replicate, n_steps=cfg.n_steps,
                          spinup=cfg.spinup, sigma_clim=float(truth_eval.std()))
        finished = run.n_done == cfg.n_steps and not run.failed
        if finished:
            err = run.means[cfg.spinup:] - truth_eval
            rel = np.mean(err ** 2, axis=0) / truth_var
            row.rel_mse = {name: float(rel[i]) for i, name in enumerate(CLOUD_FIELDS)}
            row.rmse = rmse(run.means[cfg.spinup:], truth_eval)
            thermo = np.sqrt(rel[:4])
            row.divergent = bool(np.any(thermo > cfg.divergence_factor))
            row.q_mean = float(np.mean(run.q_trace[cfg.spinup:]))
            row.r_mean = float(np.mean(run.r_trace[cfg.spinup:]))
            row.applied_frac = float(np.mean(run.applied_frac[cfg.spinup:]))
        else:
            row.divergent = True
        row.wall_time = time.perf_counter() - t0
        results.append(row)
    return results


def run_l96(cfg: ExperimentConfig, master_seed: int = 0,
            model: EmbeddingModel | None = None) -> list:
    """All grid points serially; errors propagate. Returns metric rows.

    Passing a pretrained ``model`` skips per-point training; the caller is
    responsible for it matching the point's noise level.
    """
    if cfg.testbed != "l96":
        raise ValueError("run_l96 needs an l96 config")
    results = []
    for r_idx in range(len(cfg.r_grid)):
        for dt_idx in range(len(cfg.dt_grid)):
            for rep_idx in range(len(cfg.seeds)):
                results.extend(_run_point_l96(cfg, master_seed, r_idx, dt_idx,
                                              rep_idx, model=model))
    return results


def run_cloud(cfg: ExperimentConfig, master_seed: int = 0,
              trained: CloudTrained | None = None) -> list:
    """Cloud-column counterpart of run_l96."""
    if cfg.testbed != "cloud":
        raise ValueError("run_cloud needs a cloud config")
    results = []
    for r_idx in range(len(cfg.r_grid)):
        for dt_idx in range(len(cfg.dt_grid)):
            for rep_idx in range(len(cfg.seeds)):
                results.extend(_run_point_cloud(cfg, master_seed, r_idx, dt_idx,
                                                rep_idx, trained=trained))
    return results


def _sweep_point(task) -> list:
    cfg, master_seed, r_idx, dt_idx, rep_idx = task
    try:
        if cfg.testbed == "l96":
            return _run_point_l96(cfg, master_seed, r_idx, dt_idx, rep_idx)
        return _run_point_cloud(cfg, master_seed, r_idx, dt_idx, rep_idx)
    except Exception as exc:  # partial failure: record it on every variant row
        msg = f"{type(exc).__name__}: {exc}"
        return [PointResult(testbed=cfg.testbed, variant=v,
                            r_obs=float(cfg.r_grid[r_idx]), dt=float(cfg.dt_grid[dt_idx]),
                            seed=int(cfg.seeds[rep_idx]), divergent=True,
                            n_steps=cfg.n_steps, spinup=cfg.spinup, error=msg)
                for v in cfg.variants]


def sweep(cfg: ExperimentConfig, master_seed: int = 0, workers: int = 1) -> list:
    """Cartesian product of (r_grid, dt_grid, seeds), each point independent.

    Points run serially or on a process pool; the merged row order is the
    nested grid order either way, and every point derives its own seeds, so
    the output is identical for any worker count.
    """
    tasks = [(cfg, master_seed, r_idx, dt_idx, rep_idx)
             for r_idx in range(len(cfg.r_grid))
             for dt_idx in range(len(cfg.dt_grid))
             for rep_idx in range(len(cfg.seeds))]
    if workers <= 1 or len(tasks) == 1:
        chunks = [_sweep_point(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as ex:
            chunks = list(ex.map(_sweep_point, tasks))
    return [row for chunk in chunks for row in chunk]


# ---------------------------------------------------------------------------
# Reporting


L96_RMSE_COLUMNS = ("r_obs", "dt", "seed", "variant", "rmse", "divergent",
                    "applied_frac", "sigma_clim", "error")
L96_QR_COLUMNS = ("r_obs", "dt", "seed", "variant", "q_mean", "r_mean")
CLOUD_COLUMNS = (("r_obs", "dt", "seed", "variant")
                 + tuple(f"rel_mse_{name}" for name in CLOUD_FIELDS)
                 + ("divergent", "applied_frac", "error"))


def _cell(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, float) and not np.isfinite(value):
        return ""
    return value


def report(results, out_dir, cfg: ExperimentConfig | None = None,
           master_seed: int | None = None) -> dict:
    """Write per-testbed CSV tables and a JSON summary; returns written paths.

    Wall times and the environment stamp live in the summary, never in the
    CSV tables, so re-running an identical sweep reproduces the tables byte
    for byte.
    """
    rows = list(results)
    if not rows:
        raise ValueError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}

    l96_rows = [r for r in rows if r.testbed == "l96"]
    cloud_rows = [r for r in rows if r.testbed == "cloud"]
    if l96_rows:
        path = out / "l96_rmse.csv"
        write_csv(path, L96_RMSE_COLUMNS,
                  ([_cell(getattr(r, c)) for c in L96_RMSE_COLUMNS] for r in l96_rows))
        written["l96_rmse"] = path
        path = out / "l96_qr.csv"
        write_csv(path, L96_QR_COLUMNS,
                  ([_cell(getattr(r, c)) for c in L96_QR_COLUMNS] for r in l96_rows))
        written["l96_qr"] = path
    if cloud_rows:
        path = out / "cloud_relmse.csv"
        body = []
        for r in cloud_rows:
            rel = r.rel_mse or {}
            body.append([_cell(r.r_obs), _cell(r.dt), _cell(r.seed), r.variant]
                        + [_cell(rel.get(name)) for name in CLOUD_FIELDS]
                        + [_cell(r.divergent), _cell(r.applied_frac), _cell(r.error)])
        write_csv(path, CLOUD_COLUMNS, body)
        written["cloud_relmse"] = path

    summary = {
        "config_hash": config_hash(cfg) if cfg is not None else None,
        "config": to_jsonable(cfg) if cfg is not None else None,
        "master_seed": master_seed,
        "environment": env_stamp(),
        "n_rows": len(rows),
        "n_divergent": sum(r.divergent for r in rows),
        "n_errors": sum(r.error is not None for r in rows),
        "total_wall_time": float(sum(r.wall_time for r in rows)),
        "files": sorted(p.name for p in written.values()),
    }
    spath = out / "summary.json"
    write_json(spath, summary)
    written["summary"] = spath
    return written


def save_results(results, path) -> None:
    """Raw metric rows as JSON, for the report subcommand and post-processing."""
    write_json(path, [to_jsonable(dataclasses.asdict(r)) for r in results])


def load_results(path) -> list:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return [PointResult(**row) for row in raw]
