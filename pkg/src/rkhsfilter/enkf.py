"""Ensemble Kalman filtering with an optional learned error correction.

The primary filter is a stochastic-regeneration EnKF: forecast members, form
empirical covariances in observation space, apply the Kalman update to the
mean, and redraw the ensemble from the Gaussian posterior (a deterministic
square-root transform is available behind a flag for variance-exactness
tests). The corrected analysis debiases the innovation by the secondary
filter's posterior error mean and widens the gain denominator by its
posterior error variance; with a zero correction it reduces bitwise to the
standard update.

Adaptive noise estimation keeps exponentially forgotten innovation statistics:
R from analysis-residual times innovation products (whose fixed point is the
true R whatever the gain), Q from a multiplicative controller on the
whiteness of innovation differences (white innovations put the differences'
lag-1 correlation at exactly -1/2; memory in the innovations raises it and
drives Q up, overshoot lowers it and drives Q down).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .embedding import (EmbeddingModel, PriorSpec, SecondaryPosterior,
                        likelihood_matrix, posterior_stats, prior_params)

__all__ = [
    "FilterConfig",
    "FilterModels",
    "AnalysisDiagnostics",
    "StepDiagnostics",
    "AdaptiveQR",
    "forecast",
    "analysis_standard",
    "analysis_corrected",
    "adaptive_qr",
    "filter_step",
    "init_ensemble",
]


@dataclass(frozen=True)
class FilterConfig:
    """Primary/secondary filter controls.

    q_var and r_var are the (initial) model and observation noise variances,
    scalars or diagonals. regen picks how the analysis ensemble is rebuilt:
    "resample" draws fresh members from the Gaussian posterior, "sqrt" applies
    a deterministic ensemble transform.
    """

    n_members: int
    q_var: float | tuple = 1e-3
    r_var: float | tuple = 1e-2
    adaptive: bool = False
    forget: float = 0.99
    noise_floor: float = 1e-6
    q_gain: float = 0.02
    q_bounds: tuple = (1e-8, 1e3)
    regen: str = "resample"
    ridge: float = 1e-10
    z_floor: float = 1e-10
    innov_clip: float = np.inf    # analysis innovation bound, in predicted sigmas
    prior_mode: str = "time_dependent"

    def __post_init__(self):
        if self.n_members < 2:
            raise ValueError("need at least 2 ensemble members")
        if not (0.0 < self.forget <= 1.0):
            raise ValueError("forget must lie in (0, 1]")
        if self.innov_clip <= 0:
            raise ValueError("innov_clip must be positive")
        if self.regen not in ("resample", "sqrt"):
            raise ValueError(f"unknown regen mode {self.regen!r}")
        if self.prior_mode not in ("time_dependent", "climatological"):
            raise ValueError(f"unknown prior mode {self.prior_mode!r}")


@dataclass
class FilterModels:
    """What the filter is allowed to see.

    advance(members, rng) propagates an ensemble one observation interval;
    h(members) applies the TRUSTED observation operator. The optional
    secondary model(s) encode the learned observation-model error: one shared
    model (spatially pooled training) or one per observation coordinate.
    """

    advance: object
    h: object
    secondary: object = None           # EmbeddingModel | list[EmbeddingModel] | None
    b_var: float | None = None         # climatological prior variance override

    def secondary_for(self, coord: int):
        if self.secondary is None:
            return None
        if isinstance(self.secondary, EmbeddingModel):
            return self.secondary
        return self.secondary[coord]


@dataclass
class AnalysisDiagnostics:
    innovation: np.ndarray        # bias-corrected innovation fed to the gain
    innovation_raw: np.ndarray    # y - ybar_f before any correction
    p_yy_diag: np.ndarray         # ensemble predicted-observation variances
    r_total: np.ndarray           # r + r_b actually used in the gain
    residual: np.ndarray          # posterior observation-space residual
    mean: np.ndarray              # analysis mean


@dataclass
class StepDiagnostics:
    analysis: AnalysisDiagnostics
    forecast_obs_mean: np.ndarray | None   # only computed when a secondary model runs
    mu_b: np.ndarray
    r_b: np.ndarray
    applied: np.ndarray           # per-coordinate secondary application flags
    evidence: np.ndarray
    tail_exception: np.ndarray
    q_var: float | tuple          # noise levels used this step
    r_var: float | tuple


def _as_diag(v, m: int) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(v, dtype=np.float64), (m,)).copy()
    if np.any(arr < 0):
        raise ValueError("variances must be nonnegative")
    return arr


def init_ensemble(center: np.ndarray, spread: float, n_members: int,
                  rng: np.random.Generator) -> np.ndarray:
    """Members around a center state with isotropic Gaussian spread."""
    center = np.asarray(center, dtype=np.float64)
    return center[None, :] + spread * rng.standard_normal((n_members, center.size))


def forecast(ens: np.ndarray, model, steps: int, dt: float, q_var,
             rng: np.random.Generator) -> np.ndarray:
    """Propagate members ``steps`` RK4 substeps of size dt, then add model noise.

    ``model`` is a tendency callable for ODE dynamics, or any object with an
    ``advance_members(members, steps, dt, rng)`` method (stochastic models).
    Model noise is realized as additive member perturbations, which is how the
    forecast covariance picks up its Q term.
    """
    ens = np.asarray(ens, dtype=np.float64)
    if hasattr(model, "advance_members"):
        out = model.advance_members(ens, steps, dt, rng)
    else:
        from .dynamics import rk4_step

        out = ens.copy()
        for _ in range(steps):
            out = rk4_step(out, model, dt)
    return out + _q_perturbations(q_var, out.shape, rng)


def _q_perturbations(q_var, shape, rng) -> np.ndarray:
    q = np.asarray(q_var, dtype=np.float64)
    if q.ndim <= 1:
        return np.sqrt(np.broadcast_to(q, (shape[1],))) * rng.standard_normal(shape)
    vals, vecs = np.linalg.eigh(q)
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    return rng.standard_normal(shape) @ root.T


def analysis_corrected(ens: np.ndarray, y: np.ndarray, h, r_var, mu_b, r_b,
                       rng: np.random.Generator, regen: str = "resample",
                       ridge: float = 1e-10,
                       innov_clip: float = np.inf) -> tuple[np.ndarray, AnalysisDiagnostics]:
    """Kalman analysis with a debiased innovation and widened gain denominator.

    The innovation is y - mu_b - ybar_f and the gain uses P_yy + R + R_b. With
    mu_b = 0 and R_b = 0 this is the standard analysis, bitwise (the standard
    path is implemented as this function with zero corrections).

    ``innov_clip`` bounds each innovation at that many sigmas of its predicted
    scale sqrt(P_yy_ii + R_ii + R_b_ii), so a filter that has lost the signal
    cannot take increments far beyond its own spread and kick the state off
    the attractor; infinity disables the guard.
    """
    ens = np.asarray(ens, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    k, n = ens.shape
    yf = np.asarray(h(ens), dtype=np.float64)
    m = yf.shape[1]
    if y.shape != (m,):
        raise ValueError(f"observation shape {y.shape} does not match operator output {m}")
    mu_b = _as_signed(mu_b, m)
    r_b = _as_diag(r_b, m)
    r_diag = _as_diag(r_var, m)

    xbar = ens.mean(axis=0)
    x_anom = ens - xbar
    ybar = yf.mean(axis=0)
    y_anom = yf - ybar

    p_xy = x_anom.T @ y_anom / (k - 1)
    p_yy = y_anom.T @ y_anom / (k - 1)
    s_mat = p_yy + np.diag(r_diag + r_b) + ridge * np.eye(m)
    innov = y - mu_b - ybar
    lim = innov_clip * np.sqrt(np.diag(s_mat))
    innov = np.clip(innov, -lim, lim)
    alpha = sla.solve(s_mat, innov, assume_a="pos")
    gain = sla.solve(s_mat, p_xy.T, assume_a="pos").T

    xbar_a = xbar + gain @ innov
    p_a = x_anom.T @ x_anom / (k - 1) - gain @ p_xy.T
    residual = innov - p_yy @ alpha

    if regen == "resample":
        vals, vecs = np.linalg.eigh((p_a + p_a.T) * 0.5)
        root = vecs * np.sqrt(np.clip(vals, 0.0, None))
        new_ens = xbar_a[None, :] + rng.standard_normal((k, n)) @ root.T
    elif regen == "sqrt":
        r_tot = r_diag + r_b
        if np.any(r_tot <= 0):
            raise ValueError("sqrt regeneration needs strictly positive R + R_b")
        c = np.eye(k) + (y_anom / r_tot[None, :]) @ y_anom.T / (k - 1)
        vals, vecs = np.linalg.eigh((c + c.T) * 0.5)
        transform = vecs @ np.diag(1.0 / np.sqrt(np.clip(vals, 1e-30, None))) @ vecs.T
        new_ens = xbar_a[None, :] + transform @ x_anom
    else:
        raise ValueError(f"unknown regen mode {regen!r}")

    diag = AnalysisDiagnostics(innov, y - ybar, np.diag(p_yy).copy(),
                               r_diag + r_b, residual, xbar_a)
    return new_ens, diag


def _as_signed(v, m: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(v, dtype=np.float64), (m,)).copy()


def analysis_standard(ens, y, h, r_var, rng, regen: str = "resample",
                      ridge: float = 1e-10) -> tuple[np.ndarray, AnalysisDiagnostics]:
    """Uncorrected analysis; delegates to the corrected path with zero corrections."""
    return analysis_corrected(ens, y, h, r_var, 0.0, 0.0, rng, regen, ridge)


# ---------------------------------------------------------------------------
# Adaptive noise estimation.


@dataclass
class AdaptiveQR:
    """Exponentially forgotten innovation statistics driving Q and R updates.

    R comes from the running innovation-residual product, whose fixed point
    is the true measurement noise whatever the gain happens to be. Q is a
    multiplicative controller on the whiteness of the *raw* innovation
    differences: for white innovations consecutive differences carry a
    lag-1 correlation of exactly -1/2, forecast-memory in the innovations
    pulls the value above that baseline, and an overshooting spread pushes
    it below. The raw (pre-correction) innovation is the right signal
    because the applied correction carries its own serially correlated
    error, which no amount of process noise can whiten; a controller fed
    the corrected innovations integrates that error without limit.
    """

    q_var: np.ndarray
    r_var: np.ndarray
    forget: float = 0.99
    floor: float = 1e-6
    q_gain: float = 0.02
    q_bounds: tuple = (1e-8, 1e3)
    warmup: int = 10
    cap_ratio: float = 5.0
    z_max: float = 4.0
    gate_ratio: float = 4.0
    _s2: np.ndarray | None = None      # smoothed claimed innovation variance
    _m0: np.ndarray | None = None      # lag-0 moment of innovation differences
    _m1: np.ndarray | None = None      # lag-1 moment of innovation differences
    _prev_d: np.ndarray | None = None
    _prev_ok: np.ndarray | None = None
    _prev_dp: np.ndarray | None = None
    _prev_dp_ok: np.ndarray | None = None
    _count: int = 0

    @classmethod
    def from_config(cls, cfg: FilterConfig, n: int, m: int) -> "AdaptiveQR":
        return cls(q_var=_as_diag(cfg.q_var, n), r_var=_as_diag(cfg.r_var, m),
                   forget=cfg.forget, floor=cfg.noise_floor, q_gain=cfg.q_gain,
                   q_bounds=cfg.q_bounds)

    def _ew(self, name: str, value: np.ndarray, where) -> None:
        old = getattr(self, name)
        if old is None:
            setattr(self, name, np.where(where, value, 0.0))
        else:
            blend = self.forget * old + (1.0 - self.forget) * value
            setattr(self, name, np.where(where, blend, old))

    def update(self, diag: AnalysisDiagnostics) -> None:
        """Fold one step of innovation statistics into the running estimates."""
        g = self.forget
        # Smoothed claimed innovation variance; innovations are clipped
        # against it before entering any moment. A coordinate whose
        # correction hedged between error branches legitimately emits a huge
        # innovation, and without the clip one such step dominates the
        # running moments for hundreds of steps afterwards. The smoothing is
        # load-bearing twice over: a hedged step also inflates its own
        # claimed variance, which would let the outlier straight through an
        # instantaneous clip.
        s2_now = diag.p_yy_diag + diag.r_total
        self._s2 = s2_now if self._s2 is None else g * self._s2 + (1.0 - g) * s2_now
        lim = self.z_max * np.sqrt(self._s2)
        d = np.clip(diag.innovation, -lim, lim)
        d_raw = np.clip(diag.innovation_raw, -lim, lim)

        # Coordinates whose claimed correction variance dwarfs the running
        # noise estimate are hedging between error branches; their
        # innovations say nothing about the measurement noise or the
        # forecast spread, so they sit out every statistic below and their
        # difference pairing is broken for the following steps.
        extra = diag.r_total - self.r_var
        ok = extra <= self.gate_ratio * self.r_var

        # The innovation-residual product re-estimates the measurement
        # noise; squared innovations would also absorb the ensemble's spread
        # deficit and bias the estimate high through the gain. The
        # instantaneous value is clipped to a geometric band around the
        # running estimate so a one-step outlier cannot swing it by orders
        # of magnitude, while a persistent excess or deficit still moves it.
        r_inst = np.clip(diag.residual * d,
                         self.r_var / self.cap_ratio, self.cap_ratio * self.r_var)
        self.r_var = np.where(ok, np.maximum(
            g * self.r_var + (1.0 - g) * r_inst, self.floor), self.r_var)

        if self._prev_d is not None:
            dp = d_raw - self._prev_d
            dp_ok = ok & self._prev_ok
            self._ew("_m0", dp * dp, dp_ok)
            if self._prev_dp is not None:
                self._ew("_m1", dp * self._prev_dp, dp_ok & self._prev_dp_ok)
            self._prev_dp = dp
            self._prev_dp_ok = dp_ok
        self._prev_d = d_raw.copy()
        self._prev_ok = ok
        self._count += 1

        if self._m1 is not None and self._count >= self.warmup:
            corr = self._m1 / np.maximum(self._m0, 1e-300)
            corr = np.clip(corr, -1.0, 1.0)
            # 1 + 2*corr is zero exactly at the white baseline; the median
            # across coordinates keeps residually poisoned ones from
            # steering the shared drive
            drive = float(np.clip(np.median(1.0 + 2.0 * corr), -1.0, 1.0))
            scale = np.exp(self.q_gain * drive)
            self.q_var = np.clip(self.q_var * scale,
                                 max(self.floor, self.q_bounds[0]), self.q_bounds[1])


def adaptive_qr(diag_history, q_var, r_var, forget: float = 0.99,
                floor: float = 1e-6, q_gain: float = 0.02) -> tuple[np.ndarray, np.ndarray]:
    """Replay a history of analysis diagnostics through the running estimator.

    Functional wrapper over AdaptiveQR for callers that keep their own
    histories; needs at least two entries for the lag-1 statistics to exist.
    """
    history = list(diag_history)
    if len(history) < 2:
        raise ValueError("need a history of at least 2 analysis steps")
    n = 1 if np.ndim(q_var) == 0 else len(q_var)
    m = history[0].innovation.shape[0]
    est = AdaptiveQR(q_var=_as_diag(q_var, n), r_var=_as_diag(r_var, m),
                     forget=forget, floor=floor, q_gain=q_gain, warmup=2)
    for diag in history:
        est.update(diag)
    return est.q_var, est.r_var


# ---------------------------------------------------------------------------
# One full assimilation step.


def filter_step(ens: np.ndarray, y: np.ndarray, models: FilterModels,
                cfg: FilterConfig, rng: np.random.Generator,
                steps: int = 1, dt: float = 1.0,
                qr: AdaptiveQR | None = None) -> tuple[np.ndarray, StepDiagnostics]:
    """Forecast, secondary error inference, corrected analysis, noise adaptation.

    The secondary stage runs only when ``models.secondary`` is set: for each
    observed coordinate it forms the innovation-based error prior, evaluates
    the learned likelihood of the actual observation over the training error
    samples, and converts the posterior mean/variance into the innovation
    debias and gain widening of the corrected analysis. Coordinates whose
    evidence trips the floor (without the tail exception) fall back to the
    uncorrected update. The truth and the obstruction mask are never inputs.
    """
    y = np.asarray(y, dtype=np.float64)
    m = y.shape[0]
    q_now = qr.q_var if qr is not None else cfg.q_var
    r_now = qr.r_var if qr is not None else cfg.r_var
    r_diag = _as_diag(r_now, m)

    ens_f = forecast(ens, models.advance, steps, dt, q_now, rng)
    mu_b = np.zeros(m)
    r_b = np.zeros(m)
    applied = np.zeros(m, dtype=bool)
    evidence = np.zeros(m)
    tail = np.zeros(m, dtype=bool)
    ybar = None

    if models.secondary is not None:
        yf = np.asarray(models.h(ens_f), dtype=np.float64)
        ybar = yf.mean(axis=0)
        y_anom = yf - ybar
        p_yy_diag = (y_anom * y_anom).sum(axis=0) / (ens_f.shape[0] - 1)
        shared = isinstance(models.secondary, EmbeddingModel)
        if shared:
            like_all = likelihood_matrix(models.secondary, y, r_diag)
        for i in range(m):
            model_i = models.secondary_for(i)
            b_var = models.b_var if models.b_var is not None else model_i.b_var
            prior = prior_params(y[i], ybar[i], p_yy_diag[i], r_diag[i],
                                 cfg.prior_mode, b_var)
            like = like_all[:, i] if shared else likelihood_matrix(model_i, [y[i]], r_diag[i])[:, 0]
            post = posterior_stats(model_i, prior, like, cfg.z_floor)
            mu_b[i] = post.mean
            r_b[i] = post.var
            applied[i] = post.applied
            evidence[i] = post.evidence
            tail[i] = post.tail_exception

    new_ens, adiag = analysis_corrected(ens_f, y, models.h, r_diag, mu_b, r_b,
                                        rng, cfg.regen, cfg.ridge, cfg.innov_clip)
    if qr is not None:
        qr.update(adiag)

    sdiag = StepDiagnostics(adiag, ybar, mu_b, r_b, applied, evidence, tail,
                            q_now if np.ndim(q_now) == 0 else np.asarray(q_now).copy(),
                            r_diag.copy())
    return new_ens, sdiag
