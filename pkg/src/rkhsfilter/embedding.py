"""Nonparametric conditional-density model and the secondary Bayesian filter.

Training builds diffusion-map bases over the error samples b_l and the
observation samples y_l, then estimates the conditional density of Y given B
through empirical covariance matrices on those bases:

    C_yb[j, k] = (1/N) sum_l phi_j(y_l) * psi_k(b_l)
    C_bb[j, k] = (1/N) sum_l psi_j(b_l) * psi_k(b_l)
    coeff      = C_yb @ C_bb^{-1}          (ridge-regularized solve)
    p(y_i | b_j) = max(0, sum_k [coeff @ psi(b_j)]_k * phi_k(y_i)) * q_y(y_i)

q_y is the kernel density estimate of the observation samples; clipping the
negative part of the truncated expansion is reported as a training
diagnostic. Evaluating the likelihood of a NEW observation y (one that is not
a training point) works without extending the basis: y enters only through
Gaussian weights on the training observations.

The secondary filter combines that likelihood over the training error samples
with a Gaussian prior from the primary filter's innovation statistics, using
importance weights 1/q_b(b_l) so the sample averages approximate integrals.
Posterior mean and variance feed back into the primary filter's update. All
posterior arithmetic runs in log space: the evidence can underflow a float64
long before the posterior becomes meaningless.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from ._util import config_hash, to_jsonable
from .diffmaps import BasisConfig, DiffusionBasis, diffusion_basis, load_basis, save_basis

__all__ = [
    "EmbeddingConfig",
    "EmbeddingModel",
    "PriorSpec",
    "SecondaryPosterior",
    "ExtrapolationError",
    "train",
    "conditional_density_at_training",
    "likelihood_vector",
    "likelihood_matrix",
    "prior_params",
    "posterior_stats",
    "save_model",
    "load_model",
    "query_table",
]


class ExtrapolationError(ValueError):
    """A query observation fell so far outside the training support that every
    weight underflowed to zero."""


@dataclass(frozen=True)
class EmbeddingConfig:
    """Training controls. n_modes applies to both bases (M1 = M2 = M)."""

    n_modes: int
    k_nn: int = 32
    n_sparse: int = 64
    epsilon: float | None = None
    ridge_scale: float = 1e-8     # ridge = ridge_scale * trace(C_bb) / M
    cond_cap: float = 1e8         # reject training when C_bb is worse than this
    clip_diag_columns: int = 200  # column subsample for the clipped-mass diagnostic

    def basis_config(self) -> BasisConfig:
        return BasisConfig(n_modes=self.n_modes, k_nn=self.k_nn,
                           n_sparse=self.n_sparse, epsilon=self.epsilon)


@dataclass
class EmbeddingModel:
    """Trained conditional-density model for one observation coordinate group."""

    basis_b: DiffusionBasis
    basis_y: DiffusionBasis
    coeff: np.ndarray            # (M, M): rows index y-modes, columns b-modes
    cond_coeffs: np.ndarray      # (N, M): row l holds the y-mode coefficients of p(.|b_l)
    clipped_mass: float
    b_var: float                 # climatological variance of the error samples
    b_order: np.ndarray          # argsort of the b samples, for weighted quantiles
    meta: dict = field(default_factory=dict)

    @property
    def b(self) -> np.ndarray:
        return self.basis_b.samples

    @property
    def y(self) -> np.ndarray:
        return self.basis_y.samples

    @property
    def density_b(self) -> np.ndarray:
        return self.basis_b.density

    @property
    def density_y(self) -> np.ndarray:
        return self.basis_y.density

    @property
    def n_samples(self) -> int:
        return self.basis_b.n_samples


def train(b_samples, y_samples, cfg: EmbeddingConfig) -> EmbeddingModel:
    """Fit the conditional-density model on paired samples.

    Raises ValueError when the empirical basis covariance C_bb is close to
    singular (condition number beyond cfg.cond_cap); that means the bases are
    unusable and a silent fit would be worse than no fit.
    """
    b = np.asarray(b_samples, dtype=np.float64).ravel()
    y = np.asarray(y_samples, dtype=np.float64).ravel()
    if b.shape != y.shape:
        raise ValueError("b and y sample counts differ")
    n = b.size
    m = cfg.n_modes

    basis_b = diffusion_basis(b, cfg.basis_config())
    basis_y = diffusion_basis(y, cfg.basis_config())
    phi_b = basis_b.vectors
    phi_y = basis_y.vectors

    c_yb = phi_y.T @ phi_b / n
    c_bb = phi_b.T @ phi_b / n
    cond = float(np.linalg.cond(c_bb))
    if not np.isfinite(cond) or cond > cfg.cond_cap:
        raise ValueError(f"basis covariance is numerically singular (cond {cond:.3e} "
                         f"> cap {cfg.cond_cap:.1e}); refusing to train")
    ridge = cfg.ridge_scale * float(np.trace(c_bb)) / m
    coeff = sla.solve(c_bb + ridge * np.eye(m), c_yb.T, assume_a="pos").T
    cond_coeffs = phi_b @ coeff.T

    clipped = _clipped_mass(phi_y, cond_coeffs, basis_y.density, cfg.clip_diag_columns)
    meta = {
        "config_hash": config_hash(cfg),
        "n_samples": n,
        "ridge": ridge,
        "cond_c_bb": cond,
    }
    return EmbeddingModel(basis_b, basis_y, coeff, cond_coeffs, clipped,
                          float(np.var(b)), np.argsort(b), meta)


def _clipped_mass(phi_y, cond_coeffs, q_y, n_columns) -> float:
    """Fraction of conditional-density mass lost to clipping, averaged over a
    deterministic column subsample; masses are importance-weighted sample
    sums, so they approximate integrals over y."""
    n = phi_y.shape[0]
    cols = np.random.default_rng(0).permutation(n)[:min(n_columns, n)]
    raw = phi_y @ cond_coeffs[cols].T  # (N, ncols); q_y factor cancels in the ratio
    neg = -raw.clip(max=0.0).sum()
    pos = raw.clip(min=0.0).sum()
    return float(neg / (pos + neg)) if (pos + neg) > 0 else 1.0


def conditional_density_at_training(model: EmbeddingModel, i: int, j: int) -> float:
    """p(y_i | b_j) for training indices i, j; negative expansions clip to zero."""
    val = float(model.basis_y.vectors[i] @ model.cond_coeffs[j])
    return max(val, 0.0) * float(model.density_y[i])


def likelihood_matrix(model: EmbeddingModel, y_new, r_var) -> np.ndarray:
    """Likelihood columns p(y | b_l) for each entry of ``y_new``.

    Returns (N, len(y_new)), clipped at zero. The new observations enter only
    through Gaussian weights of width sqrt(r_var) on the training
    observations; no basis extension is involved. ``r_var`` is a scalar or one
    variance per query column. Raises ExtrapolationError when every weight for
    some column underflows to zero.
    """
    y_new = np.atleast_1d(np.asarray(y_new, dtype=np.float64))
    if not np.all(np.isfinite(y_new)):
        raise ValueError("non-finite query observation")
    r_col = np.broadcast_to(np.asarray(r_var, dtype=np.float64), y_new.shape)
    if np.any(r_col <= 0):
        raise ValueError("r_var must be positive")
    y_train = model.y
    n = y_train.size
    w = np.exp(-(y_train[:, None] - y_new[None, :]) ** 2 / (2.0 * r_col[None, :]))
    w /= np.sqrt(2.0 * np.pi * r_col[None, :])
    if np.any(w.max(axis=0) == 0.0):
        raise ExtrapolationError("observation lies outside the training support")
    modes = model.basis_y.vectors.T @ (w * model.density_y[:, None]) / n  # (M, ncols)
    return np.clip(model.cond_coeffs @ modes, 0.0, None)


def likelihood_vector(model: EmbeddingModel, y_new: float, r_var: float) -> np.ndarray:
    """Likelihood of one new observation over the training error samples; (N,)."""
    return likelihood_matrix(model, [y_new], r_var)[:, 0]


@dataclass(frozen=True)
class PriorSpec:
    """Gaussian prior on the observation-model error at one coordinate."""

    mean: float
    var: float

    def __post_init__(self):
        if self.var <= 0 or not np.isfinite(self.var) or not np.isfinite(self.mean):
            raise ValueError("prior needs finite mean and positive variance")


def prior_params(y_i: float, y_bar_f: float, p_yy: float, r_var: float,
                 mode: str = "time_dependent", b_var: float | None = None) -> PriorSpec:
    """Error prior implied by the innovation: mean y_i - y_bar_f, and either
    the innovation variance (p_yy + r_var) or the climatological error
    variance depending on ``mode``."""
    mean = float(y_i) - float(y_bar_f)
    if mode == "time_dependent":
        var = float(p_yy) + float(r_var)
    elif mode == "climatological":
        if b_var is None:
            raise ValueError("climatological mode needs b_var")
        var = float(b_var)
    else:
        raise ValueError(f"unknown prior mode {mode!r}")
    return PriorSpec(mean, var)


@dataclass(frozen=True)
class SecondaryPosterior:
    """Posterior summary of the error at one coordinate, plus guard telemetry.

    applied=False means the evidence fell below the floor without the
    tail-of-likelihood exception firing, so the caller should fall back to the
    uncorrected update (mean 0, extra variance 0 still populate the fields).
    """

    mean: float
    var: float
    evidence: float
    log_evidence: float
    applied: bool
    tail_exception: bool = False


def _weighted_quantiles(values_sorted, weights_sorted, probs) -> np.ndarray:
    cum = np.cumsum(weights_sorted)
    total = cum[-1]
    if total <= 0:
        return np.array([np.nan for _ in probs])
    return np.interp(np.asarray(probs) * total, cum, values_sorted)


def posterior_stats(model: EmbeddingModel, prior: PriorSpec, likelihood: np.ndarray,
                    z_floor: float = 1e-10) -> SecondaryPosterior:
    """Importance-weighted posterior mean/variance of the error.

    The evidence is the sample average of prior * likelihood / sampling
    density. Below ``z_floor`` the correction is normally withheld; the
    exception is a prior mean beyond the 0.5% / 99.5% likelihood-weighted
    quantiles of the error samples, where a small evidence is expected (the
    primary filter is being told something genuinely surprising) and the
    correction goes through. The posterior variance is centered at the
    posterior mean. A likelihood that is identically zero, or an evidence of
    exactly zero in exact arithmetic, always withholds the correction.
    """
    like = np.asarray(likelihood, dtype=np.float64)
    b = model.b
    if like.shape != b.shape:
        raise ValueError("likelihood must align with the training error samples")
    if np.any(like < 0):
        raise ValueError("likelihood values must be nonnegative")
    n = b.size

    with np.errstate(divide="ignore"):
        log_like = np.log(like)
    log_prior = (-0.5 * (b - prior.mean) ** 2 / prior.var
                 - 0.5 * np.log(2.0 * np.pi * prior.var))
    log_w = log_prior + log_like - np.log(model.density_b)

    finite = np.isfinite(log_w)
    if not np.any(finite):
        return SecondaryPosterior(0.0, 0.0, 0.0, -np.inf, False)

    top = float(log_w[finite].max())
    w = np.exp(log_w - top, where=finite, out=np.zeros_like(log_w))
    w_sum = float(w.sum())
    log_z = top + np.log(w_sum) - np.log(n)
    z = float(np.exp(log_z))

    tail_exception = False
    if log_z < np.log(z_floor):
        tail_exception = _prior_in_likelihood_tail(model, prior, like)
        if not tail_exception:
            return SecondaryPosterior(0.0, 0.0, z, log_z, False)

    w /= w_sum
    mean = float(w @ b)
    var = float(w @ (b - mean) ** 2)
    return SecondaryPosterior(mean, var, z, log_z, True, tail_exception)


def _prior_in_likelihood_tail(model: EmbeddingModel, prior: PriorSpec,
                              like: np.ndarray) -> bool:
    """True when the prior mean sits beyond the 0.5%/99.5% likelihood-weighted
    quantiles of the error samples (importance weights included)."""
    order = model.b_order
    w = like[order] / model.density_b[order]
    lo, hi = _weighted_quantiles(model.b[order], w, (0.005, 0.995))
    if not (np.isfinite(lo) and np.isfinite(hi)):
        return False
    return bool(prior.mean < lo or prior.mean > hi)


# ---------------------------------------------------------------------------
# Persistence and the query table used by the CLI.

_FORMAT_VERSION = 1


def save_model(path_prefix, model: EmbeddingModel) -> None:
    prefix = str(path_prefix)
    save_basis(prefix + ".b", model.basis_b)
    save_basis(prefix + ".y", model.basis_y)
    np.savez_compressed(
        prefix + ".npz",
        format_version=np.array(_FORMAT_VERSION),
        coeff=model.coeff,
        cond_coeffs=model.cond_coeffs,
        clipped_mass=np.array(model.clipped_mass),
        b_var=np.array(model.b_var),
        b_order=model.b_order,
        meta=json.dumps(to_jsonable(model.meta), sort_keys=True),
    )


def load_model(path_prefix) -> EmbeddingModel:
    prefix = str(path_prefix)
    basis_b = load_basis(prefix + ".b")
    basis_y = load_basis(prefix + ".y")
    with np.load(prefix + ".npz") as data:
        version = int(data["format_version"])
        if version != _FORMAT_VERSION:
            raise ValueError(f"unsupported model format {version}")
        return EmbeddingModel(
            basis_b=basis_b, basis_y=basis_y, coeff=data["coeff"],
            cond_coeffs=data["cond_coeffs"], clipped_mass=float(data["clipped_mass"]),
            b_var=float(data["b_var"]), b_order=data["b_order"],
            meta=json.loads(str(data["meta"])))


def query_table(model: EmbeddingModel, y_i: float, r_var: float, prior: PriorSpec,
                z_floor: float = 1e-10) -> dict:
    """Columns for plotting one secondary-filter update: the error samples,
    prior density, likelihood, and normalized posterior weights."""
    like = likelihood_vector(model, y_i, r_var)
    post = posterior_stats(model, prior, like, z_floor)
    prior_vals = (np.exp(-0.5 * (model.b - prior.mean) ** 2 / prior.var)
                  / np.sqrt(2.0 * np.pi * prior.var))
    with np.errstate(divide="ignore"):
        log_w = (np.log(prior_vals) + np.log(like) - np.log(model.density_b))
    finite = np.isfinite(log_w)
    weights = np.zeros_like(log_w)
    if np.any(finite):
        top = log_w[finite].max()
        weights = np.exp(log_w - top, where=finite, out=weights)
        s = weights.sum()
        if s > 0:
            weights /= s
    order = model.b_order
    return {
        "b": model.b[order],
        "prior": prior_vals[order],
        "likelihood": like[order],
        "posterior_weight": weights[order],
        "summary": {
            "mean": post.mean, "var": post.var, "evidence": post.evidence,
            "log_evidence": post.log_evidence, "applied": post.applied,
            "tail_exception": post.tail_exception,
        },
    }
