"""Simplified satellite radiative transfer for the single-column testbed.

Each channel sees the column through an exponentially decaying absorption
profile whose strength is set so the clear-sky weighting function peaks at a
prescribed height. Radiances combine the boundary-layer contribution, the
vertically integrated temperature anomaly weighted by the transmission
derivative, and opaque cloud decks at the congestus and deep cloud tops.

All vertical integrals use a trapezoid rule in the transmission measure on a
uniform height grid: sum of 0.5*(T_i + T_{i+1}) * (Tnu_{i+1} - Tnu_i). That
choice telescopes exactly for constant T, which keeps the isothermal and
weighting-normalization identities exact up to the domain truncation. Grids
always contain the cloud-top heights as nodes, and the nominally infinite
upper limit is truncated where the transmission is within 1e-10 of its
asymptote (ten absorption scale heights above the tropopause).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import accel
from ._util import write_csv
from .dynamics import temperature_profile

__all__ = [
    "Channel",
    "RtmConfig",
    "default_channels",
    "rescale_humidity",
    "transmission",
    "weighting_function",
    "brightness_clear",
    "brightness_cloudy",
    "brightness_one_cloud",
    "channel_table_csv",
]


@dataclass(frozen=True)
class Channel:
    """One radiance channel: weighting peak height and absorption scale."""

    z_max: float
    alpha_star: float
    h_scale: float = 3.0

    def __post_init__(self):
        if self.z_max < 0 or self.h_scale <= 0:
            raise ValueError("z_max must be >= 0 and h_scale > 0")
        expected = math.exp(self.z_max / self.h_scale) / self.h_scale
        if not math.isclose(self.alpha_star, expected, rel_tol=1e-12):
            raise ValueError(
                f"alpha_star {self.alpha_star!r} inconsistent with peak height "
                f"{self.z_max!r} (expected {expected!r})")

    @classmethod
    def for_peak(cls, z_max: float, h_scale: float = 3.0) -> "Channel":
        """Channel whose clear-sky weighting function peaks at z_max (for unit humidity)."""
        return cls(z_max=z_max, alpha_star=math.exp(z_max / h_scale) / h_scale, h_scale=h_scale)


def default_channels(n: int = 16, h_scale: float = 3.0) -> tuple[Channel, ...]:
    """Channels peaking at 1..n km."""
    return tuple(Channel.for_peak(float(k), h_scale) for k in range(1, n + 1))


@dataclass(frozen=True)
class RtmConfig:
    channels: tuple = field(default_factory=default_channels)
    z_trop: float = 16.0          # temperature anomaly vanishes above this height
    z_congestus: float = 3.0      # congestus cloud top
    z_deep: float = 12.0          # deep / stratiform cloud top
    humidity_lo: float = -1.0     # climatological humidity range, set per run
    humidity_hi: float = 1.0
    dz: float = 0.05              # quadrature step (km)
    trunc_scales: float = 10.0    # upper truncation: z_trop + trunc_scales * h_scale

    def __post_init__(self):
        if self.dz <= 0:
            raise ValueError(f"quadrature step must be positive, got {self.dz}")
        if self.humidity_hi <= self.humidity_lo:
            raise ValueError("humidity bounds need hi > lo")
        if not (0 <= self.z_congestus <= self.z_deep <= self.z_trop):
            raise ValueError("cloud tops must satisfy 0 <= z_congestus <= z_deep <= z_trop")
        if len(self.channels) == 0:
            raise ValueError("at least one channel is required")

    @property
    def z_top(self) -> float:
        h = max(ch.h_scale for ch in self.channels)
        return self.z_trop + self.trunc_scales * h


def rescale_humidity(q, lo: float, hi: float):
    """Map humidity to the positive band [1, 2] used by the absorption profile."""
    if hi <= lo:
        raise ValueError("humidity bounds need hi > lo")
    q = np.asarray(q, dtype=np.float64)
    return np.clip((q - lo) / (hi - lo) + 1.0, 1.0, 2.0)


def transmission(z, ch: Channel, q_tilde):
    """Fraction of radiance emitted at height z that reaches the satellite."""
    z = np.asarray(z, dtype=np.float64)
    q_tilde = np.asarray(q_tilde, dtype=np.float64)
    alpha = ch.alpha_star * q_tilde * np.exp(-z / ch.h_scale)
    return np.exp(-alpha * ch.h_scale)


def weighting_function(z, ch: Channel, q_tilde):
    """d(transmission)/dz: the vertical sensitivity profile of the channel."""
    z = np.asarray(z, dtype=np.float64)
    q_tilde = np.asarray(q_tilde, dtype=np.float64)
    alpha = ch.alpha_star * q_tilde * np.exp(-z / ch.h_scale)
    return alpha * np.exp(-alpha * ch.h_scale)


# ---------------------------------------------------------------------------
# Quadrature grid shared by all radiance evaluations.


def _grid(cfg: RtmConfig) -> tuple[np.ndarray, int, int]:
    """Uniform-per-segment grid over [0, z_top] with exact cloud-top nodes.

    Returns (nodes, index of z_congestus, index of z_deep).
    """
    breaks = [0.0, cfg.z_congestus, cfg.z_deep, cfg.z_top]
    segs = []
    for a, b in zip(breaks[:-1], breaks[1:]):
        if b > a:
            n = max(2, int(math.ceil((b - a) / cfg.dz)) + 1)
            segs.append(np.linspace(a, b, n))
    nodes = segs[0]
    for s in segs[1:]:
        nodes = np.concatenate([nodes, s[1:]])
    i_zc = int(np.searchsorted(nodes, cfg.z_congestus))
    i_zd = int(np.searchsorted(nodes, cfg.z_deep))
    return nodes, i_zc, i_zd


def _profile_on_grid(theta1, theta2, nodes, cfg: RtmConfig) -> np.ndarray:
    """(B, nz) temperature anomaly at the nodes, zero above the tropopause."""
    below = nodes <= cfg.z_trop
    prof = np.zeros((theta1.shape[0], nodes.shape[0]))
    prof[:, below] = (theta1[:, None] * np.sin(np.pi * nodes[below] / cfg.z_trop)
                      + 2.0 * theta2[:, None] * np.sin(2.0 * np.pi * nodes[below] / cfg.z_trop))
    return prof


def _split_state(x):
    """Accept (..., 4) thermo-only or (..., 7) full column state arrays."""
    arr = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if arr.shape[-1] not in (4, 7):
        raise ValueError(f"expected 4 or 7 state variables, got {arr.shape[-1]}")
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]


def _stieltjes(t_mid_nodes: np.ndarray, tnu: np.ndarray) -> np.ndarray:
    """sum 0.5*(T_i + T_{i+1})*(Tnu_{i+1} - Tnu_i) along the last axis."""
    tmid = 0.5 * (t_mid_nodes[..., :-1] + t_mid_nodes[..., 1:])
    return (tmid * np.diff(tnu, axis=-1)).sum(axis=-1)


def brightness_clear(x, cfg: RtmConfig) -> np.ndarray:
    """Clear-sky radiances. ``x`` is (4,), (7,), or a batch; returns (..., n_ch).

    h = theta_eb * Tnu(0) + integral of T(z) dTnu over the column.
    """
    theta1, theta2, theta_eb, q = _split_state(x)
    qt = rescale_humidity(q, cfg.humidity_lo, cfg.humidity_hi)
    nodes, _, _ = _grid(cfg)
    prof = _profile_on_grid(theta1, theta2, nodes, cfg)
    out = np.empty((theta1.shape[0], len(cfg.channels)))
    for c, ch in enumerate(cfg.channels):
        tnu = transmission(nodes[None, :], ch, qt[:, None])
        out[:, c] = theta_eb * tnu[:, 0] + _stieltjes(prof, tnu)
    return out[0] if np.asarray(x).ndim == 1 else out


def brightness_cloudy(x, fractions, cfg: RtmConfig) -> np.ndarray:
    """Radiances under partial congestus/deep/stratiform cloud cover.

    Congestus decks radiate from the congestus top; deep and stratiform decks
    both radiate from the deep cloud top. Fractions screen the layers below
    them. ``fractions`` is (..., 3) aligned with ``x`` of shape (..., 4|7);
    returns (..., n_ch).
    """
    theta1, theta2, theta_eb, q = _split_state(x)
    f = np.atleast_2d(np.asarray(fractions, dtype=np.float64))
    if f.shape[-1] != 3:
        raise ValueError(f"fractions must have 3 components, got {f.shape[-1]}")
    if f.shape[0] != theta1.shape[0]:
        raise ValueError("state and fraction batches disagree")
    if np.any(f < 0) or np.any(f > 1) or np.any(f.sum(axis=-1) > 1.0 + 1e-12):
        raise ValueError("fractions must lie in [0,1] with sum <= 1")
    qt = rescale_humidity(q, cfg.humidity_lo, cfg.humidity_hi)
    nodes, i_zc, i_zd = _grid(cfg)
    prof = _profile_on_grid(theta1, theta2, nodes, cfg)
    alpha_stars = np.array([ch.alpha_star for ch in cfg.channels])
    h_scales = {ch.h_scale for ch in cfg.channels}
    if len(h_scales) == 1:
        out = accel.radiance_batch(theta_eb, qt, f[:, 0], f[:, 1], f[:, 2],
                                   nodes, prof, i_zc, i_zd, alpha_stars, h_scales.pop())
    else:  # mixed scale heights: per-channel fallback, numpy path
        out = np.empty((theta1.shape[0], len(cfg.channels)))
        for c, ch in enumerate(cfg.channels):
            col = accel.numpy_impl["radiance_batch"](
                theta_eb, qt, f[:, 0], f[:, 1], f[:, 2], nodes, prof, i_zc, i_zd,
                np.array([ch.alpha_star]), ch.h_scale)
            out[:, c] = col[:, 0]
    return out[0] if np.asarray(x).ndim == 1 else out


def brightness_one_cloud(x, cover: float, z_cloud: float, cfg: RtmConfig) -> np.ndarray:
    """Reference single-deck radiances: one opaque cloud of cover ``cover``
    topping at ``z_cloud``. Used for cross-checks of the two-deck formula."""
    if not (0.0 <= cover <= 1.0):
        raise ValueError("cover must lie in [0, 1]")
    if not (0.0 <= z_cloud <= cfg.z_top):
        raise ValueError("cloud top out of range")
    theta1, theta2, theta_eb, q = _split_state(x)
    qt = rescale_humidity(q, cfg.humidity_lo, cfg.humidity_hi)
    nodes, _, _ = _grid(cfg)
    if z_cloud not in nodes:  # keep the deck boundary an exact node
        nodes = np.sort(np.append(nodes, z_cloud))
    i_cl = int(np.searchsorted(nodes, z_cloud))
    prof = _profile_on_grid(theta1, theta2, nodes, cfg)
    out = np.empty((theta1.shape[0], len(cfg.channels)))
    for c, ch in enumerate(cfg.channels):
        tnu = transmission(nodes[None, :], ch, qt[:, None])
        below = _stieltjes(prof[:, :i_cl + 1], tnu[:, :i_cl + 1])
        above = _stieltjes(prof[:, i_cl:], tnu[:, i_cl:])
        out[:, c] = ((1.0 - cover) * (theta_eb * tnu[:, 0] + below)
                     + cover * prof[:, i_cl] * tnu[:, i_cl] + above)
    return out[0] if np.asarray(x).ndim == 1 else out


def channel_table_csv(cfg: RtmConfig, path) -> None:
    """Write the channel constants (peak height, absorption scale) to CSV."""
    rows = [(ch.z_max, ch.alpha_star, ch.h_scale) for ch in cfg.channels]
    write_csv(path, ["z_max", "alpha_star", "h_scale"], rows)
