"""Hot numerical kernels with a numba fast path and a pure-numpy fallback.

The active path is chosen at import time: numba is used when it imports
cleanly and the environment variable ``RKHSFILTER_NO_NUMBA`` is unset (or
"0"). Both implementations of the Lorenz-96 kernels perform the same
floating-point operations in the same order, so switching paths does not
change results. The radiance kernel differs only in reduction order and the
two paths agree to roundoff; the benchmark in benchmarks/bench_accel.py
checks both claims.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "HAS_NUMBA",
    "USE_NUMBA",
    "l96_tendency",
    "l96_advance_members",
    "l96_trajectory",
    "radiance_batch",
    "numpy_impl",
    "numba_impl",
]

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


USE_NUMBA = HAS_NUMBA and os.getenv("RKHSFILTER_NO_NUMBA", "0") != "1"


# ---------------------------------------------------------------------------
# Lorenz-96, pure numpy


def _np_l96_tendency(x: np.ndarray, forcing: float) -> np.ndarray:
    """Cyclic advection-dissipation-forcing tendency; x has shape (..., n)."""
    xp1 = np.roll(x, -1, axis=-1)
    xm1 = np.roll(x, 1, axis=-1)
    xm2 = np.roll(x, 2, axis=-1)
    return (xp1 - xm2) * xm1 - x + forcing


def _np_l96_rk4(x: np.ndarray, dt: float, forcing: float) -> np.ndarray:
    hdt = 0.5 * dt
    k1 = _np_l96_tendency(x, forcing)
    k2 = _np_l96_tendency(x + hdt * k1, forcing)
    k3 = _np_l96_tendency(x + hdt * k2, forcing)
    k4 = _np_l96_tendency(x + dt * k3, forcing)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _np_l96_advance_members(x: np.ndarray, dt: float, steps: int, forcing: float) -> np.ndarray:
    out = np.asarray(x, dtype=np.float64).copy()
    for _ in range(steps):
        out = _np_l96_rk4(out, dt, forcing)
    return out


def _np_l96_trajectory(x0: np.ndarray, dt: float, n_rec: int, thin: int, forcing: float) -> np.ndarray:
    n = x0.shape[0]
    out = np.empty((n_rec + 1, n))
    out[0] = x0
    x = np.asarray(x0, dtype=np.float64).copy()
    for t in range(1, n_rec + 1):
        for _ in range(thin):
            x = _np_l96_rk4(x, dt, forcing)
        out[t] = x
    return out


# ---------------------------------------------------------------------------
# Lorenz-96, numba. Scalar expressions mirror the numpy versions exactly.


@njit(cache=True)
def _nb_l96_tendency_into(x, forcing, out):  # pragma: no cover - jit compiled
    n = x.shape[0]
    for j in range(n):
        out[j] = (x[(j + 1) % n] - x[(j - 2) % n]) * x[(j - 1) % n] - x[j] + forcing


@njit(cache=True)
def _nb_l96_rk4_into(x, dt, forcing, k1, k2, k3, k4, tmp):  # pragma: no cover
    n = x.shape[0]
    hdt = 0.5 * dt
    _nb_l96_tendency_into(x, forcing, k1)
    for j in range(n):
        tmp[j] = x[j] + hdt * k1[j]
    _nb_l96_tendency_into(tmp, forcing, k2)
    for j in range(n):
        tmp[j] = x[j] + hdt * k2[j]
    _nb_l96_tendency_into(tmp, forcing, k3)
    for j in range(n):
        tmp[j] = x[j] + dt * k3[j]
    _nb_l96_tendency_into(tmp, forcing, k4)
    for j in range(n):
        x[j] = x[j] + (dt / 6.0) * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])


@njit(cache=True)
def _nb_l96_tendency(x, forcing):  # pragma: no cover
    flat = x.reshape(-1, x.shape[-1])
    out = np.empty_like(flat)
    for b in range(flat.shape[0]):
        _nb_l96_tendency_into(flat[b], forcing, out[b])
    return out.reshape(x.shape)


@njit(cache=True)
def _nb_l96_advance_members(x, dt, steps, forcing):  # pragma: no cover
    out = x.copy()
    k, n = out.shape
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    for m in range(k):
        row = out[m]
        for _ in range(steps):
            _nb_l96_rk4_into(row, dt, forcing, k1, k2, k3, k4, tmp)
    return out


@njit(cache=True)
def _nb_l96_trajectory(x0, dt, n_rec, thin, forcing):  # pragma: no cover
    n = x0.shape[0]
    out = np.empty((n_rec + 1, n))
    out[0] = x0
    x = x0.copy()
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    for t in range(1, n_rec + 1):
        for _ in range(thin):
            _nb_l96_rk4_into(x, dt, forcing, k1, k2, k3, k4, tmp)
        out[t] = x
    return out


def _nb_tendency_wrapper(x: np.ndarray, forcing: float) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim == 1:
        return _nb_l96_tendency(x.reshape(1, -1), forcing).reshape(-1)
    return _nb_l96_tendency(x, forcing)


def _nb_advance_wrapper(x: np.ndarray, dt: float, steps: int, forcing: float) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    out = _nb_l96_advance_members(x, dt, steps, forcing)
    return out[0] if squeeze else out


def _nb_trajectory_wrapper(x0: np.ndarray, dt: float, n_rec: int, thin: int, forcing: float) -> np.ndarray:
    return _nb_l96_trajectory(np.ascontiguousarray(x0, dtype=np.float64), dt, n_rec, thin, forcing)


# ---------------------------------------------------------------------------
# Satellite radiance quadrature kernel.
#
# Inputs: per-state column variables, the shared uniform height grid (the
# congestus and deep cloud tops are exact nodes at indices i_zc and i_zd),
# per-node temperatures (already zeroed above the tropopause), and per-channel
# absorption scales. The vertical integral of temperature against the
# transmission derivative is a trapezoid rule in the transmission measure:
# sum over layers of 0.5*(T_i + T_{i+1}) * (Tnu_{i+1} - Tnu_i).


def _np_radiance_batch(theta_eb, q_tilde, f_c, f_d, f_s,
                       z, t_profile, i_zc, i_zd, alpha_star, h_scale):
    B = theta_eb.shape[0]
    C = alpha_star.shape[0]
    out = np.empty((B, C))
    decay = np.exp(-z / h_scale) * h_scale               # (nz,)
    tmid = 0.5 * (t_profile[:, :-1] + t_profile[:, 1:])  # (B, nz-1)
    for c in range(C):
        expo = (alpha_star[c] * q_tilde)[:, None] * decay[None, :]
        tnu = np.exp(-expo)                              # (B, nz)
        seg = tmid * np.diff(tnu, axis=1)                # (B, nz-1)
        s1 = seg[:, :i_zc].sum(axis=1)
        s2 = seg[:, i_zc:i_zd].sum(axis=1)
        s3 = seg[:, i_zd:].sum(axis=1)
        clear_low = theta_eb * tnu[:, 0] + s1
        out[:, c] = ((1.0 - f_d - f_s)
                     * ((1.0 - f_c) * clear_low + f_c * t_profile[:, i_zc] * tnu[:, i_zc] + s2)
                     + (f_d + f_s) * t_profile[:, i_zd] * tnu[:, i_zd] + s3)
    return out


@njit(cache=True)
def _nb_radiance_batch(theta_eb, q_tilde, f_c, f_d, f_s,
                       z, t_profile, i_zc, i_zd, alpha_star, h_scale):  # pragma: no cover
    B = theta_eb.shape[0]
    C = alpha_star.shape[0]
    nz = z.shape[0]
    out = np.empty((B, C))
    decay = np.empty(nz)
    for i in range(nz):
        decay[i] = np.exp(-z[i] / h_scale) * h_scale
    for b in range(B):
        for c in range(C):
            a = alpha_star[c] * q_tilde[b]
            tnu_prev = np.exp(-a * decay[0])
            tnu0 = tnu_prev
            tnu_zc = tnu_prev
            tnu_zd = tnu_prev
            s1 = 0.0
            s2 = 0.0
            s3 = 0.0
            for i in range(1, nz):
                tnu = np.exp(-a * decay[i])
                piece = 0.5 * (t_profile[b, i - 1] + t_profile[b, i]) * (tnu - tnu_prev)
                if i <= i_zc:
                    s1 += piece
                elif i <= i_zd:
                    s2 += piece
                else:
                    s3 += piece
                if i == i_zc:
                    tnu_zc = tnu
                if i == i_zd:
                    tnu_zd = tnu
                tnu_prev = tnu
            clear_low = theta_eb[b] * tnu0 + s1
            out[b, c] = ((1.0 - f_d[b] - f_s[b])
                         * ((1.0 - f_c[b]) * clear_low + f_c[b] * t_profile[b, i_zc] * tnu_zc + s2)
                         + (f_d[b] + f_s[b]) * t_profile[b, i_zd] * tnu_zd + s3)
    return out


def _radiance_wrapper(kernel):
    def run(theta_eb, q_tilde, f_c, f_d, f_s, z, t_profile, i_zc, i_zd, alpha_star, h_scale):
        args = tuple(np.ascontiguousarray(a, dtype=np.float64)
                     for a in (theta_eb, q_tilde, f_c, f_d, f_s, z, t_profile))
        return kernel(*args, int(i_zc), int(i_zd),
                      np.ascontiguousarray(alpha_star, dtype=np.float64), float(h_scale))

    return run


numpy_impl = {
    "l96_tendency": _np_l96_tendency,
    "l96_advance_members": _np_l96_advance_members,
    "l96_trajectory": _np_l96_trajectory,
    "radiance_batch": _radiance_wrapper(_np_radiance_batch),
}

numba_impl = {
    "l96_tendency": _nb_tendency_wrapper,
    "l96_advance_members": _nb_advance_wrapper,
    "l96_trajectory": _nb_trajectory_wrapper,
    "radiance_batch": _radiance_wrapper(_nb_radiance_batch),
} if HAS_NUMBA else numpy_impl

_active = numba_impl if USE_NUMBA else numpy_impl

l96_tendency = _active["l96_tendency"]
l96_advance_members = _active["l96_advance_members"]
l96_trajectory = _active["l96_trajectory"]
radiance_batch = _active["radiance_batch"]
