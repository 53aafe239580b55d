"""Hot numeric kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports cleanly and the environment
variable ``LAYERJOULE_DISABLE_NUMBA`` is unset (or ``0``). Both paths are
always importable under explicit names so they can be compared directly.
"""
import os

import numpy as np

SQRT5 = np.sqrt(5.0)


def _flag_disabled():
    return os.environ.get("LAYERJOULE_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")


try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kw):
        if len(args) == 1 and callable(args[0]) and not kw:
            return args[0]
        return lambda f: f


USE_NUMBA = HAVE_NUMBA and not _flag_disabled()


# ---------------------------------------------------------------------------
# numpy implementations

def _sqdist_numpy(xa, xb):
    d = xa[:, None, :] - xb[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def matern52_cross_numpy(xa, xb, length_scale, signal_variance):
    r = np.sqrt(_sqdist_numpy(xa, xb)) / length_scale
    s = SQRT5 * r
    return signal_variance * (1.0 + s + s * s / 3.0) * np.exp(-s)


def rbf_cross_numpy(xa, xb, length_scale, signal_variance):
    return signal_variance * np.exp(-0.5 * _sqdist_numpy(xa, xb) / length_scale**2)


def dot_cross_numpy(xa, xb, sigma0_sq):
    return xa @ xb.T + sigma0_sq


def net_energy_numpy(t, p, standby):
    dt = np.empty_like(t)
    dt[:-1] = np.diff(t)
    dt[-1] = dt[-2]
    return float(np.sum(np.maximum(p - standby, 0.0) * dt))


# ---------------------------------------------------------------------------
# numba implementations

@njit(cache=True)
def matern52_cross_numba(xa, xb, length_scale, signal_variance):
    n, m, d = xa.shape[0], xb.shape[0], xa.shape[1]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(d):
                diff = xa[i, k] - xb[j, k]
                acc += diff * diff
            s = SQRT5 * np.sqrt(acc) / length_scale
            out[i, j] = signal_variance * (1.0 + s + s * s / 3.0) * np.exp(-s)
    return out


@njit(cache=True)
def rbf_cross_numba(xa, xb, length_scale, signal_variance):
    n, m, d = xa.shape[0], xb.shape[0], xa.shape[1]
    out = np.empty((n, m))
    inv = 0.5 / (length_scale * length_scale)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(d):
                diff = xa[i, k] - xb[j, k]
                acc += diff * diff
            out[i, j] = signal_variance * np.exp(-acc * inv)
    return out


@njit(cache=True)
def dot_cross_numba(xa, xb, sigma0_sq):
    n, m, d = xa.shape[0], xb.shape[0], xa.shape[1]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(d):
                acc += xa[i, k] * xb[j, k]
            out[i, j] = acc + sigma0_sq
    return out


@njit(cache=True)
def net_energy_numba(t, p, standby):
    n = t.shape[0]
    total = 0.0
    dt = 0.0
    for i in range(n):
        if i < n - 1:
            dt = t[i + 1] - t[i]
        net = p[i] - standby
        if net > 0.0:
            total += net * dt
    return total


if USE_NUMBA:
    matern52_cross = matern52_cross_numba
    rbf_cross = rbf_cross_numba
    dot_cross = dot_cross_numba
    net_energy = net_energy_numba
else:
    matern52_cross = matern52_cross_numpy
    rbf_cross = rbf_cross_numpy
    dot_cross = dot_cross_numpy
    net_energy = net_energy_numpy
