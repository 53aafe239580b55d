"""Exact Gaussian-process regression over channel coordinates.

Inputs are normalised to [0, 1] per axis using the channel bounds and
targets are standardised before fitting. Hyperparameters are chosen by
maximising the log marginal likelihood over a small deterministic grid;
the signal variance is profiled out in closed form.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from . import _accel
from .model_ir import LayerKey

LENGTH_SCALE_GRID = (0.05, 0.1, 0.2, 0.4, 0.8, 1.6, 3.2, 6.4)
NOISE_RATIO_GRID = (1e-6, 1e-4, 1e-2, 0.05)
DOT_SIGMA0_GRID = (0.01, 0.1, 1.0, 10.0)
JITTER_START = 1e-10
JITTER_MAX = 1e-4
LOG_2PI = math.log(2.0 * math.pi)


class GpError(ValueError):
    pass


class SingularCovarianceError(GpError):
    pass


class OutOfBoundsError(GpError):
    pass


class KernelFamily(str, Enum):
    Matern25 = "Matern25"
    Rbf = "Rbf"
    DotProduct = "DotProduct"


@dataclass(frozen=True)
class KernelSpec:
    family: KernelFamily = KernelFamily.Matern25
    length_scale: float = 1.0
    signal_variance: float = 1.0
    sigma0_sq: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily(self.family))
        if self.family is not KernelFamily.DotProduct and not self.length_scale > 0:
            raise GpError("length_scale must be positive")
        if not self.signal_variance > 0:
            raise GpError("signal_variance must be positive")
        if self.sigma0_sq < 0:
            raise GpError("sigma0_sq must be non-negative")


def _as_points(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(-1, 1)
    return np.ascontiguousarray(a)


def gram(spec: KernelSpec, xa, xb=None) -> np.ndarray:
    """Covariance matrix between two point sets (rows are points)."""
    a = _as_points(xa)
    b = a if xb is None else _as_points(xb)
    if a.shape[1] != b.shape[1]:
        raise GpError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if spec.family is KernelFamily.Matern25:
        return _accel.matern52_cross(a, b, float(spec.length_scale), float(spec.signal_variance))
    if spec.family is KernelFamily.Rbf:
        return _accel.rbf_cross(a, b, float(spec.length_scale), float(spec.signal_variance))
    return spec.signal_variance * _accel.dot_cross(a, b, float(spec.sigma0_sq))


def kernel_eval(spec: KernelSpec, x1, x2) -> float:
    a = np.atleast_1d(np.asarray(x1, dtype=np.float64))
    b = np.atleast_1d(np.asarray(x2, dtype=np.float64))
    if a.shape != b.shape:
        raise GpError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(gram(spec, a.reshape(1, -1), b.reshape(1, -1))[0, 0])


def matern52(r, length_scale=1.0, signal_variance=1.0):
    """Matérn nu=5/2 as a function of distance."""
    s = np.sqrt(5.0) * np.asarray(r, dtype=np.float64) / length_scale
    return signal_variance * (1.0 + s + s * s / 3.0) * np.exp(-s)


def cholesky_with_jitter(K: np.ndarray, scale: float = 1.0):
    """Lower Cholesky factor of K, escalating diagonal jitter on failure.

    Returns ``(L, jitter)`` where ``jitter`` is the absolute amount added.
    """
    n = K.shape[0]
    jitter = JITTER_START
    eye = np.eye(n)
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + jitter * scale * eye), jitter * scale
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise SingularCovarianceError("covariance is singular even after jitter escalation")


def _lml_from_factor(L, alpha, y) -> float:
    n = y.shape[0]
    return float(-0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * LOG_2PI)


def log_marginal_likelihood(K, y, noise_variance=0.0) -> float:
    """log N(y | 0, K + noise_variance I)."""
    K = np.atleast_2d(np.asarray(K, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    try:
        L = np.linalg.cholesky(K + noise_variance * np.eye(K.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError("factorization failed") from exc
    alpha = cho_solve((L, True), y)
    return _lml_from_factor(L, alpha, y)


@dataclass(frozen=True)
class GpSurface:
    key: Optional[LayerKey]
    kernel: KernelSpec
    noise_variance: float
    x_bounds: tuple
    raw_x: np.ndarray = field(repr=False)
    raw_y: np.ndarray = field(repr=False)
    y_mean: float = 0.0
    y_std: float = 1.0
    jitter: float = 0.0
    train_x: np.ndarray = field(repr=False, default=None)
    train_y: np.ndarray = field(repr=False, default=None)
    factor: np.ndarray = field(repr=False, default=None)
    alpha: np.ndarray = field(repr=False, default=None)

    @property
    def ndim(self) -> int:
        return len(self.x_bounds)

    @property
    def signal_variance(self) -> float:
        """Prior variance in output units."""
        return self.kernel.signal_variance * self.y_std**2

    def normalize(self, x) -> np.ndarray:
        x = _as_points(x)
        if x.shape[1] != self.ndim:
            raise GpError(f"expected {self.ndim}-d coordinates, got {x.shape[1]}-d")
        lo = np.array([b[0] for b in self.x_bounds], dtype=np.float64)
        hi = np.array([b[1] for b in self.x_bounds], dtype=np.float64)
        span = np.where(hi > lo, hi - lo, 1.0)
        return (x - lo) / span

    def check_bounds(self, x) -> np.ndarray:
        x = _as_points(x)
        for axis, (lo, hi) in enumerate(self.x_bounds):
            col = x[:, axis]
            if np.any(col < lo) or np.any(col > hi):
                raise OutOfBoundsError(f"query outside bounds {self.x_bounds} on axis {axis}")
        return x

    def predict_many(self, x, return_var=True):
        """Posterior mean and latent variance at many raw coordinates."""
        x = self.check_bounds(x)
        z = self.normalize(x)
        ks = gram(self.kernel, self.train_x, z)
        mean = ks.T @ self.alpha
        mean = self.y_mean + self.y_std * mean
        if not return_var:
            return mean
        v = solve_triangular(self.factor, ks, lower=True, check_finite=False)
        if self.kernel.family is KernelFamily.DotProduct:
            prior = self.kernel.signal_variance * (np.einsum("ij,ij->i", z, z) + self.kernel.sigma0_sq)
        else:
            prior = np.full(z.shape[0], self.kernel.signal_variance)
        var = np.maximum(prior - np.einsum("ij,ij->j", v, v), 0.0)
        return mean, var * self.y_std**2

    def predict(self, x):
        mean, var = self.predict_many(np.atleast_1d(np.asarray(x, dtype=np.float64)).reshape(1, -1))
        return float(mean[0]), float(var[0])

    def mean(self, x) -> float:
        return float(self.predict_many(np.atleast_1d(np.asarray(x, dtype=np.float64)).reshape(1, -1),
                                       return_var=False)[0])

    def log_marginal_likelihood(self) -> float:
        return _lml_from_factor(self.factor, self.alpha, self.train_y)

    def covariance(self) -> np.ndarray:
        return gram(self.kernel, self.train_x)

    # -- persistence ---------------------------------------------------------

    def to_dict(self) -> dict:
        k = self.kernel
        return {
            "key": None if self.key is None else self.key.to_str(),
            "kernel": {
                "family": k.family.value,
                "length_scale": k.length_scale,
                "signal_variance": k.signal_variance,
                "sigma0_sq": k.sigma0_sq,
            },
            "noise_variance": self.noise_variance,
            "jitter": self.jitter,
            "x_bounds": [list(b) for b in self.x_bounds],
            "y_mean": self.y_mean,
            "y_std": self.y_std,
            "train": [[list(map(float, x)), float(y)] for x, y in zip(self.raw_x, self.raw_y)],
        }

    @classmethod
    def from_dict(cls, d) -> "GpSurface":
        key = None if d.get("key") is None else LayerKey.from_str(d["key"])
        kernel = KernelSpec(**d["kernel"])
        raw_x = np.array([p[0] for p in d["train"]], dtype=np.float64)
        raw_y = np.array([p[1] for p in d["train"]], dtype=np.float64)
        surf = _assemble(key, kernel, float(d["noise_variance"]), tuple(tuple(b) for b in d["x_bounds"]),
                         raw_x, raw_y, float(d["y_mean"]), float(d["y_std"]), jitter=float(d.get("jitter", 0.0)))
        K = surf.covariance() + (surf.noise_variance + surf.jitter) * np.eye(len(raw_y))
        resid = np.linalg.norm(surf.factor @ surf.factor.T - K) / np.linalg.norm(K)
        if resid > 1e-8:
            raise GpError(f"stored surface does not refactorize at its noise level (rel err {resid:.2e})")
        return surf

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "GpSurface":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _assemble(key, kernel, noise, bounds, raw_x, raw_y, y_mean, y_std, jitter=None) -> GpSurface:
    surf = GpSurface(key=key, kernel=kernel, noise_variance=noise, x_bounds=bounds,
                     raw_x=raw_x, raw_y=raw_y, y_mean=y_mean, y_std=y_std)
    tx = surf.normalize(raw_x)
    ty = (raw_y - y_mean) / y_std
    K = gram(kernel, tx) + noise * np.eye(len(ty))
    if jitter is None:
        L, jitter = cholesky_with_jitter(K, kernel.signal_variance)
    else:
        try:
            L = np.linalg.cholesky(K + jitter * np.eye(len(ty)))
        except np.linalg.LinAlgError as exc:
            raise SingularCovarianceError("stored surface failed to factorize") from exc
    alpha = cho_solve((L, True), ty)
    return replace(surf, jitter=jitter, train_x=tx, train_y=ty, factor=L, alpha=alpha)


def _check_duplicates(tx, ty, noise):
    _, inverse, counts = np.unique(tx, axis=0, return_inverse=True, return_counts=True)
    if np.all(counts == 1):
        return
    inverse = np.asarray(inverse).ravel()
    tol = 6.0 * math.sqrt(2.0 * max(noise, 0.0)) + 1e-6
    for g in np.flatnonzero(counts > 1):
        ys = ty[inverse == g]
        if ys.max() - ys.min() > tol:
            raise SingularCovarianceError(
                "duplicated coordinates carry inconsistent values beyond the noise level"
            )


def fit(key, coords, values, family=KernelFamily.Matern25, bounds=None, *,
        length_scale=None, noise_ratio=None, signal_variance=None, sigma0_sq=None) -> GpSurface:
    """Fit a GP surface to ``(coords, values)``.

    ``bounds`` gives per-axis (lo, hi) channel limits used for normalisation;
    it defaults to the data extent. Any of ``length_scale`` (normalised
    units), ``noise_ratio`` (noise variance relative to signal variance) and
    ``signal_variance`` (standardised units) may be pinned; the rest are
    selected by marginal likelihood.
    """
    family = KernelFamily(family)
    raw_x = _as_points(coords)
    raw_y = np.asarray(values, dtype=np.float64).ravel()
    if raw_x.shape[0] != raw_y.shape[0]:
        raise GpError("coords and values differ in length")
    if raw_y.shape[0] < 2:
        raise GpError("need at least 2 samples to fit")
    if bounds is None:
        bounds = tuple((float(lo), float(hi)) for lo, hi in zip(raw_x.min(axis=0), raw_x.max(axis=0)))
    bounds = tuple((b[0], b[1]) for b in bounds)
    if len(bounds) != raw_x.shape[1]:
        raise GpError("bounds dimensionality does not match coordinates")
    for axis, (lo, hi) in enumerate(bounds):
        if np.any(raw_x[:, axis] < lo) or np.any(raw_x[:, axis] > hi):
            raise OutOfBoundsError(f"training coordinates outside bounds on axis {axis}")

    y_mean = float(raw_y.mean())
    y_std = float(raw_y.std())
    if not y_std > 0:
        y_std = 1.0
    probe = GpSurface(key=key, kernel=KernelSpec(), noise_variance=0.0, x_bounds=bounds,
                      raw_x=raw_x, raw_y=raw_y)
    tx = probe.normalize(raw_x)
    ty = (raw_y - y_mean) / y_std
    n = len(ty)
    eye = np.eye(n)

    if family is KernelFamily.DotProduct:
        shape_grid = [dict(sigma0_sq=s) for s in ((sigma0_sq,) if sigma0_sq is not None else DOT_SIGMA0_GRID)]
    else:
        shape_grid = [dict(length_scale=l) for l in ((length_scale,) if length_scale is not None else LENGTH_SCALE_GRID)]
    ratios = (noise_ratio,) if noise_ratio is not None else NOISE_RATIO_GRID

    best = None
    for shape in shape_grid:
        unit = KernelSpec(family=family, signal_variance=1.0, **shape)
        K0 = gram(unit, tx)
        for lam in ratios:
            try:
                L, jit = cholesky_with_jitter(K0 + lam * eye)
            except SingularCovarianceError:
                continue
            alpha = cho_solve((L, True), ty)
            if signal_variance is None:
                s = max(float(ty @ alpha) / n, 1e-12)
            else:
                s = float(signal_variance)
            # lml of s * (K0 + (lam + jit) I)
            lml = (-0.5 * float(ty @ alpha) / s - float(np.sum(np.log(np.diag(L))))
                   - 0.5 * n * math.log(s) - 0.5 * n * LOG_2PI)
            if best is None or lml > best[0] + 1e-12:
                best = (lml, unit, lam, s, jit)
    if best is None:
        raise SingularCovarianceError("no hyperparameter setting gave a factorizable covariance")
    _, unit, lam, s, jit = best
    kernel = replace(unit, signal_variance=s)
    noise = lam * s
    # jitter is numerical hygiene, not a noise model: only fitted noise excuses disagreement
    _check_duplicates(tx, ty, noise)
    return _assemble(key, kernel, noise, bounds, raw_x, raw_y, y_mean, y_std)
