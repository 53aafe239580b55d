"""Energy-measurement backends and power-trace accounting."""
from __future__ import annotations

import csv
import json
import math
import os
import re
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _accel
from .model_ir import LayerKey, ModelSpec, Role, serialize_model


class MeasurementError(RuntimeError):
    pass


class TraceError(ValueError):
    pass


# ---------------------------------------------------------------------------
# power traces

@dataclass(frozen=True)
class PowerTrace:
    t: np.ndarray
    p: np.ndarray
    standby_power: float = 0.0
    iterations: int = 1

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        p = np.asarray(self.p, dtype=np.float64)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "p", p)
        if t.shape != p.shape or t.ndim != 1:
            raise TraceError("time and power columns must be 1-d and equal length")
        if t.size < 2:
            raise TraceError("a trace needs at least 2 samples")
        if np.any(np.diff(t) <= 0):
            raise TraceError("timestamps must be strictly increasing")
        if np.any(p < 0) or self.standby_power < 0:
            raise TraceError("power values must be non-negative")
        if self.iterations < 1:
            raise TraceError("iterations must be >= 1")

    @property
    def duration(self) -> float:
        """Covered time, closing the last sample with its predecessor's interval."""
        return float(self.t[-1] - self.t[0] + (self.t[-1] - self.t[-2]))


def integrate_trace(trace: PowerTrace) -> float:
    """Net joules per iteration of a sampled power trace.

    Left Riemann sum of (p - standby) clamped at zero; the last sample
    reuses the preceding sampling interval.
    """
    return _accel.net_energy(trace.t, trace.p, float(trace.standby_power)) / trace.iterations


def read_trace_csv(path, standby_power=0.0, iterations=1) -> PowerTrace:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["t_s", "p_w"]:
            raise TraceError(f"{path}: expected header 't_s,p_w', got {','.join(header)!r}")
        rows = [(float(r[0]), float(r[1])) for r in reader if r and any(c.strip() for c in r)]
    arr = np.array(rows, dtype=np.float64).reshape(-1, 2)
    return PowerTrace(arr[:, 0], arr[:, 1], standby_power=standby_power, iterations=iterations)


def write_trace_csv(path, trace: PowerTrace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s", "p_w"])
        for t, p in zip(trace.t, trace.p):
            w.writerow([repr(float(t)), repr(float(p))])


# ---------------------------------------------------------------------------
# samples

@dataclass(frozen=True)
class EnergySample:
    key: Optional[str]  # serialized LayerKey, or a free-form variant tag
    coordinate: tuple
    joules_per_iter: float
    seconds_per_iter: float
    repeats: int = 1
    spread: float = 0.0
    variant: str = ""
    flops: float = 0.0

    def __post_init__(self):
        if self.joules_per_iter < 0 or self.seconds_per_iter < 0:
            raise MeasurementError("energy and time per iteration must be non-negative")
        if self.repeats < 1:
            raise MeasurementError("repeats must be >= 1")

    def to_dict(self) -> dict:
        return {
            "key": self.key,
            "coordinate": list(self.coordinate),
            "joules_per_iter": self.joules_per_iter,
            "seconds_per_iter": self.seconds_per_iter,
            "repeats": self.repeats,
            "spread": self.spread,
            "variant": self.variant,
            "flops": self.flops,
        }

    @classmethod
    def from_dict(cls, d) -> "EnergySample":
        d = dict(d)
        d["coordinate"] = tuple(d.get("coordinate", ()))
        return cls(**d)


def energy_time_correlation(samples) -> float:
    """Pearson r between energy and time per iteration."""
    if len(samples) < 3:
        raise MeasurementError("need at least 3 samples for a correlation")
    e = np.array([s.joules_per_iter for s in samples])
    t = np.array([s.seconds_per_iter for s in samples])
    if np.ptp(e) == 0 or np.ptp(t) == 0:
        raise MeasurementError("degenerate variance in energy or time")
    return float(np.corrcoef(e, t)[0, 1])


# ---------------------------------------------------------------------------
# simulated device

AXES = ("in", "out")


def _default_axis(role: Role) -> str:
    return "out" if role is Role.Input else "in"


@dataclass(frozen=True)
class Affine:
    a: float = 0.0
    b: float = 0.0
    d: float = 0.0

    def __call__(self, cin, cout, role):
        return self.a + self.b * cin + self.d * cout


@dataclass(frozen=True)
class SoftPlateau:
    height: float
    threshold: float
    steepness: float
    axis: Optional[str] = None

    def __call__(self, cin, cout, role):
        c = cin if (self.axis or _default_axis(role)) == "in" else cout
        z = self.steepness * (c - self.threshold)
        return self.height / (1.0 + math.exp(-z)) if z > -700 else 0.0


@dataclass(frozen=True)
class Ridge:
    amplitude: float
    center: float
    width: float
    axis: Optional[str] = None

    def __call__(self, cin, cout, role):
        c = cin if (self.axis or _default_axis(role)) == "in" else cout
        return self.amplitude * math.exp(-0.5 * ((c - self.center) / self.width) ** 2)


@dataclass(frozen=True)
class TileStep:
    quantum: int
    cost: float
    axis: Optional[str] = None

    def __call__(self, cin, cout, role):
        c = cin if (self.axis or _default_axis(role)) == "in" else cout
        return self.cost * math.ceil(c / self.quantum)


PRIMITIVES = {"affine": Affine, "soft_plateau": SoftPlateau, "ridge": Ridge, "tile_step": TileStep}
_PRIMITIVE_NAMES = {v: k for k, v in PRIMITIVES.items()}
_NONNEG = {"affine": ("a", "b", "d"), "soft_plateau": ("height",), "ridge": ("amplitude",),
           "tile_step": ("cost",)}


def primitive_from_dict(d):
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in PRIMITIVES:
        raise MeasurementError(f"unknown primitive type {kind!r}")
    for k in _NONNEG[kind]:
        if d.get(k, 0.0) < 0:
            raise MeasurementError(f"{kind}.{k} must be non-negative")
    if d.get("axis") not in (None,) + AXES:
        raise MeasurementError(f"axis must be one of {AXES}")
    if kind == "ridge" and not d.get("width", 0) > 0:
        raise MeasurementError("ridge width must be positive")
    if kind == "tile_step" and not d.get("quantum", 0) >= 1:
        raise MeasurementError("tile_step quantum must be >= 1")
    return PRIMITIVES[kind](**d)


def primitive_to_dict(p) -> dict:
    d = {"type": _PRIMITIVE_NAMES[type(p)]}
    d.update({k: v for k, v in p.__dict__.items() if v is not None})
    return d


@dataclass(frozen=True)
class SimDeviceConfig:
    surfaces: dict  # LayerKey -> tuple of primitives
    noise_rel: float = 0.0
    avg_power_w: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise_rel <= 0.2:
            raise MeasurementError("noise_rel must lie in [0, 0.2]")
        if not self.avg_power_w > 0:
            raise MeasurementError("avg_power_w must be positive")

    def block_energy(self, block) -> float:
        prims = self.surfaces.get(block.key)
        if prims is None:
            raise MeasurementError(f"simulator has no surface for key {block.key}")
        return float(sum(p(block.in_channels, block.out_channels, block.role) for p in prims))

    def true_energy(self, model: ModelSpec) -> float:
        return sum(self.block_energy(b) for b in model.blocks)

    def to_dict(self) -> dict:
        return {
            "noise_rel": self.noise_rel,
            "avg_power_w": self.avg_power_w,
            "seed": self.seed,
            "surfaces": {k.to_str(): [primitive_to_dict(p) for p in prims]
                         for k, prims in self.surfaces.items()},
        }

    @classmethod
    def from_dict(cls, d) -> "SimDeviceConfig":
        surfaces = {LayerKey.from_str(k): tuple(primitive_from_dict(p) for p in prims)
                    for k, prims in d["surfaces"].items()}
        return cls(surfaces=surfaces, noise_rel=float(d.get("noise_rel", 0.0)),
                   avg_power_w=float(d.get("avg_power_w", 10.0)), seed=int(d.get("seed", 0)))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SimDeviceConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# backends

class Backend:
    """A measurement device. Calls are serialized through a per-backend lock."""

    def __init__(self):
        self._lock = threading.Lock()

    def run_once(self, variant: ModelSpec, iterations: int):  # pragma: no cover - abstract
        raise NotImplementedError

    def measure(self, variant: ModelSpec, iterations: int = 500, repeats: int = 3) -> EnergySample:
        if repeats < 1:
            raise MeasurementError("repeats must be >= 1")
        with self._lock:
            runs = [self.run_once(variant, iterations) for _ in range(repeats)]
        joules = np.array([r[0] for r in runs])
        secs = np.array([r[1] for r in runs])
        mean = float(joules.mean())
        spread = float(joules.std() / mean) if mean > 0 else 0.0
        return EnergySample(key=None, coordinate=(), joules_per_iter=mean,
                            seconds_per_iter=float(secs.mean()), repeats=repeats,
                            spread=spread, variant=variant.name)


class SimulatedDevice(Backend):
    def __init__(self, config: SimDeviceConfig, seed: Optional[int] = None):
        super().__init__()
        self.config = config
        self.rng = np.random.default_rng(config.seed if seed is None else seed)

    def _eps(self) -> float:
        sigma = self.config.noise_rel
        if sigma == 0:
            return 0.0
        while True:
            z = self.rng.standard_normal()
            if abs(z) <= 3.0:
                return sigma * z

    def run_once(self, variant, iterations):
        truth = self.config.true_energy(variant)
        joules = truth * (1.0 + self._eps())
        seconds = joules / self.config.avg_power_w * (1.0 + self._eps())
        return joules, seconds


class TraceReplayBackend(Backend):
    """Replays recorded traces named ``<variant name>.csv`` from a directory.

    Repeats replay the same file, so the reported spread is zero.
    """

    def __init__(self, directory, standby_power=0.0, iterations=None):
        super().__init__()
        self.directory = str(directory)
        self.standby_power = float(standby_power)
        self.iterations = iterations

    def trace_path(self, variant: ModelSpec) -> str:
        return os.path.join(self.directory, safe_name(variant.name) + ".csv")

    def run_once(self, variant, iterations):
        path = self.trace_path(variant)
        if not os.path.exists(path):
            raise MeasurementError(f"no recorded trace for variant {variant.name!r} ({path})")
        iters = self.iterations or iterations
        try:
            trace = read_trace_csv(path, self.standby_power, iters)
        except (TraceError, ValueError) as exc:
            raise MeasurementError(str(exc)) from exc
        return integrate_trace(trace), trace.duration / iters


_RESPONSE = re.compile(r"^\s*joules=(\S+)\s+seconds=(\S+)\s*$")


def parse_command_response(text: str):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) != 1:
        raise MeasurementError(f"expected a single response line, got {len(lines)}")
    m = _RESPONSE.match(lines[0])
    if not m:
        raise MeasurementError(f"unparseable response {lines[0]!r}")
    try:
        joules, seconds = float(m.group(1)), float(m.group(2))
    except ValueError as exc:
        raise MeasurementError(f"unparseable response {lines[0]!r}") from exc
    if not (math.isfinite(joules) and math.isfinite(seconds)) or joules < 0 or seconds < 0:
        raise MeasurementError(f"invalid measurement {lines[0]!r}")
    return joules, seconds


class CommandBackend(Backend):
    """Runs an external command per measurement.

    The variant model document is written to stdin; the command must print
    ``joules=<float> seconds=<float>`` (per iteration) and exit 0.
    """

    def __init__(self, command, timeout=None):
        super().__init__()
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.argv:
            raise MeasurementError("empty command")
        self.timeout = timeout

    def run_once(self, variant, iterations):
        env = dict(os.environ, LAYERJOULE_ITERATIONS=str(iterations))
        try:
            proc = subprocess.run(self.argv, input=serialize_model(variant), capture_output=True,
                                  text=True, timeout=self.timeout, env=env)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise MeasurementError(f"measurement command failed: {exc}") from exc
        if proc.returncode != 0:
            raise MeasurementError(
                f"measurement command exited {proc.returncode}: {proc.stderr.strip()[:200]}"
            )
        return parse_command_response(proc.stdout)


def measure(backend: Backend, variant: ModelSpec, iterations: int = 500, repeats: int = 3) -> EnergySample:
    return backend.measure(variant, iterations, repeats)


def safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=-]+", "_", name)


def make_backend(descriptor: str, *, seed=None, standby_power=0.0, trace_iterations=None) -> Backend:
    """Build a backend from ``sim:<config>``, ``trace:<dir>`` or ``cmd:<command>``."""
    kind, sep, arg = descriptor.partition(":")
    if not sep or not arg:
        raise MeasurementError(f"bad backend descriptor {descriptor!r}")
    if kind == "sim":
        return SimulatedDevice(SimDeviceConfig.load(arg), seed=seed)
    if kind == "trace":
        if not os.path.isdir(arg):
            raise MeasurementError(f"trace directory {arg!r} not found")
        return TraceReplayBackend(arg, standby_power=standby_power, iterations=trace_iterations)
    if kind == "cmd":
        return CommandBackend(arg)
    raise MeasurementError(f"unknown backend kind {kind!r}")
