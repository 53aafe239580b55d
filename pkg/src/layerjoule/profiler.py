"""Guided profiling: variant models, layer-cost extraction and the fit/acquire loop.

Keys are profiled in dependency order. The output layer is measured as a
one-block model; an input layer is measured in front of the output layer and
its cost is what remains after subtracting the fitted output surface; a hidden
layer sits between the two and both fitted neighbours are subtracted.
"""
from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np

from . import gp_core
from .baseline_flops import count_flops
from .gp_core import GpSurface, KernelFamily
from .measurement import Backend, EnergySample
from .model_ir import LayerKey, ModelError, ModelSpec, Role, channel_bounds, dedup_keys

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 30
DEFAULT_VARIANCE_STOP = 0.05
MAX_GRID_PER_AXIS = 64
PROFILE_ITERATIONS = 500


class PlanError(ValueError):
    pass


class ProfilingError(RuntimeError):
    """A backend failure during profiling; carries the partial results."""

    def __init__(self, message, db, surfaces):
        super().__init__(message)
        self.db = db
        self.surfaces = surfaces


class Surrogate(str, Enum):
    Energy = "energy"
    Time = "time"


class StopReason(str, Enum):
    VarianceStop = "VarianceStop"
    BudgetStop = "BudgetStop"
    GridExhausted = "GridExhausted"


@dataclass(frozen=True)
class Done:
    reason: StopReason


# ---------------------------------------------------------------------------
# grids and plans

def axis_values(lo: int, hi: int, max_points: int = MAX_GRID_PER_AXIS) -> np.ndarray:
    if hi - lo + 1 <= max_points:
        return np.arange(lo, hi + 1)
    return np.unique(np.rint(np.linspace(lo, hi, max_points)).astype(int))


def make_grid(bounds, max_points: int = MAX_GRID_PER_AXIS) -> list:
    """Lexicographically ordered integer grid over per-axis bounds."""
    axes = [axis_values(int(lo), int(hi), max_points) for lo, hi in bounds]
    return [tuple(int(v) for v in p) for p in itertools.product(*axes)]


def start_points(bounds) -> list:
    """Bound corners: lo, hi in 1-D; (lo,lo), (lo,hi), (hi,lo), (hi,hi) in 2-D."""
    corners = itertools.product(*[(int(lo), int(hi)) for lo, hi in bounds])
    seen, out = set(), []
    for c in corners:
        if c not in seen:
            seen.add(c)
            out.append(c)
    return out


def _key_of_role(model: ModelSpec, role: Role) -> Optional[LayerKey]:
    for b in model.blocks:
        if b.role is role:
            return b.key
    return None


def profiling_bounds(model: ModelSpec) -> dict:
    """Channel bounds per key, widened so every variant stays inside its neighbours' surfaces.

    Hidden variants feed the input layer with the hidden in-width and the
    output layer with the hidden out-width, and input variants feed the
    output layer, so those bounds absorb the others' upper limits.
    """
    keys = [k for k, _ in dedup_keys(model)]
    bounds = {k: channel_bounds(k, model) for k in keys}
    hidden = [k for k in keys if k.role is Role.Hidden]
    in_key = _key_of_role(model, Role.Input)
    out_key = _key_of_role(model, Role.Output)
    if in_key is not None:
        hi = max([bounds[in_key][0][1]] + [bounds[k][0][1] for k in hidden])
        bounds[in_key] = ((1, hi),)
    hi = max([bounds[out_key][0][1]]
             + ([bounds[in_key][0][1]] if in_key is not None else [])
             + [bounds[k][1][1] for k in hidden])
    bounds[out_key] = ((1, hi),)
    return bounds


@dataclass(frozen=True)
class ProfilePlan:
    keys: tuple
    grids: dict
    bounds: dict
    budget: int = DEFAULT_BUDGET
    variance_stop_frac: float = DEFAULT_VARIANCE_STOP
    surrogate: Surrogate = Surrogate.Energy
    repeats: int = 3
    iterations: int = PROFILE_ITERATIONS
    kernel: KernelFamily = KernelFamily.Matern25

    def __post_init__(self):
        object.__setattr__(self, "surrogate", Surrogate(self.surrogate))
        object.__setattr__(self, "kernel", KernelFamily(self.kernel))
        if self.budget < 2:
            raise PlanError("budget must be >= 2")
        if not 0 < self.variance_stop_frac < 1:
            raise PlanError("variance_stop_frac must lie in (0, 1)")
        roles = [k.role for k in self.keys]
        order = {Role.Output: 0, Role.Input: 1, Role.Hidden: 2}
        if [order[r] for r in roles] != sorted(order[r] for r in roles):
            raise PlanError("plan keys must be ordered Output, Input, Hidden...")


def build_plan(model: ModelSpec, budget=DEFAULT_BUDGET, variance_stop_frac=DEFAULT_VARIANCE_STOP,
               surrogate=Surrogate.Energy, max_grid=MAX_GRID_PER_AXIS, repeats=3,
               iterations=PROFILE_ITERATIONS, kernel=KernelFamily.Matern25) -> ProfilePlan:
    bounds = profiling_bounds(model)
    order = {Role.Output: 0, Role.Input: 1, Role.Hidden: 2}
    keys = sorted(bounds, key=lambda k: order[k.role])  # stable: hidden keep model order
    return ProfilePlan(
        keys=tuple(keys),
        grids={k: make_grid(bounds[k], max_grid) for k in keys},
        bounds=bounds,
        budget=budget,
        variance_stop_frac=variance_stop_frac,
        surrogate=surrogate,
        repeats=repeats,
        iterations=iterations,
        kernel=kernel,
    )


# ---------------------------------------------------------------------------
# variants and extraction

def make_variant(model: ModelSpec, key: LayerKey, coordinate, iterations=PROFILE_ITERATIONS) -> ModelSpec:
    """Minimal 1-, 2- or 3-block model isolating ``key`` at ``coordinate``.

    The input and output blocks of ``model`` serve as templates.
    """
    coordinate = tuple(int(c) for c in np.atleast_1d(coordinate))
    if len(coordinate) != key.ndim or any(c < 1 for c in coordinate):
        raise ModelError(f"bad coordinate {coordinate} for {key}")
    out_tpl = next(b for b in model.blocks if b.role is Role.Output)
    name = f"{key.slug()}@{'x'.join(map(str, coordinate))}"
    if key.role is Role.Output:
        if key != out_tpl.key:
            raise ModelError(f"{key} is not the output key of {model.name!r}")
        blocks = (out_tpl.with_channels(in_channels=coordinate[0]),)
    else:
        in_tpl = next((b for b in model.blocks if b.role is Role.Input), None)
        if in_tpl is None:
            raise ModelError(f"model {model.name!r} has no input layer")
        if key.role is Role.Input:
            if key != in_tpl.key:
                raise ModelError(f"{key} is not the input key of {model.name!r}")
            c = coordinate[0]
            blocks = (in_tpl.with_channels(out_channels=c), out_tpl.with_channels(in_channels=c))
        else:
            hid = next((b for b in model.blocks if b.key == key), None)
            if hid is None:
                raise ModelError(f"model {model.name!r} has no hidden layer with key {key}")
            cin, cout = coordinate
            blocks = (in_tpl.with_channels(out_channels=cin),
                      hid.with_channels(cin, cout),
                      out_tpl.with_channels(in_channels=cout))
    return ModelSpec(name=name, blocks=blocks, iterations=iterations, batch_size=model.batch_size)


@dataclass(frozen=True)
class LayerCost:
    coordinate: tuple
    joules_per_iter: float
    seconds_per_iter: float = 0.0
    clamped: bool = False

    def to_dict(self):
        return {"coordinate": list(self.coordinate), "joules_per_iter": self.joules_per_iter,
                "seconds_per_iter": self.seconds_per_iter, "clamped": self.clamped}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["coordinate"]), float(d["joules_per_iter"]),
                   float(d.get("seconds_per_iter", 0.0)), bool(d.get("clamped", False)))


def _subtract(role: Role, measured: float, coordinate, surfaces: dict, what: str):
    if role is Role.Output:
        return measured, False
    out = surfaces.get(Role.Output)
    if out is None:
        raise PlanError(f"{what}: output surface must be fitted before extracting {role.value} costs")
    if role is Role.Input:
        rest = out.mean([coordinate[0]])
    else:
        inp = surfaces.get(Role.Input)
        if inp is None:
            raise PlanError(f"{what}: input surface must be fitted before extracting hidden costs")
        rest = inp.mean([coordinate[0]]) + out.mean([coordinate[1]])
    value = measured - rest
    if value < 0:
        return 0.0, True
    return value, False


def extract_layer_cost(role: Role, sample: EnergySample, surfaces: dict,
                       time_surfaces: Optional[dict] = None) -> LayerCost:
    """Layer cost at ``sample.coordinate`` after removing the other layers' estimates.

    ``surfaces`` maps Role.Output / Role.Input to fitted energy surfaces.
    Negative remainders are clamped to 0 and flagged.
    """
    role = Role(role)
    coord = tuple(sample.coordinate)
    joules, clamped = _subtract(role, sample.joules_per_iter, coord, surfaces, "energy")
    seconds = sample.seconds_per_iter
    if time_surfaces is not None:
        seconds, _ = _subtract(role, sample.seconds_per_iter, coord, time_surfaces, "time")
    return LayerCost(coord, joules, seconds, clamped)


# ---------------------------------------------------------------------------
# acquisition

def next_point(surface, grid, profiled, *, budget=None, variance_stop_frac=DEFAULT_VARIANCE_STOP,
               observed_mean=None, strategy="max_variance", rng=None):
    """Next coordinate to profile, or :class:`Done`.

    ``surface`` only needs ``predict_many``. With ``strategy="random"`` the
    next point is drawn uniformly from the unprofiled grid instead of taking
    the largest posterior std; the stopping rules are identical.
    """
    if not grid:
        raise PlanError("empty grid")
    profiled = [tuple(p) for p in profiled]
    taken = set(profiled)
    if budget is not None and len(profiled) >= budget:
        return Done(StopReason.BudgetStop)
    arr = np.asarray(grid)
    bounds = [(arr[:, a].min(), arr[:, a].max()) for a in range(arr.shape[1])]
    for corner in start_points(bounds):
        if corner not in taken:
            return corner
    remaining = [g for g in grid if g not in taken]
    if not remaining:
        return Done(StopReason.GridExhausted)
    if surface is None:
        return remaining[0]
    _, var = surface.predict_many(np.asarray(remaining, dtype=np.float64))
    std = np.sqrt(var)
    top = float(std.max())
    if observed_mean is not None and top <= variance_stop_frac * observed_mean:
        return Done(StopReason.VarianceStop)
    if strategy == "random":
        if rng is None:
            raise PlanError("random strategy needs an rng")
        return remaining[int(rng.integers(len(remaining)))]
    if strategy != "max_variance":
        raise PlanError(f"unknown acquisition strategy {strategy!r}")
    idx = int(np.flatnonzero(std >= top * (1.0 - 1e-9))[0])
    return remaining[idx]


def fit_points(key, coords, values, bounds, kernel=KernelFamily.Matern25) -> GpSurface:
    coords = [tuple(c) for c in coords]
    values = list(values)
    if len(coords) == 1:
        # single admissible channel value: duplicate it so the fit is defined
        coords, values = coords * 2, values * 2
    return gp_core.fit(key, coords, values, kernel, bounds=bounds)


def acquisition_loop(measure_fn, grid, bounds, *, budget=DEFAULT_BUDGET,
                     variance_stop_frac=DEFAULT_VARIANCE_STOP, strategy="max_variance",
                     seed=0, key=None, kernel=KernelFamily.Matern25, initial=()):
    """Profile one surface: acquire, measure, refit until a stop rule fires.

    ``measure_fn(coord)`` returns ``(energy, time)`` for the layer at
    ``coord``; ``initial`` seeds previously profiled ``(coord, energy,
    time)`` triples. Returns ``(coords, energies, times, stop, surface,
    time_surface)``; the acquisition surface is the time surface when
    ``measure_fn`` is flagged with ``surrogate = "time"``.
    """
    use_time = getattr(measure_fn, "surrogate", Surrogate.Energy) == Surrogate.Time
    rng = np.random.default_rng(seed)
    coords = [tuple(c) for c, _, _ in initial]
    energies = [e for _, e, _ in initial]
    times = [t for _, _, t in initial]
    surface = time_surface = None
    if len(coords) >= 1:
        surface = fit_points(key, coords, energies, bounds, kernel)
        if use_time:
            time_surface = fit_points(key, coords, times, bounds, kernel)
    while True:
        acq = time_surface if use_time else surface
        obs = times if use_time else energies
        pt = next_point(acq, grid, coords, budget=budget, variance_stop_frac=variance_stop_frac,
                        observed_mean=float(np.mean(obs)) if obs else None,
                        strategy=strategy, rng=rng)
        if isinstance(pt, Done):
            stop = pt.reason
            break
        e, t = measure_fn(pt)
        coords.append(pt)
        energies.append(e)
        times.append(t)
        if len(coords) >= 2:
            surface = fit_points(key, coords, energies, bounds, kernel)
            if use_time:
                time_surface = fit_points(key, coords, times, bounds, kernel)
    if surface is None and coords:
        surface = fit_points(key, coords, energies, bounds, kernel)
        if use_time:
            time_surface = fit_points(key, coords, times, bounds, kernel)
    return coords, energies, times, stop, surface, time_surface


# ---------------------------------------------------------------------------
# database

@dataclass
class ProfileDb:
    raw: dict = field(default_factory=dict)      # key string -> [EnergySample]
    derived: dict = field(default_factory=dict)  # key string -> [LayerCost]
    stops: dict = field(default_factory=dict)    # key string -> StopReason value

    def add(self, key: LayerKey, sample: EnergySample, cost: LayerCost) -> None:
        self.raw.setdefault(key.to_str(), []).append(sample)
        self.derived.setdefault(key.to_str(), []).append(cost)

    def costs(self, key: LayerKey) -> list:
        return list(self.derived.get(key.to_str(), []))

    def all_samples(self) -> list:
        return [s for k in sorted(self.raw) for s in self.raw[k]]

    def clamp_count(self) -> int:
        return sum(c.clamped for costs in self.derived.values() for c in costs)

    def n_measurements(self) -> int:
        return sum(len(v) for v in self.raw.values())

    def merge(self, other: "ProfileDb") -> "ProfileDb":
        out = ProfileDb({k: list(v) for k, v in self.raw.items()},
                        {k: list(v) for k, v in self.derived.items()}, dict(self.stops))
        for k, v in other.raw.items():
            out.raw.setdefault(k, []).extend(v)
        for k, v in other.derived.items():
            out.derived.setdefault(k, []).extend(v)
        out.stops.update(other.stops)
        return out

    def to_dict(self) -> dict:
        keys = sorted(set(self.raw) | set(self.derived))
        return {"keys": {k: {"samples": [s.to_dict() for s in self.raw.get(k, [])],
                             "layer_costs": [c.to_dict() for c in self.derived.get(k, [])],
                             "stop": self.stops.get(k)} for k in keys}}

    @classmethod
    def from_dict(cls, d) -> "ProfileDb":
        db = cls()
        for k, entry in d.get("keys", {}).items():
            LayerKey.from_str(k)  # validate
            db.raw[k] = [EnergySample.from_dict(s) for s in entry.get("samples", [])]
            db.derived[k] = [LayerCost.from_dict(c) for c in entry.get("layer_costs", [])]
            if entry.get("stop") is not None:
                db.stops[k] = entry["stop"]
        return db

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ProfileDb":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class ProfileResult:
    db: ProfileDb
    surfaces: dict        # LayerKey -> GpSurface (energy)
    time_surfaces: dict   # LayerKey -> GpSurface (time surrogate only)
    stops: dict           # LayerKey -> StopReason


def _check_plan(model: ModelSpec, plan: ProfilePlan) -> None:
    needed = {k for k, _ in dedup_keys(model)}
    missing = needed - set(plan.keys)
    if missing:
        raise PlanError(f"plan does not cover keys: {sorted(k.to_str() for k in missing)}")
    for k in plan.keys:
        if k not in plan.grids or not plan.grids[k]:
            raise PlanError(f"plan has no grid for {k}")


def run_profiling(model: ModelSpec, backend: Backend, plan: ProfilePlan,
                  db: Optional[ProfileDb] = None) -> ProfileResult:
    """Profile every key of ``model`` in plan order and fit its surface.

    Points already present in ``db`` for a key are reused and count toward
    its budget.
    """
    _check_plan(model, plan)
    prior = db or ProfileDb()
    out_db = ProfileDb()
    surfaces, time_surfaces, stops = {}, {}, {}
    by_role, time_by_role = {}, {}
    use_time = plan.surrogate is Surrogate.Time

    for key in plan.keys:
        def measure_fn(coord, key=key):
            variant = make_variant(model, key, coord, iterations=plan.iterations)
            try:
                sample = backend.measure(variant, plan.iterations, plan.repeats)
            except Exception as exc:
                raise ProfilingError(f"measurement failed for {variant.name}: {exc}",
                                     out_db, dict(surfaces)) from exc
            sample = replace(sample, key=key.to_str(), coordinate=tuple(coord),
                             flops=float(count_flops(variant)))
            cost = extract_layer_cost(key.role, sample, by_role, time_by_role if use_time else None)
            out_db.add(key, sample, cost)
            return cost.joules_per_iter, cost.seconds_per_iter

        measure_fn.surrogate = plan.surrogate
        initial = [(c.coordinate, c.joules_per_iter, c.seconds_per_iter) for c in prior.costs(key)]
        for s, c in zip(prior.raw.get(key.to_str(), []), prior.costs(key)):
            out_db.add(key, s, c)
        coords, _, _, stop, surface, tsurf = acquisition_loop(
            measure_fn, plan.grids[key], plan.bounds[key], budget=plan.budget,
            variance_stop_frac=plan.variance_stop_frac, key=key, kernel=plan.kernel,
            initial=initial,
        )
        surfaces[key] = surface
        by_role.setdefault(key.role, surface)
        if use_time:
            time_surfaces[key] = tsurf
            time_by_role.setdefault(key.role, tsurf)
        stops[key] = stop
        out_db.stops[key.to_str()] = stop.value
        log.info("profiled %s: %d points, stop=%s", key, len(coords), stop.value)
    return ProfileResult(out_db, surfaces, time_surfaces, stops)


def surfaces_from_db(db: ProfileDb, bounds: dict, kernel=KernelFamily.Matern25) -> dict:
    """Refit energy surfaces from stored layer costs."""
    out = {}
    for k, costs in db.derived.items():
        key = LayerKey.from_str(k)
        if costs and key in bounds:
            out[key] = fit_points(key, [c.coordinate for c in costs],
                                  [c.joules_per_iter for c in costs], bounds[key], kernel)
    return out
