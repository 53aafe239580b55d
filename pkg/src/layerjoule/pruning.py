"""Energy-budgeted random channel pruning driven by the layer-wise estimator."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .estimator import EstimateError, energy_gradient, estimate
from .model_ir import ModelSpec, Role

MIN_WIDTH = 1
DEFAULT_MAX_PROPOSALS = 10_000


class PruneError(ValueError):
    pass


@dataclass(frozen=True)
class PruneStep:
    block: int       # block whose out-width shrinks (the next block's in-width follows)
    axis: str
    old_width: int
    new_width: int
    estimate_after: float


@dataclass
class PruneTrace:
    start: float
    target_fraction: float
    seed: int
    steps: list = field(default_factory=list)
    final: float = 0.0
    converged: bool = False
    stop_reason: str = ""
    proposals: int = 0

    def to_dict(self) -> dict:
        return {
            "start_j_per_iter": self.start,
            "target_fraction": self.target_fraction,
            "final_j_per_iter": self.final,
            "final_fraction": self.final / self.start if self.start else None,
            "converged": self.converged,
            "stop_reason": self.stop_reason,
            "proposals": self.proposals,
            "seed": self.seed,
            "steps": [
                {"block": s.block, "axis": s.axis, "old_width": s.old_width,
                 "new_width": s.new_width, "estimate_after": s.estimate_after}
                for s in self.steps
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _total(model, surfaces) -> float:
    report = estimate(model, surfaces)
    if not report.complete:
        raise PruneError(f"incomplete estimate for {model.name!r}: missing "
                         f"{[k.to_str() for k in report.missing_keys]}, out of bounds {list(report.out_of_bounds)}")
    return report.total_mean


def prune_step_size(width: int) -> int:
    return max(1, math.ceil(0.1 * width))


def prune_to_budget(model: ModelSpec, surfaces: dict, target_fraction=0.5, seed=0,
                    max_proposals=DEFAULT_MAX_PROPOSALS):
    """Randomly shrink inter-block widths until the estimate reaches the budget.

    Each proposal shrinks one uniformly chosen interface (a block's
    out-width and the next block's in-width) by 10% (at least one channel)
    and is accepted only if the estimated J/iter strictly drops. The output
    block's own output dimension is never touched.
    """
    if not 0 < target_fraction <= 1:
        raise PruneError("target_fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    start = _total(model, surfaces)
    trace = PruneTrace(start=start, target_fraction=target_fraction, seed=seed)
    goal = target_fraction * start
    current, energy = model, start
    # interfaces whose proposal was rejected at their current width
    rejected = set()
    while True:
        if energy <= goal:
            trace.converged, trace.stop_reason = True, "budget"
            break
        widths = current.interfaces()
        candidates = [i for i, w in enumerate(widths) if w > MIN_WIDTH]
        if not candidates:
            trace.stop_reason = "min_width"
            break
        if rejected.issuperset(candidates):
            trace.stop_reason = "stalled"
            break
        if trace.proposals >= max_proposals:
            trace.stop_reason = "proposal_cap"
            break
        i = candidates[int(rng.integers(len(candidates)))]
        trace.proposals += 1
        old = widths[i]
        new = max(MIN_WIDTH, old - prune_step_size(old))
        widths[i] = new
        proposal = current.with_interfaces(widths)
        e = _total(proposal, surfaces)
        if e < energy:
            current, energy = proposal, e
            rejected.clear()
            trace.steps.append(PruneStep(i, "out", old, new, e))
        else:
            rejected.add(i)
    trace.final = energy
    return current, trace


def guidance_report(model: ModelSpec, surfaces: dict) -> list:
    """(block, axis, dJ/dchannel) for every block axis, steepest first."""
    report = estimate(model, surfaces)
    if not report.complete:
        raise PruneError("guidance needs a complete estimate")
    rows = []
    for i, block in enumerate(model.blocks):
        for axis in range(len(block.coordinate)):
            rows.append((i, axis, energy_gradient(model, surfaces, i, axis)))
    rows.sort(key=lambda r: (-round(abs(r[2]), 9), r[0], r[1]))
    return rows
