"""Whole-model energy estimates as sums of per-block GP posterior means."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .gp_core import OutOfBoundsError
from .model_ir import LayerKey, ModelSpec, Role


class EstimateError(ValueError):
    pass


@dataclass(frozen=True)
class BlockEstimate:
    index: int
    key: LayerKey
    coordinate: tuple
    mean: float
    variance: float


@dataclass(frozen=True)
class EstimateReport:
    model: str
    per_block: tuple
    total_mean: float
    total_variance: float
    total_joules: float
    iterations: int
    missing_keys: tuple = ()
    out_of_bounds: tuple = ()  # block indices queried outside their surface

    @property
    def complete(self) -> bool:
        return not self.missing_keys and not self.out_of_bounds

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "complete": self.complete,
            "iterations": self.iterations,
            "total_mean_j_per_iter": self.total_mean,
            "total_variance": self.total_variance,
            "total_joules": self.total_joules,
            "missing_keys": [k.to_str() for k in self.missing_keys],
            "out_of_bounds_blocks": list(self.out_of_bounds),
            "per_block": [
                {"index": b.index, "key": b.key.to_str(), "coordinate": list(b.coordinate),
                 "mean_j_per_iter": b.mean, "variance": b.variance}
                for b in self.per_block
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        lines = [f"{'block':>5}  {'role':<6}  {'coordinate':<12}  {'J/iter':>12}  {'std':>10}  key"]
        for b in self.per_block:
            lines.append(
                f"{b.index:>5}  {b.key.role.value:<6}  {'x'.join(map(str, b.coordinate)):<12}  "
                f"{b.mean:>12.6f}  {b.variance ** 0.5:>10.6f}  {b.key}"
            )
        lines.append(f"total {self.total_mean:.6f} J/iter (std {self.total_variance ** 0.5:.6f}), "
                     f"{self.total_joules:.3f} J over {self.iterations} iterations")
        if not self.complete:
            missing = ", ".join(k.to_str() for k in self.missing_keys) or "-"
            lines.append(f"INCOMPLETE: missing keys [{missing}], out-of-bounds blocks {list(self.out_of_bounds)}")
        return "\n".join(lines)


def estimate(model: ModelSpec, surfaces: dict) -> EstimateReport:
    """Sum per-block posterior means; blocks without an exact-key surface are reported missing."""
    rows, missing, oob = [], [], []
    for i, block in enumerate(model.blocks):
        key = block.key
        surf = surfaces.get(key)
        if surf is None:
            if key not in missing:
                missing.append(key)
            continue
        try:
            mean, var = surf.predict(block.coordinate)
        except OutOfBoundsError:
            oob.append(i)
            continue
        rows.append(BlockEstimate(i, key, block.coordinate, mean, var))
    total = sum(r.mean for r in rows)
    return EstimateReport(
        model=model.name,
        per_block=tuple(rows),
        total_mean=total,
        total_variance=sum(r.variance for r in rows),
        total_joules=total * model.iterations,
        iterations=model.iterations,
        missing_keys=tuple(missing),
        out_of_bounds=tuple(oob),
    )


def energy_gradient(model: ModelSpec, surfaces: dict, block_index: int, axis: int = 0) -> float:
    """d(J/iter)/d(channel) of one block's surface along ``axis``.

    Central difference with a one-channel step; one-sided at the surface
    bounds. Axis 0 is the block's only coordinate for input/output blocks
    and the in-width for hidden blocks; axis 1 is the hidden out-width.
    """
    block = model.blocks[block_index]
    surf = surfaces.get(block.key)
    if surf is None:
        raise EstimateError(f"no surface for block {block_index} ({block.key})")
    coord = list(block.coordinate)
    if not 0 <= axis < len(coord):
        raise EstimateError(f"block {block_index} has no axis {axis}")
    lo, hi = surf.x_bounds[axis]
    c = coord[axis]
    up = min(c + 1, hi)
    down = max(c - 1, lo)
    if up == down:
        return 0.0
    pts = [list(coord), list(coord)]
    pts[0][axis] = up
    pts[1][axis] = down
    m_up, m_down = surf.predict_many(pts, return_var=False)
    return float((m_up - m_down) / (up - down))
