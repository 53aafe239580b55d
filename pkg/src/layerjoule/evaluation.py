"""Random-architecture evaluation: MAPE and error CDFs against measured truth."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .baseline_flops import count_flops
from .estimator import estimate
from .model_ir import Kind, ModelSpec, Role


class EvaluationError(ValueError):
    pass


def sample_architectures(base: ModelSpec, n: int, seed=0) -> list:
    """Draw ``n`` channel-width variants of ``base``.

    Every inter-block width is drawn uniformly from [1, original]. If the
    model has hidden AttentionEncoder blocks, their count is also drawn from
    [1, original count] and the leading ones are kept.
    """
    if n < 1:
        raise EvaluationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    enc = [i for i, b in enumerate(base.blocks) if b.role is Role.Hidden and b.anchor.kind is Kind.AttentionEncoder]
    out = []
    for j in range(n):
        model = base
        if enc:
            keep = int(rng.integers(1, len(enc) + 1))
            drop = set(enc[keep:])
            blocks = [b for i, b in enumerate(base.blocks) if i not in drop]
            chain = [blocks[0]]
            for b in blocks[1:]:
                chain.append(b.with_channels(in_channels=chain[-1].out_channels))
            model = ModelSpec(base.name, tuple(chain), base.iterations, base.batch_size)
        sampled = [int(rng.integers(1, w + 1)) for w in model.interfaces()]
        out.append(model.with_interfaces(sampled, name=f"{base.name}#{j}"))
    return out


def mape(actual, estimated) -> float:
    a = np.asarray(actual, dtype=np.float64)
    e = np.asarray(estimated, dtype=np.float64)
    if a.shape != e.shape:
        raise EvaluationError("actual and estimated differ in length")
    if a.size == 0:
        raise EvaluationError("need at least one value")
    if np.any(a == 0):
        raise EvaluationError("actual values must be non-zero")
    return float(np.mean(np.abs(a - e) / np.abs(a)) * 100.0)


def error_cdf(actual, estimated):
    """Sorted absolute percentage errors and their cumulative fractions."""
    a = np.asarray(actual, dtype=np.float64)
    e = np.asarray(estimated, dtype=np.float64)
    ape = np.sort(np.abs(a - e) / np.abs(a) * 100.0)
    frac = np.arange(1, ape.size + 1) / ape.size
    return ape, frac


@dataclass(frozen=True)
class EvalRow:
    name: str
    widths: tuple
    measured: float
    layerwise: float
    flops: float
    flop_count: float = 0.0


@dataclass(frozen=True)
class EvalResult:
    rows: tuple
    mape_layerwise: float
    mape_flops: float
    cdf_layerwise: tuple
    cdf_flops: tuple
    excluded: int
    seed: int
    repeats: int

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "repeats": self.repeats,
            "n_rows": len(self.rows),
            "excluded": self.excluded,
            "mape_layerwise": self.mape_layerwise,
            "mape_flops": self.mape_flops,
            "rows": [{"name": r.name, "widths": list(r.widths), "measured": r.measured,
                      "layerwise": r.layerwise, "flops": r.flops, "flop_count": r.flop_count}
                     for r in self.rows],
        }

    def write(self, json_path, cdf_path) -> None:
        with open(json_path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")
        with open(cdf_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "ape_percent", "cum_fraction"])
            for method, (ape, frac) in (("layerwise", self.cdf_layerwise), ("flops", self.cdf_flops)):
                for x, f in zip(ape, frac):
                    w.writerow([method, f"{x:.9f}", f"{f:.9f}"])


def run_comparison(base: ModelSpec, backend, surfaces: dict, baseline, n=100, repeats=3, seed=0,
                   iterations=500) -> EvalResult:
    """Measure sampled architectures and score both estimators against the measurements."""
    rows, excluded = [], 0
    for model in sample_architectures(base, n, seed):
        report = estimate(model, surfaces)
        if not report.complete:
            excluded += 1
            continue
        measured = backend.measure(model, iterations, repeats).joules_per_iter
        rows.append(EvalRow(model.name, tuple(model.interfaces()), measured, report.total_mean,
                            baseline.predict(model), count_flops(model)))
    if not rows:
        raise EvaluationError("no architecture had a complete estimate")
    actual = [r.measured for r in rows]
    lw = [r.layerwise for r in rows]
    fl = [r.flops for r in rows]
    cdf_lw = error_cdf(actual, lw)
    cdf_fl = error_cdf(actual, fl)
    return EvalResult(
        rows=tuple(rows),
        mape_layerwise=mape(actual, lw),
        mape_flops=mape(actual, fl),
        cdf_layerwise=(tuple(cdf_lw[0]), tuple(cdf_lw[1])),
        cdf_flops=(tuple(cdf_fl[0]), tuple(cdf_fl[1])),
        excluded=excluded,
        seed=seed,
        repeats=repeats,
    )


def summarize_runs(results) -> dict:
    """Mean and standard error of both MAPEs over outer repeats."""
    out = {}
    for name in ("mape_layerwise", "mape_flops"):
        vals = np.array([getattr(r, name) for r in results])
        se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        out[name] = {"mean": float(vals.mean()), "stderr": se, "runs": vals.tolist()}
    return out


def quartile_bias(rows):
    """Mean measured vs mean FLOPs estimate in the lowest and highest FLOPs quartiles.

    Returns ``{"low": (measured, estimated), "high": (measured, estimated)}``
    with quartiles taken over FLOP counts.
    """
    order = np.argsort([r.flop_count for r in rows], kind="stable")
    q = max(1, len(rows) // 4)
    low = [rows[i] for i in order[:q]]
    high = [rows[i] for i in order[-q:]]
    return {
        "low": (float(np.mean([r.measured for r in low])), float(np.mean([r.flops for r in low]))),
        "high": (float(np.mean([r.measured for r in high])), float(np.mean([r.flops for r in high]))),
    }
