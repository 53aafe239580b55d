"""FLOP counting and the FLOPs-to-energy linear regression baseline.

Forward FLOPs per block (2 FLOPs per multiply-accumulate, biases ignored),
with H, W the block's declared input spatial size, B the batch size and
S = H * W the sequence length for sequence layers:

* Conv2d:           2 K^2 Cin Cout Hout Wout B,  Hout = ceil(H / stride)
* FullyConnected:   2 Cin Cout B
* Embedding:        S Cout B             (row gather, one copy per element)
* LstmCell:         8 (Cin + Cout) Cout S B   (four gates)
* AttentionEncoder: B S (8 d^2 + 4 S d + 4 d f),  d = Cout, f = units or 4d

Training cost is three times the forward count (forward + backward + update).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model_ir import Kind, ModelSpec

TRAINING_MULTIPLIER = 3


class FlopsError(ValueError):
    pass


def block_forward_flops(block) -> float:
    kind = block.anchor.kind
    cin, cout, b = block.in_channels, block.out_channels, block.batch_size
    h, w = block.spatial
    if kind is Kind.Conv2d:
        k = block.anchor.param("kernel_size", 1)
        s = block.anchor.param("stride", 1)
        return 2.0 * k * k * cin * cout * math.ceil(h / s) * math.ceil(w / s) * b
    if kind is Kind.FullyConnected:
        return 2.0 * cin * cout * b
    seq = h * w
    if kind is Kind.Embedding:
        return float(seq * cout * b)
    if kind is Kind.LstmCell:
        return 8.0 * (cin + cout) * cout * seq * b
    if kind is Kind.AttentionEncoder:
        d = cout
        f = block.anchor.param("units", 4 * d)
        return float(b * seq * (8 * d * d + 4 * seq * d + 4 * d * f))
    raise FlopsError(f"no FLOP formula for {kind.value}")


def forward_flops(model: ModelSpec) -> float:
    return float(sum(block_forward_flops(b) for b in model.blocks))


def count_flops(model: ModelSpec) -> float:
    """Training FLOPs per iteration."""
    return TRAINING_MULTIPLIER * forward_flops(model)


@dataclass(frozen=True)
class FlopsModel:
    slope: float
    intercept: float
    pairs: tuple = ()

    def predict_flops(self, flops: float) -> float:
        return max(0.0, self.slope * flops + self.intercept)

    def predict(self, model: ModelSpec) -> float:
        """Estimated joules per iteration."""
        return self.predict_flops(count_flops(model))

    def sse(self, slope=None, intercept=None) -> float:
        a = self.slope if slope is None else slope
        c = self.intercept if intercept is None else intercept
        x = np.array([p[0] for p in self.pairs])
        y = np.array([p[1] for p in self.pairs])
        return float(np.sum((y - (a * x + c)) ** 2))

    def to_dict(self):
        return {"slope": self.slope, "intercept": self.intercept, "pairs": [list(p) for p in self.pairs]}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["slope"]), float(d["intercept"]), tuple(tuple(p) for p in d.get("pairs", ())))


def fit_baseline(pairs) -> FlopsModel:
    """Ordinary least squares of joules/iter on FLOPs."""
    pairs = tuple((float(f), float(e)) for f, e in pairs)
    if len(pairs) < 2:
        raise FlopsError("need at least 2 (flops, energy) pairs")
    x = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    if np.ptp(x) == 0:
        raise FlopsError("all FLOP counts identical; regression is degenerate")
    # centre for conditioning; FLOP counts span many orders of magnitude
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    slope = float(dx @ (y - ym) / (dx @ dx))
    intercept = float(ym - slope * xm)
    return FlopsModel(slope, intercept, pairs)


def predict_baseline(baseline: FlopsModel, model: ModelSpec) -> float:
    return baseline.predict(model)


def baseline_from_samples(samples) -> FlopsModel:
    return fit_baseline([(s.flops, s.joules_per_iter) for s in samples])
