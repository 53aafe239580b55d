"""Reference models and simulated-device oracles used by tests, demos and benchmarks."""
from __future__ import annotations

import json
import os

from .measurement import Affine, Ridge, SimDeviceConfig, SoftPlateau, TileStep
from .model_ir import Role, model_from_dict, model_to_dict

CNN5_DOC = {
    "name": "cnn5",
    "iterations": 500,
    "batch_size": 10,
    "layers": [
        {"kind": "Conv2d", "kernel_size": 3, "stride": 1, "in_channels": 1, "out_channels": 32,
         "height": 28, "width": 28},
        {"kind": "BatchNorm"}, {"kind": "MaxPool"},
        {"kind": "Conv2d", "kernel_size": 3, "stride": 1, "in_channels": 32, "out_channels": 64,
         "height": 14, "width": 14},
        {"kind": "BatchNorm"}, {"kind": "MaxPool"},
        {"kind": "Conv2d", "kernel_size": 3, "stride": 1, "in_channels": 64, "out_channels": 64,
         "height": 14, "width": 14},
        {"kind": "BatchNorm"}, {"kind": "MaxPool"},
        {"kind": "Conv2d", "kernel_size": 3, "stride": 1, "in_channels": 64, "out_channels": 64,
         "height": 14, "width": 14},
        {"kind": "BatchNorm"}, {"kind": "MaxPool"},
        {"kind": "FullyConnected", "in_channels": 64, "out_channels": 10},
    ],
}


def cnn5():
    return model_from_dict(CNN5_DOC)


def _keys(model):
    by_role = {}
    for b in model.blocks:
        by_role.setdefault(b.role, b.key)
    return by_role[Role.Input], by_role.get(Role.Hidden), by_role[Role.Output]


def affine_oracle(model=None, noise_rel=0.0, seed=0) -> SimDeviceConfig:
    """Purely affine layer costs."""
    model = model or cnn5()
    k_in, k_hid, k_out = _keys(model)
    surfaces = {
        k_out: (Affine(a=0.2, b=0.01),),
        k_in: (Affine(a=0.3, d=0.02),),
    }
    if k_hid is not None:
        surfaces[k_hid] = (Affine(a=0.4, b=0.015, d=0.025),)
    return SimDeviceConfig(surfaces, noise_rel=noise_rel, avg_power_w=12.0, seed=seed)


def cnn5_oracle(model=None, noise_rel=0.02, seed=0) -> SimDeviceConfig:
    """Smooth costs with a utilisation plateau and a mid-range ridge."""
    model = model or cnn5()
    k_in, k_hid, k_out = _keys(model)
    surfaces = {
        k_out: (Affine(a=0.25, b=0.008), SoftPlateau(height=0.15, threshold=24, steepness=0.25)),
        k_in: (Affine(a=0.35, d=0.015), SoftPlateau(height=0.3, threshold=12, steepness=0.4)),
    }
    if k_hid is not None:
        surfaces[k_hid] = (
            Affine(a=0.5, b=0.012, d=0.02),
            SoftPlateau(height=0.6, threshold=20, steepness=0.3, axis="in"),
            Ridge(amplitude=0.3, center=32, width=8, axis="out"),
        )
    return SimDeviceConfig(surfaces, noise_rel=noise_rel, avg_power_w=12.0, seed=seed)


def stepped_oracle(model=None, noise_rel=0.02, seed=0) -> SimDeviceConfig:
    """Tile-quantised costs with a ridge: the regime where FLOPs mislead."""
    model = model or cnn5()
    k_in, k_hid, k_out = _keys(model)
    surfaces = {
        k_out: (Affine(a=0.3), TileStep(quantum=16, cost=0.12), Ridge(amplitude=0.1, center=40, width=6)),
        k_in: (Affine(a=0.4), TileStep(quantum=8, cost=0.1, axis="out")),
    }
    if k_hid is not None:
        surfaces[k_hid] = (
            Affine(a=0.8),
            TileStep(quantum=16, cost=0.35, axis="in"),
            TileStep(quantum=16, cost=0.45, axis="out"),
            Ridge(amplitude=0.5, center=36, width=6, axis="out"),
        )
    return SimDeviceConfig(surfaces, noise_rel=noise_rel, avg_power_w=12.0, seed=seed)


def write_reference_data(directory) -> list:
    """Write the reference model and oracle configs as JSON files."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    p = os.path.join(directory, "cnn5.json")
    with open(p, "w") as fh:
        json.dump(model_to_dict(cnn5()), fh, indent=2)
        fh.write("\n")
    paths.append(p)
    for name, cfg in (("sim_affine.json", affine_oracle()), ("sim_cnn5.json", cnn5_oracle()),
                      ("sim_stepped.json", stepped_oracle())):
        p = os.path.join(directory, name)
        cfg.save(p)
        paths.append(p)
    return paths


if __name__ == "__main__":  # pragma: no cover
    import sys

    for path in write_reference_data(sys.argv[1] if len(sys.argv) > 1 else "data"):
        print(path)
