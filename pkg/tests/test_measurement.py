import sys
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import fc_pair
from layerjoule import fixtures as fx
from layerjoule.measurement import (Affine, CommandBackend, EnergySample, MeasurementError, PowerTrace,
                                    Ridge, SimDeviceConfig, SimulatedDevice, SoftPlateau, TileStep,
                                    TraceError, TraceReplayBackend, energy_time_correlation,
                                    integrate_trace, make_backend, parse_command_response,
                                    primitive_from_dict, primitive_to_dict, read_trace_csv,
                                    safe_name, write_trace_csv)
from layerjoule.model_ir import ModelSpec, Role


def const_trace(p, standby, iterations, n=100, dt=0.1):
    t = np.arange(n) * dt
    return PowerTrace(t, np.full(n, p), standby, iterations)


def test_constant_trace():
    assert integrate_trace(const_trace(5.0, 1.0, 500)) == pytest.approx(0.08, rel=1e-12)


def test_standby_cancels():
    assert integrate_trace(const_trace(2.0, 2.0, 1)) == 0.0


def test_triangular_ramp():
    t = np.arange(0, 1000) * 0.01
    p = t.copy()  # 0 -> 10 W over 10 s
    e = integrate_trace(PowerTrace(t, p, 0.0, 1))
    assert abs(e - 50.0) <= 0.005 * 50.0


def test_below_standby_clamps():
    t = np.arange(4) * 1.0
    p = np.array([0.0, 3.0, 0.0, 3.0])
    # intervals: max(p - 1, 0) = 0, 2, 0, 2 each over 1 s
    assert integrate_trace(PowerTrace(t, p, 1.0, 1)) == pytest.approx(4.0)


@pytest.mark.parametrize("t,p", [([0.0], [1.0]), ([0.0, 0.0, 1.0], [1, 1, 1]), ([0, 1], [1, -1])])
def test_bad_traces(t, p):
    with pytest.raises(TraceError):
        PowerTrace(np.array(t, float), np.array(p, float))


def _trace_on(grid_n, seed):
    rng = np.random.default_rng(seed)
    t = np.cumsum(rng.uniform(0.01, 0.2, grid_n))
    return t, rng.uniform(0, 20, grid_n), rng.uniform(0, 20, grid_n)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 300), st.integers(0, 10_000))
def test_linearity_and_scale(n, seed):
    t, p1, p2 = _trace_on(n, seed)
    a = integrate_trace(PowerTrace(t, p1))
    b = integrate_trace(PowerTrace(t, p2))
    assert integrate_trace(PowerTrace(t, p1 + p2)) == pytest.approx(a + b, rel=1e-12)
    assert integrate_trace(PowerTrace(t, 2 * p1)) == pytest.approx(2 * a, rel=1e-12)


def test_trace_csv_round_trip(tmp_path):
    tr = const_trace(5.0, 1.0, 500)
    write_trace_csv(tmp_path / "a.csv", tr)
    back = read_trace_csv(tmp_path / "a.csv", standby_power=1.0, iterations=500)
    assert np.array_equal(back.t, tr.t) and np.array_equal(back.p, tr.p)
    (tmp_path / "bad.csv").write_text("time,power\n0,1\n1,1\n")
    with pytest.raises(TraceError):
        read_trace_csv(tmp_path / "bad.csv")


# -- simulator --------------------------------------------------------------

def test_sim_examples(pair_sim):
    dev = SimulatedDevice(pair_sim)
    pair = fc_pair(8)
    out_only = ModelSpec("o", (pair.blocks[1].with_channels(in_channels=8),))
    assert dev.measure(out_only, repeats=1).joules_per_iter == pytest.approx(2.6)
    assert dev.measure(pair, repeats=1).joules_per_iter == pytest.approx(6.4)


def test_sim_noise_bound(pair_sim):
    cfg = SimDeviceConfig(pair_sim.surfaces, noise_rel=0.02, seed=4)
    s = SimulatedDevice(cfg).measure(fc_pair(8), repeats=10)
    assert s.repeats == 10
    assert 0 < s.spread <= 0.02 * 3


def test_sim_truncation():
    cfg = SimDeviceConfig({}, noise_rel=0.2, seed=0)
    dev = SimulatedDevice(cfg)
    eps = np.array([dev._eps() for _ in range(20000)])
    assert np.abs(eps).max() <= 0.6
    assert eps.std() == pytest.approx(0.2 * 0.986, rel=0.03)  # truncated-normal std


def test_sim_determinism(cnn5):
    cfg = fx.cnn5_oracle(noise_rel=0.05, seed=9)
    variants = [cnn5.with_interfaces([w, w, w, w]) for w in (3, 17, 40)]
    a = [SimulatedDevice(cfg).measure(v) for v in variants]
    b = [SimulatedDevice(cfg).measure(v) for v in variants]
    assert a == b


def test_sim_additivity(cnn5):
    cfg = fx.stepped_oracle(noise_rel=0.0)
    dev = SimulatedDevice(cfg)
    for v in (cnn5, cnn5.with_interfaces([7, 50, 3, 60])):
        assert dev.measure(v, repeats=1).joules_per_iter == pytest.approx(
            sum(cfg.block_energy(b) for b in v.blocks), rel=1e-15)


def test_sim_missing_key(cnn5, pair_sim):
    with pytest.raises(MeasurementError):
        SimulatedDevice(pair_sim).measure(cnn5)


def test_sim_time_channel(pair_sim):
    s = SimulatedDevice(pair_sim).measure(fc_pair(8), repeats=1)
    assert s.seconds_per_iter == pytest.approx(6.4 / pair_sim.avg_power_w)


def test_noise_rel_validated(pair_sim):
    with pytest.raises(MeasurementError):
        SimDeviceConfig(pair_sim.surfaces, noise_rel=0.3)


def test_primitives():
    assert Affine(1, 2, 3)(4, 5, Role.Hidden) == 1 + 8 + 15
    assert TileStep(16, 0.5)(17, 99, Role.Hidden) == 1.0  # hidden default axis: in
    assert TileStep(16, 0.5)(99, 17, Role.Input) == 1.0   # input default axis: out
    assert Ridge(2.0, 10, 3)(10, 1, Role.Output) == pytest.approx(2.0)
    assert SoftPlateau(1.0, 20, 1.0)(20, 1, Role.Output) == pytest.approx(0.5)
    for p in (Affine(1, 2, 3), TileStep(8, 1.0, "out"), Ridge(1, 2, 3), SoftPlateau(1, 2, 3, "in")):
        assert primitive_from_dict(primitive_to_dict(p)) == p
    with pytest.raises(MeasurementError):
        primitive_from_dict({"type": "affine", "a": -1.0})
    with pytest.raises(MeasurementError):
        primitive_from_dict({"type": "spline"})


def test_sim_config_round_trip(tmp_path):
    cfg = fx.cnn5_oracle(noise_rel=0.03, seed=5)
    cfg.save(tmp_path / "c.json")
    assert SimDeviceConfig.load(tmp_path / "c.json") == cfg


def test_measure_serialized(pair_sim):
    """Concurrent callers share the device without interleaving their repeats."""
    cfg = SimDeviceConfig(pair_sim.surfaces, noise_rel=0.05, seed=1)
    dev = SimulatedDevice(cfg)
    results = []
    threads = [threading.Thread(target=lambda: results.append(dev.measure(fc_pair(8), repeats=5)))
               for _ in range(8)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    seq = SimulatedDevice(cfg)
    expected = sorted(seq.measure(fc_pair(8), repeats=5).joules_per_iter for _ in range(8))
    assert sorted(r.joules_per_iter for r in results) == expected


# -- correlation ------------------------------------------------------------

def test_correlation_noise_free(cnn5):
    cfg = fx.cnn5_oracle(noise_rel=0.0)
    dev = SimulatedDevice(cfg)
    from layerjoule.evaluation import sample_architectures
    samples = [dev.measure(m, repeats=1) for m in sample_architectures(cnn5, 20, seed=1)]
    assert energy_time_correlation(samples) == pytest.approx(1.0, abs=1e-9)


def test_correlation_noisy(cnn5):
    from layerjoule.evaluation import sample_architectures
    for seed in range(3):
        dev = SimulatedDevice(fx.cnn5_oracle(noise_rel=0.05, seed=seed))
        samples = [dev.measure(m, repeats=1) for m in sample_architectures(cnn5, 100, seed=seed)]
        assert energy_time_correlation(samples) > 0.9


def test_correlation_needs_three():
    s = EnergySample(None, (), 1.0, 1.0)
    with pytest.raises(MeasurementError):
        energy_time_correlation([s, s])


# -- external command and trace replay ---------------------------------------

RESPONDER = """import json, sys
doc = json.load(sys.stdin)
widths = sum(l.get("in_channels", 0) + l.get("out_channels", 0) for l in doc["layers"])
print(f"joules={0.5 + 0.01 * widths} seconds={0.05 + 0.001 * widths}")
"""


def test_command_backend(tmp_path):
    script = tmp_path / "dev.py"
    script.write_text(RESPONDER)
    be = CommandBackend([sys.executable, str(script)])
    s = be.measure(fc_pair(8), iterations=10, repeats=2)
    # widths: 1 + 8 + 8 + 10 = 27
    assert s.joules_per_iter == pytest.approx(0.77)
    assert s.seconds_per_iter == pytest.approx(0.077)
    assert s.spread == 0.0


def test_command_backend_failures(tmp_path):
    with pytest.raises(MeasurementError):
        CommandBackend([sys.executable, "-c", "import sys; sys.exit(3)"]).measure(fc_pair(), repeats=1)
    with pytest.raises(MeasurementError):
        CommandBackend([sys.executable, "-c", "print('hello')"]).measure(fc_pair(), repeats=1)


@pytest.mark.parametrize("text", ["", "joules=1 seconds=x", "joules=1\nseconds=2", "joules=-1 seconds=2",
                                  "joules=nan seconds=1"])
def test_parse_command_response_rejects(text):
    with pytest.raises(MeasurementError):
        parse_command_response(text)


def test_parse_command_response():
    assert parse_command_response("joules=0.25 seconds=1e-3\n") == (0.25, 0.001)


def test_trace_replay(tmp_path):
    m = fc_pair(8)
    write_trace_csv(tmp_path / (safe_name(m.name) + ".csv"), const_trace(5.0, 0.0, 1))
    be = TraceReplayBackend(tmp_path, standby_power=1.0, iterations=500)
    s = be.measure(m, repeats=2)
    assert s.joules_per_iter == pytest.approx(0.08)
    assert s.seconds_per_iter == pytest.approx(10.0 / 500)
    with pytest.raises(MeasurementError):
        be.measure(fc_pair(9).with_interfaces([9], name="other"))


def test_make_backend(tmp_path):
    fx.affine_oracle().save(tmp_path / "s.json")
    assert isinstance(make_backend(f"sim:{tmp_path / 's.json'}"), SimulatedDevice)
    assert isinstance(make_backend(f"trace:{tmp_path}"), TraceReplayBackend)
    assert isinstance(make_backend("cmd:echo hi"), CommandBackend)
    for bad in ("sim", "nope:x", f"trace:{tmp_path / 'missing'}"):
        with pytest.raises(MeasurementError):
            make_backend(bad)
