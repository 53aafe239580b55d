import pytest

from layerjoule import fixtures as fx
from layerjoule.measurement import Affine, SimDeviceConfig, SimulatedDevice
from layerjoule.model_ir import Role, make_block, ModelSpec
from layerjoule.profiler import build_plan, run_profiling


@pytest.fixture(scope="session")
def cnn5():
    return fx.cnn5()


@pytest.fixture(scope="session")
def affine_profile(cnn5):
    """cnn5 profiled against the noiseless affine oracle."""
    cfg = fx.affine_oracle()
    return cfg, run_profiling(cnn5, SimulatedDevice(cfg), build_plan(cnn5))


def fc_pair(c=8):
    """Input FC (1 -> c) feeding an output FC (c -> 10)."""
    return ModelSpec("pair", (make_block(Role.Input, "FullyConnected", 1, c),
                              make_block(Role.Output, "FullyConnected", c, 10)))


@pytest.fixture
def pair_sim():
    """Output 1 + 0.2 c_in and input 3 + 0.1 c_out, noiseless."""
    m = fc_pair()
    k_in, k_out = m.blocks[0].key, m.blocks[1].key
    return SimDeviceConfig({k_out: (Affine(a=1.0, b=0.2),), k_in: (Affine(a=3.0, d=0.1),)})


# -- acceptance reporting ----------------------------------------------------

ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion."""

    def record(label, ok, detail):
        line = f"{label}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[request.node.name] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES.values(), key=lambda s: int(s.split()[1].rstrip(":ab"))):
            terminalreporter.write_line(line)
