import numpy as np
import pytest

from voltvar.grid import Bus, FeederNetwork, Line, Load, load_bundled


def two_bus(load_kw=1000.0, load_kvar=500.0, r=0.01, x=0.02):
    """Slack bus feeding one load through a single line, 1 MVA base."""
    return FeederNetwork(
        buses=(Bus("1", 4.16, "slack"), Bus("2", 4.16)),
        lines=(Line("1", "2", r, x),),
        loads=(Load("2", load_kw, load_kvar),),
        system_mva_base=1.0,
    )


@pytest.fixture
def feeder13():
    return load_bundled("feeder13.json")


@pytest.fixture
def toy():
    return load_bundled("toy132.json")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
