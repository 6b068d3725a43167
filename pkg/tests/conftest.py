import numpy as np
import pytest

from tplab import nnet, streamgen


SMALL_GEN = streamgen.GenConfig(drive_length_s=20.0, waypoint_count=4, speed=1.5, n_unlabeled_drives=2, seed=3)


@pytest.fixture(scope="session")
def default_bundle():
    return streamgen.gen_bundle(streamgen.GenConfig())


@pytest.fixture(scope="session")
def small_bundle():
    return streamgen.gen_bundle(SMALL_GEN)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_model(seed=0, input_dim=4, n_classes=3, hidden=(6, 5), dropout_p=0.2, mid=3, attach=None):
    arch = nnet.ArchSpec(input_dim, n_classes, hidden, dropout_p, attach, mid)
    return nnet.init_model(arch, seed)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
