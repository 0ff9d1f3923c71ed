import sys
import numpy as np
import pytest

from hotloc.geometry import Pose, random_forest, synth_submap
from hotloc.hotformer import init_params, toy_config


def forest_submap(seed: int, x: float = 0.0, y: float = 0.0):
    scene = random_forest(seed, 60.0, 60, ring_points=(400, 200), ring_radii=(4.0, 12.0), landmark_density=15.0)
    return synth_submap(scene, Pose.from_xy_yaw(x, y), "ground", f"s{seed}")


@pytest.fixture(scope="session")
def toy():
    return toy_config()


@pytest.fixture(scope="session")
def toy_params(toy):
    # larger init std than training so every path carries signal
    return init_params(toy, seed=0, std=0.3)


@pytest.fixture(scope="session")
def cloud():
    return forest_submap(0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
