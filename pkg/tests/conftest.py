import numpy as np
import pytest

from deeppark import world as w


@pytest.fixture
def open_lot_config():
    """Wide rectangular lot, no obstacles (the simplified training regime)."""
    return w.ScenarioConfig(lane_width=(16.0, 24.0), max_turns=0,
                            target_distance=(5.0, 15.0), obstacles=False,
                            bay_fraction=0.0)


@pytest.fixture
def obstacle_config():
    return w.ScenarioConfig(obstacles=True, max_turns=2)


@pytest.fixture
def big_empty_scenario():
    """Huge empty boundary: nothing within sensor range of the origin."""
    from deeppark.dynamics import VehicleState
    boundary = np.array([[-1000.0, -1000.0], [1000.0, -1000.0],
                         [1000.0, 1000.0], [-1000.0, 1000.0]])
    return w.Scenario(boundary, (), VehicleState(0, 0, 0, 0, 0),
                      w.TargetState(5.0, 0.0, 0.0, 1.0), seed=0)


def rng(seed=0):
    return np.random.default_rng(seed)
