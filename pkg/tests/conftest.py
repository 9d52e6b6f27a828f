import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from flowscene.scene import (LaneGraph, ManeuverLabel, Scenario,
                             ScenarioSource, wrap_angle)

settings.register_profile(
    "suite",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.filter_too_much],
)
settings.load_profile("suite")


def straight_graph(n_nodes: int = 40, n_lanes: int = 2, spacing: float = 2.0,
                   lane_width: float = 3.5) -> LaneGraph:
    """Parallel straight lanes along +x; lane l sits at y = l * lane_width."""
    positions = []
    headings = []
    lane_ids = []
    successors = []
    left_pairs = []
    right_pairs = []
    for lane in range(n_lanes):
        base = lane * n_nodes
        for i in range(n_nodes):
            positions.append((i * spacing, lane * lane_width))
            headings.append(0.0)
            lane_ids.append(lane)
            if i + 1 < n_nodes:
                successors.append((base + i, base + i + 1))
            if lane + 1 < n_lanes:
                left_pairs.append((base + i, base + n_nodes + i))
                right_pairs.append((base + n_nodes + i, base + i))
    return LaneGraph(
        positions=np.array(positions, dtype=float),
        headings=np.array(headings, dtype=float),
        lane_ids=np.array(lane_ids, dtype=np.int64),
        successors=np.array(successors, dtype=np.int64).reshape(-1, 2),
        left_pairs=np.array(left_pairs, dtype=np.int64).reshape(-1, 2),
        right_pairs=np.array(right_pairs, dtype=np.int64).reshape(-1, 2),
        spacing=spacing,
    )


def make_scenario(n_actors: int = 3, horizon_past: int = 4, horizon_future: int = 6,
                  dt: float = 0.1, speed: float = 8.0,
                  source: ScenarioSource = ScenarioSource.SIM_NOMINAL,
                  label: ManeuverLabel = ManeuverLabel.NOMINAL,
                  scenario_id: str = "test-0") -> Scenario:
    """Well-formed constant-velocity scenario on a straight two-lane graph."""
    graph = straight_graph()
    steps = horizon_past + horizon_future
    states = np.zeros((steps, n_actors, 8))
    for i in range(n_actors):
        x0 = 6.0 + 12.0 * i
        for t in range(steps):
            states[t, i] = [x0 + speed * dt * t, 0.0, 0.0, 0.0, speed, 4.5, 1.9, 1.6]
    return Scenario(
        scenario_id=scenario_id,
        lane_graph=graph,
        actor_ids=tuple(range(1, n_actors + 1)),
        history=states[:horizon_past],
        future=states[horizon_past:],
        dt=dt,
        ego_id=1,
        source=source,
        label=label,
    )


@pytest.fixture
def two_lane_graph():
    return straight_graph()


@pytest.fixture
def nominal_scenario():
    return make_scenario()


def random_state_row(rng: np.random.Generator) -> np.ndarray:
    return np.array([
        rng.uniform(-50, 50), rng.uniform(-50, 50), 0.0,
        wrap_angle(rng.uniform(-np.pi, np.pi)), rng.uniform(0, 20),
        rng.uniform(3.0, 6.0), rng.uniform(1.5, 2.5), rng.uniform(1.3, 2.0),
    ])
