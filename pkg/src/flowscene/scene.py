"""Domain types for multi-agent driving scenarios.

A Scenario bundles a lane graph, per-actor state histories and futures, and
bookkeeping (ego id, data source, maneuver label). All types are immutable
value types after construction: numpy payloads are marked read-only, so
instances can be shared freely across threads.

State rows follow STATE_FIELDS ordering everywhere:
    x, y, z [m], yaw [rad, wrapped to (-pi, pi]], v [m/s signed],
    length, width, height [m].
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import geom

STATE_FIELDS = ("x", "y", "z", "yaw", "v", "length", "width", "height")
STATE_DIM = len(STATE_FIELDS)

# bounding-box IOU above which two ground-truth actors count as colliding
COLLISION_IOU_THRESHOLD = 0.02

TWO_PI = 2.0 * math.pi


def wrap_angle(angle):
    """Wrap an angle (scalar or array) to the half-open interval (-pi, pi]."""
    a = np.remainder(np.asarray(angle, dtype=float) + np.pi, TWO_PI) - np.pi
    a = np.where(a == -np.pi, np.pi, a)
    if np.ndim(angle) == 0:
        return float(a)
    return a


class ScenarioSource(enum.Enum):
    """Which pool a scenario came from; nominal vs the two critical pools."""

    SIM_NOMINAL = "sim_nominal"
    SIM_CRITICAL = "sim_critical"
    REAL_CRITICAL = "real_critical"


class ManeuverLabel(enum.Enum):
    """Three-way criticality label used as generation conditioning."""

    NOMINAL = "nominal"
    SAFETY_CRITICAL = "safety_critical"
    VERY_SAFETY_CRITICAL = "very_safety_critical"


@dataclass(frozen=True, slots=True)
class ActorState:
    """Kinematic state of one actor at one timestep."""

    x: float
    y: float
    z: float
    yaw: float
    v: float
    length: float
    width: float
    height: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.yaw, self.v,
                         self.length, self.width, self.height])

    @staticmethod
    def from_array(row: np.ndarray) -> "ActorState":
        return ActorState(*(float(value) for value in row))


@dataclass(frozen=True, slots=True)
class Action:
    """Control applied over one timestep: longitudinal accel and front-wheel steer."""

    accel: float
    steer: float


def _readonly(array: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(array, dtype=float))
    out.flags.writeable = False
    return out


def _readonly_int(array: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(array, dtype=np.int64))
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class LaneGraph:
    """Polyline lane map with uniform node spacing.

    nodes carry a position, a heading, and a lane id; successor edges chain
    nodes along a lane (or across an explicit lane continuation), and
    left/right edges link laterally adjacent nodes of neighboring lanes.
    """

    positions: np.ndarray          # (M, 2)
    headings: np.ndarray           # (M,)
    lane_ids: np.ndarray           # (M,) int
    successors: np.ndarray         # (E, 2) int pairs (from, to)
    left_pairs: np.ndarray         # (L, 2) int pairs (node, its left neighbor)
    right_pairs: np.ndarray        # (R, 2)
    spacing: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "positions", _readonly(self.positions).reshape(-1, 2))
        object.__setattr__(self, "headings", _readonly(self.headings).reshape(-1))
        object.__setattr__(self, "lane_ids", _readonly_int(self.lane_ids).reshape(-1))
        for name in ("successors", "left_pairs", "right_pairs"):
            object.__setattr__(self, name, _readonly_int(getattr(self, name)).reshape(-1, 2))
        succ = {int(a): int(b) for a, b in self.successors}
        left = {int(a): int(b) for a, b in self.left_pairs}
        right = {int(a): int(b) for a, b in self.right_pairs}
        object.__setattr__(self, "_succ", succ)
        object.__setattr__(self, "_left", left)
        object.__setattr__(self, "_right", right)
        lanes: dict[int, list[int]] = {}
        has_pred = {int(b) for _, b in self.successors}
        for lane in sorted(set(int(l) for l in self.lane_ids)):
            members = [i for i in range(len(self.lane_ids)) if self.lane_ids[i] == lane]
            heads = [i for i in members if i not in has_pred]
            ordered: list[int] = []
            seen: set[int] = set()
            for head in sorted(heads):
                node = head
                while node is not None and node not in seen and int(self.lane_ids[node]) == lane:
                    ordered.append(node)
                    seen.add(node)
                    node = succ.get(node)
            for i in sorted(members):
                if i not in seen:
                    ordered.append(i)
            lanes[lane] = ordered
        object.__setattr__(self, "_lane_nodes", lanes)

    @property
    def n_nodes(self) -> int:
        return len(self.headings)

    def successor_of(self, node: int) -> int | None:
        return self._succ.get(node)

    def left_of(self, node: int) -> int | None:
        return self._left.get(node)

    def right_of(self, node: int) -> int | None:
        return self._right.get(node)

    def lane_nodes(self, lane_id: int) -> list[int]:
        """Node indices of one lane, ordered along the successor chain."""
        return list(self._lane_nodes.get(int(lane_id), []))

    def lane_id_list(self) -> list[int]:
        return sorted(self._lane_nodes)

    def nearest_node(self, x: float, y: float) -> int:
        d = np.hypot(self.positions[:, 0] - x, self.positions[:, 1] - y)
        return int(np.argmin(d))

    def project(self, x: float, y: float, lane_id: int) -> tuple[float, float, int]:
        """Project a point onto a lane centerline.

        Returns (arclength along the lane, signed lateral offset, nearest
        node index). Lateral offset is positive to the lane's left.
        """
        nodes = self.lane_nodes(lane_id)
        if not nodes:
            raise KeyError(f"lane {lane_id} not in graph")
        pos = self.positions[nodes]
        d = np.hypot(pos[:, 0] - x, pos[:, 1] - y)
        k = int(np.argmin(d))
        node = nodes[k]
        heading = float(self.headings[node])
        dx, dy = x - pos[k, 0], y - pos[k, 1]
        along = math.cos(heading) * dx + math.sin(heading) * dy
        lateral = -math.sin(heading) * dx + math.cos(heading) * dy
        return k * self.spacing + along, lateral, node

    def distance_to_graph(self, x: float, y: float) -> float:
        """Distance from a point to the nearest lane node."""
        return float(np.min(np.hypot(self.positions[:, 0] - x, self.positions[:, 1] - y)))


@dataclass(frozen=True)
class Scenario:
    """One training/evaluation unit: map + actor histories and futures.

    history has shape (H, N, STATE_DIM) and ends at the current time t=0;
    future has shape (T, N, STATE_DIM) and starts one dt later. The actor set
    is fixed for the whole horizon.
    """

    scenario_id: str
    lane_graph: LaneGraph
    actor_ids: tuple[int, ...]
    history: np.ndarray
    future: np.ndarray
    dt: float
    ego_id: int
    source: ScenarioSource
    label: ManeuverLabel
    provenance: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "actor_ids", tuple(int(a) for a in self.actor_ids))
        object.__setattr__(self, "history", _readonly(self.history))
        object.__setattr__(self, "future", _readonly(self.future))

    @property
    def n_actors(self) -> int:
        return len(self.actor_ids)

    @property
    def horizon_past(self) -> int:
        return self.history.shape[0]

    @property
    def horizon_future(self) -> int:
        return self.future.shape[0]

    @property
    def ego_index(self) -> int:
        return self.actor_ids.index(self.ego_id)

    def full_states(self) -> np.ndarray:
        """(H + T, N, STATE_DIM) concatenation of history and future."""
        return np.concatenate([self.history, self.future], axis=0)

    def current_states(self) -> np.ndarray:
        """States at t=0, the last history step; shape (N, STATE_DIM)."""
        return self.history[-1]

    def actor_state(self, phase: str, step: int, actor_index: int) -> ActorState:
        states = self.history if phase == "history" else self.future
        return ActorState.from_array(states[step, actor_index])

    def with_future(self, future: np.ndarray, **overrides) -> "Scenario":
        return replace(self, future=future, **overrides)


@dataclass(frozen=True, slots=True)
class Violation:
    """One invariant violation found by validate_scenario."""

    kind: str
    message: str
    actor_id: int | None = None
    timestep: int | None = None


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        if self.ok:
            return "valid"
        return "; ".join(f"[{v.kind}] {v.message}" for v in self.violations)


def relative_pose(pose_a, pose_b) -> tuple[float, float, float]:
    """Express pose_b in pose_a's body frame.

    Both poses are (x, y, yaw) triples. Returns (dx, dy, dyaw) with dyaw
    wrapped to (-pi, pi].
    """
    ax, ay, ayaw = pose_a
    bx, by, byaw = pose_b
    c, s = math.cos(ayaw), math.sin(ayaw)
    dx_world = bx - ax
    dy_world = by - ay
    dx = c * dx_world + s * dy_world
    dy = -s * dx_world + c * dy_world
    return dx, dy, wrap_angle(byaw - ayaw)


def relative_poses(poses_a: np.ndarray, poses_b: np.ndarray) -> np.ndarray:
    """Vectorized relative_pose; inputs broadcast over leading dims.

    poses_* are (..., 3) arrays of (x, y, yaw); output is (..., 3).
    """
    ax, ay, ayaw = poses_a[..., 0], poses_a[..., 1], poses_a[..., 2]
    bx, by, byaw = poses_b[..., 0], poses_b[..., 1], poses_b[..., 2]
    c, s = np.cos(ayaw), np.sin(ayaw)
    dxw, dyw = bx - ax, by - ay
    dx = c * dxw + s * dyw
    dy = -s * dxw + c * dyw
    return np.stack([dx, dy, wrap_angle(byaw - ayaw)], axis=-1)


def _check_states(states: np.ndarray, phase: str, actor_ids, out: list[Violation]):
    steps = states.shape[0]
    for t in range(steps):
        # timestep reported relative to t=0: history ends at 0, future starts at 1
        stamp = t - steps + 1 if phase == "history" else t + 1
        for i, actor in enumerate(actor_ids):
            row = states[t, i]
            if not np.all(np.isfinite(row)):
                bad = [STATE_FIELDS[j] for j in range(STATE_DIM) if not np.isfinite(row[j])]
                out.append(Violation("non_finite", f"{phase} step {stamp}: non-finite {','.join(bad)}",
                                     actor, stamp))
                continue
            if row[5] <= 0 or row[6] <= 0 or row[7] <= 0:
                out.append(Violation("extent", f"{phase} step {stamp}: non-positive box extent",
                                     actor, stamp))
            if not (-math.pi < row[3] <= math.pi):
                out.append(Violation("yaw_range", f"{phase} step {stamp}: yaw {row[3]:.6f} outside (-pi, pi]",
                                     actor, stamp))


def _check_future_collisions(s: Scenario, out: list[Violation]):
    n = s.n_actors
    for t in range(s.horizon_future):
        rows = s.future[t]
        if not np.all(np.isfinite(rows)):
            continue
        for i in range(n):
            for j in range(i + 1, n):
                iou = geom.oriented_box_iou(geom.state_box(rows[i]), geom.state_box(rows[j]))
                if iou > COLLISION_IOU_THRESHOLD:
                    out.append(Violation(
                        "collision",
                        f"future step {t + 1}: actors {s.actor_ids[i]} and {s.actor_ids[j]} "
                        f"overlap with IOU {iou:.3f}",
                        s.actor_ids[i], t + 1))


def _check_map(g: LaneGraph, out: list[Violation]):
    left = {(int(a), int(b)) for a, b in g.left_pairs}
    right = {(int(a), int(b)) for a, b in g.right_pairs}
    for a, b in left:
        if (b, a) not in right:
            out.append(Violation("map_neighbors", f"left neighbor {a}->{b} lacks right back-edge"))
    for a, b in right:
        if (b, a) not in left:
            out.append(Violation("map_neighbors", f"right neighbor {a}->{b} lacks left back-edge"))
    for a, b in g.successors:
        same_lane = g.lane_ids[a] == g.lane_ids[b]
        gap = float(np.hypot(*(g.positions[b] - g.positions[a])))
        if not same_lane and gap > 1.5 * g.spacing:
            out.append(Violation("map_successor",
                                 f"successor {a}->{b} jumps lanes over {gap:.2f} m"))


def validate_scenario(s: Scenario) -> ValidationReport:
    """Check every Scenario/ActorState invariant; reports, never raises."""
    out: list[Violation] = []
    if s.horizon_past < 1:
        out.append(Violation("horizon", "history must have at least 1 step"))
    if s.horizon_future < 1:
        out.append(Violation("horizon", "future must have at least 1 step"))
    if not (np.isfinite(s.dt) and s.dt > 0):
        out.append(Violation("dt", f"dt must be positive and finite, got {s.dt}"))
    n = s.n_actors
    if s.history.ndim != 3 or s.history.shape[1:] != (n, STATE_DIM):
        out.append(Violation("shape", f"history shape {s.history.shape} != (H, {n}, {STATE_DIM})"))
        return ValidationReport(tuple(out))
    if s.future.ndim != 3 or s.future.shape[1:] != (n, STATE_DIM):
        out.append(Violation("shape", f"future shape {s.future.shape} != (T, {n}, {STATE_DIM})"))
        return ValidationReport(tuple(out))
    if s.ego_id not in s.actor_ids:
        out.append(Violation("ego", f"ego id {s.ego_id} not among actors"))
    if len(set(s.actor_ids)) != n:
        out.append(Violation("actors", "duplicate actor ids"))
    _check_states(s.history, "history", s.actor_ids, out)
    _check_states(s.future, "future", s.actor_ids, out)
    _check_map(s.lane_graph, out)
    _check_future_collisions(s, out)
    return ValidationReport(tuple(out))
