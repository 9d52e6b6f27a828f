"""Training-corpus synthesis.

Nominal lane-following traffic (IDM longitudinal control, pure-pursuit
steering), hero-actor criticality injection (hard brakes and cut-ins),
rejection sampling, heuristic maneuver labeling, and the pool-mixing
sampler that training streams draw from.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .dynamics import (DEFAULT_LIMITS, HIGHWAY_IDM, URBAN_IDM, IdmParams,
                       Limits, clamp_actions, idm_accel, step_array)
from .errors import ConfigError, GenerationError, InjectionError
from .metrics import actor_collisions, min_sttc
from .scene import (COLLISION_IOU_THRESHOLD, LaneGraph, ManeuverLabel,
                    Scenario, ScenarioSource, validate_scenario, wrap_angle)

ACTOR_LENGTH = 4.5
ACTOR_WIDTH = 1.9
ACTOR_HEIGHT = 1.6
CUT_IN_WINDOW = 3.0           # s, quintic lane-change duration
BRAKE_RAMP = 0.5              # s, hard-brake ramp to full deceleration


class HeroManeuver(enum.Enum):
    CUT_IN = "cut_in"
    HARD_BRAKE = "hard_brake"


class HeroTarget(enum.Enum):
    """Ego-relative slot the hero occupies (or is inserted into)."""

    LEAD = "lead"
    LEFT_NEIGHBOR = "left_neighbor"
    RIGHT_NEIGHBOR = "right_neighbor"


@dataclass(frozen=True)
class HeroSpec:
    maneuver: HeroManeuver
    trigger_time: float = 0.5
    intensity: float = 1.0
    target: HeroTarget = HeroTarget.LEAD

    def __post_init__(self):
        if not 0.0 <= self.intensity <= 1.0:
            raise ConfigError(f"intensity must lie in [0, 1], "
                              f"got {self.intensity}")
        if not self.trigger_time >= 0.0:
            raise ConfigError(f"trigger_time must be non-negative, "
                              f"got {self.trigger_time}")


@dataclass(frozen=True)
class MixConfig:
    alpha_real: float
    seed: int
    upsample_real: int = 1

    def __post_init__(self):
        if not 0.0 <= self.alpha_real <= 1.0:
            raise ConfigError(f"alpha_real must lie in [0, 1], "
                              f"got {self.alpha_real}")
        if self.upsample_real < 1:
            raise ConfigError(f"upsample_real must be a positive integer, "
                              f"got {self.upsample_real}")


@dataclass(frozen=True)
class CheckSet:
    """Thresholds for rejection sampling."""

    iou_threshold: float = COLLISION_IOU_THRESHOLD
    corridor_margin: float = 3.0
    decel_limit: float = DEFAULT_LIMITS.decel_limit


@dataclass(frozen=True)
class RejectionResult:
    accepted: bool
    reason: str | None = None


@dataclass(frozen=True)
class LabelThresholds:
    ttc_very: float = 1.5
    ttc_safety: float = 3.0
    decel_very: float = 6.0
    decel_safety: float = 3.0


@dataclass(frozen=True)
class SynthConfig:
    horizon_past: int = 10
    horizon_future: int = 50
    dt: float = 0.1
    idm: IdmParams = URBAN_IDM
    speed_frac: tuple[float, float] = (0.5, 0.9)
    placement_retries: int = 20
    burn_in: int = 20
    control_noise_std: float = 0.0
    limits: Limits = DEFAULT_LIMITS

    def __post_init__(self):
        if self.horizon_past < 1 or self.horizon_future < 2:
            raise ConfigError("horizons too short: need past >= 1, "
                              "future >= 2")
        if not self.dt > 0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if not 0.0 < self.speed_frac[0] <= self.speed_frac[1]:
            raise ConfigError(f"bad speed fraction range {self.speed_frac}")


HIGHWAY_SYNTH = SynthConfig(idm=HIGHWAY_IDM)
URBAN_SYNTH = SynthConfig(idm=URBAN_IDM)


# ------------------------------------------------------------- map presets

def _graph_from_centerlines(centerlines: Sequence[np.ndarray],
                            spacing: float) -> LaneGraph:
    """Assemble a LaneGraph from per-lane centerline point chains.

    Lateral neighbor links pair same-index nodes of consecutive lanes, so
    all centerlines must share a point count.
    """
    positions, headings, lane_ids = [], [], []
    successors, left_pairs, right_pairs = [], [], []
    base = 0
    n_points = len(centerlines[0])
    for lane, pts in enumerate(centerlines):
        if len(pts) != n_points:
            raise ConfigError("centerlines must have equal node counts")
        for i in range(len(pts)):
            ahead = pts[min(i + 1, len(pts) - 1)] - pts[max(i - 1, 0)]
            positions.append(pts[i])
            headings.append(math.atan2(ahead[1], ahead[0]))
            lane_ids.append(lane)
            if i + 1 < len(pts):
                successors.append((base + i, base + i + 1))
            if lane + 1 < len(centerlines):
                left_pairs.append((base + i, base + n_points + i))
                right_pairs.append((base + n_points + i, base + i))
        base += len(pts)
    return LaneGraph(
        positions=np.array(positions, dtype=float),
        headings=np.array(headings, dtype=float),
        lane_ids=np.array(lane_ids, dtype=np.int64),
        successors=np.array(successors, dtype=np.int64).reshape(-1, 2),
        left_pairs=np.array(left_pairs, dtype=np.int64).reshape(-1, 2),
        right_pairs=np.array(right_pairs, dtype=np.int64).reshape(-1, 2),
        spacing=spacing,
    )


def highway_graph(n_lanes: int = 3, length: float = 400.0,
                  spacing: float = 2.0, lane_width: float = 3.5) -> LaneGraph:
    """Straight multi-lane highway along +x; lane l at y = l * lane_width."""
    n = int(length / spacing) + 1
    xs = np.arange(n) * spacing
    lanes = [np.stack([xs, np.full(n, l * lane_width)], axis=1)
             for l in range(n_lanes)]
    return _graph_from_centerlines(lanes, spacing)


def urban_graph(arm: float = 80.0, radius: float = 18.0, n_lanes: int = 2,
                spacing: float = 2.0, lane_width: float = 3.0) -> LaneGraph:
    """Two-lane city block corner: straight, quarter arc left, straight.

    The inner lane (id 0) hugs the corner; lane l runs at lateral offset
    l * lane_width to its left. Arc length is preserved per lane so all
    lanes keep one node count (the outer lane stretches its spacing
    slightly through the bend).
    """
    # parameterize the inner centerline by arclength
    arc_len = 0.5 * math.pi * radius
    total = arm + arc_len + arm
    n = int(total / spacing) + 1
    lanes = []
    for l in range(n_lanes):
        pts = []
        for i in range(n):
            s = total * i / (n - 1)
            off = l * lane_width
            if s < arm:
                pts.append((s, -off))
            elif s < arm + arc_len:
                phi = (s - arm) / radius
                cx, cy = arm, radius
                r = radius + off
                pts.append((cx + r * math.sin(phi), cy - r * math.cos(phi)))
            else:
                t = s - arm - arc_len
                pts.append((arm + radius + off, radius + t))
        lanes.append(np.array(pts))
    return _graph_from_centerlines(lanes, spacing)


# ----------------------------------------------------------- lane geometry

def _lane_point(graph: LaneGraph, lane_id: int, s: float):
    """(x, y, heading) at arclength s along a lane, clamped to its extent."""
    nodes = graph.lane_nodes(lane_id)
    length = (len(nodes) - 1) * graph.spacing
    s = min(max(s, 0.0), length)
    k = min(int(s / graph.spacing), len(nodes) - 2) if len(nodes) > 1 else 0
    frac = s / graph.spacing - k
    a = graph.positions[nodes[k]]
    b = graph.positions[nodes[min(k + 1, len(nodes) - 1)]]
    x = a[0] + frac * (b[0] - a[0])
    y = a[1] + frac * (b[1] - a[1])
    heading = float(graph.headings[nodes[k]])
    return x, y, heading


def _lane_length(graph: LaneGraph, lane_id: int) -> float:
    return (len(graph.lane_nodes(lane_id)) - 1) * graph.spacing


def _assign_lane(graph: LaneGraph, x: float, y: float):
    """(lane_id, arclength, lateral) of the lane nearest to a point."""
    best = None
    for lane in graph.lane_id_list():
        s, lat, _ = graph.project(x, y, lane)
        if best is None or abs(lat) < abs(best[2]):
            best = (lane, s, lat)
    return best


def corridor_offset(graph: LaneGraph, x: float, y: float) -> float:
    """Smallest |lateral offset| to any lane centerline."""
    return abs(_assign_lane(graph, x, y)[2])


# ------------------------------------------------------------- simulation

@dataclass
class _HeroPlan:
    index: int
    maneuver: HeroManeuver
    trigger_step: int
    intensity: float
    from_lane: int
    to_lane: int | None
    target_decel: float


def _pure_pursuit(graph: LaneGraph, row: np.ndarray, lane: int, s: float,
                  limits: Limits, lateral_goal: float = 0.0,
                  lookahead_scale: float = 1.0) -> float:
    """Steering toward a lookahead point on (or laterally offset from) a
    lane centerline."""
    v = row[4]
    lookahead = max(4.0, 1.2 * v) * lookahead_scale
    px, py, ph = _lane_point(graph, lane, s + lookahead)
    if lateral_goal != 0.0:
        px += -math.sin(ph) * lateral_goal
        py += math.cos(ph) * lateral_goal
    alpha = wrap_angle(math.atan2(py - row[1], px - row[0]) - row[3])
    wheelbase = limits.wheelbase_ratio * row[5]
    dist = math.hypot(px - row[0], py - row[1])
    if dist < 1e-6:
        return 0.0
    return float(np.clip(math.atan2(2.0 * wheelbase * math.sin(alpha), dist),
                         -limits.steer_max, limits.steer_max))


def _leader_gap(rows: np.ndarray, lanes: list, arcs: list, i: int):
    """(gap, leader speed) for actor i against the nearest same-lane actor
    ahead; (1e9, 0) when the lane is clear."""
    best_ds = None
    lead = None
    for j in range(rows.shape[0]):
        if j == i or lanes[j] != lanes[i]:
            continue
        ds = arcs[j] - arcs[i]
        if ds > 1e-9 and (best_ds is None or ds < best_ds):
            best_ds = ds
            lead = j
    if lead is None:
        return 1e9, 0.0
    gap = best_ds - 0.5 * (rows[i, 5] + rows[lead, 5])
    return max(gap, 1e-3), rows[lead, 4]


def _quintic(tau: float) -> float:
    """Smoothstep blend with zero first and second derivatives at 0 and 1."""
    tau = min(max(tau, 0.0), 1.0)
    return tau ** 3 * (10.0 - 15.0 * tau + 6.0 * tau * tau)


def _simulate(graph: LaneGraph, initial: np.ndarray, n_steps: int,
              cfg: SynthConfig, hero: _HeroPlan | None = None,
              rng: np.random.Generator | None = None) -> np.ndarray:
    """Roll all actors forward n_steps; returns (n_steps, N, STATE_DIM).

    Everyone follows IDM + pure pursuit on their current (nearest) lane;
    the hero overrides its own control per its plan. Control noise, when
    configured, perturbs accelerations (the emulated-real pools use this).
    """
    rows = np.array(initial, dtype=float)
    n = rows.shape[0]
    out = np.empty((n_steps, n, rows.shape[1]))
    dt = cfg.dt
    for step in range(n_steps):
        lanes, arcs = [], []
        for i in range(n):
            lane, s, _ = _assign_lane(graph, rows[i, 0], rows[i, 1])
            lanes.append(lane)
            arcs.append(s)
        actions = np.zeros((n, 2))
        for i in range(n):
            gap, v_lead = _leader_gap(rows, lanes, arcs, i)
            accel = idm_accel(gap, max(rows[i, 4], 0.0), v_lead, cfg.idm,
                              cfg.limits.decel_limit)
            steer = _pure_pursuit(graph, rows[i], lanes[i], arcs[i],
                                  cfg.limits)
            if hero is not None and i == hero.index:
                accel, steer = _hero_control(graph, rows[i], lanes, arcs,
                                             step, hero, cfg, accel, steer)
            if rng is not None and cfg.control_noise_std > 0:
                accel += rng.normal(0.0, cfg.control_noise_std)
            # no reversing: braking stops at standstill
            accel = max(accel, -max(rows[i, 4], 0.0) / dt)
            actions[i] = (accel, steer)
        hero_accel = None
        if hero is not None:
            # the action box is symmetric but braking capability is not:
            # keep the hero's emergency decel up to decel_limit
            hero_accel = float(np.clip(actions[hero.index, 0],
                                       -cfg.limits.decel_limit,
                                       cfg.limits.accel_max))
        actions = clamp_actions(actions, cfg.limits)
        if hero_accel is not None:
            actions[hero.index, 0] = hero_accel
        rows = step_array(rows, actions, dt, cfg.limits)
        out[step] = rows
    return out


def _hero_control(graph: LaneGraph, row: np.ndarray, lanes: list, arcs: list,
                  step: int, hero: _HeroPlan, cfg: SynthConfig,
                  idm_accel_value: float, idm_steer: float):
    """Hero override: deceleration ramp, or a quintic lateral cut-in."""
    dt = cfg.dt
    i = hero.index
    if hero.maneuver is HeroManeuver.HARD_BRAKE:
        if step < hero.trigger_step:
            return idm_accel_value, idm_steer
        ramp = min(1.0, (step - hero.trigger_step) * dt / BRAKE_RAMP)
        return -hero.target_decel * ramp, idm_steer
    # cut-in: blend lateral offset from the source lane toward the target
    window_steps = CUT_IN_WINDOW / dt
    if step < hero.trigger_step:
        return idm_accel_value, idm_steer
    tau = (step - hero.trigger_step) / window_steps
    if tau >= 1.0:
        return idm_accel_value, idm_steer
    # lateral distance between the lanes at the hero's arclength
    s = arcs[i]
    fx, fy, fh = _lane_point(graph, hero.from_lane, s)
    tx, ty, _ = _lane_point(graph, hero.to_lane, s)
    lat_total = (-math.sin(fh) * (tx - fx) + math.cos(fh) * (ty - fy))
    goal = _quintic(tau + 0.3) * lat_total
    steer = _pure_pursuit(graph, row, hero.from_lane, s, cfg.limits,
                          lateral_goal=goal, lookahead_scale=0.5)
    # easing off through the swerve hands ego a closing gap, harder
    # with intensity; the swerve is quick enough that the merge still
    # lands ahead of ego
    accel = min(idm_accel_value,
                -hero.intensity * 1.5 * cfg.idm.decel_comfort)
    return accel, steer


# ---------------------------------------------------------------- nominal

def _place_actors(graph: LaneGraph, n_actors: int, rng: np.random.Generator,
                  cfg: SynthConfig) -> np.ndarray | None:
    """Initial state rows with sane same-lane gaps, or None if they
    don't fit."""
    lanes = graph.lane_id_list()
    rows = np.zeros((n_actors, 8))
    cursor = {lane: rng.uniform(0.0, 4.0) for lane in lanes}
    for i in range(n_actors):
        lane = lanes[int(rng.integers(len(lanes)))]
        v = rng.uniform(*cfg.speed_frac) * cfg.idm.v_desired
        s = cursor[lane]
        # leave room to drive: placement must not start beyond mid-lane
        if s > _lane_length(graph, lane) * 0.5:
            return None
        x, y, heading = _lane_point(graph, lane, s)
        rows[i] = (x, y, 0.0, heading, v,
                   ACTOR_LENGTH, ACTOR_WIDTH, ACTOR_HEIGHT)
        cursor[lane] = (s + ACTOR_LENGTH + cfg.idm.min_gap
                        + cfg.idm.time_headway * v + rng.uniform(0.0, 10.0))
    return rows


def gen_nominal(graph: LaneGraph, n_actors: int, seed,
                cfg: SynthConfig = SynthConfig(),
                scenario_id: str | None = None) -> Scenario:
    """Nominal lane-following scenario, deterministic in seed."""
    if n_actors < 2:
        raise ConfigError(f"need at least 2 actors, got {n_actors}")
    if not graph.lane_id_list():
        raise GenerationError("lane graph has no lanes")
    rng = np.random.default_rng(seed)
    if scenario_id is None:
        scenario_id = f"nominal-{rng.integers(1 << 48):012x}"
    for _ in range(cfg.placement_retries):
        rows = _place_actors(graph, n_actors, rng, cfg)
        if rows is None:
            continue
        if cfg.burn_in > 0:
            # settle placement transients so the recorded trace starts
            # near IDM equilibrium
            rows = _simulate(graph, rows, cfg.burn_in, cfg)[-1]
        steps = cfg.horizon_past + cfg.horizon_future - 1
        traj = _simulate(graph, rows, steps, cfg)
        states = np.concatenate([rows[None], traj], axis=0)
        scenario = Scenario(
            scenario_id=scenario_id,
            lane_graph=graph,
            actor_ids=tuple(range(1, n_actors + 1)),
            history=states[:cfg.horizon_past],
            future=states[cfg.horizon_past:],
            dt=cfg.dt,
            ego_id=1,
            source=ScenarioSource.SIM_NOMINAL,
            label=ManeuverLabel.NOMINAL,
        )
        if not validate_scenario(scenario).violations:
            return scenario
    raise GenerationError(f"no valid placement after "
                          f"{cfg.placement_retries} attempts "
                          f"({n_actors} actors)")


# ------------------------------------------------------------- hero actor

def _resolve_slot(s: Scenario, target: HeroTarget, graph: LaneGraph):
    """(actor_index or None, slot lane id) for an ego-relative slot.

    The slot holds the nearest actor ahead of ego in the slot lane; a
    cut-in hero behind ego could never merge in front, so actors behind
    never qualify.
    """
    ego = s.ego_index
    rows = s.current_states()
    ego_lane, ego_s, _ = _assign_lane(graph, rows[ego, 0], rows[ego, 1])
    if target is HeroTarget.LEAD:
        slot_lane = ego_lane
    else:
        nodes = graph.lane_nodes(ego_lane)
        node = nodes[min(int(ego_s / graph.spacing), len(nodes) - 1)]
        neighbor = (graph.left_of(node) if target is HeroTarget.LEFT_NEIGHBOR
                    else graph.right_of(node))
        if neighbor is None:
            raise InjectionError(f"ego lane {ego_lane} has no "
                                 f"{target.value} lane")
        slot_lane = int(graph.lane_ids[neighbor])
    best = None
    for i in range(s.n_actors):
        if i == ego:
            continue
        lane, arc, _ = _assign_lane(graph, rows[i, 0], rows[i, 1])
        if lane != slot_lane:
            continue
        ds = arc - ego_s
        if ds <= 0:
            continue
        if target is not HeroTarget.LEAD and ds > 40.0:
            continue
        if best is None or ds < best[1]:
            best = (i, ds)
    return (best[0] if best else None), slot_lane


def _insert_hero_rows(s: Scenario, slot_lane: int, spec: HeroSpec,
                      graph: LaneGraph):
    """History rows for an actor inserted in the slot lane, placed so the
    post-merge gap ahead of ego shrinks as intensity grows."""
    ego = s.ego_index
    rows = s.current_states()
    ego_lane, ego_s, _ = _assign_lane(graph, rows[ego, 0], rows[ego, 1])
    # matched speed so the merge lands where it is aimed; the closing
    # comes from the hero easing off after it is in the corridor
    v = rows[ego, 4]
    gap = 6.0 + (1.0 - spec.intensity) * 10.0
    s0 = ego_s + gap + ACTOR_LENGTH

    # the merge must land between ego and ego's current lane leader
    lead_s = None
    for i in range(s.n_actors):
        if i == ego:
            continue
        lane, arc, _ = _assign_lane(graph, rows[i, 0], rows[i, 1])
        if lane == ego_lane and arc > ego_s:
            lead_s = arc if lead_s is None else min(lead_s, arc)
    if lead_s is not None:
        ceiling = lead_s - ACTOR_LENGTH - 2.0
        floor = ego_s + ACTOR_LENGTH + 2.0
        if ceiling < floor:
            raise InjectionError("no insertion space between ego and its "
                                 "lane leader")
        s0 = min(s0, ceiling)

    # the slot lane itself must be clear around the insertion point
    for i in range(s.n_actors):
        lane, arc, _ = _assign_lane(graph, rows[i, 0], rows[i, 1])
        if lane == slot_lane and abs(arc - s0) < ACTOR_LENGTH + 2.0:
            raise InjectionError("insertion point occupied in the "
                                 f"{slot_lane} lane")

    history = np.zeros((s.horizon_past, 8))
    for k in range(s.horizon_past):
        back = (s.horizon_past - 1 - k) * s.dt * v
        x, y, heading = _lane_point(graph, slot_lane, s0 - back)
        history[k] = (x, y, 0.0, heading, v,
                      ACTOR_LENGTH, ACTOR_WIDTH, ACTOR_HEIGHT)
    return history


def inject_hero(s: Scenario, spec: HeroSpec, seed,
                cfg: SynthConfig | None = None,
                source: ScenarioSource = ScenarioSource.SIM_CRITICAL,
                thresholds: LabelThresholds = LabelThresholds()) -> Scenario:
    """Re-simulate the future with one actor running a critical maneuver.

    The hero fills the requested ego-relative slot; a cut-in with an empty
    neighbor slot inserts a fresh actor there instead. Everyone else
    re-reacts through IDM. The result carries the heuristic label.
    """
    if cfg is None:
        cfg = SynthConfig(horizon_past=s.horizon_past,
                          horizon_future=s.horizon_future, dt=s.dt)
    horizon_s = s.horizon_future * s.dt
    if spec.trigger_time >= horizon_s:
        raise InjectionError(f"trigger_time {spec.trigger_time}s outside the "
                             f"{horizon_s:.1f}s future horizon")
    if spec.maneuver is HeroManeuver.CUT_IN and spec.target is HeroTarget.LEAD:
        raise InjectionError("cut_in needs a neighbor slot, not lead")
    graph = s.lane_graph
    rng = np.random.default_rng(seed)
    hero_index, slot_lane = _resolve_slot(s, spec.target, graph)

    history = np.array(s.history)
    actor_ids = list(s.actor_ids)
    inserted = False
    if hero_index is None:
        if spec.maneuver is not HeroManeuver.CUT_IN:
            raise InjectionError(f"no actor in the {spec.target.value} slot")
        hero_rows = _insert_hero_rows(s, slot_lane, spec, graph)
        history = np.concatenate([history, hero_rows[:, None]], axis=1)
        actor_ids.append(max(actor_ids) + 1)
        hero_index = len(actor_ids) - 1
        inserted = True

    ego_lane, _, _ = _assign_lane(
        graph, s.current_states()[s.ego_index, 0],
        s.current_states()[s.ego_index, 1])
    limits = cfg.limits
    target_decel = (cfg.idm.decel_comfort * (1.0 - spec.intensity)
                    + limits.decel_limit * spec.intensity)
    plan = _HeroPlan(
        index=hero_index, maneuver=spec.maneuver,
        trigger_step=int(round(spec.trigger_time / s.dt)),
        intensity=spec.intensity, from_lane=slot_lane,
        to_lane=ego_lane if spec.maneuver is HeroManeuver.CUT_IN else None,
        target_decel=target_decel)

    future = _simulate(graph, history[-1], s.horizon_future, cfg, hero=plan,
                       rng=rng if cfg.control_noise_std > 0 else None)
    out = Scenario(
        scenario_id=s.scenario_id + f"-{spec.maneuver.value}",
        lane_graph=graph,
        actor_ids=tuple(actor_ids),
        history=history,
        future=future,
        dt=s.dt,
        ego_id=s.ego_id,
        source=source,
        label=ManeuverLabel.NOMINAL,
        provenance={"maneuver": spec.maneuver.value,
                    "target": spec.target.value,
                    "intensity": spec.intensity,
                    "trigger_time": spec.trigger_time,
                    "hero_id": actor_ids[hero_index],
                    "inserted": inserted},
    )
    return dataclasses.replace(out, label=label_scenario(out, thresholds))


# ---------------------------------------------------------------- labeling

def label_scenario(s: Scenario,
                   thresholds: LabelThresholds = LabelThresholds()) -> ManeuverLabel:
    """Heuristic criticality label from ego TTC and any actor's braking."""
    sttc = min_sttc(s)
    full = s.full_states()
    decel = float(np.max(-np.diff(full[..., 4], axis=0) / s.dt, initial=0.0))
    if sttc < thresholds.ttc_very or decel > thresholds.decel_very:
        return ManeuverLabel.VERY_SAFETY_CRITICAL
    if sttc < thresholds.ttc_safety or decel > thresholds.decel_safety:
        return ManeuverLabel.SAFETY_CRITICAL
    return ManeuverLabel.NOMINAL


# --------------------------------------------------------------- rejection

def reject(s: Scenario, checks: CheckSet = CheckSet()) -> RejectionResult:
    """Accept or reject a synthesized scenario with a reason."""
    if np.any(actor_collisions(s.future, checks.iou_threshold)):
        return RejectionResult(False, "collision")
    for t in range(s.horizon_future):
        for i in range(s.n_actors):
            off = corridor_offset(s.lane_graph, s.future[t, i, 0],
                                  s.future[t, i, 1])
            if off > checks.corridor_margin:
                return RejectionResult(
                    False, f"corridor: actor {s.actor_ids[i]} offset "
                           f"{off:.1f} m at step {t}")
    # position-implied accelerations catch teleports that the recorded
    # speed column would hide
    full = s.full_states()
    pos_speed = (np.hypot(np.diff(full[..., 0], axis=0),
                          np.diff(full[..., 1], axis=0)) / s.dt)
    if pos_speed.shape[0] >= 2:
        implied = np.abs(np.diff(pos_speed, axis=0)) / s.dt
        # sustained braking at exactly decel_limit implies an accel of
        # decel_limit up to float noise; the epsilon keeps it legal
        if np.max(implied) > checks.decel_limit + 1e-6:
            return RejectionResult(
                False, f"kinematic: implied |accel| "
                       f"{np.max(implied):.1f} m/s^2")
    report = validate_scenario(s)
    if report.violations:
        return RejectionResult(False, f"invalid: {report.violations[0].message}")
    return RejectionResult(True)


# ------------------------------------------------------------------ pools

def scenario_seed(master_seed: int, *indices: int) -> np.random.SeedSequence:
    """Independent per-scenario seed stream; stable under parallel order."""
    return np.random.SeedSequence([int(master_seed), *[int(i) for i in indices]])


@dataclass
class PoolStats:
    """Rejection accounting for pool generation.

    The identity attempts - accepted == sum(rejections.values()) holds by
    construction.
    """

    attempts: int = 0
    accepted: int = 0
    rejections: dict = dataclasses.field(default_factory=dict)

    def record_rejection(self, reason: str):
        key = reason.split(":")[0].strip()
        self.rejections[key] = self.rejections.get(key, 0) + 1

    def merge(self, other: "PoolStats"):
        self.attempts += other.attempts
        self.accepted += other.accepted
        for key, count in other.rejections.items():
            self.rejections[key] = self.rejections.get(key, 0) + count


def gen_nominal_pool(graph: LaneGraph, n: int, master_seed: int,
                     cfg: SynthConfig = SynthConfig(), n_actors: int = 4,
                     checks: CheckSet = CheckSet(),
                     id_prefix: str = "nominal",
                     max_retries: int = 20,
                     stats: PoolStats | None = None) -> list[Scenario]:
    """n accepted nominal scenarios; index-independent, so any execution
    order (serial or parallel) yields the identical pool."""
    return [nominal_pool_entry(graph, i, master_seed, cfg, n_actors, checks,
                               id_prefix, max_retries, stats)
            for i in range(n)]


def nominal_pool_entry(graph: LaneGraph, index: int, master_seed: int,
                       cfg: SynthConfig = SynthConfig(), n_actors: int = 4,
                       checks: CheckSet = CheckSet(),
                       id_prefix: str = "nominal",
                       max_retries: int = 20,
                       stats: PoolStats | None = None) -> Scenario:
    stats = stats if stats is not None else PoolStats()
    for retry in range(max_retries):
        seed = scenario_seed(master_seed, index, retry)
        candidate = gen_nominal(graph, n_actors, seed, cfg,
                                scenario_id=f"{id_prefix}-{index:05d}")
        stats.attempts += 1
        result = reject(candidate, checks)
        if result.accepted:
            stats.accepted += 1
            return candidate
        stats.record_rejection(result.reason)
    raise GenerationError(f"{id_prefix}[{index}]: no accepted scenario in "
                          f"{max_retries} attempts")


def critical_pool_entry(graph: LaneGraph, index: int, master_seed: int,
                        cfg: SynthConfig = SynthConfig(), n_actors: int = 4,
                        intensity_range: tuple[float, float] = (0.7, 1.0),
                        source: ScenarioSource = ScenarioSource.SIM_CRITICAL,
                        checks: CheckSet = CheckSet(),
                        thresholds: LabelThresholds = LabelThresholds(),
                        id_prefix: str = "critical",
                        max_retries: int = 40,
                        stats: PoolStats | None = None) -> Scenario:
    """One accepted hero-injected scenario for a pool slot."""
    stats = stats if stats is not None else PoolStats()
    for retry in range(max_retries):
        seed = scenario_seed(master_seed, index, retry)
        rng = np.random.default_rng(seed)
        base = gen_nominal(graph, n_actors, rng, cfg,
                           scenario_id=f"{id_prefix}-{index:05d}")
        maneuver = (HeroManeuver.CUT_IN if rng.uniform() < 0.5
                    else HeroManeuver.HARD_BRAKE)
        if maneuver is HeroManeuver.CUT_IN:
            target = (HeroTarget.LEFT_NEIGHBOR if rng.uniform() < 0.5
                      else HeroTarget.RIGHT_NEIGHBOR)
        else:
            target = HeroTarget.LEAD
        horizon_s = cfg.horizon_future * cfg.dt
        spec = HeroSpec(
            maneuver=maneuver,
            trigger_time=float(rng.uniform(0.2, 0.5 * horizon_s)),
            intensity=float(rng.uniform(*intensity_range)),
            target=target)
        stats.attempts += 1
        try:
            candidate = inject_hero(base, spec, rng, cfg=cfg, source=source,
                                    thresholds=thresholds)
        except InjectionError:
            stats.record_rejection("injection")
            continue
        result = reject(candidate, checks)
        if result.accepted:
            stats.accepted += 1
            return candidate
        stats.record_rejection(result.reason)
    raise GenerationError(f"{id_prefix}[{index}]: no accepted scenario in "
                          f"{max_retries} attempts")


def gen_critical_pool(graph: LaneGraph, n: int, master_seed: int,
                      cfg: SynthConfig = SynthConfig(), n_actors: int = 4,
                      intensity_range: tuple[float, float] = (0.7, 1.0),
                      source: ScenarioSource = ScenarioSource.SIM_CRITICAL,
                      checks: CheckSet = CheckSet(),
                      thresholds: LabelThresholds = LabelThresholds(),
                      id_prefix: str = "critical",
                      max_retries: int = 40,
                      stats: PoolStats | None = None) -> list[Scenario]:
    return [critical_pool_entry(graph, i, master_seed, cfg, n_actors,
                                intensity_range, source, checks, thresholds,
                                id_prefix, max_retries, stats)
            for i in range(n)]


def gen_real_pool(graph: LaneGraph, n: int, master_seed: int,
                  cfg: SynthConfig = SynthConfig(), n_actors: int = 4,
                  checks: CheckSet = CheckSet(),
                  thresholds: LabelThresholds = LabelThresholds(),
                  id_prefix: str = "real",
                  max_retries: int = 40,
                  stats: PoolStats | None = None) -> list[Scenario]:
    """Stand-in for a mined real-log pool: same generator, but milder
    maneuver intensities and noisy longitudinal control give it a
    distinct distribution."""
    noisy = dataclasses.replace(cfg, control_noise_std=0.15)
    return gen_critical_pool(graph, n, master_seed, noisy, n_actors,
                             intensity_range=(0.3, 0.7),
                             source=ScenarioSource.REAL_CRITICAL,
                             checks=checks, thresholds=thresholds,
                             id_prefix=id_prefix, max_retries=max_retries,
                             stats=stats)


# ----------------------------------------------------------------- mixing

def mix_sampler(real_pool: Sequence[Scenario], sim_pool: Sequence[Scenario],
                cfg: MixConfig) -> Iterator[Scenario]:
    """Endless deterministic stream drawing real with probability
    alpha_real, sim otherwise."""
    if cfg.alpha_real > 0 and not real_pool:
        raise ConfigError("alpha_real > 0 with an empty real pool")
    if cfg.alpha_real < 1 and not sim_pool:
        raise ConfigError("alpha_real < 1 with an empty sim pool")
    real = list(real_pool) * cfg.upsample_real
    sim = list(sim_pool)
    rng = np.random.default_rng(cfg.seed)

    def stream() -> Iterator[Scenario]:
        while True:
            if rng.uniform() < cfg.alpha_real:
                yield real[int(rng.integers(len(real)))]
            else:
                yield sim[int(rng.integers(len(sim)))]

    return stream()
