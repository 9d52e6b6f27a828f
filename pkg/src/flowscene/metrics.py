"""Safety and distribution metrics for scenario rollouts.

All metrics score the future window of a Scenario (the part a generator
produced); history only anchors the rollout. Conventions the paper-level
definitions leave open are pinned here:

* "leading actor": box center ahead of ego (positive longitudinal offset in
  ego's body frame) within a +-1.75 m lateral corridor; the closest such
  actor by bumper gap governs the timestep.
* TTC: constant-velocity projection, bumper-to-bumper gap over closing
  speed, defined only while the gap is positive and the pair is closing.
  A scenario with no defined TTC anywhere scores the 10 s cap.
* kinematic histograms: fixed bins (velocity 64 over [0, 40] m/s, accel 64
  over [-10, 10] m/s^2, jerk 64 over [-50, 50] m/s^3) plus one overflow bin
  at each end; Jensen-Shannon divergence in nats with no smoothing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import geom
from .errors import DataError, ShapeError
from .scene import COLLISION_IOU_THRESHOLD, Scenario

STTC_CAP = 10.0
NEAR_MISS_STTC = 3.0
CORRIDOR_HALF_WIDTH = 1.75

BIN_SPECS = {
    "velocity": (0.0, 40.0, 64),
    "accel": (-10.0, 10.0, 64),
    "jerk": (-50.0, 50.0, 64),
}


def min_sttc(scenario: Scenario, ego_id: int | None = None,
             corridor_half_width: float = CORRIDOR_HALF_WIDTH,
             cap: float = STTC_CAP) -> float:
    """Scenario-level minimum time-to-collision for the ego actor."""
    ego_id = scenario.ego_id if ego_id is None else ego_id
    if ego_id not in scenario.actor_ids:
        raise DataError(f"ego id {ego_id} not present in scenario {scenario.scenario_id}")
    e = scenario.actor_ids.index(ego_id)
    states = scenario.future
    best = cap
    for t in range(states.shape[0]):
        ttc = _step_ttc(states[t], e, corridor_half_width)
        if ttc is not None and ttc < best:
            best = ttc
    return best


def _step_ttc(rows: np.ndarray, ego_index: int, corridor_half_width: float):
    ego = rows[ego_index]
    cos_e, sin_e = math.cos(ego[3]), math.sin(ego[3])
    dx_world = rows[:, 0] - ego[0]
    dy_world = rows[:, 1] - ego[1]
    # longitudinal/lateral offsets of every actor in ego's body frame
    along = cos_e * dx_world + sin_e * dy_world
    lateral = -sin_e * dx_world + cos_e * dy_world
    gaps = along - 0.5 * ego[5] - 0.5 * rows[:, 5]
    candidates = [
        i for i in range(len(rows))
        if i != ego_index and along[i] > 0.0
        and abs(lateral[i]) <= corridor_half_width and gaps[i] > 0.0
    ]
    if not candidates:
        return None
    lead = min(candidates, key=lambda i: (gaps[i], i))
    closing = ego[4] - rows[lead, 4] * math.cos(rows[lead, 3] - ego[3])
    if closing <= 0.0:
        return None
    return float(gaps[lead] / closing)


def actor_collisions(states: np.ndarray,
                     iou_threshold: float = COLLISION_IOU_THRESHOLD) -> np.ndarray:
    """Boolean per-actor collision flags over a (T, N, STATE_DIM) rollout."""
    steps, n, _ = states.shape
    hit = np.zeros(n, dtype=bool)
    radii = 0.5 * np.hypot(states[..., 5], states[..., 6])
    for t in range(steps):
        rows = states[t]
        centers = rows[:, :2]
        dists = np.hypot(centers[:, None, 0] - centers[None, :, 0],
                         centers[:, None, 1] - centers[None, :, 1])
        reach = radii[t][:, None] + radii[t][None, :]
        for i in range(n):
            for j in range(i + 1, n):
                if hit[i] and hit[j]:
                    continue
                if dists[i, j] > reach[i, j]:
                    continue
                iou = geom.oriented_box_iou(geom.state_box(rows[i]), geom.state_box(rows[j]))
                if iou > iou_threshold:
                    hit[i] = hit[j] = True
    return hit


def collision_rate(scenario: Scenario,
                   iou_threshold: float = COLLISION_IOU_THRESHOLD) -> float:
    """Fraction of actors involved in any pairwise box overlap in the future."""
    flags = actor_collisions(scenario.future, iou_threshold)
    return float(flags.sum() / len(flags))


def near_miss(scenarios: Sequence[Scenario]) -> float:
    """Fraction of scenarios with minSTTC under 3 s and no collision."""
    scenarios = list(scenarios)
    if not scenarios:
        raise DataError("near_miss needs a non-empty rollout set")
    count = 0
    for s in scenarios:
        if min_sttc(s) < NEAR_MISS_STTC and collision_rate(s) == 0.0:
            count += 1
    return count / len(scenarios)


def displacement_error(rollout: Scenario | np.ndarray,
                       ground_truth: Scenario | np.ndarray) -> float:
    """Mean Euclidean position error over actors and timesteps."""
    a = rollout.future if isinstance(rollout, Scenario) else np.asarray(rollout)
    b = ground_truth.future if isinstance(ground_truth, Scenario) else np.asarray(ground_truth)
    if a.shape != b.shape:
        raise ShapeError(f"displacement_error: rollout shape {a.shape} != ground truth {b.shape}")
    return float(np.mean(np.hypot(a[..., 0] - b[..., 0], a[..., 1] - b[..., 1])))


def _pool_quantity(scenarios: Iterable[Scenario], quantity: str) -> np.ndarray:
    values = []
    for s in scenarios:
        speeds = s.future[:, :, 4]
        if quantity == "velocity":
            values.append(speeds.reshape(-1))
        elif quantity == "accel":
            if speeds.shape[0] >= 2:
                values.append((np.diff(speeds, axis=0) / s.dt).reshape(-1))
        elif quantity == "jerk":
            if speeds.shape[0] >= 3:
                values.append((np.diff(speeds, n=2, axis=0) / s.dt ** 2).reshape(-1))
        else:
            raise ValueError(f"unknown quantity {quantity!r}")
    if not values:
        raise DataError(f"no samples available for quantity {quantity!r}")
    return np.concatenate(values)


def histogram_counts(values: np.ndarray, quantity: str) -> np.ndarray:
    lo, hi, nbins = BIN_SPECS[quantity]
    edges = np.linspace(lo, hi, nbins + 1)
    inner, _ = np.histogram(values[(values >= lo) & (values <= hi)], bins=edges)
    under = int(np.sum(values < lo))
    over = int(np.sum(values > hi))
    return np.concatenate([[under], inner, [over]]).astype(np.float64)


def jsd_from_counts(counts_a: np.ndarray, counts_b: np.ndarray) -> float:
    """Jensen-Shannon divergence in nats; zero bins contribute zero mass."""
    ta, tb = counts_a.sum(), counts_b.sum()
    if ta <= 0 or tb <= 0:
        raise DataError("jsd: empty histogram")
    p = counts_a / ta
    q = counts_b / tb
    m = 0.5 * (p + q)

    def half(r):
        mask = r > 0
        return float(np.sum(r[mask] * np.log(r[mask] / m[mask])))

    return 0.5 * half(p) + 0.5 * half(q)


def kinematics_jsd(set_a: Sequence[Scenario], set_b: Sequence[Scenario],
                   quantity: str) -> float:
    set_a, set_b = list(set_a), list(set_b)
    if not set_a or not set_b:
        raise DataError("kinematics_jsd needs two non-empty rollout sets")
    counts_a = histogram_counts(_pool_quantity(set_a, quantity), quantity)
    counts_b = histogram_counts(_pool_quantity(set_b, quantity), quantity)
    return jsd_from_counts(counts_a, counts_b)


@dataclass(frozen=True)
class MetricsReport:
    median_minsttc: float
    near_miss_rate: float
    collision_rate: float
    displacement_error: float | None
    jsd_velocity: float
    jsd_accel: float
    jsd_jerk: float
    n_generated: int
    n_reference: int

    def as_dict(self) -> dict:
        return {
            "median_minsttc": self.median_minsttc,
            "near_miss_rate": self.near_miss_rate,
            "collision_rate": self.collision_rate,
            "displacement_error": self.displacement_error,
            "jsd_velocity": self.jsd_velocity,
            "jsd_accel": self.jsd_accel,
            "jsd_jerk": self.jsd_jerk,
            "n_generated": self.n_generated,
            "n_reference": self.n_reference,
        }

    def format_table(self) -> str:
        rows = [
            ("median minSTTC [s]", f"{self.median_minsttc:.3f}"),
            ("near-miss rate", f"{self.near_miss_rate:.3f}"),
            ("collision rate", f"{self.collision_rate:.3f}"),
            ("displacement [m]", "n/a" if self.displacement_error is None
             else f"{self.displacement_error:.3f}"),
            ("JSD velocity [nats]", f"{self.jsd_velocity:.4f}"),
            ("JSD accel [nats]", f"{self.jsd_accel:.4f}"),
            ("JSD jerk [nats]", f"{self.jsd_jerk:.4f}"),
            ("scenarios scored", f"{self.n_generated} vs {self.n_reference} reference"),
        ]
        width = max(len(name) for name, _ in rows)
        return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)


def report(generated: Sequence[Scenario], reference: Sequence[Scenario]) -> MetricsReport:
    """Aggregate the full metric suite for a generated set against a reference."""
    generated, reference = list(generated), list(reference)
    if not generated or not reference:
        raise DataError("report needs non-empty generated and reference sets")
    sttcs = [min_sttc(s) for s in generated]
    collisions = [collision_rate(s) for s in generated]
    near = sum(1 for sttc, col in zip(sttcs, collisions)
               if sttc < NEAR_MISS_STTC and col == 0.0) / len(generated)
    by_id = {s.scenario_id: s for s in reference}
    disp_values = []
    for s in generated:
        truth = by_id.get(s.scenario_id)
        if truth is not None and truth.future.shape == s.future.shape:
            disp_values.append(displacement_error(s, truth))
    return MetricsReport(
        median_minsttc=float(np.median(sttcs)),
        near_miss_rate=near,
        collision_rate=float(np.mean(collisions)),
        displacement_error=float(np.mean(disp_values)) if disp_values else None,
        jsd_velocity=kinematics_jsd(generated, reference, "velocity"),
        jsd_accel=kinematics_jsd(generated, reference, "accel"),
        jsd_jerk=kinematics_jsd(generated, reference, "jerk"),
        n_generated=len(generated),
        n_reference=len(reference),
    )
