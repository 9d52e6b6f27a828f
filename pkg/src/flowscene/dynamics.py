"""Vehicle dynamics: kinematic bicycle plant, its inverse, and IDM.

The plant is a kinematic bicycle with wheelbase = 0.6 * length. One step:

    v'      = v + accel * dt
    v_mid   = (v + v') / 2
    yawrate = (v_mid / wheelbase) * tan(steer)
    yaw'    = wrap(yaw + yawrate * dt)
    x'      = x + v_mid * cos(yaw + yawrate * dt / 2) * dt
    y'      = y + v_mid * sin(yaw + yawrate * dt / 2) * dt

The midpoint speed and midpoint heading make the integrator second-order and,
more importantly here, exactly invertible: infer_actions recovers in-bounds
actions from a rolled-out trajectory to float precision, which is what makes
decoded-action supervision targets consistent with ground-truth futures.

All array functions take state rows in STATE_FIELDS order and action rows as
(accel, steer), vectorized over leading dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError
from .scene import ActorState, Action, wrap_angle

ACTION_FIELDS = ("accel", "steer")

WHEELBASE_RATIO = 0.6
# below this speed a yaw change carries no steer information
V_STEER_EPS = 0.01


@dataclass(frozen=True, slots=True)
class Limits:
    """Action box and the hard deceleration cap used for rejection checks."""

    accel_max: float = 8.0
    steer_max: float = 0.6
    decel_limit: float = 9.0
    wheelbase_ratio: float = WHEELBASE_RATIO


DEFAULT_LIMITS = Limits()


@dataclass(frozen=True, slots=True)
class IdmParams:
    """Intelligent Driver Model constants; all strictly positive."""

    v_desired: float = 15.0
    time_headway: float = 1.5
    min_gap: float = 2.0
    accel_max: float = 2.0
    decel_comfort: float = 2.5
    exponent: float = 4.0

    def __post_init__(self):
        for name in ("v_desired", "time_headway", "min_gap", "accel_max",
                     "decel_comfort", "exponent"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"IdmParams.{name} must be strictly positive, got {value}")


URBAN_IDM = IdmParams(v_desired=15.0)
HIGHWAY_IDM = IdmParams(v_desired=30.0)


def step_array(states: np.ndarray, actions: np.ndarray, dt: float,
               limits: Limits = DEFAULT_LIMITS) -> np.ndarray:
    """Advance state rows one step; broadcasts over leading dimensions."""
    states = np.asarray(states, dtype=float)
    actions = np.asarray(actions, dtype=float)
    if not np.all(np.isfinite(states)):
        raise NumericalError("step: non-finite state input")
    if not np.all(np.isfinite(actions)):
        raise NumericalError("step: non-finite action input")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    accel = actions[..., 0]
    steer = actions[..., 1]
    yaw = states[..., 3]
    v = states[..., 4]
    wheelbase = limits.wheelbase_ratio * states[..., 5]
    v_new = v + accel * dt
    v_mid = 0.5 * (v + v_new)
    yawrate = (v_mid / wheelbase) * np.tan(steer)
    yaw_mid = yaw + 0.5 * yawrate * dt
    out = states.copy()
    out[..., 0] = states[..., 0] + v_mid * np.cos(yaw_mid) * dt
    out[..., 1] = states[..., 1] + v_mid * np.sin(yaw_mid) * dt
    out[..., 3] = wrap_angle(yaw + yawrate * dt)
    out[..., 4] = v_new
    return out


def step(state: ActorState, action: Action, dt: float,
         limits: Limits = DEFAULT_LIMITS) -> ActorState:
    """Single-actor convenience wrapper around step_array."""
    row = step_array(state.as_array(), np.array([action.accel, action.steer]), dt, limits)
    return ActorState.from_array(row)


def rollout(initial: np.ndarray, actions: np.ndarray, dt: float,
            limits: Limits = DEFAULT_LIMITS) -> np.ndarray:
    """Integrate an action sequence from initial states.

    initial is (N, STATE_DIM) (or (STATE_DIM,) for one actor), actions is
    (T, N, 2) (or (T, 2)). Returns (T, N, STATE_DIM) (or (T, STATE_DIM)):
    the state after each applied action, not including the initial state.
    """
    initial = np.asarray(initial, dtype=float)
    actions = np.asarray(actions, dtype=float)
    steps = actions.shape[0]
    out = np.empty((steps,) + initial.shape)
    state = initial
    for t in range(steps):
        try:
            state = step_array(state, actions[t], dt, limits)
        except (NumericalError, ValueError) as e:
            raise type(e)(f"rollout step {t}: {e}") from e
        out[t] = state
    return out


def infer_actions(traj: np.ndarray, dt: float,
                  limits: Limits = DEFAULT_LIMITS) -> np.ndarray:
    """Invert the plant: recover the action taken between consecutive states.

    traj is (T, N, STATE_DIM) or (T, STATE_DIM) with T >= 2; returns
    (T-1, N, 2) or (T-1, 2). Accel comes from consecutive speeds, steer from
    consecutive yaws and the midpoint speed; both are clamped to the action
    box, and steer is zero wherever the midpoint speed is below 0.01 m/s.
    """
    traj = np.asarray(traj, dtype=float)
    if traj.shape[0] < 2:
        raise ValueError(f"need at least 2 trajectory steps, got {traj.shape[0]}")
    v0 = traj[:-1, ..., 4]
    v1 = traj[1:, ..., 4]
    accel = (v1 - v0) / dt
    v_mid = 0.5 * (v0 + v1)
    dyaw = wrap_angle(traj[1:, ..., 3] - traj[:-1, ..., 3])
    wheelbase = limits.wheelbase_ratio * traj[:-1, ..., 5]
    safe_v = np.where(np.abs(v_mid) < V_STEER_EPS, 1.0, v_mid)
    steer = np.arctan(wheelbase * dyaw / (safe_v * dt))
    steer = np.where(np.abs(v_mid) < V_STEER_EPS, 0.0, steer)
    accel = np.clip(accel, -limits.accel_max, limits.accel_max)
    steer = np.clip(steer, -limits.steer_max, limits.steer_max)
    return np.stack([accel, steer], axis=-1)


def idm_accel(gap, v, v_lead, p: IdmParams = URBAN_IDM,
              decel_limit: float = DEFAULT_LIMITS.decel_limit):
    """IDM car-following acceleration; scalar or elementwise on arrays.

    gap is bumper-to-bumper distance to the leader (use a large value such
    as 1e9 when there is no leader). The interaction term of the desired gap
    is floored at zero so a much faster leader cannot produce a spurious
    acceleration spike at low speeds, which keeps the response monotone
    non-increasing in v.
    """
    gap_arr = np.asarray(gap, dtype=float)
    if np.any(gap_arr <= 0):
        raise ValueError("idm_accel requires gap > 0")
    v = np.asarray(v, dtype=float)
    v_lead = np.asarray(v_lead, dtype=float)
    dynamic = v * p.time_headway + v * (v - v_lead) / (2.0 * math.sqrt(p.accel_max * p.decel_comfort))
    s_star = p.min_gap + np.maximum(0.0, dynamic)
    accel = p.accel_max * (1.0 - (v / p.v_desired) ** p.exponent - (s_star / gap_arr) ** 2)
    accel = np.clip(accel, -decel_limit, p.accel_max)
    if accel.ndim == 0:
        return float(accel)
    return accel


def clamp_actions(actions: np.ndarray, limits: Limits = DEFAULT_LIMITS) -> np.ndarray:
    """Clip action rows into the action box."""
    actions = np.asarray(actions, dtype=float)
    out = actions.copy()
    out[..., 0] = np.clip(actions[..., 0], -limits.accel_max, limits.accel_max)
    out[..., 1] = np.clip(actions[..., 1], -limits.steer_max, limits.steer_max)
    return out


def step_tensor(states, actions, dt: float, limits: Limits = DEFAULT_LIMITS):
    """Tape twin of step_array for closed-loop decoding: one autodiff node
    whose forward matches step_array bit for bit and whose backward carries
    gradients into both the state and action rows."""
    from . import tensor as T

    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    s, a = states.data, actions.data
    if s.shape[:-1] != a.shape[:-1] or s.shape[-1] != 8 or a.shape[-1] != 2:
        raise ValueError(f"step_tensor: got states {s.shape} and actions {a.shape}")
    accel, steer = a[..., 0], a[..., 1]
    yaw, v = s[..., 3], s[..., 4]
    wheelbase = limits.wheelbase_ratio * s[..., 5]
    v_new = v + accel * dt
    v_mid = 0.5 * (v + v_new)
    tan_s = np.tan(steer)
    yawrate = (v_mid / wheelbase) * tan_s
    yaw_mid = yaw + 0.5 * yawrate * dt
    cos_m, sin_m = np.cos(yaw_mid), np.sin(yaw_mid)
    out = s.copy()
    out[..., 0] = s[..., 0] + v_mid * cos_m * dt
    out[..., 1] = s[..., 1] + v_mid * sin_m * dt
    out[..., 3] = wrap_angle(yaw + yawrate * dt)
    out[..., 4] = v_new

    def backward(g):
        gx, gy, gyaw_out, gv_out = g[..., 0], g[..., 1], g[..., 3], g[..., 4]
        # x', y' depend on yaw_mid; yaw' on yawrate (wrap shifts by a constant)
        g_yawmid = (gy * cos_m - gx * sin_m) * v_mid * dt
        g_yawrate = 0.5 * dt * g_yawmid + dt * gyaw_out
        g_vmid = (gx * cos_m + gy * sin_m) * dt + g_yawrate * tan_s / wheelbase

        gs = g.copy()
        gs[..., 3] = gyaw_out + g_yawmid
        gs[..., 4] = gv_out + g_vmid
        gs[..., 5] = g[..., 5] - g_yawrate * yawrate / s[..., 5]
        states._accumulate(gs)

        ga = np.empty_like(a)
        ga[..., 0] = gv_out * dt + 0.5 * dt * g_vmid
        ga[..., 1] = g_yawrate * v_mid / (wheelbase * np.cos(steer) ** 2)
        actions._accumulate(ga)

    return T._node(out, (states, actions), "bicycle_step", backward)
