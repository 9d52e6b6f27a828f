"""Scenario pool serialization.

A pool is a JSONL file: one header object followed by one object per
scenario. The header pins the schema version, the shared time base (dt, H,
T), and the state field ordering, so a reader can reject files it does not
understand before parsing any scenario.

Floats are written with json's shortest round-trip repr and parsed back to
the identical float64 bit pattern; NaN and infinities are rejected on both
paths (allow_nan=False).
"""

from __future__ import annotations

import hashlib
import json
import os
from typing import Iterable, Iterator

import numpy as np

from .errors import DataError
from .scene import (STATE_DIM, STATE_FIELDS, LaneGraph, ManeuverLabel,
                    Scenario, ScenarioSource)

SCHEMA_VERSION = 1


def _lane_graph_payload(g: LaneGraph) -> dict:
    return {
        "positions": g.positions.tolist(),
        "headings": g.headings.tolist(),
        "lane_ids": g.lane_ids.tolist(),
        "successors": g.successors.tolist(),
        "left_pairs": g.left_pairs.tolist(),
        "right_pairs": g.right_pairs.tolist(),
        "spacing": g.spacing,
    }


def _lane_graph_from_payload(payload: dict) -> LaneGraph:
    return LaneGraph(
        positions=np.array(payload["positions"], dtype=float).reshape(-1, 2),
        headings=np.array(payload["headings"], dtype=float),
        lane_ids=np.array(payload["lane_ids"], dtype=np.int64),
        successors=np.array(payload["successors"], dtype=np.int64).reshape(-1, 2),
        left_pairs=np.array(payload["left_pairs"], dtype=np.int64).reshape(-1, 2),
        right_pairs=np.array(payload["right_pairs"], dtype=np.int64).reshape(-1, 2),
        spacing=float(payload["spacing"]),
    )


def scenario_payload(s: Scenario) -> dict:
    return {
        "scenario_id": s.scenario_id,
        "actor_ids": list(s.actor_ids),
        "ego_id": s.ego_id,
        "source": s.source.value,
        "label": s.label.value,
        "history": s.history.tolist(),
        "future": s.future.tolist(),
        "lane_graph": _lane_graph_payload(s.lane_graph),
        "provenance": s.provenance,
    }


def scenario_from_payload(payload: dict, dt: float) -> Scenario:
    history = np.array(payload["history"], dtype=float)
    future = np.array(payload["future"], dtype=float)
    if history.ndim != 3 or history.shape[2] != STATE_DIM:
        raise DataError(f"scenario {payload.get('scenario_id')}: bad history shape {history.shape}")
    if future.ndim != 3 or future.shape[2] != STATE_DIM:
        raise DataError(f"scenario {payload.get('scenario_id')}: bad future shape {future.shape}")
    return Scenario(
        scenario_id=str(payload["scenario_id"]),
        lane_graph=_lane_graph_from_payload(payload["lane_graph"]),
        actor_ids=tuple(int(a) for a in payload["actor_ids"]),
        history=history,
        future=future,
        dt=dt,
        ego_id=int(payload["ego_id"]),
        source=ScenarioSource(payload["source"]),
        label=ManeuverLabel(payload["label"]),
        provenance=payload.get("provenance"),
    )


def _dump(obj) -> str:
    return json.dumps(obj, allow_nan=False, separators=(",", ":"))


def save_pool(path: str | os.PathLike, scenarios: Iterable[Scenario]) -> int:
    """Write a scenario pool; returns the number of scenarios written.

    All scenarios must share dt and horizon lengths; the shared values go in
    the header line.
    """
    pool = list(scenarios)
    if not pool:
        raise DataError("refusing to write an empty pool")
    first = pool[0]
    header = {
        "schema_version": SCHEMA_VERSION,
        "dt": first.dt,
        "H": first.horizon_past,
        "T": first.horizon_future,
        "state_fields": list(STATE_FIELDS),
    }
    for s in pool:
        if s.dt != first.dt or s.horizon_past != header["H"] or s.horizon_future != header["T"]:
            raise DataError(
                f"scenario {s.scenario_id} has time base (dt={s.dt}, H={s.horizon_past}, "
                f"T={s.horizon_future}) but the pool header pins (dt={header['dt']}, "
                f"H={header['H']}, T={header['T']})")
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        f.write(_dump(header) + "\n")
        for s in pool:
            try:
                f.write(_dump(scenario_payload(s)) + "\n")
            except ValueError as e:
                raise DataError(f"scenario {s.scenario_id} is not serializable: {e}") from e
    os.replace(tmp, path)
    return len(pool)


def read_header(path: str | os.PathLike) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        line = f.readline()
    if not line.strip():
        raise DataError(f"{path}: empty pool file")
    header = json.loads(line)
    if not isinstance(header, dict) or "schema_version" not in header:
        raise DataError(f"{path}: first line is not a pool header")
    if header["schema_version"] != SCHEMA_VERSION:
        raise DataError(f"{path}: schema version {header['schema_version']} "
                        f"unsupported (expected {SCHEMA_VERSION})")
    if header.get("state_fields") != list(STATE_FIELDS):
        raise DataError(f"{path}: state field order {header.get('state_fields')} "
                        f"does not match {list(STATE_FIELDS)}")
    return header


def iter_pool(path: str | os.PathLike) -> Iterator[Scenario]:
    """Stream scenarios from a pool file."""
    header = read_header(path)
    dt = float(header["dt"])
    with open(path, "r", encoding="utf-8") as f:
        f.readline()
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: invalid JSON: {e}") from e
            s = scenario_from_payload(payload, dt)
            if s.horizon_past != header["H"] or s.horizon_future != header["T"]:
                raise DataError(f"{path}:{lineno}: scenario horizons ({s.horizon_past}, "
                                f"{s.horizon_future}) disagree with header")
            yield s


def load_pool(path: str | os.PathLike) -> list[Scenario]:
    return list(iter_pool(path))


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
