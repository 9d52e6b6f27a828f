import json

import numpy as np
import pytest

from flowscene.errors import DataError
from flowscene.scene import ManeuverLabel, ScenarioSource
from flowscene.scenario_io import (file_sha256, iter_pool, load_pool,
                                   read_header, save_pool)

from conftest import make_scenario


def _pool(n=3, **kw):
    return [make_scenario(scenario_id=f"s-{i}", **kw) for i in range(n)]


class TestRoundTrip:
    def test_field_for_field_identity(self, tmp_path):
        path = tmp_path / "pool.jsonl"
        pool = _pool(3)
        save_pool(path, pool)
        back = load_pool(path)
        assert len(back) == len(pool)
        for a, b in zip(pool, back):
            assert a.scenario_id == b.scenario_id
            assert a.actor_ids == b.actor_ids
            assert a.ego_id == b.ego_id
            assert a.dt == b.dt
            assert a.source is b.source and a.label is b.label
            assert np.array_equal(a.history, b.history)
            assert np.array_equal(a.future, b.future)
            assert np.array_equal(a.lane_graph.positions, b.lane_graph.positions)
            assert np.array_equal(a.lane_graph.successors, b.lane_graph.successors)

    def test_floats_round_trip_exactly(self, tmp_path):
        path = tmp_path / "pool.jsonl"
        s = make_scenario()
        # adversarial float values: many digits, denormal-ish, negative zero
        hist = s.history.copy()
        hist[0, 0, 0] = 0.1 + 0.2
        hist[0, 0, 1] = 1e-300
        hist[0, 1, 0] = -0.0
        hist[0, 1, 1] = np.nextafter(1.0, 2.0)
        s = Scenario_with_history(s, hist)
        save_pool(path, [s])
        back = load_pool(path)[0]
        assert back.history[0, 0, 0] == hist[0, 0, 0]
        assert back.history[0, 0, 1] == hist[0, 0, 1]
        assert back.history[0, 1, 1] == hist[0, 1, 1]

    def test_header_carries_time_base(self, tmp_path):
        path = tmp_path / "pool.jsonl"
        save_pool(path, _pool(1, horizon_past=5, horizon_future=7, dt=0.2))
        header = read_header(path)
        assert header["dt"] == 0.2
        assert header["H"] == 5 and header["T"] == 7
        assert header["schema_version"] == 1
        assert header["state_fields"][0] == "x"

    def test_writes_are_deterministic(self, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_pool(a, _pool(2))
        save_pool(b, _pool(2))
        assert file_sha256(a) == file_sha256(b)


def Scenario_with_history(s, hist):
    from flowscene.scene import Scenario
    return Scenario(scenario_id=s.scenario_id, lane_graph=s.lane_graph,
                    actor_ids=s.actor_ids, history=hist, future=s.future,
                    dt=s.dt, ego_id=s.ego_id, source=s.source, label=s.label)


class TestRejection:
    def test_nan_rejected_on_write(self, tmp_path):
        s = make_scenario()
        hist = s.history.copy()
        hist[0, 0, 0] = np.nan
        bad = Scenario_with_history(s, hist)
        with pytest.raises(DataError):
            save_pool(tmp_path / "bad.jsonl", [bad])

    def test_mixed_time_base_rejected(self, tmp_path):
        pool = [make_scenario(scenario_id="a"), make_scenario(scenario_id="b", dt=0.2)]
        with pytest.raises(DataError):
            save_pool(tmp_path / "bad.jsonl", pool)

    def test_empty_pool_rejected(self, tmp_path):
        with pytest.raises(DataError):
            save_pool(tmp_path / "bad.jsonl", [])

    def test_wrong_schema_version_rejected(self, tmp_path):
        path = tmp_path / "pool.jsonl"
        save_pool(path, _pool(1))
        lines = path.read_text().splitlines()
        header = json.loads(lines[0])
        header["schema_version"] = 99
        path.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
        with pytest.raises(DataError):
            read_header(path)

    def test_wrong_field_order_rejected(self, tmp_path):
        path = tmp_path / "pool.jsonl"
        save_pool(path, _pool(1))
        lines = path.read_text().splitlines()
        header = json.loads(lines[0])
        header["state_fields"] = list(reversed(header["state_fields"]))
        path.write_text("\n".join([json.dumps(header)] + lines[1:]) + "\n")
        with pytest.raises(DataError):
            read_header(path)

    def test_corrupt_line_cites_line_number(self, tmp_path):
        path = tmp_path / "pool.jsonl"
        save_pool(path, _pool(2))
        with open(path, "a") as f:
            f.write("{not json\n")
        with pytest.raises(DataError, match=":4"):
            load_pool(path)

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            list(iter_pool(tmp_path / "nope.jsonl"))
