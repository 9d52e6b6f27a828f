"""Backbone invariances, map encoding, and end-to-end gradient checks."""

import math

import numpy as np
import pytest

from flowscene import tensor as T
from flowscene import backbone as B
from flowscene.errors import DataError, ShapeError
from flowscene.scene import LaneGraph, wrap_angle

from conftest import make_scenario, straight_graph
from gradcheck import check_gradients

CFG = B.BackboneConfig()


def small_setup(n_actors=3, horizon_past=4, horizon_future=6, seed=0, cfg=CFG, **kw):
    graph = straight_graph()
    scenario = make_scenario(n_actors=n_actors, horizon_past=horizon_past,
                             horizon_future=horizon_future, **kw)
    rng = np.random.default_rng(seed)
    encoder = B.MapEncoder(cfg.d_model, rng)
    net = B.Backbone(cfg, rng)
    return graph, scenario, encoder, net


def run_forward(net, encoder, graph, scenario, cond=None):
    tokens = encoder.encode(graph)
    states = scenario.full_states()
    tv = np.arange(states.shape[0]) / max(states.shape[0] - 1, 1)
    ctx = net.build_context(scenario.current_states(), scenario.actor_ids,
                            graph, tokens, ego_index=scenario.ego_index)
    return net.forward(states, ctx, tv, cond=cond)


def rigid_transform_graph(graph, dx, dy, dyaw):
    c, s = math.cos(dyaw), math.sin(dyaw)
    rot = np.array([[c, -s], [s, c]])
    return LaneGraph(
        positions=graph.positions @ rot.T + np.array([dx, dy]),
        headings=wrap_angle(graph.headings + dyaw),
        lane_ids=graph.lane_ids,
        successors=graph.successors,
        left_pairs=graph.left_pairs,
        right_pairs=graph.right_pairs,
        spacing=graph.spacing,
    )


def rigid_transform_states(states, dx, dy, dyaw):
    c, s = math.cos(dyaw), math.sin(dyaw)
    out = states.copy()
    out[..., 0] = c * states[..., 0] - s * states[..., 1] + dx
    out[..., 1] = s * states[..., 0] + c * states[..., 1] + dy
    out[..., 3] = wrap_angle(states[..., 3] + dyaw)
    return out


class TestSinusoidalPe:
    def test_t_zero(self):
        pe = B.sinusoidal_pe(0.0, 8)
        assert np.array_equal(pe[0::2], np.zeros(4))
        assert np.array_equal(pe[1::2], np.ones(4))

    def test_first_pair_is_plain_sin_cos(self):
        pe = B.sinusoidal_pe(0.7, 16)
        assert pe[0] == pytest.approx(math.sin(0.7), abs=1e-12)
        assert pe[1] == pytest.approx(math.cos(0.7), abs=1e-12)

    def test_continuity(self):
        a = B.sinusoidal_pe(0.5, 64)
        b = B.sinusoidal_pe(0.5000001, 64)
        assert np.abs(a - b).max() < 1e-4

    def test_odd_dim_rejected(self):
        with pytest.raises(ShapeError):
            B.sinusoidal_pe(0.1, 7)

    def test_values_bounded(self):
        for t in np.linspace(0, 1, 7):
            pe = B.sinusoidal_pe(float(t), 32)
            assert np.all(np.abs(pe) <= 1.0)


class TestMapFeatures:
    def test_identical_isolated_nodes(self):
        # nodes with no neighbors are indistinguishable regardless of pose
        graph = LaneGraph(
            positions=np.array([[0.0, 0.0], [37.0, -4.0], [1.5, 99.0]]),
            headings=np.array([0.0, 1.2, -2.8]),
            lane_ids=np.array([0, 1, 2]),
            successors=np.zeros((0, 2), dtype=int),
            left_pairs=np.zeros((0, 2), dtype=int),
            right_pairs=np.zeros((0, 2), dtype=int),
        )
        feats = B.map_node_features(graph)
        assert np.array_equal(feats[0], feats[1])
        assert np.array_equal(feats[1], feats[2])

    def test_rigid_invariance(self):
        graph = straight_graph()
        moved = rigid_transform_graph(graph, 120.0, -45.0, 2.1)
        a = B.map_node_features(graph)
        b = B.map_node_features(moved)
        assert np.abs(a - b).max() < 1e-9

    def test_successor_offset_is_spacing(self):
        graph = straight_graph()
        feats = B.map_node_features(graph)
        # first node of lane 0 runs along +x with a successor straight ahead
        assert feats[0, 0] == 1.0
        assert feats[0, 1] == pytest.approx(graph.spacing)
        assert feats[0, 2] == pytest.approx(0.0, abs=1e-12)

    def test_empty_graph_rejected(self):
        graph = LaneGraph(
            positions=np.zeros((0, 2)), headings=np.zeros(0),
            lane_ids=np.zeros(0, dtype=int), successors=np.zeros((0, 2), dtype=int),
            left_pairs=np.zeros((0, 2), dtype=int), right_pairs=np.zeros((0, 2), dtype=int))
        with pytest.raises(DataError):
            B.map_node_features(graph)

    def test_encode_shape_and_determinism(self):
        graph = straight_graph()
        enc = B.MapEncoder(CFG.d_model, np.random.default_rng(0))
        a = enc.encode(graph)
        b = enc.encode(graph)
        assert a.shape == (graph.n_nodes, CFG.d_model)
        assert np.array_equal(a.data, b.data)


class TestConfig:
    def test_rejects_indivisible_heads(self):
        with pytest.raises(ShapeError):
            B.BackboneConfig(d_model=30, n_heads=4)

    def test_rejects_zero_topk(self):
        with pytest.raises(ShapeError):
            B.BackboneConfig(top_k_actors=0)


class TestForwardBasics:
    def test_output_shape(self):
        graph, scenario, encoder, net = small_setup()
        feat = run_forward(net, encoder, graph, scenario)
        assert feat.shape == (scenario.n_actors, CFG.d_model)

    def test_deterministic(self):
        graph, scenario, encoder, net = small_setup()
        a = run_forward(net, encoder, graph, scenario)
        b = run_forward(net, encoder, graph, scenario)
        assert np.array_equal(a.data, b.data)

    def test_conditioning_changes_output(self):
        graph, scenario, encoder, net = small_setup()
        base = run_forward(net, encoder, graph, scenario)
        cond = T.constant(np.random.default_rng(5).normal(size=(scenario.n_actors, CFG.d_model)))
        conditioned = run_forward(net, encoder, graph, scenario, cond=cond)
        assert not np.allclose(base.data, conditioned.data)

    def test_wrong_actor_count_rejected(self):
        graph, scenario, encoder, net = small_setup()
        tokens = encoder.encode(graph)
        ctx = net.build_context(scenario.current_states(), scenario.actor_ids,
                                graph, tokens, ego_index=scenario.ego_index)
        bad = scenario.full_states()[:, :2]
        with pytest.raises(ShapeError):
            net.forward(bad, ctx, np.zeros(bad.shape[0]))


class TestViewpointInvariance:
    @pytest.mark.parametrize("seed", range(6))
    def test_rigid_transform(self, seed):
        rng = np.random.default_rng(seed)
        graph, scenario, encoder, net = small_setup(seed=seed)
        dx, dy = rng.uniform(-200, 200, size=2)
        dyaw = rng.uniform(-math.pi, math.pi)

        base = run_forward(net, encoder, graph, scenario)

        moved_graph = rigid_transform_graph(graph, dx, dy, dyaw)
        moved = scenario.__class__(
            scenario_id=scenario.scenario_id,
            lane_graph=moved_graph,
            actor_ids=scenario.actor_ids,
            history=rigid_transform_states(scenario.history, dx, dy, dyaw),
            future=rigid_transform_states(scenario.future, dx, dy, dyaw),
            dt=scenario.dt, ego_id=scenario.ego_id,
            source=scenario.source, label=scenario.label)
        shifted = run_forward(net, encoder, moved_graph, moved)
        assert np.abs(base.data - shifted.data).max() < 1e-6

    def test_many_random_viewpoints(self):
        # invariance sweep across 100 random rigid transforms
        graph, scenario, encoder, net = small_setup(seed=11)
        base = run_forward(net, encoder, graph, scenario)
        rng = np.random.default_rng(123)
        worst = 0.0
        for _ in range(100):
            dx, dy = rng.uniform(-500, 500, size=2)
            dyaw = rng.uniform(-math.pi, math.pi)
            moved_graph = rigid_transform_graph(graph, dx, dy, dyaw)
            moved = scenario.__class__(
                scenario_id=scenario.scenario_id, lane_graph=moved_graph,
                actor_ids=scenario.actor_ids,
                history=rigid_transform_states(scenario.history, dx, dy, dyaw),
                future=rigid_transform_states(scenario.future, dx, dy, dyaw),
                dt=scenario.dt, ego_id=scenario.ego_id,
                source=scenario.source, label=scenario.label)
            shifted = run_forward(net, encoder, moved_graph, moved)
            worst = max(worst, float(np.abs(base.data - shifted.data).max()))
        assert worst < 1e-6


class TestPermutationEquivariance:
    def permuted_forward(self, net, encoder, graph, scenario, perm):
        tokens = encoder.encode(graph)
        ids = tuple(scenario.actor_ids[i] for i in perm)
        states = scenario.full_states()[:, list(perm)]
        anchor = scenario.current_states()[list(perm)]
        ego_index = list(perm).index(scenario.ego_index)
        tv = np.arange(states.shape[0]) / max(states.shape[0] - 1, 1)
        ctx = net.build_context(anchor, ids, graph, tokens, ego_index=ego_index)
        return net.forward(states, ctx, tv)

    def test_bit_exact(self):
        graph, scenario, encoder, net = small_setup(n_actors=4)
        base = run_forward(net, encoder, graph, scenario)
        for perm in [(1, 0, 2, 3), (3, 2, 1, 0), (2, 3, 0, 1)]:
            out = self.permuted_forward(net, encoder, graph, scenario, perm)
            assert np.array_equal(out.data, base.data[list(perm)])

    def test_100_random_permutations(self):
        graph, scenario, encoder, net = small_setup(n_actors=5)
        base = run_forward(net, encoder, graph, scenario)
        rng = np.random.default_rng(7)
        for _ in range(100):
            perm = tuple(rng.permutation(scenario.n_actors))
            out = self.permuted_forward(net, encoder, graph, scenario, perm)
            assert np.array_equal(out.data, base.data[list(perm)])


class TestTopK:
    def test_large_k_equals_k_at_least_n_minus_1(self):
        # admitting all others: any k >= N-1 must give bit-identical output
        graph = straight_graph()
        scenario = make_scenario(n_actors=4)
        outs = []
        for k in (3, 8, 100):
            cfg = B.BackboneConfig(top_k_actors=k)
            rng = np.random.default_rng(0)
            encoder = B.MapEncoder(cfg.d_model, rng)
            net = B.Backbone(cfg, rng)
            outs.append(run_forward(net, encoder, graph, scenario).data)
        assert np.array_equal(outs[0], outs[1])
        assert np.array_equal(outs[1], outs[2])

    def test_small_k_blocks_far_actors(self):
        graph, scenario, encoder, net = small_setup()
        tokens = encoder.encode(graph)
        cfg = B.BackboneConfig(top_k_actors=1)
        net1 = B.Backbone(cfg, np.random.default_rng(0))
        ctx = net1.build_context(scenario.current_states(), scenario.actor_ids,
                                 graph, tokens, ego_index=scenario.ego_index)
        # with k=1, each row admits self plus exactly one other
        admitted = (~ctx.actor_blocked).sum(axis=1)
        assert np.array_equal(admitted, np.full(scenario.n_actors, 2))

    def test_map_nodes_sorted(self):
        graph, scenario, encoder, net = small_setup()
        tokens = encoder.encode(graph)
        ctx = net.build_context(scenario.current_states(), scenario.actor_ids,
                                graph, tokens, ego_index=scenario.ego_index)
        for row in ctx.map_index:
            assert np.array_equal(row, np.sort(row))
            assert len(set(row.tolist())) == len(row)


class TestIncrementalDecodePath:
    def test_matches_full_forward(self):
        graph, scenario, encoder, net = small_setup(n_actors=3)
        tokens = encoder.encode(graph)
        states = scenario.full_states()
        s_total = states.shape[0]
        tv = np.arange(s_total) / (s_total - 1)
        ctx = net.build_context(scenario.current_states(), scenario.actor_ids,
                                graph, tokens, ego_index=scenario.ego_index)
        full = net.forward(states, ctx, tv)

        ctx2 = net.build_context(scenario.current_states(), scenario.actor_ids,
                                 graph, tokens, ego_index=scenario.ego_index)
        cache = B.BackboneCache(CFG.n_blocks)
        for s in range(s_total):
            out = net.step(states[s], ctx2, cache, tv[s])
        assert cache.steps == s_total
        # the incremental path may hit different matmul kernels, so allow
        # accumulation-order noise but nothing beyond it
        assert np.abs(out.data - full.data).max() < 1e-10

    def test_prefix_consistency(self):
        # feeding a prefix then continuing matches running the prefix alone
        graph, scenario, encoder, net = small_setup(n_actors=3)
        tokens = encoder.encode(graph)
        states = scenario.full_states()
        tv = np.arange(states.shape[0]) / (states.shape[0] - 1)
        ctx = net.build_context(scenario.current_states(), scenario.actor_ids,
                                graph, tokens, ego_index=scenario.ego_index)
        cache = B.BackboneCache(CFG.n_blocks)
        half_outputs = [net.step(states[s], ctx, cache, tv[s]) for s in range(5)]

        ctx2 = net.build_context(scenario.current_states(), scenario.actor_ids,
                                 graph, tokens, ego_index=scenario.ego_index)
        cache2 = B.BackboneCache(CFG.n_blocks)
        replay = [net.step(states[s], ctx2, cache2, tv[s]) for s in range(3)]
        for a, b in zip(half_outputs[:3], replay):
            assert np.array_equal(a.data, b.data)


class TestGradients:
    def test_full_backbone_params(self):
        graph, scenario, encoder, net = small_setup(n_actors=3, horizon_past=3,
                                                    horizon_future=3)
        w = T.constant(np.random.default_rng(9).normal(size=(scenario.n_actors, CFG.d_model)))

        def build():
            return T.sum_squares(run_forward(net, encoder, graph, scenario) * w)

        params = dict(net.named_parameters())
        params.update({f"map.{k}": v for k, v in encoder.named_parameters()})
        subset = [params[k] for k in sorted(params)[::6]]
        worst = check_gradients(build, subset, max_coords=4)
        assert worst < 1e-4

    def test_gradients_flow_into_states(self):
        # closed-loop decoding needs d(feature)/d(state); check it numerically
        graph, scenario, encoder, net = small_setup(n_actors=3, horizon_past=3,
                                                    horizon_future=3)
        tokens = encoder.encode(graph)
        raw = scenario.full_states()
        states = T.param(raw.copy())
        tv = np.arange(raw.shape[0]) / (raw.shape[0] - 1)
        ctx = net.build_context(scenario.current_states(), scenario.actor_ids,
                                graph, tokens, ego_index=scenario.ego_index)
        w = T.constant(np.random.default_rng(2).normal(size=(scenario.n_actors, CFG.d_model)))

        def build():
            return T.sum_squares(net.forward(states, ctx, tv) * w)

        worst = check_gradients(build, [states], max_coords=30)
        assert worst < 1e-4

    def test_incremental_path_gradients(self):
        graph, scenario, encoder, net = small_setup(n_actors=2, horizon_past=2,
                                                    horizon_future=2)
        tokens = encoder.encode(graph)
        raw = scenario.full_states()
        states = T.param(raw.copy())
        tv = np.arange(raw.shape[0]) / (raw.shape[0] - 1)
        w = T.constant(np.random.default_rng(4).normal(size=(scenario.n_actors, CFG.d_model)))

        def build():
            ctx = net.build_context(scenario.current_states(), scenario.actor_ids,
                                    graph, tokens, ego_index=scenario.ego_index)
            cache = B.BackboneCache(CFG.n_blocks)
            total = None
            for s in range(raw.shape[0]):
                out = net.step(states[s], ctx, cache, tv[s])
                term = T.sum_squares(out * w)
                total = term if total is None else total + term
            return total

        worst = check_gradients(build, [states], max_coords=20)
        assert worst < 1e-4
