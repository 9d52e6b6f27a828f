"""Shared transformer trunk over actors, map nodes, and time.

Layout per block: actor-map attention, actor-actor attention, actor-time
attention, then one feed-forward layer, all pre-LN residual. Inputs are
re-expressed in the ego's t=0 body frame and all pairwise attention carries
an additive bias from a small MLP on relative poses, so features are
viewpoint-invariant by construction.

Two properties shape the implementation:

* Permutation equivariance must be bit-exact. Float sums depend on operand
  order, so every reduction across actors (the key axis of actor-actor
  attention) is performed in canonical actor-id order regardless of storage
  order; top-k selections break distance ties by id.
* The action decoder consumes its own outputs step by step. Time attention
  is therefore causal, and the trunk exposes an incremental path with
  cached keys/values whose results match what a full re-run would produce,
  without re-touching earlier steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError, ShapeError
from .scene import LaneGraph
from .tensor import Tensor

NEG_INF = -1e9


@dataclass(frozen=True)
class BackboneConfig:
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    top_k_actors: int = 8
    top_k_map_nodes: int = 16

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ShapeError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.top_k_actors < 1 or self.top_k_map_nodes < 1:
            raise ShapeError("top_k must be >= 1")
        if self.d_model % 2 != 0:
            raise ShapeError("d_model must be even for sinusoidal embeddings")


def sinusoidal_pe(t: float, dim: int) -> np.ndarray:
    """Interleaved sin/cos embedding of a scalar in [0, 1], base 10000."""
    if dim % 2 != 0:
        raise ShapeError(f"sinusoidal_pe needs an even dim, got {dim}")
    half = dim // 2
    freqs = np.power(10000.0, -np.arange(half) * 2.0 / dim)
    out = np.empty(dim)
    out[0::2] = np.sin(t * freqs)
    out[1::2] = np.cos(t * freqs)
    return out


class Linear(T.Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.w = T.param(rng.normal(size=(d_in, d_out)) / math.sqrt(d_in))
        self.b = T.param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.affine(x, self.w, self.b)


class Mlp(T.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class LayerNorm(T.Module):
    def __init__(self, dim: int):
        self.gain = T.param(np.ones(dim))
        self.bias = T.param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class AttentionWeights(T.Module):
    def __init__(self, d_model: int, rng):
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """(..., S, d) -> (..., h, S, d/h)"""
    *lead, s, d = x.shape
    y = x.reshape(tuple(lead) + (s, n_heads, d // n_heads))
    return T.swapaxes(y, -2, -3)


def merge_heads(x: Tensor) -> Tensor:
    """(..., h, S, dh) -> (..., S, h*dh)"""
    y = T.swapaxes(x, -2, -3)
    *lead, s, h, dh = y.shape
    return y.reshape(tuple(lead) + (s, h * dh))


def attend(q: Tensor, k: Tensor, v: Tensor, bias: Tensor | None = None,
           blocked: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention; blocked is a bool mask (True = hidden)."""
    return T.scaled_attention(q, k, v, bias=bias, blocked=blocked)


# ---------------------------------------------------- fused pose-feature ops
#
# The decoder backpropagates through its own rollout, so every quantity
# derived from states must live on the tape. Building these features from
# elementary ops costs ~50 tape nodes per step; each fused op below is a
# single node with a hand-derived backward (covered by the gradient checks).

def _frame_features(states: Tensor, ego_pose: np.ndarray) -> Tensor:
    """(S, N, 8) raw states -> (S, N, 8) features in the ego anchor frame:
    [x, y, sin dyaw, cos dyaw, v, length, width, height]."""
    ex, ey, eyaw = float(ego_pose[0]), float(ego_pose[1]), float(ego_pose[2])
    c, s = math.cos(eyaw), math.sin(eyaw)
    d = states.data
    px, py = d[..., 0] - ex, d[..., 1] - ey
    dyaw = d[..., 3] - eyaw
    sin_d, cos_d = np.sin(dyaw), np.cos(dyaw)
    out = d.copy()
    out[..., 0] = c * px + s * py
    out[..., 1] = c * py - s * px
    out[..., 2] = sin_d
    out[..., 3] = cos_d

    def backward(g):
        gd = np.zeros_like(d)
        gd[..., 0] = c * g[..., 0] - s * g[..., 1]
        gd[..., 1] = s * g[..., 0] + c * g[..., 1]
        gd[..., 3] = cos_d * g[..., 2] - sin_d * g[..., 3]
        gd[..., 4:] = g[..., 4:]
        states._accumulate(gd)

    return T._node(out, (states,), "frame_features", backward)


def _pair_features(states: Tensor) -> Tensor:
    """(S, N, 8) -> (S, N, N, 4) relative pose of actor j seen from actor i:
    [dx, dy, sin dyaw, cos dyaw] in i's body frame."""
    d = states.data
    x, y, yaw = d[..., 0], d[..., 1], d[..., 3]
    ci, si = np.cos(yaw)[:, :, None], np.sin(yaw)[:, :, None]
    dxw = x[:, None, :] - x[:, :, None]
    dyw = y[:, None, :] - y[:, :, None]
    dx = ci * dxw + si * dyw
    dy = ci * dyw - si * dxw
    dpsi = yaw[:, None, :] - yaw[:, :, None]
    sdy, cdy = np.sin(dpsi), np.cos(dpsi)
    out = np.stack([dx, dy, sdy, cdy], axis=-1)

    def backward(g):
        g0, g1, g2, g3 = g[..., 0], g[..., 1], g[..., 2], g[..., 3]
        gdxw = ci * g0 - si * g1
        gdyw = si * g0 + ci * g1
        gd = np.zeros_like(d)
        gd[..., 0] = gdxw.sum(axis=1) - gdxw.sum(axis=2)
        gd[..., 1] = gdyw.sum(axis=1) - gdyw.sum(axis=2)
        gd[..., 3] = ((g0 * dy - g1 * dx - g2 * cdy + g3 * sdy).sum(axis=2)
                      + (g2 * cdy - g3 * sdy).sum(axis=1))
        states._accumulate(gd)

    return T._node(out, (states,), "pair_features", backward)


def _map_features(states: Tensor, node_pose: np.ndarray) -> Tensor:
    """(S, N, 8) states and (N, K, 3) node poses -> (S, N, K, 4) relative
    pose of each node in the actor's body frame."""
    d = states.data
    x, y, yaw = d[..., 0, None], d[..., 1, None], d[..., 3, None]
    ci, si = np.cos(yaw), np.sin(yaw)
    nx, ny, nyaw = node_pose[None, :, :, 0], node_pose[None, :, :, 1], node_pose[None, :, :, 2]
    dxw, dyw = nx - x, ny - y
    dx = ci * dxw + si * dyw
    dy = ci * dyw - si * dxw
    dpsi = nyaw - yaw
    sdy, cdy = np.sin(dpsi), np.cos(dpsi)
    out = np.stack([dx, dy, sdy, cdy], axis=-1)

    def backward(g):
        g0, g1, g2, g3 = g[..., 0], g[..., 1], g[..., 2], g[..., 3]
        gd = np.zeros_like(d)
        gd[..., 0] = -(ci * g0 - si * g1).sum(axis=2)
        gd[..., 1] = -(si * g0 + ci * g1).sum(axis=2)
        gd[..., 3] = (g0 * dy - g1 * dx - g2 * cdy + g3 * sdy).sum(axis=2)
        states._accumulate(gd)

    return T._node(out, (states,), "map_features", backward)


# ------------------------------------------------------------- map features

_MAP_FEATURE_DIM = 12


def map_node_features(graph: LaneGraph) -> np.ndarray:
    """Per-node features built only from offsets relative to the node's own
    pose, so a rigidly transformed map yields identical features."""
    m = graph.n_nodes
    if m == 0:
        raise DataError("encode_map: empty lane graph")
    out = np.zeros((m, _MAP_FEATURE_DIM))
    for i in range(m):
        hx, hy = math.cos(graph.headings[i]), math.sin(graph.headings[i])
        px, py = graph.positions[i]

        def local(j):
            dx, dy = graph.positions[j, 0] - px, graph.positions[j, 1] - py
            return hx * dx + hy * dy, -hy * dx + hx * dy

        succ = graph.successor_of(i)
        if succ is not None:
            lx, ly = local(succ)
            dh = float(graph.headings[succ] - graph.headings[i])
            out[i, 0:6] = [1.0, lx, ly, math.sin(dh), math.cos(dh),
                           math.sin(dh) / graph.spacing]
        left = graph.left_of(i)
        if left is not None:
            lx, ly = local(left)
            out[i, 6:9] = [1.0, lx, ly]
        right = graph.right_of(i)
        if right is not None:
            lx, ly = local(right)
            out[i, 9:12] = [1.0, lx, ly]
    return out


class MapEncoder(T.Module):
    """Per-node MLP standing in for a full map encoder."""

    def __init__(self, d_model: int, rng):
        self.mlp = Mlp(_MAP_FEATURE_DIM, 32, d_model, rng)

    def encode(self, graph: LaneGraph) -> Tensor:
        return self.mlp(T.constant(map_node_features(graph)))


def encode_map(encoder: MapEncoder, graph: LaneGraph) -> Tensor:
    return encoder.encode(graph)


# ---------------------------------------------------------------- the trunk

class BackboneBlock(T.Module):
    def __init__(self, cfg: BackboneConfig, rng):
        d = cfg.d_model
        self.ln_map = LayerNorm(d)
        self.attn_map = AttentionWeights(d, rng)
        self.ln_actor = LayerNorm(d)
        self.attn_actor = AttentionWeights(d, rng)
        self.ln_time = LayerNorm(d)
        self.attn_time = AttentionWeights(d, rng)
        self.ln_ffn = LayerNorm(d)
        self.ffn = Mlp(d, 2 * d, d, rng)


@dataclass
class SceneContext:
    """Per-scenario constants shared by every forward/step call: canonical
    actor order, anchor frame, fixed top-k masks, and map landmarks."""

    actor_ids: tuple
    ego_pose: np.ndarray             # ego (x, y, yaw) at t=0, the shared frame
    perm: np.ndarray                 # canonical (id-sorted) actor order
    actor_blocked: np.ndarray        # (N, N) True = hidden, canonical key axis
    map_index: np.ndarray            # (N, K) node ids per actor, ascending
    node_pose: np.ndarray            # (N, K, 3) poses of selected nodes
    map_tokens: Tensor               # (M, d_model)
    map_k: tuple | None = None       # per-block projections, filled lazily
    map_v: tuple | None = None


class BackboneCache:
    """Grown-as-you-go keys/values for the causal time attention."""

    def __init__(self, n_blocks: int):
        self.time_k: list[list[Tensor]] = [[] for _ in range(n_blocks)]
        self.time_v: list[list[Tensor]] = [[] for _ in range(n_blocks)]
        self.steps = 0


class Backbone(T.Module):
    """Interleaved actor-map / actor-actor / actor-time attention trunk."""

    D_STATE_FEATURES = 8

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d_model
        self.token_mlp = Mlp(self.D_STATE_FEATURES, d, d, rng)
        self.pair_bias_actor = Mlp(4, 16, cfg.n_heads, rng)
        self.pair_bias_map = Mlp(4, 16, cfg.n_heads, rng)
        self.blocks = [BackboneBlock(cfg, rng) for _ in range(cfg.n_blocks)]
        self.ln_final = LayerNorm(d)

    # ------------------------------------------------------------ context

    def build_context(self, anchor_states: np.ndarray, actor_ids,
                      graph: LaneGraph, map_tokens: Tensor,
                      ego_index: int = 0) -> SceneContext:
        """Fix everything that depends only on the t=0 snapshot."""
        anchor_states = np.asarray(anchor_states, dtype=float)
        n = anchor_states.shape[0]
        ids = np.asarray(actor_ids, dtype=np.int64)
        if len(ids) != n:
            raise ShapeError(f"{n} anchor states vs {len(ids)} actor ids")
        if not 0 <= ego_index < n:
            raise ShapeError(f"ego_index {ego_index} out of range for {n} actors")
        perm = np.argsort(ids, kind="stable")

        pos = anchor_states[:, :2]
        dists = np.hypot(pos[:, None, 0] - pos[None, :, 0],
                         pos[:, None, 1] - pos[None, :, 1])
        blocked = np.ones((n, n), dtype=bool)
        k = min(self.cfg.top_k_actors, n - 1)
        for i in range(n):
            blocked[i, i] = False
            others = [j for j in range(n) if j != i]
            others.sort(key=lambda j: (dists[i, j], ids[j]))
            for j in others[:k]:
                blocked[i, j] = False
        blocked = blocked[:, perm]

        m = graph.n_nodes
        km = min(self.cfg.top_k_map_nodes, m)
        map_index = np.zeros((n, km), dtype=np.int64)
        for i in range(n):
            d = np.hypot(graph.positions[:, 0] - pos[i, 0],
                         graph.positions[:, 1] - pos[i, 1])
            nearest = np.lexsort((np.arange(m), d))[:km]
            map_index[i] = np.sort(nearest)
        node_pose = np.concatenate(
            [graph.positions[map_index], graph.headings[map_index][..., None]], axis=-1)

        return SceneContext(
            actor_ids=tuple(int(a) for a in ids),
            ego_pose=anchor_states[ego_index, (0, 1, 3)].copy(),
            perm=perm,
            actor_blocked=blocked,
            map_index=map_index,
            node_pose=node_pose,
            map_tokens=map_tokens,
        )

    # ------------------------------------------------------------ features

    def _state_tokens(self, states: Tensor, ego_pose: np.ndarray,
                      time_values: np.ndarray, cond: Tensor | None) -> Tensor:
        """(S, N, 8) states -> (S, N, d) tokens in the ego anchor frame."""
        tokens = self.token_mlp(_frame_features(states, ego_pose))
        pe = np.stack([sinusoidal_pe(t, self.cfg.d_model) for t in np.atleast_1d(time_values)])
        tokens = tokens + T.constant(pe[:, None, :])
        if cond is not None:
            tokens = tokens + cond.reshape((1,) + tuple(cond.shape))
        return tokens

    def _pair_bias(self, states: Tensor) -> Tensor:
        """Additive actor-actor attention bias, (S, h, N_query, N_key)."""
        bias = self.pair_bias_actor(_pair_features(states))     # (S, Nq, Nk, h)
        return T.swapaxes(T.swapaxes(bias, 3, 2), 2, 1)          # (S, h, Nq, Nk)

    def _map_bias(self, states: Tensor, ctx: SceneContext) -> Tensor:
        """Actor-to-node attention bias, (N, h, S, K)."""
        bias = self.pair_bias_map(_map_features(states, ctx.node_pose))  # (S,N,K,h)
        bias = T.swapaxes(bias, 0, 1)                            # (N, S, K, h)
        bias = T.swapaxes(bias, 1, 3)                            # (N, h, K, S)
        return T.swapaxes(bias, 2, 3)                            # (N, h, S, K)

    # ----------------------------------------------------------- sublayers

    def _map_kv(self, block, ctx: SceneContext):
        per_actor = T.gather(ctx.map_tokens, ctx.map_index, axis=0)   # (N, K, d)
        k = split_heads(block.attn_map.wk(per_actor), self.cfg.n_heads)
        v = split_heads(block.attn_map.wv(per_actor), self.cfg.n_heads)
        return k, v   # (N, h, K, dh)

    def _actor_map_attention(self, block, x: Tensor, map_bias: Tensor,
                             map_k: Tensor, map_v: Tensor) -> Tensor:
        q = split_heads(block.attn_map.wq(self._ln(block.ln_map, x)), self.cfg.n_heads)
        q = T.swapaxes(q, 0, 2)                                  # (S,h,N,dh)->(N,h,S,dh)
        out = attend(q, map_k, map_v, bias=map_bias)             # (N, h, S, dh)
        out = merge_heads(T.swapaxes(out, 0, 2))                 # back to (S, N, d)
        return x + block.attn_map.wo(out)

    def _actor_actor_attention(self, block, x: Tensor, bias: Tensor,
                               ctx: SceneContext) -> Tensor:
        normed = self._ln(block.ln_actor, x)
        q = split_heads(block.attn_actor.wq(normed), self.cfg.n_heads)   # (S,h,N,dh)
        k = split_heads(block.attn_actor.wk(normed), self.cfg.n_heads)
        v = split_heads(block.attn_actor.wv(normed), self.cfg.n_heads)
        # reduce over keys in canonical id order for exact equivariance
        k = T.gather(k, ctx.perm, axis=2)
        v = T.gather(v, ctx.perm, axis=2)
        bias = T.gather(bias, ctx.perm, axis=3)
        out = attend(q, k, v, bias=bias, blocked=ctx.actor_blocked[None, None])
        return x + block.attn_actor.wo(merge_heads(out))

    def _time_attention(self, block, x: Tensor, causal: bool,
                        cache: BackboneCache | None, block_index: int) -> Tensor:
        steps = x.shape[0]
        normed = self._ln(block.ln_time, x)
        q = split_heads(block.attn_time.wq(normed), self.cfg.n_heads)    # (S,h,N,dh)
        q = T.swapaxes(q, 0, 2)                                          # (N,h,S,dh)
        k_new = T.swapaxes(split_heads(block.attn_time.wk(normed), self.cfg.n_heads), 0, 2)
        v_new = T.swapaxes(split_heads(block.attn_time.wv(normed), self.cfg.n_heads), 0, 2)
        if cache is not None:
            cache.time_k[block_index].append(k_new)
            cache.time_v[block_index].append(v_new)
            k = T.concat(cache.time_k[block_index], axis=2)
            v = T.concat(cache.time_v[block_index], axis=2)
            blocked = None
        else:
            k, v = k_new, v_new
            blocked = np.triu(np.ones((steps, steps), dtype=bool), k=1) if causal else None
        out = attend(q, k, v, blocked=blocked)                           # (N,h,S,dh)
        return x + block.attn_time.wo(merge_heads(T.swapaxes(out, 0, 2)))

    @staticmethod
    def _ln(ln: LayerNorm, x: Tensor) -> Tensor:
        return ln(x)

    def _run_blocks(self, x: Tensor, states: Tensor, ctx: SceneContext,
                    cache: BackboneCache | None) -> Tensor:
        pair_bias = self._pair_bias(states)
        map_bias = self._map_bias(states, ctx)
        if ctx.map_k is None:
            ctx.map_k, ctx.map_v = zip(*(self._map_kv(b, ctx) for b in self.blocks))
        for i, block in enumerate(self.blocks):
            x = self._actor_map_attention(block, x, map_bias, ctx.map_k[i], ctx.map_v[i])
            x = self._actor_actor_attention(block, x, pair_bias, ctx)
            x = self._time_attention(block, x, causal=True, cache=cache, block_index=i)
            x = x + block.ffn(self._ln(block.ln_ffn, x))
        return self.ln_final(x)

    # -------------------------------------------------------------- public

    def forward(self, states, ctx: SceneContext, time_values: np.ndarray,
                cond: Tensor | None = None) -> Tensor:
        """Full-sequence pass; returns the last-timestep feature (N, d)."""
        states = states if isinstance(states, Tensor) else T.constant(states)
        if states.ndim != 3 or states.shape[2] != self.D_STATE_FEATURES:
            raise ShapeError(f"backbone expects (S, N, {self.D_STATE_FEATURES}) states, "
                             f"got {states.shape}")
        if states.shape[1] != len(ctx.actor_ids):
            raise ShapeError(f"{states.shape[1]} actors in states vs "
                             f"{len(ctx.actor_ids)} in context")
        x = self._state_tokens(states, ctx.ego_pose, time_values, cond)
        x = self._run_blocks(x, states, ctx, cache=None)
        return x[states.shape[0] - 1]

    def step(self, state_row, ctx: SceneContext, cache: BackboneCache,
             time_value: float, cond: Tensor | None = None) -> Tensor:
        """Incremental pass over one new timestep; returns (N, d) features.

        Equivalent to appending the row and re-running forward, at the cost
        of only the new step (earlier steps never attend forward in time).
        """
        row = state_row if isinstance(state_row, Tensor) else T.constant(state_row)
        states = row.reshape((1,) + tuple(row.shape))
        x = self._state_tokens(states, ctx.ego_pose, np.array([time_value]), cond)
        x = self._run_blocks(x, states, ctx, cache=cache)
        cache.steps += 1
        return x[0]


def backbone_forward(model: Backbone, states, actor_ids, graph: LaneGraph,
                     map_tokens: Tensor, anchor_states: np.ndarray,
                     time_values: np.ndarray, cond: Tensor | None = None,
                     ego_index: int = 0) -> Tensor:
    """One-call convenience wrapper: build the scene context and run forward."""
    ctx = model.build_context(anchor_states, actor_ids, graph, map_tokens,
                              ego_index=ego_index)
    return model.forward(states, ctx, time_values, cond=cond)
