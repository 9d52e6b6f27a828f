"""Rectified-flow transport from prior latents to critical posterior latents.

Stage 2 of the pipeline: with the stage-1 VAE frozen, learn a velocity field
v(z, t) whose Euler integration carries a prior latent sample to a posterior
latent sample drawn from safety-critical scenarios. Stopping the integration
early (t_end < 1) yields latents of intermediate criticality.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict
from typing import Callable, Iterable, Iterator

import numpy as np

from .backbone import (AttentionWeights, LayerNorm, Linear, Mlp, attend,
                       merge_heads, sinusoidal_pe, split_heads)
from .cvae import CvaeModel, LatentSet, load_cvae, reparameterize
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .scene import ManeuverLabel, Scenario, ScenarioSource
from .scenario_io import file_sha256
from . import tensor as T
from .tensor import Tensor

LABEL_ROWS = {ManeuverLabel.NOMINAL: 0,
              ManeuverLabel.SAFETY_CRITICAL: 1,
              ManeuverLabel.VERY_SAFETY_CRITICAL: 2}


@dataclass(frozen=True)
class FlowConfig:
    """Velocity-net architecture plus sampling controls."""

    d_z: int = 16
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    n_sample_steps: int = 20
    t_end: float = 1.0
    conditioning: bool = True

    def __post_init__(self):
        if self.d_z < 1 or self.d_model < 1 or self.n_blocks < 1:
            raise ConfigError("d_z, d_model, and n_blocks must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by "
                              f"n_heads {self.n_heads}")
        if self.d_model % 2 != 0:
            raise ConfigError("d_model must be even for the time embedding")
        if self.n_sample_steps < 1:
            raise ConfigError(f"n_sample_steps must be >= 1, "
                              f"got {self.n_sample_steps}")
        if not 0.0 <= self.t_end <= 1.0:
            raise ConfigError(f"t_end must lie in [0, 1], got {self.t_end}")

    def arch_fields(self) -> dict:
        return {"d_z": self.d_z, "d_model": self.d_model,
                "n_heads": self.n_heads, "n_blocks": self.n_blocks,
                "conditioning": self.conditioning}


def interpolate(z0: np.ndarray, z1: np.ndarray, t: float) -> np.ndarray:
    """Linear path point t*z1 + (1-t)*z0, exact at the endpoints."""
    z0 = np.asarray(z0, dtype=float)
    z1 = np.asarray(z1, dtype=float)
    if z0.shape != z1.shape:
        raise ShapeError(f"endpoint shapes differ: {z0.shape} vs {z1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ConfigError(f"interpolation time must lie in [0, 1], got {t}")
    if t == 0.0:
        return z0.copy()
    if t == 1.0:
        return z1.copy()
    return t * z1 + (1.0 - t) * z0


@dataclass(frozen=True)
class FlowConditioning:
    """Per-evaluation conditioning bundle for the velocity field."""

    t_denoise: float
    E_T: np.ndarray
    E_x: np.ndarray
    E_c: np.ndarray | None

    @classmethod
    def for_training(cls, z_prior: np.ndarray, z_posterior: np.ndarray,
                     t: float, d_model: int,
                     label_embedding: np.ndarray | None) -> "FlowConditioning":
        return cls(t_denoise=t, E_T=sinusoidal_pe(t, d_model),
                   E_x=interpolate(z_prior, z_posterior, t),
                   E_c=label_embedding)

    @classmethod
    def for_state(cls, z: np.ndarray, t: float, d_model: int,
                  label_embedding: np.ndarray | None) -> "FlowConditioning":
        return cls(t_denoise=t, E_T=sinusoidal_pe(t, d_model),
                   E_x=np.asarray(z, dtype=float), E_c=label_embedding)

    def __post_init__(self):
        if not 0.0 <= self.t_denoise <= 1.0:
            raise ConfigError(f"t_denoise must lie in [0, 1], "
                              f"got {self.t_denoise}")
        if self.E_x.ndim != 2:
            raise ShapeError(f"E_x must be (n_actors, d_z), "
                             f"got shape {self.E_x.shape}")


class FlowBlock(T.Module):
    """Pre-LN actor self-attention followed by a feed-forward update."""

    def __init__(self, cfg: FlowConfig, rng):
        self.n_heads = cfg.n_heads
        self.ln_attn = LayerNorm(cfg.d_model)
        self.attn = AttentionWeights(cfg.d_model, rng)
        self.ln_ffn = LayerNorm(cfg.d_model)
        self.ffn = Mlp(cfg.d_model, 2 * cfg.d_model, cfg.d_model, rng)

    def __call__(self, x: Tensor, perm: list[int]) -> Tensor:
        # split_heads on (N, d) yields (h, N, dh) directly
        h = self.ln_attn(x)
        q = split_heads(self.attn.wq(h), self.n_heads)
        # keys/values in canonical actor-id order so the softmax reduction is
        # bit-identical under any storage permutation
        h_c = h[perm]
        k = split_heads(self.attn.wk(h_c), self.n_heads)
        v = split_heads(self.attn.wv(h_c), self.n_heads)
        out = merge_heads(attend(q, k, v))
        x = x + self.attn.wo(out)
        return x + self.ffn(self.ln_ffn(x))


class FlowModel(T.Module):
    """Velocity field over per-actor latent tokens with scene attention."""

    def __init__(self, cfg: FlowConfig = FlowConfig(), seed: int = 0):
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.cfg = cfg
        self.vae_sha: str | None = None
        self.label_table = T.param(rng.normal(size=(3, 16)) * 0.1)
        self.label_mlp = Mlp(16, d, d, rng)
        self.in_proj = Linear(3 * d + cfg.d_z, d, rng)
        self.blocks = [FlowBlock(cfg, rng) for _ in range(cfg.n_blocks)]
        self.ln_out = LayerNorm(d)
        self.head = Linear(d, cfg.d_z, rng)

    # ------------------------------------------------------------ pieces

    def label_embedding(self, label: ManeuverLabel | None) -> Tensor | None:
        """Learned row projected by an MLP; None when conditioning is off."""
        if not self.cfg.conditioning or label is None:
            return None
        row = self.label_table[LABEL_ROWS[label]:LABEL_ROWS[label] + 1]
        return self.label_mlp(row)

    def velocity_tensors(self, z_t: Tensor, t: float, feats: Tensor,
                         actor_ids: tuple[int, ...],
                         label: ManeuverLabel | None) -> Tensor:
        n = z_t.shape[0]
        d = self.cfg.d_model
        if tuple(z_t.shape) != (n, self.cfg.d_z):
            raise ShapeError(f"latent shape {tuple(z_t.shape)}, "
                             f"expected ({n}, {self.cfg.d_z})")
        if tuple(feats.shape) != (n, d):
            raise ShapeError(f"actor features shape {tuple(feats.shape)}, "
                             f"expected ({n}, {d})")
        if len(actor_ids) != n:
            raise ShapeError(f"{len(actor_ids)} actor ids for {n} latents")
        if not 0.0 <= t <= 1.0:
            raise ConfigError(f"flow time must lie in [0, 1], got {t}")

        e_t = T.constant(np.tile(sinusoidal_pe(t, d), (n, 1)))
        e_c = self.label_embedding(label)
        if e_c is None:
            e_c = T.constant(np.zeros((n, d)))
        else:
            e_c = T.concat([e_c] * n, axis=0) if n > 1 else e_c
        tokens = T.concat([feats, e_t, z_t, e_c], axis=-1)
        x = self.in_proj(tokens)
        perm = list(np.argsort(np.asarray(actor_ids), kind="stable"))
        for block in self.blocks:
            x = block(x, perm)
        return self.head(self.ln_out(x))

    def velocity(self, z_t: np.ndarray, t: float, feats: np.ndarray,
                 actor_ids: tuple[int, ...],
                 label: ManeuverLabel | None) -> np.ndarray:
        with T.no_grad():
            v = self.velocity_tensors(T.constant(np.asarray(z_t, dtype=float)),
                                      t, T.constant(feats), actor_ids, label)
        return v.data


# ------------------------------------------------------------------ training

@dataclass(frozen=True)
class FlowPair:
    """One regression sample: latent endpoints plus their scene context."""

    z_prior: np.ndarray
    z_posterior: np.ndarray
    feats: np.ndarray
    actor_ids: tuple[int, ...]
    label: ManeuverLabel | None

    def __post_init__(self):
        if self.z_prior.shape != self.z_posterior.shape:
            raise ShapeError(f"endpoint shapes differ: {self.z_prior.shape} "
                             f"vs {self.z_posterior.shape}")


VelocityFn = Callable[[Tensor, float, "FlowPair"], Tensor]


def flow_loss(velocity_fn: VelocityFn, pairs: list[FlowPair],
              ts: np.ndarray) -> Tensor:
    """Mean squared residual of v against the straight-path displacement.

    velocity_fn(z_t, t, pair) evaluates the field; pass a stub to test
    transport identities without a trained net.
    """
    if len(pairs) == 0:
        raise DataError("flow_loss needs at least one pair")
    ts = np.asarray(ts, dtype=float)
    if ts.shape != (len(pairs),):
        raise ShapeError(f"need one t per pair, got {ts.shape} "
                         f"for {len(pairs)} pairs")
    total = None
    count = 0
    for pair, t in zip(pairs, ts):
        z_t = interpolate(pair.z_prior, pair.z_posterior, float(t))
        v = velocity_fn(T.constant(z_t), float(t), pair)
        target = T.constant(pair.z_posterior - pair.z_prior)
        sq = T.sum_squares(v - target)
        total = sq if total is None else total + sq
        count += pair.z_prior.size
    return total * (1.0 / count)


def model_velocity_fn(model: FlowModel) -> VelocityFn:
    def fn(z_t: Tensor, t: float, pair: FlowPair) -> Tensor:
        return model.velocity_tensors(z_t, t, T.constant(pair.feats),
                                      pair.actor_ids, pair.label)
    return fn


@dataclass(frozen=True)
class FlowTrainConfig:
    steps: int = 2000
    lr: float = 3e-4
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be positive, got {self.steps}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")


@dataclass
class FlowTrainRecord:
    step: int
    loss: float

    def as_json(self) -> str:
        return json.dumps({"step": self.step, "loss": self.loss})


class _VaePairCache:
    """Frozen-VAE per-scenario outputs: latent params and prior features.

    The stage-1 weights never move during stage 2, so these are pure
    functions of the scenario and computing them once per corpus entry is
    exact, not an approximation.
    """

    def __init__(self, vae: CvaeModel):
        self.vae = vae
        self._store: dict[str, tuple] = {}

    def get(self, scenario: Scenario):
        key = scenario.scenario_id
        if key not in self._store:
            with T.no_grad():
                map_tokens = self.vae.map_encoder.encode(scenario.lane_graph)
                mu_p, ls_p, feat = self.vae.prior_tensors(scenario, map_tokens)
                mu_q, ls_q, _ = self.vae.posterior_tensors(scenario, map_tokens)
            self._store[key] = (mu_p.data, ls_p.data, mu_q.data, ls_q.data,
                                feat.data)
        return self._store[key]


def _draw_pair(cache: _VaePairCache, scenario: Scenario,
               rng: np.random.Generator, conditioning: bool) -> FlowPair:
    mu_p, ls_p, mu_q, ls_q, feat = cache.get(scenario)
    z0 = mu_p + np.exp(ls_p) * rng.standard_normal(mu_p.shape)
    z1 = mu_q + np.exp(ls_q) * rng.standard_normal(mu_q.shape)
    return FlowPair(z_prior=z0, z_posterior=z1, feats=feat,
                    actor_ids=scenario.actor_ids,
                    label=scenario.label if conditioning else None)


def train_flow(vae_checkpoint: str, stream: Iterable[Scenario],
               config: FlowTrainConfig,
               flow_cfg: FlowConfig = FlowConfig(),
               checkpoint_path: str | None = None,
               log_path: str | None = None) -> tuple[FlowModel, list[FlowTrainRecord]]:
    """Adam on the rectified-flow loss over a critical-scenario stream.

    The VAE checkpoint is hashed before and after training; any change is a
    frozen-stage violation and aborts. Nominal-source scenarios in the
    stream abort too: the transport target is the critical posterior.
    """
    vae_sha = file_sha256(vae_checkpoint)
    vae = load_cvae(vae_checkpoint)
    if vae.cfg.d_z != flow_cfg.d_z:
        raise ConfigError(f"latent width mismatch: vae d_z {vae.cfg.d_z} "
                          f"vs flow d_z {flow_cfg.d_z}")
    if vae.cfg.backbone.d_model != flow_cfg.d_model:
        raise ConfigError(f"feature width mismatch: vae d_model "
                          f"{vae.cfg.backbone.d_model} vs flow d_model "
                          f"{flow_cfg.d_model}")

    model = FlowModel(flow_cfg, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    opt = T.Adam(model.parameters(), lr=config.lr)
    cache = _VaePairCache(vae)
    vfn = model_velocity_fn(model)
    it: Iterator[Scenario] = iter(stream)
    records: list[FlowTrainRecord] = []

    for step in range(1, config.steps + 1):
        try:
            scenario = next(it)
        except StopIteration:
            raise DataError(f"training stream exhausted at step {step}")
        if scenario.source == ScenarioSource.SIM_NOMINAL:
            raise ConfigError(
                f"scenario {scenario.scenario_id} has nominal source; the "
                f"flow trains on safety-critical scenarios only")
        pair = _draw_pair(cache, scenario, rng, flow_cfg.conditioning)
        t = float(rng.uniform())
        loss = flow_loss(vfn, [pair], np.array([t]))
        if not math.isfinite(loss.item()):
            raise NumericalError(f"flow training diverged at step {step}: "
                                 f"loss {loss.item()}")
        opt.zero_grad()
        T.backward(loss)
        opt.step()
        if step % config.log_every == 0 or step == config.steps:
            records.append(FlowTrainRecord(step, loss.item()))

    if file_sha256(vae_checkpoint) != vae_sha:
        raise ConfigError(f"{vae_checkpoint} changed during flow training; "
                          f"the stage-1 checkpoint must stay frozen")
    model.vae_sha = vae_sha
    if log_path is not None:
        tmp = log_path + ".tmp"
        with open(tmp, "w") as fh:
            for rec in records:
                fh.write(rec.as_json() + "\n")
        os.replace(tmp, log_path)
    if checkpoint_path is not None:
        save_flow(checkpoint_path, model)
    return model, records


# ------------------------------------------------------------------ sampling

def sample(model: FlowModel, z0: np.ndarray, feats: np.ndarray,
           actor_ids: tuple[int, ...], label: ManeuverLabel | None,
           cfg: FlowConfig | None = None,
           velocity_fn=None, return_path: bool = False):
    """Forward-Euler integration of the velocity field from t = 0 to t_end.

    velocity_fn(z, t) -> array overrides the model field (test stubs).
    """
    cfg = cfg if cfg is not None else model.cfg
    z = np.array(z0, dtype=float)
    if cfg.t_end == 0.0:
        # zero measure of integration: the field never acts
        path = np.repeat(z[None], cfg.n_sample_steps + 1, axis=0)
        return (z, path) if return_path else z
    dt = cfg.t_end / cfg.n_sample_steps
    path = [z.copy()]
    for i in range(cfg.n_sample_steps):
        t = i * dt
        if velocity_fn is not None:
            v = np.asarray(velocity_fn(z, t), dtype=float)
        else:
            v = model.velocity(z, t, feats, actor_ids, label)
        z = z + v * dt
        if not np.all(np.isfinite(z)):
            raise NumericalError(f"non-finite latent during flow sampling "
                                 f"at step {i} (t = {t:.4f})")
        path.append(z.copy())
    if return_path:
        return z, np.stack(path)
    return z


# ---------------------------------------------------------------- generation

@dataclass(frozen=True)
class GenerationResult:
    """Everything one generated rollout produced, latents included."""

    scenario_id: str
    label: ManeuverLabel | None
    t_end: float
    z_prior: np.ndarray
    z_final: np.ndarray
    z_path: np.ndarray
    actions: np.ndarray
    states: np.ndarray


def load_generation_models(vae_path: str, flow_path: str) -> tuple[CvaeModel, FlowModel]:
    """Load the stage-1/stage-2 pair, verifying they were trained together."""
    if not os.path.exists(vae_path):
        raise DataError(f"missing vae checkpoint: {vae_path}")
    if not os.path.exists(flow_path):
        raise DataError(f"missing flow checkpoint: {flow_path}")
    vae = load_cvae(vae_path)
    model, meta = load_flow(flow_path)
    actual = file_sha256(vae_path)
    if meta.get("vae_sha256") != actual:
        raise ConfigError(
            f"flow checkpoint {flow_path} was trained against a different "
            f"vae (expected sha {meta.get('vae_sha256')}, {vae_path} has "
            f"{actual})")
    return vae, model


def generate(scenario: Scenario, label: ManeuverLabel | None,
             vae: CvaeModel, flow: FlowModel,
             cfg: FlowConfig | None = None,
             noise: np.ndarray | None = None,
             rng: np.random.Generator | None = None,
             n_steps: int | None = None) -> GenerationResult:
    """History-only generation: prior sample, flow transport, decode.

    Deterministic given (scenario, noise, label, cfg); pass noise explicitly
    or an rng to draw it.
    """
    cfg = cfg if cfg is not None else flow.cfg
    if cfg.arch_fields() != flow.cfg.arch_fields():
        raise ConfigError("flow config architecture differs from the "
                          "trained checkpoint")
    if vae.cfg.d_z != cfg.d_z:
        raise ConfigError(f"latent width mismatch: vae d_z {vae.cfg.d_z} "
                          f"vs flow d_z {cfg.d_z}")
    with T.no_grad():
        map_tokens = vae.map_encoder.encode(scenario.lane_graph)
        mu_p, ls_p, feat = vae.prior_tensors(scenario, map_tokens)
    latent = LatentSet(mean=mu_p.data, log_std=ls_p.data)
    if noise is None:
        if rng is None:
            raise ConfigError("generate needs explicit noise or an rng")
        noise = rng.standard_normal(latent.mean.shape)
    z0 = reparameterize(latent, noise).sample
    z_final, z_path = sample(flow, z0, feat.data, scenario.actor_ids, label,
                             cfg=cfg, return_path=True)
    with T.no_grad():
        actions, states = vae.decode_tensors(
            scenario, T.constant(z_final), map_tokens, n_steps=n_steps)
    return GenerationResult(
        scenario_id=scenario.scenario_id, label=label, t_end=cfg.t_end,
        z_prior=z0, z_final=z_final, z_path=z_path,
        actions=actions.data, states=states.data)


# -------------------------------------------------------------- checkpoints

def save_flow(path: str, model: FlowModel):
    meta = {"kind": "flow", "cfg": asdict(model.cfg),
            "vae_sha256": model.vae_sha}
    T.save_checkpoint(path, model.state_dict(), meta=meta)


def load_flow(path: str) -> tuple[FlowModel, dict]:
    arrays, meta = T.load_checkpoint(path)
    if meta.get("kind") != "flow":
        raise ConfigError(f"{path}: not a flow checkpoint "
                          f"(kind={meta.get('kind')!r})")
    cfg = FlowConfig(**meta["cfg"])
    model = FlowModel(cfg, seed=0)
    model.load_state_dict(arrays)
    model.vae_sha = meta.get("vae_sha256")
    return model, meta
