"""Conditional VAE over per-actor latents.

Prior and posterior share one backbone architecture and one map encoder and
differ only in how many timesteps they observe (history vs history +
future). The decoder fuses each actor's latent into its feature vector and
rolls the scene forward closed-loop: every emitted (accel, steer) is
integrated through the bicycle model before the next step is predicted, so
decoded trajectories are dynamically feasible by construction.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict
from typing import Iterable, Iterator

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneCache, BackboneConfig, Linear, MapEncoder
from .dynamics import DEFAULT_LIMITS, Limits, infer_actions, step_tensor
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .scene import Scenario
from .tensor import Tensor

LOGSTD_MIN = -6.0
LOGSTD_MAX = 2.0


@dataclass(frozen=True)
class CvaeConfig:
    d_z: int = 16
    beta: float = 0.5
    action_weight: float = 0.1
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.d_z < 1:
            raise ConfigError(f"d_z must be positive, got {self.d_z}")
        if self.beta < 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")


@dataclass
class LatentSet:
    """Per-actor diagonal-Gaussian latent parameters, optionally sampled."""

    mean: np.ndarray                  # (N, d_z)
    log_std: np.ndarray               # (N, d_z)
    sample: np.ndarray | None = None  # (N, d_z)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.log_std = np.asarray(self.log_std, dtype=float)
        if self.mean.shape != self.log_std.shape or self.mean.ndim != 2:
            raise ShapeError(f"latent params disagree: mean {self.mean.shape} "
                             f"vs log_std {self.log_std.shape}")
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.log_std))):
            raise NumericalError("latent parameters must be finite")
        if self.log_std.size and (self.log_std.min() < LOGSTD_MIN - 1e-9
                                  or self.log_std.max() > LOGSTD_MAX + 1e-9):
            raise NumericalError(f"log-std outside [{LOGSTD_MIN}, {LOGSTD_MAX}]")

    @property
    def n_actors(self) -> int:
        return self.mean.shape[0]

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)


@dataclass(frozen=True)
class ElboBreakdown:
    reconstruction: float
    kl: float
    beta: float
    total: float


def reparameterize(latent: LatentSet, noise: np.ndarray) -> LatentSet:
    """sample = mean + exp(log_std) * noise"""
    noise = np.asarray(noise, dtype=float)
    if noise.shape != latent.mean.shape:
        raise ShapeError(f"noise {noise.shape} vs latent {latent.mean.shape}")
    sample = latent.mean + np.exp(latent.log_std) * noise
    return LatentSet(mean=latent.mean, log_std=latent.log_std, sample=sample)


def gaussian_kl(mu_q, logstd_q, mu_p, logstd_p) -> Tensor:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over all
    actors and latent dimensions."""
    var_ratio = T.exp((logstd_q - logstd_p) * 2.0)
    mean_term = (mu_q - mu_p) * T.exp(-logstd_p)
    per_dim = (logstd_p - logstd_q) + (var_ratio + mean_term * mean_term) * 0.5 - 0.5
    return T.sum_(per_dim)


def _check_scenario(scenario: Scenario, need_future: bool):
    if scenario.n_actors < 1:
        raise DataError(f"scenario {scenario.scenario_id}: no actors")
    if scenario.horizon_past < 1:
        raise DataError(f"scenario {scenario.scenario_id}: empty history")
    if need_future and scenario.horizon_future < 1:
        raise DataError(f"scenario {scenario.scenario_id}: empty future")
    if not np.all(np.isfinite(scenario.history)) or not np.all(np.isfinite(scenario.future)):
        raise DataError(f"scenario {scenario.scenario_id}: non-finite states")


class CvaeModel(T.Module):
    def __init__(self, cfg: CvaeConfig = CvaeConfig(), seed: int = 0,
                 limits: Limits = DEFAULT_LIMITS):
        rng = np.random.default_rng(seed)
        d = cfg.backbone.d_model
        self.cfg = cfg
        self.limits = limits
        self.map_encoder = MapEncoder(d, rng)
        self.prior_net = Backbone(cfg.backbone, rng)
        self.posterior_net = Backbone(cfg.backbone, rng)
        self.decoder_net = Backbone(cfg.backbone, rng)
        self.prior_mu = Linear(d, cfg.d_z, rng)
        self.prior_logstd = Linear(d, cfg.d_z, rng)
        self.post_mu = Linear(d, cfg.d_z, rng)
        self.post_logstd = Linear(d, cfg.d_z, rng)
        self.fuse = Linear(d + cfg.d_z, d, rng)
        self.action_head = Linear(d, 2, rng)

    # --------------------------------------------------------- tensor paths

    def _context(self, net: Backbone, scenario: Scenario, map_tokens: Tensor):
        return net.build_context(scenario.current_states(), scenario.actor_ids,
                                 scenario.lane_graph, map_tokens,
                                 ego_index=scenario.ego_index)

    def prior_tensors(self, scenario: Scenario, map_tokens: Tensor | None = None):
        """(mean, log_std, feature) tensors from history-only observation."""
        _check_scenario(scenario, need_future=False)
        if map_tokens is None:
            map_tokens = self.map_encoder.encode(scenario.lane_graph)
        span = scenario.horizon_past + scenario.horizon_future
        tv = np.arange(scenario.horizon_past) / span
        ctx = self._context(self.prior_net, scenario, map_tokens)
        feat = self.prior_net.forward(scenario.history, ctx, tv)
        mu = self.prior_mu(feat)
        logstd = T.clip(self.prior_logstd(feat), LOGSTD_MIN, LOGSTD_MAX)
        return mu, logstd, feat

    def posterior_tensors(self, scenario: Scenario, map_tokens: Tensor | None = None):
        """(mean, log_std, feature) tensors from history + future observation."""
        _check_scenario(scenario, need_future=True)
        if map_tokens is None:
            map_tokens = self.map_encoder.encode(scenario.lane_graph)
        span = scenario.horizon_past + scenario.horizon_future
        tv = np.arange(span) / span
        ctx = self._context(self.posterior_net, scenario, map_tokens)
        feat = self.posterior_net.forward(scenario.full_states(), ctx, tv)
        mu = self.post_mu(feat)
        logstd = T.clip(self.post_logstd(feat), LOGSTD_MIN, LOGSTD_MAX)
        return mu, logstd, feat

    def decode_tensors(self, scenario: Scenario, z: Tensor,
                       map_tokens: Tensor | None = None, n_steps: int | None = None):
        """Closed-loop rollout; returns (actions (T, N, 2), states (T, N, 8))."""
        _check_scenario(scenario, need_future=False)
        n = scenario.n_actors
        if tuple(z.shape) != (n, self.cfg.d_z):
            raise ShapeError(f"latent shape {tuple(z.shape)} does not match "
                             f"{n} actors with d_z {self.cfg.d_z}")
        if map_tokens is None:
            map_tokens = self.map_encoder.encode(scenario.lane_graph)
        horizon = scenario.horizon_future if n_steps is None else n_steps
        span = scenario.horizon_past + max(horizon, scenario.horizon_future)
        ctx = self._context(self.decoder_net, scenario, map_tokens)
        cache = BackboneCache(self.cfg.backbone.n_blocks)

        feat = None
        for s in range(scenario.horizon_past):
            feat = self.decoder_net.step(T.constant(scenario.history[s]), ctx,
                                         cache, s / span)
        current = T.constant(scenario.history[-1])
        actions, states = [], []
        for k in range(horizon):
            fused = T.gelu(self.fuse(T.concat([feat, z], axis=-1)))
            raw = self.action_head(fused)
            accel = T.clip(raw[:, 0:1], -self.limits.accel_max, self.limits.accel_max)
            steer = T.clip(raw[:, 1:2], -self.limits.steer_max, self.limits.steer_max)
            action = T.concat([accel, steer], axis=-1)
            current = step_tensor(current, action, scenario.dt, self.limits)
            actions.append(action)
            states.append(current)
            if k + 1 < horizon:
                feat = self.decoder_net.step(current, ctx, cache,
                                             (scenario.horizon_past + k) / span)
        return T.stack(actions, axis=0), T.stack(states, axis=0)

    # --------------------------------------------------------- public API

    def prior(self, scenario: Scenario) -> LatentSet:
        with T.no_grad():
            mu, logstd, _ = self.prior_tensors(scenario)
        return LatentSet(mean=mu.data, log_std=logstd.data)

    def posterior(self, scenario: Scenario) -> LatentSet:
        with T.no_grad():
            mu, logstd, _ = self.posterior_tensors(scenario)
        return LatentSet(mean=mu.data, log_std=logstd.data)

    def decode(self, scenario: Scenario, latent: LatentSet,
               n_steps: int | None = None):
        """Rollout from a sampled latent (falls back to the mean)."""
        z = latent.sample if latent.sample is not None else latent.mean
        with T.no_grad():
            actions, states = self.decode_tensors(scenario, T.constant(z),
                                                  n_steps=n_steps)
        return actions.data, states.data

    def elbo_terms(self, scenario: Scenario, noise: np.ndarray):
        """(reconstruction, kl, total) as tape tensors for one scenario."""
        _check_scenario(scenario, need_future=True)
        map_tokens = self.map_encoder.encode(scenario.lane_graph)
        mu_q, ls_q, _ = self.posterior_tensors(scenario, map_tokens)
        mu_p, ls_p, _ = self.prior_tensors(scenario, map_tokens)
        z = mu_q + T.exp(ls_q) * T.constant(np.asarray(noise, dtype=float))
        actions, states = self.decode_tensors(scenario, z, map_tokens)

        n_terms = scenario.horizon_future * scenario.n_actors
        pos_diff = states[..., 0:2] - T.constant(scenario.future[..., 0:2])
        recon_pos = T.sum_squares(pos_diff) * (1.0 / n_terms)
        full = np.concatenate([scenario.history[-1:], scenario.future], axis=0)
        target = infer_actions(full, scenario.dt, self.limits)
        act_diff = actions - T.constant(target)
        recon_act = T.sum_squares(act_diff) * (1.0 / n_terms)
        recon = recon_pos + recon_act * self.cfg.action_weight

        kl = gaussian_kl(mu_q, ls_q, mu_p, ls_p)
        total = recon + kl * self.cfg.beta
        return recon, kl, total


def elbo_loss(scenario: Scenario, model: CvaeModel,
              noise: np.ndarray | None = None,
              rng: np.random.Generator | None = None) -> ElboBreakdown:
    """One-scenario ELBO summary; pass noise (or an rng to draw it) for the
    posterior sample, defaulting to the zero draw."""
    if noise is None:
        if rng is not None:
            noise = rng.standard_normal((scenario.n_actors, model.cfg.d_z))
        else:
            noise = np.zeros((scenario.n_actors, model.cfg.d_z))
    with T.no_grad():
        recon, kl, total = model.elbo_terms(scenario, noise)
    return ElboBreakdown(reconstruction=recon.item(), kl=kl.item(),
                         beta=model.cfg.beta, total=total.item())


# ------------------------------------------------------------------ training

@dataclass(frozen=True)
class VaeTrainConfig:
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
class TrainRecord:
    step: int
    reconstruction: float
    kl: float
    total: float

    def as_json(self) -> str:
        return json.dumps({"step": self.step, "recon": self.reconstruction,
                           "kl": self.kl, "total": self.total})


def train_vae(stream: Iterable[Scenario], config: VaeTrainConfig,
              model: CvaeModel | None = None,
              checkpoint_path: str | None = None,
              log_path: str | None = None) -> tuple[CvaeModel, list[TrainRecord]]:
    """Adam on the per-scenario ELBO over a scenario stream.

    The stream must yield at least config.steps scenarios (mix_sampler is
    endless). Deterministic given config.seed and the stream order.
    """
    if model is None:
        model = CvaeModel(seed=config.seed)
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = T.Adam(params, lr=config.lr)
    it: Iterator[Scenario] = iter(stream)
    records: list[TrainRecord] = []

    for step in range(1, config.steps + 1):
        try:
            scenario = next(it)
        except StopIteration:
            raise DataError(f"training stream exhausted at step {step}")
        noise = rng.standard_normal((scenario.n_actors, model.cfg.d_z))
        recon, kl, total = model.elbo_terms(scenario, noise)
        if not math.isfinite(total.item()):
            raise NumericalError(f"training diverged at step {step}: loss {total.item()}")
        opt.zero_grad()
        T.backward(total)
        opt.step()
        if step % config.log_every == 0 or step == config.steps:
            records.append(TrainRecord(step, recon.item(), kl.item(), total.item()))

    if log_path is not None:
        tmp = log_path + ".tmp"
        with open(tmp, "w") as fh:
            for rec in records:
                fh.write(rec.as_json() + "\n")
        os.replace(tmp, log_path)
    if checkpoint_path is not None:
        save_cvae(checkpoint_path, model)
    return model, records


def save_cvae(path: str, model: CvaeModel):
    meta = {"kind": "cvae",
            "cfg": {"d_z": model.cfg.d_z, "beta": model.cfg.beta,
                    "action_weight": model.cfg.action_weight,
                    "backbone": asdict(model.cfg.backbone)}}
    T.save_checkpoint(path, model.state_dict(), meta=meta)


def load_cvae(path: str) -> CvaeModel:
    arrays, meta = T.load_checkpoint(path)
    if meta.get("kind") != "cvae":
        raise ConfigError(f"{path}: not a cvae checkpoint (kind={meta.get('kind')!r})")
    raw = meta["cfg"]
    cfg = CvaeConfig(d_z=raw["d_z"], beta=raw["beta"],
                     action_weight=raw["action_weight"],
                     backbone=BackboneConfig(**raw["backbone"]))
    model = CvaeModel(cfg)
    model.load_state_dict(arrays)
    return model
