"""CVAE latents, decoding, ELBO assembly, and short-run training behavior."""

import itertools

import numpy as np
import pytest

from flowscene import cvae as C
from flowscene import dynamics as D
from flowscene import tensor as T
from flowscene.backbone import BackboneConfig
from flowscene.errors import ConfigError, DataError, NumericalError, ShapeError

from conftest import make_scenario
from gradcheck import check_gradients

SMALL_CFG = C.CvaeConfig(backbone=BackboneConfig(d_model=32))


@pytest.fixture(scope="module")
def scenario():
    return make_scenario(n_actors=3, horizon_past=4, horizon_future=6)


@pytest.fixture(scope="module")
def model():
    return C.CvaeModel(SMALL_CFG, seed=0)


class TestLatentSet:
    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            C.LatentSet(mean=np.zeros((3, 16)), log_std=np.zeros((2, 16)))

    def test_nonfinite_rejected(self):
        bad = np.zeros((2, 4))
        bad[0, 0] = np.nan
        with pytest.raises(NumericalError):
            C.LatentSet(mean=bad, log_std=np.zeros((2, 4)))

    def test_logstd_out_of_clamp_rejected(self):
        with pytest.raises(NumericalError):
            C.LatentSet(mean=np.zeros((2, 4)), log_std=np.full((2, 4), 3.0))

    def test_std_property(self):
        ls = C.LatentSet(mean=np.zeros((1, 2)), log_std=np.full((1, 2), -6.0))
        assert ls.std == pytest.approx(np.exp(-6.0))


class TestReparameterize:
    def test_zero_noise_gives_mean(self):
        latent = C.LatentSet(mean=np.arange(8, dtype=float).reshape(2, 4),
                             log_std=np.full((2, 4), 1.0))
        out = C.reparameterize(latent, np.zeros((2, 4)))
        assert np.array_equal(out.sample, latent.mean)

    def test_floor_logstd_nearly_mean(self):
        latent = C.LatentSet(mean=np.zeros((2, 4)), log_std=np.full((2, 4), -6.0))
        noise = np.random.default_rng(0).standard_normal((2, 4))
        out = C.reparameterize(latent, noise)
        assert np.all(np.abs(out.sample - latent.mean) <= 0.01 * np.abs(noise))

    def test_monte_carlo_moments(self):
        # tile the same (mu, sigma) row so one reparameterize call draws the
        # whole sample
        n = 100_000
        mu = np.tile([[0.7, -1.2]], (n, 1))
        log_std = np.tile([[0.3, -0.5]], (n, 1))
        latent = C.LatentSet(mean=mu, log_std=log_std)
        draws = C.reparameterize(
            latent, np.random.default_rng(42).standard_normal((n, 2))).sample
        assert np.abs(draws.mean(axis=0) - mu[0]).max() < 0.02
        assert np.abs(draws.std(axis=0) / np.exp(log_std[0]) - 1.0).max() < 0.02

    def test_noise_shape_mismatch(self):
        latent = C.LatentSet(mean=np.zeros((2, 4)), log_std=np.zeros((2, 4)))
        with pytest.raises(ShapeError):
            C.reparameterize(latent, np.zeros((3, 4)))


class TestGaussianKl:
    def test_identical_params_zero(self):
        mu = T.constant(np.random.default_rng(0).normal(size=(3, 16)))
        ls = T.constant(np.random.default_rng(1).normal(size=(3, 16)) * 0.3)
        assert C.gaussian_kl(mu, ls, mu, ls).item() == pytest.approx(0.0, abs=1e-12)

    def test_unit_shift_per_dim_half(self):
        # KL(N(0,1) || N(1,1)) = 0.5 per dimension
        n, d = 4, 16
        zeros = T.constant(np.zeros((n, d)))
        ones = T.constant(np.ones((n, d)))
        kl = C.gaussian_kl(zeros, zeros, ones, zeros)
        assert kl.item() == pytest.approx(0.5 * n * d, abs=1e-12)

    def test_nonnegative_random_sweep(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            mu_q = T.constant(rng.normal(size=(2, 8)))
            ls_q = T.constant(rng.uniform(-3, 1, size=(2, 8)))
            mu_p = T.constant(rng.normal(size=(2, 8)))
            ls_p = T.constant(rng.uniform(-3, 1, size=(2, 8)))
            assert C.gaussian_kl(mu_q, ls_q, mu_p, ls_p).item() >= -1e-12


class TestPriorPosterior:
    def test_prior_deterministic(self, model, scenario):
        a = model.prior(scenario)
        b = model.prior(scenario)
        assert np.array_equal(a.mean, b.mean)
        assert np.array_equal(a.log_std, b.log_std)

    def test_posterior_deterministic(self, model, scenario):
        a = model.posterior(scenario)
        b = model.posterior(scenario)
        assert np.array_equal(a.mean, b.mean)

    def test_shapes_one_pair_per_actor(self, model, scenario):
        for latent in (model.prior(scenario), model.posterior(scenario)):
            assert latent.mean.shape == (scenario.n_actors, SMALL_CFG.d_z)
            assert latent.log_std.shape == (scenario.n_actors, SMALL_CFG.d_z)

    def test_logstd_within_clamp_random_inputs(self, model):
        rng = np.random.default_rng(3)
        for k in range(5):
            sc = make_scenario(n_actors=2 + k % 3, horizon_past=3, horizon_future=4,
                               speed=float(rng.uniform(0, 25)))
            for latent in (model.prior(sc), model.posterior(sc)):
                assert latent.log_std.min() >= C.LOGSTD_MIN
                assert latent.log_std.max() <= C.LOGSTD_MAX

    def test_permutation_equivariance(self, model):
        sc = make_scenario(n_actors=4)
        base_prior = model.prior(sc)
        base_post = model.posterior(sc)
        perm = [2, 0, 3, 1]
        permuted = sc.__class__(
            scenario_id=sc.scenario_id, lane_graph=sc.lane_graph,
            actor_ids=tuple(sc.actor_ids[i] for i in perm),
            history=sc.history[:, perm], future=sc.future[:, perm],
            dt=sc.dt, ego_id=sc.ego_id, source=sc.source, label=sc.label)
        assert np.array_equal(model.prior(permuted).mean, base_prior.mean[perm])
        assert np.array_equal(model.posterior(permuted).mean, base_post.mean[perm])
        assert np.array_equal(model.posterior(permuted).log_std, base_post.log_std[perm])

    def test_empty_history_rejected(self, model, scenario):
        bad = scenario.__class__(
            scenario_id=scenario.scenario_id, lane_graph=scenario.lane_graph,
            actor_ids=scenario.actor_ids,
            history=scenario.history[:0], future=scenario.future,
            dt=scenario.dt, ego_id=scenario.ego_id,
            source=scenario.source, label=scenario.label)
        with pytest.raises(DataError):
            model.prior(bad)


class TestDecode:
    def test_bit_identical_rollout(self, model, scenario):
        latent = C.reparameterize(
            model.posterior(scenario),
            np.random.default_rng(0).standard_normal((scenario.n_actors, SMALL_CFG.d_z)))
        a1, s1 = model.decode(scenario, latent)
        a2, s2 = model.decode(scenario, latent)
        assert np.array_equal(a1, a2)
        assert np.array_equal(s1, s2)

    def test_bounds_and_wrapping(self, model, scenario):
        latent = model.prior(scenario)
        actions, states = model.decode(scenario, latent)
        assert actions.shape == (scenario.horizon_future, scenario.n_actors, 2)
        assert states.shape == (scenario.horizon_future, scenario.n_actors, 8)
        assert np.abs(actions[..., 0]).max() <= D.DEFAULT_LIMITS.accel_max
        assert np.abs(actions[..., 1]).max() <= D.DEFAULT_LIMITS.steer_max
        assert states[..., 3].max() <= np.pi and states[..., 3].min() > -np.pi

    def test_closed_loop_matches_dynamics_integration(self, model, scenario):
        # the decoded trajectory must be exactly the dynamics rollout of the
        # decoded actions: decoding never writes states freehand
        latent = model.prior(scenario)
        actions, states = model.decode(scenario, latent)
        ref = D.rollout(scenario.history[-1], actions, scenario.dt)
        assert np.array_equal(states, ref)

    def test_latent_actor_mismatch(self, model, scenario):
        bad = C.LatentSet(mean=np.zeros((scenario.n_actors + 1, SMALL_CFG.d_z)),
                          log_std=np.zeros((scenario.n_actors + 1, SMALL_CFG.d_z)))
        with pytest.raises(ShapeError):
            model.decode(scenario, bad)

    def test_n_steps_override(self, model, scenario):
        latent = model.prior(scenario)
        actions, states = model.decode(scenario, latent, n_steps=3)
        assert states.shape[0] == 3


class TestElbo:
    def test_breakdown_identity(self, model, scenario):
        out = C.elbo_loss(scenario, model, rng=np.random.default_rng(0))
        assert out.total == pytest.approx(out.reconstruction + out.beta * out.kl,
                                          rel=1e-12)
        assert out.beta == SMALL_CFG.beta
        assert out.kl >= 0.0

    def test_perfect_reconstruction_is_zero(self, scenario):
        # stub the decoder to return the ground truth exactly; only the KL
        # term should remain
        class Oracle(C.CvaeModel):
            def decode_tensors(self, sc, z, map_tokens=None, n_steps=None):
                full = np.concatenate([sc.history[-1:], sc.future], axis=0)
                acts = D.infer_actions(full, sc.dt, self.limits)
                return T.constant(acts), T.constant(sc.future)

        model = Oracle(SMALL_CFG, seed=0)
        out = C.elbo_loss(scenario, model)
        assert out.reconstruction == pytest.approx(0.0, abs=1e-18)
        assert out.total == pytest.approx(out.beta * out.kl, rel=1e-12)

    def test_deterministic_given_noise(self, model, scenario):
        noise = np.random.default_rng(5).standard_normal(
            (scenario.n_actors, SMALL_CFG.d_z))
        a = C.elbo_loss(scenario, model, noise=noise)
        b = C.elbo_loss(scenario, model, noise=noise)
        assert a.total == b.total


class TestElboGradients:
    def test_elbo_gradcheck(self):
        # end-to-end: both encoders, the KL, and BPTT through the closed-loop
        # decoder and dynamics
        cfg = C.CvaeConfig(d_z=4, backbone=BackboneConfig(
            d_model=16, n_heads=4, n_blocks=1, top_k_actors=4, top_k_map_nodes=4))
        model = C.CvaeModel(cfg, seed=2)
        sc = make_scenario(n_actors=2, horizon_past=2, horizon_future=3)
        noise = np.random.default_rng(9).standard_normal((2, cfg.d_z)) * 0.5

        def build():
            return model.elbo_terms(sc, noise)[2]

        params = model.parameters()
        subset = params[::7]
        check_gradients(build, subset, max_coords=4, rtol=1e-4)


class TestTraining:
    def _stream(self, n=4):
        scenarios = [make_scenario(n_actors=2, horizon_past=3, horizon_future=4,
                                   scenario_id=f"s{i}", speed=5.0 + i)
                     for i in range(n)]
        return itertools.cycle(scenarios)

    def test_seed_repeatability_checkpoint_bytes(self, tmp_path):
        cfg = C.VaeTrainConfig(steps=8, lr=1e-3, seed=11)
        paths = []
        for tag in ("a", "b"):
            path = tmp_path / f"vae_{tag}.ckpt"
            C.train_vae(self._stream(), cfg, checkpoint_path=str(path))
            paths.append(path.read_bytes())
        assert paths[0] == paths[1]

    def test_loss_log_records(self, tmp_path):
        cfg = C.VaeTrainConfig(steps=6, lr=1e-3, seed=0, log_every=2)
        log = tmp_path / "loss.jsonl"
        model, records = C.train_vae(self._stream(), cfg, log_path=str(log))
        assert [r.step for r in records] == [2, 4, 6]
        lines = log.read_text().strip().split("\n")
        assert len(lines) == 3
        assert all(r.kl >= -1e-9 and np.isfinite(r.kl) for r in records)

    def test_stream_exhaustion(self):
        scenarios = [make_scenario(n_actors=2, horizon_past=3, horizon_future=4)]
        with pytest.raises(DataError):
            C.train_vae(iter(scenarios), C.VaeTrainConfig(steps=5, seed=0))

    def test_nonfinite_loss_aborts(self, tmp_path):
        # a loss that turns non-finite must abort before the checkpoint is
        # written, not emit garbage weights
        class _Nan:
            def item(self):
                return float("nan")

        class Exploding(C.CvaeModel):
            calls = 0

            def elbo_terms(self, scenario, noise):
                Exploding.calls += 1
                if Exploding.calls >= 3:
                    return _Nan(), _Nan(), _Nan()
                return super().elbo_terms(scenario, noise)

        path = tmp_path / "vae.ckpt"
        with pytest.raises(NumericalError):
            C.train_vae(self._stream(), C.VaeTrainConfig(steps=10, seed=0),
                        model=Exploding(SMALL_CFG, seed=0),
                        checkpoint_path=str(path))
        assert not path.exists()

    def test_bad_config_rejected(self):
        with pytest.raises(ConfigError):
            C.VaeTrainConfig(steps=0)
        with pytest.raises(ConfigError):
            C.VaeTrainConfig(lr=0.0)


class TestCheckpointRoundtrip:
    def test_save_load_identical(self, tmp_path, scenario):
        model = C.CvaeModel(SMALL_CFG, seed=4)
        path = str(tmp_path / "vae.ckpt")
        C.save_cvae(path, model)
        loaded = C.load_cvae(path)
        assert loaded.cfg == model.cfg
        for (name, a), (name2, b) in zip(sorted(model.state_dict().items()),
                                         sorted(loaded.state_dict().items())):
            assert name == name2
            assert np.array_equal(a, b)
        # behavioral identity
        assert np.array_equal(model.prior(scenario).mean,
                              loaded.prior(scenario).mean)

    def test_wrong_kind_rejected(self, tmp_path):
        path = str(tmp_path / "other.ckpt")
        T.save_checkpoint(path, {"w": np.zeros(3)}, meta={"kind": "mystery"})
        with pytest.raises(ConfigError):
            C.load_cvae(path)
