"""Observation operators, obstruction process, training-pair extraction."""

import numpy as np
import pytest

from rkhsfilter.dynamics import CloudModelConfig, IntegratorConfig
from rkhsfilter.observation import (
    NoiseSpec,
    ObstructionConfig,
    TrainingPairs,
    cloudy_observe_l96,
    generate_training_cloud,
    generate_training_l96,
    generate_training_set,
    implied_bias,
    load_training_set,
    save_training_set,
)
from conftest import l96_spun_state


class TestNoiseSpec:
    def test_scalar_broadcast(self):
        np.testing.assert_allclose(NoiseSpec(0.25).std(3), 0.5)

    def test_vector(self):
        np.testing.assert_allclose(NoiseSpec((1.0, 4.0)).var(2), [1.0, 4.0])

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            NoiseSpec(-1.0).std(1)


class TestCloudyObserveL96:
    def test_shapes_and_mask(self, rng):
        x = l96_spun_state()
        cfg = ObstructionConfig()
        y, mask = cloudy_observe_l96(x, cfg, NoiseSpec(0.0), rng)
        assert y.shape == (20,) and mask.shape == (20,)
        assert mask.sum() <= cfg.count_max

    def test_clean_sites_exact(self, rng):
        # unmasked sites report the state value when noise is off
        x = l96_spun_state()
        y, mask = cloudy_observe_l96(x, ObstructionConfig(), NoiseSpec(0.0), rng)
        np.testing.assert_array_equal(y[~mask], x[::2][~mask])

    def test_obstructed_sites_scaled_and_shifted(self):
        # with beta variance zero the obstructed reading is exactly 0.5 x - 8
        x = l96_spun_state()
        cfg = ObstructionConfig(count_max=7, count_mode="fixed", clear_prob=1.0,
                                beta_var=0.0)
        y, mask = cloudy_observe_l96(x, cfg, NoiseSpec(0.0), np.random.default_rng(0))
        assert mask.sum() == 7
        np.testing.assert_allclose(y[mask], 0.5 * x[::2][mask] - 8.0, atol=1e-12)

    def test_obstruction_frequency(self):
        # chosen sites are obstructed with probability clear_prob (the coin
        # threshold); empirical rate within 2 points over many draws
        x = l96_spun_state()
        cfg = ObstructionConfig(count_max=7, count_mode="fixed")
        rng = np.random.default_rng(11)
        chosen, obstructed = 0, 0
        for _ in range(3000):
            y, mask = cloudy_observe_l96(x, cfg, NoiseSpec(0.0), rng)
            chosen += 7
            obstructed += int(mask.sum())
        rate = obstructed / chosen
        assert abs(rate - cfg.clear_prob) < 0.02

    def test_count_distribution_uniform(self):
        x = l96_spun_state()
        cfg = ObstructionConfig(count_max=3, clear_prob=1.0)
        rng = np.random.default_rng(5)
        counts = np.zeros(4)
        for _ in range(4000):
            _, mask = cloudy_observe_l96(x, cfg, NoiseSpec(0.0), rng)
            counts[int(mask.sum())] += 1
        freq = counts / counts.sum()
        np.testing.assert_allclose(freq, 0.25, atol=0.03)

    def test_noise_added_everywhere(self):
        x = l96_spun_state()
        cfg = ObstructionConfig(count_max=0)
        y, mask = cloudy_observe_l96(x, cfg, NoiseSpec(1e-4), np.random.default_rng(1))
        assert not np.any(mask)
        resid = y - x[::2]
        assert 0 < np.abs(resid).max() < 0.1

    def test_implied_bias(self):
        y = np.array([1.0, 2.0])
        x = np.array([3.0, 5.0])
        np.testing.assert_allclose(implied_bias(y, x, lambda v: v), [-2.0, -3.0])


class TestTrainingGeneration:
    def test_l96_pairs_two_branch_structure(self):
        pairs = generate_training_l96(4000, IntegratorConfig(dt=0.05, steps_per_obs=2),
                                      ObstructionConfig(), NoiseSpec(2**-5), seed=3)
        # homogeneous testbed pools everything into one group
        assert pairs.b.shape == pairs.y.shape == (1, 4000)
        assert pairs.coordinate_ids == (0,)
        b = pairs.b[0]
        # clear branch concentrates near zero, obstructed branch is far negative
        near = np.abs(b) < 1.0
        assert 0.6 < near.mean() < 0.98
        assert b[~near].mean() < -3.0

    def test_l96_determinism(self):
        mk = lambda: generate_training_l96(
            500, IntegratorConfig(dt=0.05, steps_per_obs=2),
            ObstructionConfig(), NoiseSpec(2**-5), seed=8)
        p1, p2 = mk(), mk()
        np.testing.assert_array_equal(p1.b, p2.b)
        np.testing.assert_array_equal(p1.y, p2.y)

    def test_cloud_pairs_per_channel(self):
        from rkhsfilter.rtm import RtmConfig, default_channels

        pairs, rtm_cfg, noise, traj = generate_training_cloud(
            400, CloudModelConfig(), RtmConfig(default_channels(16)), 0.001, seed=2)
        assert pairs.b.shape == pairs.y.shape == (16, 400)
        assert pairs.coordinate_ids == tuple(range(16))
        # the imperfect operator ignores clouds, so errors are nonzero
        assert np.abs(pairs.b).max() > 0.01
        # humidity band is frozen from the training run itself
        assert rtm_cfg.humidity_lo == pytest.approx(traj[:, 3].min())
        assert rtm_cfg.humidity_hi == pytest.approx(traj[:, 3].max())
        assert np.all(noise.var(16) > 0)
        assert traj.shape == (400, 7)

    def test_generate_training_set_dispatch(self):
        p = generate_training_set("l96", 300, seed=1,
                                  integrator=IntegratorConfig(dt=0.05, steps_per_obs=2),
                                  obstruction=ObstructionConfig(),
                                  noise=NoiseSpec(2**-5))
        assert p.n_samples == 300
        with pytest.raises(ValueError):
            generate_training_set("nope", 10, seed=0)

    def test_mismatched_shapes_rejected(self):
        with pytest.raises(ValueError):
            TrainingPairs(b=np.zeros(3), y=np.zeros(4), coordinate_ids=(0,))
        with pytest.raises(ValueError):
            TrainingPairs(b=np.zeros((2, 3)), y=np.zeros((2, 3)), coordinate_ids=(0,))

    def test_round_trip(self, tmp_path):
        pairs = generate_training_l96(200, IntegratorConfig(dt=0.05, steps_per_obs=2),
                                      ObstructionConfig(), NoiseSpec(2**-5), seed=4)
        save_training_set(tmp_path / "pairs", pairs)
        back = load_training_set(tmp_path / "pairs")
        np.testing.assert_array_equal(back.b, pairs.b)
        np.testing.assert_array_equal(back.y, pairs.y)
        assert back.coordinate_ids == pairs.coordinate_ids
