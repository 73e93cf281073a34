"""Radiative transfer observation operator identities."""

import numpy as np
import pytest

from rkhsfilter.rtm import (
    Channel,
    RtmConfig,
    brightness_clear,
    brightness_cloudy,
    brightness_one_cloud,
    channel_table_csv,
    default_channels,
    rescale_humidity,
    transmission,
    weighting_function,
)


@pytest.fixture(scope="module")
def cfg():
    return RtmConfig()


def random_states(n, rng):
    # (theta1, theta2, theta_eb, q) columns; humidity within the config band
    out = rng.standard_normal((n, 4))
    out[:, 3] = np.clip(out[:, 3], -0.95, 0.95)
    return out


class TestChannels:
    def test_for_peak_consistency(self):
        ch = Channel.for_peak(6.0)
        assert ch.z_max == 6.0
        with pytest.raises(ValueError):
            Channel(z_max=6.0, alpha_star=1.0)

    def test_default_count(self):
        assert len(default_channels()) == 16

    def test_humidity_rescale_band(self):
        lo, hi = -1.0, 1.0
        q = np.array([lo, 0.0, hi])
        np.testing.assert_allclose(rescale_humidity(q, lo, hi), [1.0, 1.5, 2.0])


class TestWeightingFunctions:
    def test_peak_location_all_channels(self, cfg):
        # for unit humidity the peak must land on the advertised height,
        # within one quadrature cell
        z = np.arange(0.0, cfg.z_top + cfg.dz, cfg.dz)
        for ch in cfg.channels:
            w = weighting_function(z, ch, q_tilde=1.0)
            z_peak = z[np.argmax(w)]
            assert abs(z_peak - ch.z_max) <= cfg.dz + 1e-12, ch.z_max

    def test_integral_equals_transmission_deficit(self, cfg):
        # integral of dT/dz from 0 to top telescopes to T(top) - T(0); the
        # far transmission is 1 by construction
        z = np.arange(0.0, cfg.z_top + cfg.dz, cfg.dz)
        for ch in cfg.channels:
            for q in (0.3, 1.0, 1.7):
                w = weighting_function(z, ch, q_tilde=q)
                integral = np.trapezoid(w, z)
                expected = 1.0 - transmission(0.0, ch, q)
                assert abs(integral - expected) < 5e-4

    def test_transmission_monotone(self, cfg):
        z = np.linspace(0, cfg.z_top, 500)
        t = transmission(z, cfg.channels[4], 1.2)
        assert np.all(np.diff(t) >= 0) and t[-1] <= 1.0 + 1e-12


class TestBrightness:
    def test_no_cloud_collapse(self, cfg, rng):
        # zero cloud fractions must reproduce the clear-sky model exactly
        x = random_states(40, rng)
        f = np.zeros((40, 3))
        np.testing.assert_allclose(brightness_cloudy(x, f, cfg),
                                   brightness_clear(x, cfg), rtol=0, atol=1e-12)

    def test_single_cloud_collapse(self, cfg, rng):
        # all cover in the congestus slot equals the one-cloud model at z_c
        x = random_states(10, rng)
        f = np.zeros((10, 3))
        f[:, 0] = 1.0
        ours = brightness_cloudy(x, f, cfg)
        ref = brightness_one_cloud(x, 1.0, cfg.z_congestus, cfg)
        np.testing.assert_allclose(ours, ref, rtol=0, atol=1e-12)

    def test_affine_in_high_cloud_cover(self, cfg, rng):
        # three-point collinearity in f_d + f_s at fixed f_c and state
        x = random_states(6, rng)
        outs = []
        for fd in (0.0, 0.2, 0.4):
            f = np.column_stack([np.full(6, 0.1), np.full(6, fd), np.full(6, 0.1)])
            outs.append(brightness_cloudy(x, f, cfg))
        lhs = outs[2] - outs[1]
        rhs = outs[1] - outs[0]
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)

    def test_isothermal_column_reads_surface(self, cfg):
        # zero anomaly everywhere: the integral telescopes so the clear
        # brightness equals the (zero) profile regardless of channel
        x = np.zeros((1, 4))
        out = brightness_clear(x, cfg)
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_opaque_channel_weights_high(self, cfg):
        # a warm lower troposphere shows more strongly in low-peaking channels
        x = np.array([[2.0, 0.0, 0.0, 0.0]])
        tb = brightness_clear(x, cfg)[0]
        assert tb[0] > tb[-1]

    def test_deep_cloud_masks_low_channels(self, cfg):
        x = np.array([[2.0, 0.5, 0.0, 0.0]])
        f = np.array([[0.0, 1.0, 0.0]])  # full deep cover, top at z_deep
        tb_clear = brightness_clear(x, cfg)[0]
        tb_cloud = brightness_cloudy(x, f, cfg)[0]
        # channels peaking below the cloud top must change; the most
        # transparent channel peaks above and barely notices
        assert abs(tb_cloud[0] - tb_clear[0]) > abs(tb_cloud[-1] - tb_clear[-1])

    def test_fraction_validation(self, cfg):
        x = np.zeros((1, 4))
        with pytest.raises(ValueError):
            brightness_cloudy(x, np.array([[0.6, 0.3, 0.3]]), cfg)  # sums over 1
        with pytest.raises(ValueError):
            brightness_cloudy(x, np.array([[-0.1, 0.0, 0.0]]), cfg)


def test_channel_table(tmp_path, cfg):
    path = tmp_path / "channels.csv"
    channel_table_csv(cfg, path)
    rows = path.read_text().strip().splitlines()
    assert len(rows) == 1 + len(cfg.channels)
    assert rows[0] == "z_max,alpha_star,h_scale"
