import math

import mpmath
import numpy as np
import pytest
from scipy import special, stats

from clchan import channel as ch
from clchan.channel import CLEAN, PRESETS, ScenarioConfig


def j0_quadrature(x):
    # J0(x) = (1/pi) * integral_0^pi cos(x sin t) dt
    return float(mpmath.quad(lambda t: mpmath.cos(x * mpmath.sin(t)), [0, mpmath.pi]) / mpmath.pi)


# J0 ------------------------------------------------------------------------


def test_j0_at_zero():
    assert ch.temporal_correlation(50.0, 0.0) == 1.0
    assert ch.temporal_correlation(0.0, 1.0) == 1.0


def test_j0_first_zero():
    x = 2.404826
    assert abs(ch.bessel_j0(x)) < 1e-5
    assert abs(ch.temporal_correlation(x / (2 * math.pi), 1.0)) < 1e-5


def test_j0_at_pi():
    assert ch.bessel_j0(3.141593) == pytest.approx(j0_quadrature(3.141593), abs=1e-9)
    assert ch.bessel_j0(3.141593) == pytest.approx(-0.304242, abs=1e-6)


@pytest.mark.parametrize("x", [0.1, 1.0, 2.5, 5.0, 7.5, 7.999, 8.0, 8.001, 9.0, 12.0, 20.0, 40.0, 100.0])
def test_j0_against_quadrature(x):
    assert abs(ch.bessel_j0(x) - j0_quadrature(x)) < 1e-8


def test_j0_dense_grid_against_scipy():
    xs = np.linspace(0.0, 60.0, 6001)
    err = max(abs(ch.bessel_j0(x) - special.j0(x)) for x in xs)
    assert err < 1e-8


def test_temporal_correlation_rejects_negative():
    with pytest.raises(ValueError):
        ch.temporal_correlation(-1.0, 1e-3)
    with pytest.raises(ValueError):
        ch.temporal_correlation(1.0, -1e-3)


# scenario configs ----------------------------------------------------------


def test_presets():
    c = ch.preset("umi-compact")
    assert (c.f_d, c.n_paths, c.n_tx, c.n_rx, c.spatial_corr) == (30.0, 6, 2, 2, 0.3)
    assert (c.sample_interval, c.path_gain_spread) == (1e-3, 3.0)
    d = ch.preset("umi-dense")
    assert (d.f_d, d.n_paths, d.spatial_corr) == (100.0, 12, 0.6)
    s = ch.preset("umi-standard")
    assert (s.f_d, s.n_paths, s.spatial_corr) == (60.0, 9, 0.45)


def test_unknown_preset():
    with pytest.raises(ValueError, match="umi-rural"):
        ch.preset("umi-rural")


@pytest.mark.parametrize(
    "bad",
    [{"f_d": -1.0}, {"n_paths": 0}, {"spatial_corr": 1.0}, {"spatial_corr": -0.1}, {"sample_interval": 0.0}],
)
def test_scenario_invariants(bad):
    with pytest.raises(ValueError):
        ScenarioConfig(**{"name": "x", "f_d": 10.0, **bad})


def test_scenario_dict_round_trip():
    c = ch.preset("umi-dense", f_d=80.0)
    assert ScenarioConfig.from_dict(c.to_dict()) == c


# generator statistics --------------------------------------------------------


def _lag_corr(h, lag):
    a, b = h[:, :-lag] if lag else h, h[:, lag:]
    num = np.mean(a * np.conj(b))
    return float((num / np.mean(np.abs(h) ** 2)).real)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_autocorrelation_follows_j0(name):
    cfg = PRESETS[name]
    # 2500 sequences x 4 antenna pairs = 10^4 realizations per lag
    h = ch.generate_realizations(cfg, 2500, 6, seed=11)
    h = h.transpose(0, 2, 3, 1).reshape(-1, 6)
    for lag in range(1, 6):
        expected = ch.temporal_correlation(cfg.f_d, lag * cfg.sample_interval)
        assert abs(_lag_corr(h, lag) - expected) < 0.05, lag


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_unit_power(name):
    h = ch.generate_realizations(PRESETS[name], 25_000, 1, seed=3)  # 10^5 entries
    assert 0.95 <= np.mean(np.abs(h) ** 2) <= 1.05


def test_uncorrelated_antennas():
    cfg = ScenarioConfig("iid", f_d=50.0, n_paths=32, spatial_corr=0.0)
    h = ch.generate_realizations(cfg, 10_000, 1, seed=5)[:, 0]
    a, b = h[:, 0, 0], h[:, 0, 1]
    corr = np.mean(a * np.conj(b)) / math.sqrt(np.mean(np.abs(a) ** 2) * np.mean(np.abs(b) ** 2))
    assert abs(corr) < 0.05


def test_spatial_correlation_is_applied():
    cfg = ScenarioConfig("corr", f_d=50.0, n_paths=32, spatial_corr=0.6)
    h = ch.generate_realizations(cfg, 10_000, 1, seed=5)[:, 0]
    a, b = h[:, 0, 0], h[:, 0, 1]
    corr = np.mean(a * np.conj(b)) / math.sqrt(np.mean(np.abs(a) ** 2) * np.mean(np.abs(b) ** 2))
    assert abs(corr.real - 0.6) < 0.05


def test_presets_are_distinguishable():
    gains = {n: ch.channel_gains(ch.generate_realizations(c, 10_000, 1, seed=1)[:, 0]) for n, c in PRESETS.items()}
    names = sorted(gains)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            assert stats.ks_2samp(gains[names[i]], gains[names[j]]).statistic > 0.05, (names[i], names[j])


def test_zero_doppler_freezes_sequence():
    h = ch.generate_channel_sequence(ch.preset("umi-dense", f_d=0.0), 20, seed=4)
    np.testing.assert_array_equal(h, np.broadcast_to(h[0], h.shape))


def test_generation_is_deterministic():
    cfg = PRESETS["umi-standard"]
    np.testing.assert_array_equal(ch.generate_channel_sequence(cfg, 30, 9), ch.generate_channel_sequence(cfg, 30, 9))
    assert not np.array_equal(ch.generate_channel_sequence(cfg, 30, 9), ch.generate_channel_sequence(cfg, 30, 10))


def test_sequence_shape():
    cfg = ch.preset("umi-compact", n_tx=3, n_rx=2)
    assert ch.generate_channel_sequence(cfg, 7, 0).shape == (7, 3, 2)


# datasets --------------------------------------------------------------------


def test_dataset_shapes():
    cfg = PRESETS["umi-compact"]
    ds = ch.build_task_dataset(cfg, 1, T=4, seed=0)
    assert len(ds) == 1
    (s,) = ds.samples
    assert s.X.shape == (2, 4, 2, 2)
    assert s.H.shape == (2, 2, 2)


def test_dataset_target_follows_window():
    cfg = PRESETS["umi-dense"]
    ds = ch.build_task_dataset(cfg, 3, T=5, seed=2)
    seq = ch._generate(cfg, 3, 6, ch._rng(2, ch.STREAM_DATASET))
    np.testing.assert_array_equal(ds.X[1, 0, 4], seq[1, 4].real)
    np.testing.assert_array_equal(ds.H[2, 1], seq[2, 5].imag)


def test_frozen_channel_target_equals_last_frame():
    ds = ch.build_task_dataset(ch.preset("umi-standard", f_d=0.0), 16, T=8, seed=1)
    np.testing.assert_array_equal(ds.H, ds.X[:, :, -1])


def test_dataset_deterministic():
    cfg = PRESETS["umi-standard"]
    a, b = ch.build_task_dataset(cfg, 10, 8, 42), ch.build_task_dataset(cfg, 10, 8, 42)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.H, b.H)


def test_dataset_rejects_empty():
    with pytest.raises(ValueError):
        ch.build_task_dataset(PRESETS["umi-compact"], 0)


# AWGN ------------------------------------------------------------------------


def test_awgn_clean_is_identity():
    x = np.arange(12.0).reshape(3, 4)
    y = ch.add_awgn(x, CLEAN, seed=1)
    np.testing.assert_array_equal(x, y)
    assert y is not x


def test_awgn_zero_db_power():
    x = np.random.default_rng(0).standard_normal(100_000) * 3.0
    n = ch.add_awgn(x, 0.0, seed=2) - x
    assert 0.95 <= np.mean(n * n) / np.mean(x * x) <= 1.05


def test_awgn_scales_with_snr():
    x = np.random.default_rng(0).standard_normal(100_000)
    n10 = ch.add_awgn(x, 10.0, seed=2) - x
    assert np.mean(n10 * n10) == pytest.approx(0.1 * np.mean(x * x), rel=0.02)


def test_awgn_deterministic():
    x = np.ones(50)
    np.testing.assert_array_equal(ch.add_awgn(x, 5.0, 3), ch.add_awgn(x, 5.0, 3))


def test_input_noise_keeps_targets_clean():
    ds = ch.build_task_dataset(PRESETS["umi-compact"], 8, 4, 0)
    noisy = ch.with_input_noise(ds, 10.0, 1)
    np.testing.assert_array_equal(noisy.H, ds.H)
    assert not np.array_equal(noisy.X, ds.X)
    assert noisy.snr_db == 10.0


# file format -----------------------------------------------------------------


@pytest.mark.parametrize("snr", [CLEAN, 12.5])
def test_dataset_file_round_trip(tmp_path, snr):
    ds = ch.with_input_noise(ch.build_task_dataset(PRESETS["umi-dense"], 9, 5, 7), snr, 8)
    path = tmp_path / "d.bin"
    ch.save_dataset(ds, path)
    back = ch.load_dataset(path)
    assert back.scenario == ds.scenario and back.seed == ds.seed and back.snr_db == ds.snr_db
    np.testing.assert_array_equal(back.X, ds.X)
    np.testing.assert_array_equal(back.H, ds.H)


def test_dataset_file_header_is_readable(tmp_path):
    ds = ch.build_task_dataset(PRESETS["umi-compact"], 2, 3, 0)
    path = tmp_path / "d.bin"
    ch.save_dataset(ds, path)
    with open(path, "rb") as fh:
        assert fh.readline() == b"CLCHAN-DATASET 1\n"
        assert b'"x_shape": [2, 2, 3, 2, 2]' in fh.readline()


def test_wrong_magic_rejected(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"SOMETHING ELSE\n{}\n")
    with pytest.raises(ValueError, match="CLCHAN-DATASET"):
        ch.load_dataset(path)


def test_truncated_payload_rejected(tmp_path):
    ds = ch.build_task_dataset(PRESETS["umi-compact"], 2, 3, 0)
    path = tmp_path / "d.bin"
    ch.save_dataset(ds, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError, match="payload"):
        ch.load_dataset(path)
