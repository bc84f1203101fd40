import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rangesim.channel import (
    SPEED_OF_LIGHT,
    ChannelConfig,
    Position,
    TimedEmission,
    complex_noise,
    delay_samples,
    fractional_delay_filter,
    free_space_gain,
    mix,
    noise_power_for_snr,
    propagate,
)
from rangesim.detector import detect_pattern
from rangesim.sequences import BasebandSignal, Role, SequenceLabel, derive_sequence, modulate_bpsk

CFG = ChannelConfig()
T = CFG.sample_period


def pattern(key, n=0):
    return modulate_bpsk(derive_sequence(key, SequenceLabel(Role.RESP, 1, 1, n), 512), T)


def emission(sig, t=0.0):
    return TimedEmission(sig, t, Position(0, 0), "tx")


def test_one_sample_distance_is_integer_shift(key):
    p = pattern(key)
    out = propagate(emission(p), Position(SPEED_OF_LIGHT * T, 0), CFG)
    assert out.start_index == 1
    np.testing.assert_allclose(out.samples, p.samples * out.gain, atol=1e-15)
    assert out.arrival_time == pytest.approx(T)


def test_free_space_loss_halves_with_double_distance():
    assert abs(free_space_gain(20, 2.45e9)) == pytest.approx(abs(free_space_gain(10, 2.45e9)) / 2)
    d = 7.0
    assert abs(free_space_gain(d, 2.45e9)) == pytest.approx(SPEED_OF_LIGHT / (4 * np.pi * d * 2.45e9))


def test_carrier_phase():
    d = 1.234
    g = free_space_gain(d, 2.45e9)
    assert np.angle(g) == pytest.approx(np.angle(np.exp(-2j * np.pi * 2.45e9 * d / SPEED_OF_LIGHT)))


def test_half_sample_delay_arrival(key):
    p = pattern(key)
    d = 50.5 * SPEED_OF_LIGHT * T
    cfg = ChannelConfig(passband=2 / 3)
    out = propagate(emission(p), Position(d, 0), cfg)
    r = mix([out], 1200, cfg)
    res = detect_pattern(r, p, 50, 256)
    assert res.arrival_time(T) == pytest.approx(d / SPEED_OF_LIGHT, abs=0.1 * T)


def test_colocated_rejected(key):
    with pytest.raises(ValueError):
        propagate(emission(pattern(key)), Position(0, 0), CFG)


def test_sample_rate_mismatch_rejected(key):
    slow = BasebandSignal(pattern(key).samples, 2 * T, 1 / (2 * T))
    with pytest.raises(ValueError):
        propagate(emission(slow), Position(5, 0), CFG)


def test_negative_start_rejected(key):
    with pytest.raises(ValueError):
        TimedEmission(pattern(key), -1e-9, Position(0, 0))


def test_mix_identity_and_superposition(key):
    p = pattern(key)
    a = propagate(emission(p), Position(10 * SPEED_OF_LIGHT * T, 0), CFG)
    single = mix([a], 800, CFG)
    np.testing.assert_array_equal(single.samples[a.start_index:a.end_index], a.samples)
    assert np.all(single.samples[:a.start_index] == 0)
    double = mix([a, a], 800, CFG)
    np.testing.assert_allclose(double.samples, 2 * single.samples, rtol=0, atol=0)


def test_noise_power():
    cfg = ChannelConfig(noise_power=0.37, seed=3)
    n = mix([], 10**6, cfg).samples
    assert np.mean(np.abs(n) ** 2) == pytest.approx(0.37, rel=0.05)
    assert abs(np.mean(n.real ** 2) - np.mean(n.imag ** 2)) < 0.01


def test_linearity_seed_aligned(key):
    cfg = ChannelConfig(noise_power=0.1, seed=11)
    a = propagate(emission(pattern(key, 0)), Position(10, 0), cfg)
    b = propagate(emission(pattern(key, 1), 2e-7), Position(3, 4), cfg)
    noise = mix([], 900, cfg).samples
    lhs = mix([a], 900, cfg).samples + mix([b], 900, cfg).samples - 2 * noise
    rhs = mix([a, b], 900, cfg).samples - noise
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@given(st.floats(0.5, 200.0))
def test_energy_follows_path_loss(d):
    from rangesim.sequences import SharedKey
    p = pattern(SharedKey(b"e" * 32))
    out = propagate(emission(p), Position(d, 0), CFG)
    expect = p.energy * abs(free_space_gain(d, CFG.carrier)) ** 2
    assert np.sum(np.abs(out.samples) ** 2) == pytest.approx(expect, rel=0.01)


def test_deterministic(key):
    cfg = ChannelConfig(noise_power=1.0, seed=5)
    a = propagate(emission(pattern(key)), Position(12.3, 1), cfg)
    np.testing.assert_array_equal(mix([a], 700, cfg).samples, mix([a], 700, cfg).samples)


def test_fractional_filter_properties():
    for frac in (0.0, 0.25, 0.5, 0.9):
        h = fractional_delay_filter(frac, 63, 1.0)
        assert h.sum() == pytest.approx(1.0)
        # group delay at low frequency equals the requested delay
        w = 2 * np.pi * 0.01
        n = np.arange(h.size)
        H = np.sum(h * np.exp(-1j * w * n))
        dH = np.sum(-1j * n * h * np.exp(-1j * w * n))
        gd = -np.imag(dH / H)
        assert gd == pytest.approx(31 + frac, abs=0.01)


def test_delay_samples_integer_copy():
    x = np.arange(5, dtype=complex)
    y, start = delay_samples(x, 3.0)
    assert start == 3
    np.testing.assert_array_equal(y, x)


def test_config_validation():
    with pytest.raises(ValueError):
        ChannelConfig(sample_rate=0)
    with pytest.raises(ValueError):
        ChannelConfig(carrier=-1)
    with pytest.raises(ValueError):
        ChannelConfig(noise_power=-1)
    with pytest.raises(ValueError):
        ChannelConfig(passband=0)
    with pytest.raises(ValueError):
        Position(np.inf, 0)


def test_noise_helpers(rng):
    assert noise_power_for_snr(2.0, 3.0103) == pytest.approx(1.0, rel=1e-4)
    assert np.all(complex_noise(rng, 10, 0.0) == 0)
