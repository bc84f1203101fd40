import copy
import math

import numpy as np
import pytest

from rangesim.adversary import JammerConfig, Jammer, JamMode
from rangesim.channel import SPEED_OF_LIGHT, ChannelConfig, Position, free_space_gain
from rangesim.protocol import (
    InitiatorNode,
    NodeClock,
    NodeState,
    RangingConfig,
    ReflectorNode,
    check_epoch,
    resync_period,
    run_session,
    run_sync,
)
from rangesim.sequences import Role, SharedKey, derive_waiting_samples

KEY = SharedKey(b"protocol-test-key-0123456789abcd")
PB = 2 / 3


def channel(d_ref, snr_db=20.0, seed=0, cfg=None):
    cfg = cfg or RangingConfig()
    p = abs(free_space_gain(d_ref, 2.45e9)) ** 2 / 10 ** (snr_db / 10)
    return ChannelConfig(sample_rate=cfg.sample_rate, noise_power=p, passband=PB, seed=seed)


def test_resync_examples():
    assert resync_period(1.0, 40) == pytest.approx(12_500)
    assert resync_period(1.0, 80) == pytest.approx(6_250)
    assert resync_period(0.1, 40) == pytest.approx(1_250)
    assert resync_period(1.0, -40) == pytest.approx(12_500)
    assert math.isinf(resync_period(1.0, 0))


def test_check_epoch_examples():
    assert check_epoch(NodeClock(), 1.5, 1.0).value == 1
    assert check_epoch(NodeClock(offset=0.6), 0.5, 1.0).value == 1
    assert check_epoch(NodeClock(drift_ppm=40), 10_000, 1.0).value == 10_000


def test_clock_drift_bound():
    with pytest.raises(ValueError):
        NodeClock(drift_ppm=2000)


def sync_nodes(d=30.0, eps=1e-6):
    ini = InitiatorNode(1, Position(0, 0), KEY, clock=NodeClock(processing_delay=eps))
    r = ReflectorNode(5, Position(d, 0), clock=NodeClock(offset=0.3, processing_delay=eps), state=NodeState.SCANNING)
    return ini, r


def test_sync_mismatch():
    ini, r = sync_nodes()
    out = run_sync(ini, [r], channel(30.0), t_global=7.25)[5]
    assert out.synced and out.epoch == 7 and r.current_epoch == 7
    assert out.mismatch == pytest.approx(2e-6 + 30 / SPEED_OF_LIGHT, abs=10e-9)
    assert 2.0e-6 < out.mismatch < 2.2e-6
    # the reflector's epoch now starts Delta after the initiator's
    assert check_epoch(r.clock, 7.0 + out.mismatch + 1e-9, 1.0).value == 7
    assert check_epoch(r.clock, 7.0 + out.mismatch - 1e-9, 1.0).value == 6


def test_sync_wrong_key_ignored():
    ini, r = sync_nodes()
    r.key = SharedKey(b"x" * 32)
    out = run_sync(ini, [r], channel(30.0), t_global=7.25)[5]
    assert not out.synced
    assert r.current_epoch is None


def jammed_sync_rate(trials, jammer_power):
    ok = 0
    for s in range(trials):
        ini, r = sync_nodes(d=10.0)
        adv = [Jammer(JammerConfig(JamMode.CONTINUOUS, jammer_power, Position(10.0, 10.0), seed=s))] if jammer_power else []
        out = run_sync(ini, [r], channel(10.0, seed=s), 3.5, adversaries=adv, rng=np.random.default_rng(s))
        ok += out[5].synced
        if not out[5].synced:
            # resync attempt once the jammer is gone
            assert run_sync(ini, [r], channel(10.0, seed=s), 3.5, rng=np.random.default_rng(1000 + s))[5].synced
    return ok / trials


def test_jammed_sync_success_rate():
    # jammer as far from the reflector as the initiator, same transmit power: 0 dB
    clean = jammed_sync_rate(20, 0.0)
    jammed = jammed_sync_rate(20, 1.0)
    print(f"sync success: clean {clean:.2f}, 0 dB jam {jammed:.2f}")
    assert clean == 1.0
    assert jammed < clean


def pair(d, seed=0, **kw):
    cfg = RangingConfig(**kw)
    ini = InitiatorNode(1, Position(0, 0), KEY, cfg)
    refl = [ReflectorNode(7, Position(d, 0), current_epoch=5)]
    return run_session(ini, refl, channel(d, seed=seed, cfg=cfg), 5)


def test_single_reflector_10m():
    o = pair(10.0).outcomes[7]
    assert o.n_received == 10
    assert abs(o.error) < 0.25


def test_two_equidistant_reflectors():
    ini = InitiatorNode(1, Position(0, 0), KEY)
    refl = [ReflectorNode(7, Position(5, 0), current_epoch=5), ReflectorNode(8, Position(-5, 0), current_epoch=5)]
    res = run_session(ini, refl, channel(5.0), 5)
    for o in res.outcomes.values():
        assert not o.failed
        assert abs(o.error) < 0.4


def test_clock_offsets_do_not_change_distances():
    def run(offsets):
        ini = InitiatorNode(1, Position(0, 0), KEY)
        refl = [ReflectorNode(10 + i, Position(3 + 2 * i, i), clock=NodeClock(offset=o), current_epoch=5)
                for i, o in enumerate(offsets)]
        return run_session(ini, refl, channel(5.0, seed=3), 5).distances()

    base = run([0.0, 0.0, 0.0])
    assert run([0.49, -0.3, 1e-6]) == base


def test_waiting_periods_agree():
    res = pair(6.0, seed=2)
    req_end = {t.source_id: t for t in res.transmissions if t.role == Role.REQ}[1]
    resp = sorted((t for t in res.transmissions if t.role == Role.RESP), key=lambda t: t.n)
    expected = derive_waiting_samples(KEY, 7, 5, 10, 1000)
    np.testing.assert_array_equal(res.waiting_samples[7], expected)
    T = res.timeline.sample_period
    # gaps between consecutive responses are exactly the derived waits
    gaps = [round((b.start_time - a.end_time) / T) for a, b in zip(resp, resp[1:])]
    assert gaps == list(expected[1:])
    assert req_end.end_time > 0


def test_unsynced_reflector_is_silent():
    ini = InitiatorNode(1, Position(0, 0), KEY)
    refl = [ReflectorNode(7, Position(4, 0), current_epoch=5), ReflectorNode(8, Position(6, 0), current_epoch=4)]
    res = run_session(ini, refl, channel(5.0), 5)
    assert not any(t.source_id == 8 for t in res.transmissions)
    assert res.outcomes[8].failed and not res.outcomes[7].failed
    assert res.failure_rate == 0.5


def test_wrong_key_reflector_never_accepted():
    ini = InitiatorNode(1, Position(0, 0), KEY)
    refl = [ReflectorNode(7, Position(4, 0), key=SharedKey(b"y" * 32), current_epoch=5)]
    assert run_session(ini, refl, channel(4.0), 5).outcomes[7].failed


def test_session_must_fit_epoch():
    with pytest.raises(ValueError, match="epoch"):
        RangingConfig(window=200_000, batch_size=10, epoch_duration=0.01)
    assert RangingConfig(window=1000, epoch_duration=0.01)


def test_channel_rate_mismatch_rejected():
    ini = InitiatorNode(1, Position(0, 0), KEY)
    with pytest.raises(ValueError):
        run_session(ini, [], ChannelConfig(sample_rate=50e6), 5)


def crowd_failure(window, n=40, seeds=range(4)):
    rates = []
    for s in seeds:
        cfg = RangingConfig(window=window)
        ini = InitiatorNode(1, Position(0, 0), KEY, cfg)
        g = np.random.default_rng(s)
        refl = [ReflectorNode(100 + i, Position(*(5 * np.array([np.cos(a), np.sin(a)]))), current_epoch=5)
                for i, a in enumerate(g.uniform(0, 2 * np.pi, n))]
        rates.append(run_session(ini, refl, channel(5.0, seed=s, cfg=cfg), 5).failure_rate)
    return float(np.mean(rates))


def test_failure_non_increasing_in_window():
    rates = [crowd_failure(w) for w in (1, 100, 2000)]
    print("failure by window:", rates)
    assert rates[0] >= rates[1] >= rates[2]
    assert rates[0] > rates[2]
