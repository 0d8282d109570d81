import math
import socket
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gazeload import simulator
from gazeload.protocol import Eye, Keepalive, KeepaliveOp, PupilSample, parse_datagram, serialize_datagram
from gazeload.simulator import (ScenarioConfig, SimulatorServer, XorShift64Star, blink_schedule,
                                generate_sample, iter_scenario, sample_noise, splitmix64)

QUIET = dict(noise_sigma_mm=0.0, blink_rate_hz=0.0)


def test_constant_baseline():
    cfg = ScenarioConfig(seed=3, duration=10, **QUIET)
    s = generate_sample(cfg, 2.0, Eye.LEFT)
    assert s.diameter == 3.5 and s.status == 0 and s.ts == 2_000_000


def test_bright_step_limit():
    # constriction saturates at baseline - amplitude = 3.5 - 1.2
    cfg = ScenarioConfig(duration=100, light_steps=[(1.0, "bright")], **QUIET)
    assert generate_sample(cfg, 99.0, Eye.RIGHT).diameter == pytest.approx(2.3, abs=1e-12)
    # before the reflex latency has elapsed nothing changes
    assert generate_sample(cfg, 1.19, Eye.RIGHT).diameter == 3.5


def test_dim_step_releases_constriction():
    cfg = ScenarioConfig(duration=100, light_steps=[(0.0, "bright"), (20.0, "dim")], **QUIET)
    assert generate_sample(cfg, 19.0, Eye.LEFT).diameter == pytest.approx(2.3, abs=1e-9)
    assert generate_sample(cfg, 60.0, Eye.LEFT).diameter == pytest.approx(3.5, abs=1e-12)


def test_light_reflex_matches_closed_form():
    cfg = ScenarioConfig(duration=10, light_steps=[(1.0, "bright")], **QUIET)
    for t in np.linspace(1.2, 5.0, 20):
        expected = 3.5 - 1.2 * (1 - math.exp(-(t - 1.0 - 0.2) / 0.4))
        assert generate_sample(cfg, float(t), Eye.LEFT).diameter == pytest.approx(expected, abs=1e-12)


def _task(a, t, t0):
    x = (t - t0 - 0.3) / 1.0
    return a * x * math.exp(1 - x) if x >= 0 else 0.0


def test_task_superposition():
    cfg = ScenarioConfig(duration=20, task_events=[(2.0, 0.6), (3.5, 0.4)], **QUIET)
    for t in np.arange(0, 20, 0.05):
        t = float(t)
        expected = 3.5 + _task(0.6, t, 2.0) + _task(0.4, t, 3.5)
        assert generate_sample(cfg, t, Eye.LEFT).diameter == pytest.approx(expected, abs=1e-12)


def test_task_response_peaks_at_amplitude():
    cfg = ScenarioConfig(duration=20, task_events=[(2.0, 0.8)], **QUIET)
    assert generate_sample(cfg, 3.3, Eye.LEFT).diameter == pytest.approx(4.3, abs=1e-12)


def test_determinism():
    cfg = ScenarioConfig(seed=99, duration=10, task_events=[(1, 0.5)])
    for t in (0.0, 1.234, 7.5):
        for eye in Eye:
            assert generate_sample(cfg, t, eye) == generate_sample(cfg, t, eye)


def test_seed_changes_noise():
    a = ScenarioConfig(seed=1, duration=5, blink_rate_hz=0)
    b = ScenarioConfig(seed=2, duration=5, blink_rate_hz=0)
    assert generate_sample(a, 1.0, Eye.LEFT) != generate_sample(b, 1.0, Eye.LEFT)


def test_scheduled_blink_sample_count():
    # blink covers [1.0, 1.2) s; at 50 Hz that holds samples 1.00, 1.02, ..., 1.18
    expected = sum(1.0 <= k / 50 < 1.2 for k in range(150))
    cfg = ScenarioConfig(duration=3, blinks=[(1.0, 200)], **QUIET)
    for eye in Eye:
        flags = [s.status for s in iter_scenario(cfg) if s.eye is eye]
        invalid = [i for i, f in enumerate(flags) if f == 1]
        assert len(invalid) == expected == 10
        assert invalid == list(range(invalid[0], invalid[0] + 10))
    blink = generate_sample(cfg, 1.1, Eye.LEFT)
    assert blink.status == 1 and blink.diameter == 0.0


def test_random_blinks_follow_rate():
    cfg = ScenarioConfig(seed=5, duration=4000, blink_rate_hz=0.25)
    sched = blink_schedule(cfg)
    assert abs(len(sched) - 1000) < 100
    durations_ms = [(e - s) / 1000 for s, e in sched]
    assert 100 <= min(durations_ms) and max(durations_ms) <= 300


@given(st.integers(0, 2**64 - 1), st.floats(0, 30), st.sampled_from(Eye),
       st.lists(st.tuples(st.floats(0, 30), st.floats(0, 20)), max_size=3))
def test_physical_bounds(seed, t, eye, events):
    cfg = ScenarioConfig(seed=seed, duration=30, noise_sigma_mm=0.5, task_events=events,
                         light_steps=[(0, "bright")])
    s = generate_sample(cfg, t, eye)
    if s.status == 0:
        assert 1.0 <= s.diameter <= 10.0


@given(st.floats(1.0, 10.0), st.floats(0, 100))
def test_zero_noise_purity(baseline, t):
    cfg = ScenarioConfig(duration=100, baseline_mm=baseline, **QUIET)
    assert generate_sample(cfg, t, Eye.LEFT).diameter == baseline


def test_xorshift_against_numpy_reference():
    M = np.uint64(0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        x = np.uint64(12345)
        ref = []
        for _ in range(5):
            x ^= x >> np.uint64(12)
            x ^= (x << np.uint64(25)) & M
            x ^= x >> np.uint64(27)
            ref.append(int(x * np.uint64(0x2545F4914F6CDD1D)))
    rng = XorShift64Star(12345)
    assert [rng.next_u64() for _ in range(5)] == ref


def test_splitmix_known_value():
    # first output of the reference splitmix64 generator seeded with 0
    assert splitmix64(0) == 0xE220A8397B1DCDAF


def test_noise_is_standard_normal():
    draws = np.array([sample_noise(7, ts, Eye.LEFT) for ts in range(0, 20_000_000, 1000)])
    assert abs(draws.mean()) < 0.03
    assert abs(draws.std() - 1.0) < 0.03


def test_scenario_json_round_trip(tmp_path):
    cfg = ScenarioConfig(seed=2**63 + 5, duration=12.5, light_steps=[(0, "bright")],
                         task_events=[(3, 0.4)], blinks=[(1, 150)], markers=[(2.5, "pair_found")])
    path = tmp_path / "scenario.json"
    cfg.save(path)
    assert ScenarioConfig.load(path) == cfg


@pytest.mark.parametrize("kwargs", [
    dict(sample_rate_hz=0), dict(baseline_mm=0.5), dict(baseline_mm=11), dict(duration=0),
    dict(task_events=[(1, -0.1)]), dict(light_steps=[(1, "dark")]),
])
def test_scenario_validation(kwargs):
    with pytest.raises(ValueError):
        ScenarioConfig(**kwargs)


def test_unknown_scenario_field():
    with pytest.raises(ValueError):
        ScenarioConfig.from_dict({"durationn": 3})


# -- server --

def _subscribe(port, key="t", op=KeepaliveOp.START):
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 4 * 1024 * 1024)
    sock.connect(("127.0.0.1", port))
    sock.send(serialize_datagram(Keepalive(key, op)))
    return sock


def _drain(sock, idle=0.4):
    out = []
    sock.settimeout(idle)
    while True:
        try:
            out.append(sock.recv(4096))
        except socket.timeout:
            return out


def test_server_emits_both_eyes_for_duration():
    cfg = ScenarioConfig(seed=4, duration=2.0)
    with SimulatorServer(cfg, ("127.0.0.1", 0), fast=True) as server:
        sock = _subscribe(server.port)
        raw = _drain(sock)
        sock.close()
    samples = [d for d in map(parse_datagram, raw) if isinstance(d, PupilSample)]
    assert len(samples) == 200 == server.sent
    assert sum(s.eye is Eye.LEFT for s in samples) == 100
    assert [s.seq for s in samples] == list(range(200))


def test_server_silent_without_keepalive():
    cfg = ScenarioConfig(duration=1.0)
    with SimulatorServer(cfg, ("127.0.0.1", 0), fast=True) as server:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.connect(("127.0.0.1", server.port))
        sock.send(b"hello")  # not a keepalive
        assert _drain(sock, idle=0.5) == []
        sock.close()
    assert server.sent == 0


def test_server_fast_streams_are_byte_identical():
    cfg = ScenarioConfig(seed=42, duration=3.0, task_events=[(1, 0.5)])
    streams = []
    for _ in range(2):
        with SimulatorServer(cfg, ("127.0.0.1", 0), fast=True) as server:
            sock = _subscribe(server.port)
            streams.append(_drain(sock))
            sock.close()
    assert streams[0] == streams[1]
    assert streams[0][1:] == [serialize_datagram(s) for s in iter_scenario(cfg)]


def test_server_stops_on_keepalive_stop():
    cfg = ScenarioConfig(duration=30.0)
    with SimulatorServer(cfg, ("127.0.0.1", 0), fast=False) as server:
        sock = _subscribe(server.port)
        time.sleep(0.3)
        sock.send(serialize_datagram(Keepalive("t", KeepaliveOp.STOP)))
        _drain(sock, idle=0.3)
        server.join(2)
        assert server.finished
        sock.close()
    assert 0 < server.sent < 200


def test_server_stops_on_keepalive_silence(monkeypatch):
    monkeypatch.setattr(simulator, "KEEPALIVE_TIMEOUT_S", 0.3)
    cfg = ScenarioConfig(duration=30.0)
    with SimulatorServer(cfg, ("127.0.0.1", 0), fast=False) as server:
        sock = _subscribe(server.port)
        _drain(sock, idle=0.6)
        server.join(2)
        assert server.finished
        sock.close()
    assert 0 < server.sent < 100


def test_server_wall_clock_pacing():
    cfg = ScenarioConfig(duration=0.5)
    with SimulatorServer(cfg, ("127.0.0.1", 0)) as server:
        t0 = time.monotonic()
        sock = _subscribe(server.port)
        _drain(sock, idle=0.3)
        elapsed = time.monotonic() - t0 - 0.3
        sock.close()
    assert server.sent == 50
    assert elapsed > 0.4


def test_bind_failure_is_terminal():
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as taken:
        taken.bind(("127.0.0.1", 0))
        with pytest.raises(OSError):
            SimulatorServer(ScenarioConfig(), ("127.0.0.1", taken.getsockname()[1])).start()
