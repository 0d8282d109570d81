"""System-level acceptance checks, one per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` for the summary lines.
"""

import json
import random
import string
import threading
import time

import numpy as np
import pytest

from gazeload.analysis import count_peaks, p_value, pearson_r
from gazeload.calibration import (CalibrationError, CalibrationProfile, compute_profile,
                                  run_calibration)
from gazeload.cli import run
from gazeload.estimator import EstimatorState, FrameSample, Pipeline, current_estimate, ingest_frame
from gazeload.protocol import Eye, ProtocolError, PupilSample, parse_datagram
from gazeload.session import Session
from gazeload.simulator import ScenarioConfig, iter_scenario

import oracles
from conftest import free_udp_port

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def _fast_session(out, seed=42, session_id="accept"):
    """Simulator and streaming client over loopback UDP, both on the fast clock."""
    port = free_udp_port()
    sim = threading.Thread(target=run, daemon=True, args=(
        ["simulate", "--bind", f"127.0.0.1:{port}", "--seed", str(seed), "--fast"],))
    sim.start()
    time.sleep(0.2)
    t0 = time.perf_counter()
    code = run(["stream", "--device", f"127.0.0.1:{port}", "--out", str(out), "--fast",
                "--fixed-id", session_id, "--quiet"])
    elapsed = time.perf_counter() - t0
    sim.join(10)
    assert code == 0
    return elapsed


def _estimator_trace(xs, profile=None):
    state = EstimatorState(0.7, profile)
    out = []
    for i, x in enumerate(xs):
        ingest_frame(state, FrameSample(i * 20_000, float(x)))
        out.append(current_estimate(state, i * 20_000))
    return out


def _rel_ok(got, want, rel=1e-9):
    got, want = np.asarray(got), np.asarray(want)
    return bool(np.all(np.abs(got - want) <= rel * np.abs(want)))


def test_1_feedback_rate(tmp_path, report):
    out = tmp_path / "s.jsonl"
    elapsed = _fast_session(out)
    s = Session.load(out)
    intervals_ms = np.diff([e.ts for e in s.estimates]) / 1000
    mean = float(intervals_ms.mean())
    n = len(s.estimates)
    ok = 55.5 <= mean <= 59.0 and n >= 1000 and elapsed < 5.0
    report(1, ok, f"{n} estimates, mean interval {mean:.3f} ms, runtime {elapsed:.2f} s")


@pytest.fixture(scope="module")
def trace_10k():
    rng = np.random.default_rng(2024)
    xs = rng.uniform(2.0, 8.0, 10_000)
    return xs, _estimator_trace(xs)


def test_2_windowed_average_exact(trace_10k, report):
    xs, ests = trace_10k
    ok = _rel_ok([e.windowed_avg for e in ests], oracles.window_means(xs))
    report(2, ok, "windowed_avg vs from-scratch mean over 10,000 frames, rel 1e-9")


def test_3_running_average_exact(trace_10k, report):
    xs, ests = trace_10k
    ok = _rel_ok([e.running_avg for e in ests], oracles.prefix_means(xs))
    report(3, ok, "running_avg vs prefix-sum oracle over 10,000 frames, rel 1e-9")


def test_4_peak_rule(report):
    rng = np.random.default_rng(4)
    mismatches = 0
    for k in range(1000):
        n = int(rng.integers(1, 200))
        xs = rng.uniform(1.0, 10.0, n)
        if k % 3 == 0:
            # slow drifts produce long flag runs in both directions
            xs = np.clip(5 + np.cumsum(rng.normal(0, 0.3, n)), 1.0, 10.0)
        init_max = float(rng.uniform(3, 12)) if k % 2 else None
        profile = CalibrationProfile(1.0, init_max, 0, (20, 20)) if init_max else None
        got = [e.high_load for e in _estimator_trace(xs, profile)]
        want = oracles.high_load_flags(list(xs), 0.7, init_max)
        mismatches += sum(a != b for a, b in zip(got, want))
    report(4, mismatches == 0, f"{mismatches} flag mismatches over 1000 random traces")


def test_5_calibration_recovery(report):
    hits = 0
    for seed in range(100):
        cfg = ScenarioConfig(seed=seed, duration=10.0, light_steps=((0.0, "bright"), (5.0, "dim")))
        try:
            p = compute_profile(*run_calibration(iter_scenario(cfg)))
        except CalibrationError:
            continue
        hits += 2.2 <= p.d_min <= 2.4 and 3.4 <= p.d_max <= 3.6
    report(5, hits >= 95, f"{hits}/100 seeded runs recover d_min in [2.2, 2.4], d_max in [3.4, 3.6]")


def test_6_statistics(report):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(10_000):
        n = int(rng.integers(3, 60))
        x = rng.normal(0, 1, n)
        y = 0.5 * x + rng.normal(0, 1, n)
        worst = max(worst, abs(pearson_r(list(x), list(y)) - oracles.pearson_direct(x, y)))
    p = p_value(-0.578, 31)
    zero = all(p_value(0.0, n) == 1.0 for n in (3, 4, 10, 31, 100, 10_000))
    ok = worst <= 1e-12 and 6.0e-4 <= p <= 7.5e-4 and p <= 0.001 and zero
    report(6, ok, f"max |r - oracle| = {worst:.2e}; p(-0.578, 31) = {p:.4e}; p(0, n) = 1: {zero}")


def test_7_peak_counting(report):
    rng = random.Random(7)
    mismatches = 0
    for _ in range(10_000):
        n = rng.randint(0, 120)
        bias = rng.random()
        flags = [rng.random() < bias for _ in range(n)]
        mismatches += count_peaks(flags) != oracles.count_peaks_regex(flags)
    T, F = True, False
    patterns = count_peaks([T] * 5 + [F] * 10 + [T] * 5) == 2 and count_peaks([T] * 2) == 0
    report(7, mismatches == 0 and patterns,
           f"{mismatches} mismatches over 10,000 sequences; fixed patterns hold: {patterns}")


def _fuzz_datagrams(rng, count):
    valid = [
        b'{"ts":1000,"eye":"left","pd":3.52,"s":0,"seq":7}',
        b'{"type":"live.data","key":"pupil","op":"start"}',
        b'{"type":"announce","id":"sim","rate":50}',
    ]
    junk_values = [None, True, -1, 2**64, 1e308, "", "left", [], {}, [1, 2], "NaN", 3.5, -0.0]
    keys = ["ts", "eye", "pd", "s", "seq", "type", "key", "op", "id", "rate", "x"]
    for i in range(count):
        kind = i % 4
        if kind == 0:
            yield rng.randbytes(rng.randint(0, 600))
        elif kind == 1:
            b = bytearray(rng.choice(valid))
            for _ in range(rng.randint(1, 4)):
                op = rng.random()
                pos = rng.randrange(len(b) + 1)
                if op < 0.4 and b:
                    b[min(pos, len(b) - 1)] = rng.randrange(256)
                elif op < 0.7:
                    b.insert(pos, rng.randrange(256))
                else:
                    del b[pos:pos + rng.randint(1, 8)]
            yield bytes(b)
        elif kind == 2:
            obj = {rng.choice(keys): rng.choice(junk_values) for _ in range(rng.randint(0, 6))}
            if rng.random() < 0.5:
                obj["type"] = rng.choice(["live.data", "announce", "sample", ""])
            yield json.dumps(obj).encode()
        else:
            text = "".join(rng.choice(string.printable + "{}[]\":,") for _ in range(rng.randint(0, 80)))
            yield text.encode()


def _blink_equivalent(rng):
    values = [rng.uniform(2.0, 6.0) for _ in range(rng.randint(20, 300))]
    clean, dirty = [], []
    for i, v in enumerate(values):
        pair = [PupilSample(i * 20_000, Eye.LEFT, v), PupilSample(i * 20_000, Eye.RIGHT, v + 0.01)]
        clean += pair
        dirty += pair
        if i < len(values) - 1 and rng.random() < 0.1 / 0.9:
            ts = i * 20_000 + rng.randint(1, 19_999)
            dirty += [PupilSample(ts, Eye.LEFT, 0.0, 1), PupilSample(ts, Eye.RIGHT, 0.0, 1)]

    def estimates(samples):
        out = []
        p = Pipeline(on_estimate=out.append)
        for s in samples:
            p.feed(s)
        p.finish()
        return out
    return estimates(dirty) == estimates(clean)


def test_8_robustness(report):
    rng = random.Random(8)
    crashes, rejected = 0, 0
    for data in _fuzz_datagrams(rng, 1_000_000):
        try:
            parse_datagram(data)
        except ProtocolError:
            rejected += 1
        except Exception:
            crashes += 1
    blink_ok = all(_blink_equivalent(rng) for _ in range(200))
    report(8, crashes == 0 and blink_ok,
           f"{crashes} crashes over 10^6 datagrams ({rejected} rejected cleanly); "
           f"blink equivalence at 10% invalid over 200 traces: {blink_ok}")


def test_9_determinism(tmp_path, report):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    _fast_session(a)
    _fast_session(b)
    same = a.read_bytes() == b.read_bytes()
    report(9, same, f"two --fast --seed 42 --fixed-id runs byte-identical: {same}")
