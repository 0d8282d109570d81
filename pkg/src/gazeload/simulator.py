"""Deterministic synthetic eye tracker.

The pupil signal is baseline + light-reflex steps + task-evoked dilations +
Gaussian noise, clamped to [1, 10] mm, with blink gaps reported as
``status=1, diameter=0``.

Randomness comes from xorshift64* generators seeded through splitmix64:

* noise for a sample is a pure function of ``(seed, ts_us, eye)``: the
  generator state is ``splitmix64(seed ^ splitmix64(2 * ts_us + eye_index))``
  (left = 0, right = 1) and one Box-Muller draw is taken from it;
* the random blink schedule is drawn sequentially from one generator seeded
  with ``splitmix64(seed ^ BLINK_SALT)``: exponential inter-blink intervals
  at ``blink_rate_hz`` and uniform durations in ``blink_duration_ms``.
"""

from __future__ import annotations

import functools
import json
import logging
import math
import socket
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

from .protocol import (Announce, DeviceEndpoint, Eye, KeepaliveOp, Keepalive, PupilSample,
                       ProtocolError, SEQ_MODULUS, parse_datagram, serialize_datagram)

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
BLINK_SALT = 0xB1E4_5EED_0000_0001
MIN_DIAMETER_MM = 1.0
MAX_DIAMETER_MM = 10.0
KEEPALIVE_TIMEOUT_S = 5.0
FAST_SPEEDUP = 100.0

EYE_INDEX = {Eye.LEFT: 0, Eye.RIGHT: 1}


# -- PRNG ----------------------------------------------------------------------

def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class XorShift64Star:
    """Marsaglia xorshift with Vigna's multiplicative output scramble."""

    def __init__(self, seed: int):
        self.state = (seed & MASK64) or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * 0x2545F4914F6CDD1D) & MASK64

    def uniform(self) -> float:
        """Uniform on [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def gauss(self) -> float:
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


def sample_noise(seed: int, ts_us: int, eye: Eye) -> float:
    """Standard normal draw keyed by (seed, timestamp, eye)."""
    key = splitmix64((2 * ts_us + EYE_INDEX[eye]) & MASK64)
    return XorShift64Star(splitmix64((seed ^ key) & MASK64)).gauss()


# -- scenario ------------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioConfig:
    """One simulated recording. Times in seconds, diameters in mm.

    ``light_steps`` are ``(t_on, "bright"|"dim")``; ``task_events`` are
    ``(t, amplitude_mm)``; ``blinks`` are extra scheduled blinks
    ``(t, duration_ms)`` on top of the random ones; ``markers`` are
    ``(t, label)`` event markers a recorder may inject into the session.
    """

    seed: int = 0
    duration: float = 60.0
    sample_rate_hz: float = 50.0
    baseline_mm: float = 3.5
    noise_sigma_mm: float = 0.05
    light_steps: tuple = ()
    task_events: tuple = ()
    blink_rate_hz: float = 0.25
    blink_duration_ms: tuple = (100.0, 300.0)
    blinks: tuple = ()
    markers: tuple = ()
    # reflex and task-response dynamics
    light_amplitude_mm: float = 1.2
    light_latency_s: float = 0.2
    light_tau_s: float = 0.4
    task_latency_s: float = 0.3
    task_tau_s: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & MASK64)
        object.__setattr__(self, "light_steps", tuple(
            (float(t), str(b)) for t, b in self.light_steps))
        object.__setattr__(self, "task_events", tuple(
            (float(t), float(a)) for t, a in self.task_events))
        object.__setattr__(self, "blinks", tuple(
            (float(t), float(d)) for t, d in self.blinks))
        object.__setattr__(self, "markers", tuple(
            (float(t), str(label)) for t, label in self.markers))
        object.__setattr__(self, "blink_duration_ms", tuple(
            float(x) for x in self.blink_duration_ms))
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be > 0")
        if not MIN_DIAMETER_MM <= self.baseline_mm <= MAX_DIAMETER_MM:
            raise ValueError("baseline_mm must be in [1, 10]")
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        if self.noise_sigma_mm < 0 or self.blink_rate_hz < 0:
            raise ValueError("noise_sigma_mm and blink_rate_hz must be >= 0")
        if any(a < 0 for _, a in self.task_events):
            raise ValueError("task amplitudes must be >= 0")
        if any(b not in ("bright", "dim") for _, b in self.light_steps):
            raise ValueError("light step brightness must be 'bright' or 'dim'")
        lo, hi = self.blink_duration_ms
        if not 0 < lo <= hi:
            raise ValueError("blink_duration_ms must be (min, max) with 0 < min <= max")

    @property
    def n_samples(self) -> int:
        """Samples per eye: t = k / rate for k in range(n_samples)."""
        return int(round(self.duration * self.sample_rate_hz))

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("light_steps", "task_events", "blinks", "markers", "blink_duration_ms"):
            d[key] = [list(x) if isinstance(x, tuple) else x for x in d[key]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ScenarioConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def light_reflex_delta(config: ScenarioConfig, t: float) -> float:
    """Diameter change from illumination steps (first-order response after a latency)."""
    delta = 0.0
    constricted = False
    for t_on, brightness in sorted(config.light_steps):
        bright = brightness == "bright"
        if bright == constricted:
            continue
        constricted = bright
        x = t - t_on - config.light_latency_s
        if x < 0:
            continue
        g = 1.0 - math.exp(-x / config.light_tau_s)
        delta += -config.light_amplitude_mm * g if bright else config.light_amplitude_mm * g
    return delta


def task_response(amplitude: float, t_rel: float, latency: float, tau: float) -> float:
    """Gamma-shaped dilation ``A * x * e^(1 - x)`` peaking at ``A`` one ``tau`` after onset."""
    x = (t_rel - latency) / tau
    if x < 0:
        return 0.0
    return amplitude * x * math.exp(1.0 - x)


def task_delta(config: ScenarioConfig, t: float) -> float:
    return sum(task_response(a, t - t0, config.task_latency_s, config.task_tau_s)
               for t0, a in config.task_events)


def clean_signal(config: ScenarioConfig, t: float) -> float:
    """Noise-free, unclamped diameter at ``t``."""
    return config.baseline_mm + light_reflex_delta(config, t) + task_delta(config, t)


@functools.lru_cache(maxsize=64)
def blink_schedule(config: ScenarioConfig) -> tuple:
    """Blink intervals as sorted ``(start_us, end_us)`` half-open pairs."""
    intervals = [(t, d) for t, d in config.blinks]
    if config.blink_rate_hz > 0:
        rng = XorShift64Star(splitmix64(config.seed ^ BLINK_SALT))
        lo, hi = config.blink_duration_ms
        t = 0.0
        while True:
            t += -math.log(1.0 - rng.uniform()) / config.blink_rate_hz
            if t >= config.duration:
                break
            intervals.append((t, lo + (hi - lo) * rng.uniform()))
    return tuple(sorted((round(t * 1e6), round(t * 1e6) + round(d * 1e3)) for t, d in intervals))


def in_blink(config: ScenarioConfig, ts_us: int) -> bool:
    return any(start <= ts_us < end for start, end in blink_schedule(config))


def generate_sample(config: ScenarioConfig, t: float, eye: Eye, seq: int = 0) -> PupilSample:
    ts = round(t * 1e6)
    if in_blink(config, ts):
        return PupilSample(ts, eye, 0.0, 1, seq)
    d = clean_signal(config, t)
    if config.noise_sigma_mm > 0:
        d += config.noise_sigma_mm * sample_noise(config.seed, ts, eye)
    d = min(max(d, MIN_DIAMETER_MM), MAX_DIAMETER_MM)
    return PupilSample(ts, eye, d, 0, seq)


def iter_scenario(config: ScenarioConfig) -> Iterator[PupilSample]:
    """All samples in emission order: left then right per tick, seq per datagram."""
    seq = 0
    for k in range(config.n_samples):
        t = k / config.sample_rate_hz
        for eye in (Eye.LEFT, Eye.RIGHT):
            yield generate_sample(config, t, eye, seq)
            seq = (seq + 1) % SEQ_MODULUS


# -- server --------------------------------------------------------------------

@dataclass
class _Subscription:
    client: tuple | None = None
    last_keepalive: float = 0.0
    active: bool = False
    generation: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)


class SimulatorServer:
    """UDP device emulator.

    Emission starts on the first ``Keepalive(start)`` and goes to the address
    it came from. It ends after ``config.duration`` of simulated time, on
    ``Keepalive(stop)``, or after 5 s (wall) without a keepalive. In fast mode
    simulated time runs ``speedup`` times faster than wall time.
    """

    def __init__(self, config: ScenarioConfig, bind: DeviceEndpoint | tuple, *,
                 fast: bool = False, speedup: float = FAST_SPEEDUP, repeat: bool = False,
                 device_id: str = "sim01"):
        self.config = config
        self.bind = (bind.address, bind.port) if isinstance(bind, DeviceEndpoint) else bind
        self.speedup = speedup if fast else 1.0
        self.repeat = repeat
        self.device_id = device_id
        self.sent = 0
        self.sessions = 0
        self._sub = _Subscription()
        self._wake = threading.Event()
        self._stop = threading.Event()
        self._sock: socket.socket | None = None
        self._threads: list[threading.Thread] = []

    @property
    def port(self) -> int:
        assert self._sock is not None, "server not started"
        return self._sock.getsockname()[1]

    @property
    def endpoint(self) -> DeviceEndpoint:
        return DeviceEndpoint(self.bind[0], self.port)

    def start(self) -> "SimulatorServer":
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, 1024 * 1024)
        sock.bind(self.bind)  # bind failure propagates
        sock.settimeout(0.1)
        self._sock = sock
        self._threads = [
            threading.Thread(target=self._listen, name="sim-listen", daemon=True),
            threading.Thread(target=self._emit, name="sim-emit", daemon=True),
        ]
        for t in self._threads:
            t.start()
        log.info("simulator listening on %s:%d", self.bind[0], self.port)
        return self

    def stop(self) -> None:
        self._stop.set()
        self._wake.set()

    def join(self, timeout: float | None = None) -> None:
        for t in self._threads:
            t.join(timeout)
        if self._sock is not None and not any(t.is_alive() for t in self._threads):
            self._sock.close()

    @property
    def finished(self) -> bool:
        return not any(t.is_alive() for t in self._threads)

    def __enter__(self) -> "SimulatorServer":
        return self if self._sock else self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
        self.join()

    def _listen(self) -> None:
        while not self._stop.is_set():
            try:
                data, addr = self._sock.recvfrom(4096)
            except socket.timeout:
                continue
            except OSError:
                if self._stop.is_set():
                    break
                continue
            try:
                d = parse_datagram(data)
            except ProtocolError:
                continue
            if not isinstance(d, Keepalive):
                continue
            with self._sub.lock:
                if d.op is KeepaliveOp.START:
                    if not self._sub.active:
                        self._sub.generation += 1
                    self._sub.client = addr
                    self._sub.last_keepalive = time.monotonic()
                    self._sub.active = True
                else:
                    self._sub.active = False
            self._wake.set()

    def _subscribed(self, generation: int) -> bool:
        with self._sub.lock:
            if not self._sub.active or self._sub.generation != generation:
                return False
            if time.monotonic() - self._sub.last_keepalive > KEEPALIVE_TIMEOUT_S:
                self._sub.active = False
                return False
            return True

    def _emit(self) -> None:
        while not self._stop.is_set():
            self._wake.wait(0.1)
            self._wake.clear()
            with self._sub.lock:
                active, generation = self._sub.active, self._sub.generation
            if not active:
                continue
            self._run_session(generation)
            self.sessions += 1
            with self._sub.lock:
                if self._sub.generation == generation:
                    self._sub.active = False
            if not self.repeat:
                self._stop.set()
                break

    def _run_session(self, generation: int) -> None:
        config = self.config
        self._send(Announce(self.device_id, config.sample_rate_hz))
        start = time.monotonic()
        for sample in iter_scenario(config):
            if self._stop.is_set() or not self._subscribed(generation):
                log.info("subscription ended, stopping emission")
                return
            ahead = start + sample.ts / 1e6 / self.speedup - time.monotonic()
            if ahead > 0.001:
                time.sleep(ahead)
            self._send(sample)
            self.sent += 1

    def _send(self, d) -> None:
        with self._sub.lock:
            client = self._sub.client
        try:
            self._sock.sendto(serialize_datagram(d), client)
        except OSError as exc:
            log.warning("send failed: %s", exc)


def run_server(config: ScenarioConfig, bind: DeviceEndpoint | tuple, **kwargs) -> SimulatorServer:
    """Start a simulator in background threads and return its handle."""
    return SimulatorServer(config, bind, **kwargs).start()
