"""Streaming load estimator.

Per-eye samples are paired into frames, screened, and folded into running
statistics: the cumulative mean of all frames, the mean of the last 15
frames, and the running maximum of that windowed mean. A frame is flagged
high-load when the windowed mean exceeds ``threshold_fraction`` of the
running maximum. Estimates are published at a fixed rate, independent of
the ingest rate.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from collections import deque
from dataclasses import dataclass, replace
from typing import Callable, Iterable

from .protocol import Eye, PupilSample

log = logging.getLogger(__name__)

WINDOW_FRAMES = 15
DEFAULT_THRESHOLD = 0.70
DEFAULT_EMIT_RATE_HZ = 17.5
PAIR_WINDOW_US = 10_000
SPEED_WINDOW_US = 20_000
MAX_STEP_MM = 1.0
MIN_DIAMETER_MM = 1.0
MAX_DIAMETER_MM = 10.0


@dataclass(frozen=True)
class FrameSample:
    ts: int
    diameter: float


@dataclass(frozen=True)
class LoadEstimate:
    ts: int
    running_avg: float
    windowed_avg: float
    running_max: float
    high_load: bool
    frames_seen: int


class NoDataError(RuntimeError):
    """An estimate was requested before any frame was ingested."""


def merge_eye_pair(left: PupilSample | None, right: PupilSample | None) -> FrameSample | None:
    """Mean of the valid eyes; ``None`` when neither is valid (blink)."""
    valid = [s for s in (left, right) if s is not None and s.valid]
    if not valid:
        return None
    if len(valid) == 1:
        return FrameSample(valid[0].ts, valid[0].diameter)
    a, b = valid
    return FrameSample((a.ts + b.ts) // 2, (a.diameter + b.diameter) / 2.0)


def filter_sample(s: FrameSample, prev: FrameSample | None) -> FrameSample | None:
    """Drop physically impossible diameters and implausibly fast jumps."""
    if not MIN_DIAMETER_MM <= s.diameter <= MAX_DIAMETER_MM:
        return None
    if (prev is not None and s.ts - prev.ts <= SPEED_WINDOW_US
            and abs(s.diameter - prev.diameter) > MAX_STEP_MM):
        return None
    return s


class EyePairer:
    """Pairs left/right samples whose timestamps lie within 10 ms.

    A sample waits until its partner arrives, until another sample of the
    same eye arrives, or until it goes stale relative to a later timestamp.
    """

    def __init__(self, window_us: int = PAIR_WINDOW_US):
        self.window_us = window_us
        self.pending: dict[Eye, PupilSample] = {}

    def _flush_one(self, eye: Eye) -> FrameSample | None:
        s = self.pending.pop(eye)
        return merge_eye_pair(s, None) if eye is Eye.LEFT else merge_eye_pair(None, s)

    def flush_stale(self, now_ts: int) -> list[FrameSample]:
        out = []
        for eye in sorted(self.pending, key=lambda e: self.pending[e].ts):
            if now_ts - self.pending[eye].ts > self.window_us:
                f = self._flush_one(eye)
                if f is not None:
                    out.append(f)
        return out

    def flush(self) -> list[FrameSample]:
        out = []
        for eye in sorted(self.pending, key=lambda e: self.pending[e].ts):
            f = self._flush_one(eye)
            if f is not None:
                out.append(f)
        return out

    def push(self, s: PupilSample) -> list[FrameSample]:
        out = self.flush_stale(s.ts)
        other = Eye.RIGHT if s.eye is Eye.LEFT else Eye.LEFT
        if other in self.pending and abs(self.pending[other].ts - s.ts) <= self.window_us:
            partner = self.pending.pop(other)
            left, right = (s, partner) if s.eye is Eye.LEFT else (partner, s)
            f = merge_eye_pair(left, right)
            if f is not None:
                out.append(f)
            return out
        if s.eye in self.pending:
            f = self._flush_one(s.eye)
            if f is not None:
                out.append(f)
        self.pending[s.eye] = s
        return out


class EstimatorState:
    """Single-writer running statistics; ``ingest`` is O(1) per frame."""

    def __init__(self, threshold_fraction: float = DEFAULT_THRESHOLD, profile=None,
                 window: int = WINDOW_FRAMES):
        if not 0 < threshold_fraction < 1:
            raise ValueError("threshold_fraction must be in (0, 1)")
        self.threshold_fraction = threshold_fraction
        self.profile = profile
        self.frame_count = 0
        self.running_sum = 0.0
        self.window: deque[float] = deque(maxlen=window)
        self.running_max = profile.d_max if profile is not None else -math.inf
        self.last_ts: int | None = None

    @property
    def running_avg(self) -> float:
        return self.running_sum / self.frame_count

    @property
    def windowed_avg(self) -> float:
        # fsum over at most 15 values: exact-rounded, no drift from incremental updates
        return math.fsum(self.window) / len(self.window)

    def ingest(self, f: FrameSample) -> "EstimatorState":
        self.frame_count += 1
        self.running_sum += f.diameter
        self.window.append(f.diameter)
        self.running_max = max(self.running_max, self.windowed_avg)
        self.last_ts = f.ts
        return self

    def estimate(self, ts: int | None = None) -> LoadEstimate:
        if self.frame_count == 0:
            raise NoDataError("no frames ingested yet")
        w = self.windowed_avg
        return LoadEstimate(
            ts=self.last_ts if ts is None else ts,
            running_avg=self.running_avg,
            windowed_avg=w,
            running_max=self.running_max,
            high_load=w > self.threshold_fraction * self.running_max,
            frames_seen=self.frame_count,
        )


def ingest_frame(state: EstimatorState, f: FrameSample) -> EstimatorState:
    return state.ingest(f)


def current_estimate(state: EstimatorState, ts: int | None = None) -> LoadEstimate:
    return state.estimate(ts)


class FixedRateTicker:
    """Emits the latest estimate at ``origin + k / rate`` on a device-time clock.

    Ticks are fired lazily as device time advances; a tick with no estimate
    available yet is skipped.
    """

    def __init__(self, emit_rate_hz: float, sink: Callable[[LoadEstimate], None]):
        if not emit_rate_hz > 0:
            raise ValueError("emit_rate_hz must be > 0")
        self.interval_us = 1e6 / emit_rate_hz
        self.sink = sink
        self.origin: int | None = None
        self.k = 0
        self.emitted = 0
        self.skipped = 0

    def next_tick(self) -> int:
        return self.origin + round(self.k * self.interval_us)

    def advance(self, now_ts: int, latest: LoadEstimate | None, inclusive: bool = False) -> None:
        if self.origin is None:
            self.origin = now_ts
        while True:
            tick = self.next_tick()
            if tick > now_ts or (tick == now_ts and not inclusive):
                break
            if latest is None:
                self.skipped += 1
            else:
                self.sink(replace(latest, ts=tick))
                self.emitted += 1
            self.k += 1


class Pipeline:
    """Pairing, screening, estimation and (optionally) sample-clocked emission.

    ``feed`` takes raw per-eye samples in arrival order. With
    ``emit_rate_hz`` set, estimates are emitted on a fixed-rate tick driven by
    sample timestamps (the deterministic fast-clock mode); with ``None`` the
    caller emits from ``latest`` on its own clock.
    """

    def __init__(self, profile=None, threshold_fraction: float = DEFAULT_THRESHOLD,
                 emit_rate_hz: float | None = DEFAULT_EMIT_RATE_HZ,
                 on_frame: Callable[[FrameSample, LoadEstimate], None] | None = None,
                 on_estimate: Callable[[LoadEstimate], None] | None = None):
        self.state = EstimatorState(threshold_fraction, profile)
        self.pairer = EyePairer()
        self.prev: FrameSample | None = None
        self.latest: LoadEstimate | None = None
        self.last_raw_ts: int | None = None
        self.on_frame = on_frame
        self.on_estimate = on_estimate
        self.rejected = 0
        self.ticker = (FixedRateTicker(emit_rate_hz, self._emit)
                       if emit_rate_hz is not None else None)

    def _emit(self, est: LoadEstimate) -> None:
        if self.on_estimate is not None:
            self.on_estimate(est)

    def _ingest(self, frames: Iterable[FrameSample]) -> None:
        for f in frames:
            if filter_sample(f, self.prev) is None:
                self.rejected += 1
                continue
            self.prev = f
            self.state.ingest(f)
            self.latest = self.state.estimate(f.ts)
            if self.on_frame is not None:
                self.on_frame(f, self.latest)

    def feed(self, sample: PupilSample) -> None:
        if self.last_raw_ts is not None and sample.ts < self.last_raw_ts:
            log.debug("out-of-order sample at %d", sample.ts)
        self.last_raw_ts = sample.ts if self.last_raw_ts is None else max(self.last_raw_ts, sample.ts)
        self._ingest(self.pairer.flush_stale(sample.ts))
        if self.ticker is not None:
            self.ticker.advance(sample.ts, self.latest)
        self._ingest(self.pairer.push(sample))

    def feed_frame(self, f: FrameSample) -> None:
        """Feed an already-merged frame (replay path); same tick semantics as ``feed``."""
        self.last_raw_ts = f.ts if self.last_raw_ts is None else max(self.last_raw_ts, f.ts)
        if self.ticker is not None:
            self.ticker.advance(f.ts, self.latest)
        self._ingest((f,))

    def finish(self, end_ts: int | None = None) -> None:
        """Flush pending samples and fire the remaining ticks up to ``end_ts`` (inclusive)."""
        self._ingest(self.pairer.flush())
        if end_ts is None:
            end_ts = self.last_raw_ts
        if self.ticker is not None and end_ts is not None:
            self.ticker.advance(end_ts, self.latest, inclusive=True)


def emit_loop(pipeline: Pipeline, now_ts: Callable[[], int],
              sink: Callable[[LoadEstimate], None],
              emit_rate_hz: float = DEFAULT_EMIT_RATE_HZ,
              stop: threading.Event | None = None) -> int:
    """Wall-clock emitter: every ``1/emit_rate_hz`` s, re-stamp and emit ``pipeline.latest``.

    ``now_ts`` maps wall time onto device microseconds. While ingest is
    stalled the last values are repeated with fresh timestamps. Returns the
    number of estimates emitted once ``stop`` is set.
    """
    stop = stop or threading.Event()
    period = 1.0 / emit_rate_hz
    next_t = time.monotonic()
    last_ts = None
    count = 0
    while not stop.is_set():
        next_t += period
        delay = next_t - time.monotonic()
        if delay > 0 and stop.wait(delay):
            break
        latest = pipeline.latest
        if latest is None:
            continue
        ts = now_ts()
        if last_ts is not None:
            ts = max(ts, last_ts)
        last_ts = ts
        sink(replace(latest, ts=ts))
        count += 1
    return count


def format_readout(est: LoadEstimate, origin_ts: int = 0) -> str:
    flag = "HIGH" if est.high_load else "ok"
    return (f"{(est.ts - origin_ts) / 1e6:9.3f} s  win {est.windowed_avg:6.3f} mm  "
            f"avg {est.running_avg:6.3f} mm  {flag}")
