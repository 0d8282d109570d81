"""Wiring of the live pipeline: device stream -> calibration -> estimator -> emitter -> session log."""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .calibration import CalibrationProfile, Calibrator
from .estimator import (DEFAULT_EMIT_RATE_HZ, DEFAULT_THRESHOLD, WINDOW_FRAMES, FrameSample,
                        LoadEstimate, Pipeline, emit_loop, format_readout)
from .protocol import DeviceEndpoint, PupilSample, StreamHandle, receive_stream
from .session import EventMarker, Header, Session, SessionWriter

log = logging.getLogger(__name__)


@dataclass
class GlobalConfig:
    log_level: str = "WARNING"
    clock_mode: str = "wall"
    emit_rate_hz: float = DEFAULT_EMIT_RATE_HZ
    threshold_fraction: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if self.clock_mode not in ("wall", "fast"):
            raise ValueError("clock_mode must be 'wall' or 'fast'")
        if not 1 <= self.emit_rate_hz <= 100:
            raise ValueError("emit_rate_hz must be in [1, 100]")
        if not 0 < self.threshold_fraction < 1:
            raise ValueError("threshold_fraction must be in (0, 1)")


def load_markers(path: str | Path) -> list[tuple[float, str]]:
    """Event markers ``(t_seconds, label)`` from a JSON list or a scenario file's ``markers``.

    List entries may be ``{"t": .., "label": ..}`` objects or ``[t, label]`` pairs.
    """
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = data.get("markers", [])
    out = []
    for item in data:
        if isinstance(item, dict):
            out.append((float(item["t"]), str(item["label"])))
        else:
            t, label = item
            out.append((float(t), str(label)))
    return sorted(out)


@dataclass
class RunSummary:
    frames: int = 0
    estimates: int = 0
    events: int = 0
    rejected: int = 0
    profile: CalibrationProfile | None = None
    start_ts: int | None = None
    end_ts: int | None = None
    stream_stats: object = None
    emit_intervals_us: list = field(default_factory=list)


class Recorder:
    """Consumes raw samples and produces a framed session log.

    In fast mode estimates are emitted on the sample clock (deterministic);
    in wall mode a separate emitter thread publishes the latest snapshot at
    the emit rate. Markers are injected when the sample clock reaches them;
    live labels pushed through ``inject`` are stamped with the next sample's
    timestamp.
    """

    def __init__(self, writer: SessionWriter, config: GlobalConfig, *,
                 session_id: str | None = None, profile: CalibrationProfile | None = None,
                 calibrator: Calibrator | None = None, markers=(), tags=None,
                 duration: float | None = None,
                 readout: Callable[[str], None] | None = None, source: str = "stream"):
        self.writer = writer
        self.config = config
        self.session_id = session_id or uuid.uuid4().hex
        self.profile = profile
        self.calibrator = calibrator
        self.markers = sorted(markers)
        self.tags = dict(tags or {})
        self.duration_us = None if duration is None else round(duration * 1e6)
        self.readout = readout
        self.source = source
        self.fast = config.clock_mode == "fast"
        self.pipeline: Pipeline | None = None
        self.first_ts: int | None = None
        self.last_ts: int | None = None
        self.origin_ts: int = 0
        self.summary = RunSummary(profile=profile)
        self.finished = threading.Event()
        self._live_labels: queue.Queue = queue.Queue()
        self._clock_anchor: tuple[int, float] | None = None
        self._emit_stop = threading.Event()
        self._emit_thread: threading.Thread | None = None
        self._last_emit_ts: int | None = None

    # -- sample path (single writer) --

    def inject(self, label: str) -> None:
        self._live_labels.put(label)

    def __call__(self, sample: PupilSample) -> None:
        self.feed(sample)

    def feed(self, sample: PupilSample) -> None:
        if self.finished.is_set():
            return
        if self.first_ts is None:
            self.first_ts = sample.ts
        if self.duration_us is not None and sample.ts - self.first_ts >= self.duration_us:
            self.finished.set()
            return
        self._clock_anchor = (sample.ts, time.monotonic())
        if self.calibrator is not None and not self.calibrator.done:
            if not self.calibrator.feed(sample):
                return
            self.profile = self.calibrator.profile()
            self.summary.profile = self.profile
            log.info("calibrated: d_min %.3f mm, d_max %.3f mm",
                     self.profile.d_min, self.profile.d_max)
        if self.pipeline is None:
            self._begin(sample.ts)
        self._inject_until(sample.ts)
        self.pipeline.feed(sample)
        self.last_ts = sample.ts

    def _begin(self, start_ts: int) -> None:
        self.origin_ts = start_ts
        self.summary.start_ts = start_ts
        snapshot = {
            "source": self.source,
            "clock_mode": self.config.clock_mode,
            "emit_rate_hz": self.config.emit_rate_hz,
            "threshold_fraction": self.config.threshold_fraction,
            "window_frames": WINDOW_FRAMES,
            "tags": self.tags,
        }
        self.writer.append(Header(self.session_id, start_ts, snapshot, self.profile))
        self.pipeline = Pipeline(
            profile=self.profile,
            threshold_fraction=self.config.threshold_fraction,
            emit_rate_hz=self.config.emit_rate_hz if self.fast else None,
            on_frame=self._on_frame,
            on_estimate=self._on_estimate,
        )
        if self.fast:
            self.pipeline.ticker.origin = start_ts
        else:
            self._emit_thread = threading.Thread(target=self._wall_emitter, name="gazeload-emit",
                                                 daemon=True)
            self._emit_thread.start()

    def _inject_until(self, ts: int) -> None:
        while self.markers and self.first_ts + round(self.markers[0][0] * 1e6) <= ts:
            t, label = self.markers.pop(0)
            self._event(EventMarker(label, self.first_ts + round(t * 1e6)))
        while True:
            try:
                label = self._live_labels.get_nowait()
            except queue.Empty:
                break
            self._event(EventMarker(label, ts))

    def _event(self, ev: EventMarker) -> None:
        self.writer.append(ev)
        self.summary.events += 1

    def _on_frame(self, f: FrameSample, est: LoadEstimate) -> None:
        self.writer.append(f)

    def _on_estimate(self, est: LoadEstimate) -> None:
        if self._last_emit_ts is not None:
            self.summary.emit_intervals_us.append(est.ts - self._last_emit_ts)
        self._last_emit_ts = est.ts
        self.writer.append(est)
        if self.readout is not None:
            self.readout(format_readout(est, self.origin_ts))

    # -- wall clock emitter --

    def _device_now(self) -> int:
        ts, at = self._clock_anchor
        return ts + round((time.monotonic() - at) * 1e6)

    def _wall_emitter(self) -> None:
        emit_loop(self.pipeline, self._device_now, self._on_estimate,
                  self.config.emit_rate_hz, self._emit_stop)

    # -- end --

    def finish(self) -> RunSummary:
        self.finished.set()
        if self._emit_thread is not None:
            self._emit_stop.set()
            self._emit_thread.join()
        if self.pipeline is None:
            if self.calibrator is not None and not self.calibrator.done:
                self.calibrator.finish()  # raises CalibrationError if short
            raise RuntimeError("stream ended before any sample was tracked")
        self.pipeline.finish()
        end_ts = max(self.last_ts, self._last_emit_ts or self.last_ts)
        self.writer.write_footer(end_ts)
        self.summary.frames = self.writer.frame_total
        self.summary.estimates = self.writer.estimate_total
        self.summary.rejected = self.pipeline.rejected
        self.summary.end_ts = end_ts
        return self.summary


def stream_session(endpoint: DeviceEndpoint, out: str | Path, config: GlobalConfig, *,
                   idle_timeout: float | None = None, stdin_events=None,
                   **recorder_kwargs) -> RunSummary:
    """Subscribe to a device and record one session until the stream ends."""
    if idle_timeout is None:
        idle_timeout = 0.5 if config.clock_mode == "fast" else 3.0
    with SessionWriter(out) as writer:
        rec = Recorder(writer, config, **recorder_kwargs)
        handle: StreamHandle = receive_stream(endpoint, rec.feed, idle_timeout=idle_timeout)
        if stdin_events is not None:
            threading.Thread(target=_read_labels, args=(stdin_events, rec), daemon=True).start()
        try:
            while handle.running:
                if rec.finished.wait(0.05):
                    break
        except KeyboardInterrupt:
            log.info("interrupted")
        finally:
            handle.stop()
            handle.join()
        if handle.error is not None:
            raise handle.error
        summary = rec.finish()
        summary.stream_stats = handle.stats
        return summary


def _read_labels(fh, rec: Recorder) -> None:
    for line in fh:
        label = line.strip()
        if label:
            rec.inject(label)


def replay_session(session: Session, config: GlobalConfig, *, out: str | Path | None = None,
                   speed: float = 0.0, markers=(), session_id: str | None = None,
                   readout: Callable[[str], None] | None = None) -> tuple[list[LoadEstimate], RunSummary]:
    """Re-run the estimator over a recorded session on its own sample clock.

    Recorded frames are fed in order; recorded events are carried over and
    ``markers`` (seconds from session start) are added. With ``speed > 0``
    playback is paced at that multiple of real time.
    """
    estimates: list[LoadEstimate] = []
    writer = SessionWriter(out) if out is not None else None
    header = session.header
    summary = RunSummary(profile=header.profile, start_ts=header.start_ts)

    events = sorted([(e.ts, e.label) for e in session.events]
                    + [(header.start_ts + round(t * 1e6), label) for t, label in markers])

    def on_estimate(est: LoadEstimate) -> None:
        estimates.append(est)
        if writer is not None:
            writer.append(est)
        if readout is not None:
            readout(format_readout(est, header.start_ts))

    def on_frame(f: FrameSample, est: LoadEstimate) -> None:
        if writer is not None:
            writer.append(f)

    pipeline = Pipeline(profile=header.profile, threshold_fraction=config.threshold_fraction,
                        emit_rate_hz=config.emit_rate_hz, on_frame=on_frame,
                        on_estimate=on_estimate)
    pipeline.ticker.origin = header.start_ts
    if writer is not None:
        snapshot = dict(header.config, source="replay",
                        emit_rate_hz=config.emit_rate_hz,
                        threshold_fraction=config.threshold_fraction)
        writer.append(Header(session_id or header.session_id, header.start_ts, snapshot,
                             header.profile))
    wall0 = time.monotonic()
    for f in session.samples:
        while events and events[0][0] <= f.ts:
            ts, label = events.pop(0)
            if writer is not None:
                writer.append(EventMarker(label, ts))
            summary.events += 1
        if speed > 0:
            ahead = wall0 + (f.ts - header.start_ts) / 1e6 / speed - time.monotonic()
            if ahead > 0:
                time.sleep(ahead)
        pipeline.feed_frame(f)
    end_ts = max(session.footer.end_ts, header.start_ts)
    pipeline.finish(end_ts)
    summary.frames = pipeline.state.frame_count
    summary.estimates = len(estimates)
    summary.rejected = pipeline.rejected
    summary.end_ts = end_ts
    if writer is not None:
        for ts, label in events:
            if ts <= end_ts:
                writer.append(EventMarker(label, ts))
        writer.write_footer(end_ts)
        writer.close()
    return estimates, summary
