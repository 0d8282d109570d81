"""Append-only JSONL session logs, replay input, and event-aligned traces.

One record per line, discriminated by ``kind``::

    {"kind":"header","session_id":..,"start_ts":..,"config":{..},"profile":{..}|null}
    {"kind":"sample","ts":..,"diameter":..}
    {"kind":"estimate","ts":..,"running_avg":..,"windowed_avg":..,"running_max":..,
     "high_load":..,"frames_seen":..}
    {"kind":"event","label":..,"ts":..}
    {"kind":"footer","end_ts":..,"frame_total":..,"estimate_total":..}

Timestamps are device microseconds and never decrease within a kind.
"""

from __future__ import annotations

import csv
import io
import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Union

from .calibration import CalibrationProfile
from .estimator import FrameSample, LoadEstimate

EVENT_LABELS = ("robot_speech_start", "robot_speech_end", "question_asked",
                "pair_found", "session_start", "session_end")
ESTIMATE_CSV_HEADER = ("ts_us", "running_avg_mm", "windowed_avg_mm", "running_max_mm",
                       "high_load")


@dataclass(frozen=True)
class Header:
    session_id: str
    start_ts: int
    config: dict = field(default_factory=dict)
    profile: CalibrationProfile | None = None


@dataclass(frozen=True)
class EventMarker:
    label: str
    ts: int

    def __post_init__(self):
        if not self.label:
            raise ValueError("event label must be non-empty")


@dataclass(frozen=True)
class Footer:
    end_ts: int
    frame_total: int
    estimate_total: int


SessionRecord = Union[Header, FrameSample, LoadEstimate, EventMarker, Footer]


class OrderingError(ValueError):
    """Record appended out of order (before the header, after the footer, or back in time)."""


class FormatError(ValueError):
    def __init__(self, line: int, reason: str, detail: str = ""):
        self.line = line
        self.reason = reason
        msg = f"line {line}: {reason}"
        super().__init__(f"{msg} ({detail})" if detail else msg)


# -- (de)serialisation ---------------------------------------------------------

def record_to_dict(r: SessionRecord) -> dict:
    if isinstance(r, Header):
        return {"kind": "header", "session_id": r.session_id, "start_ts": r.start_ts,
                "config": r.config, "profile": r.profile.to_dict() if r.profile else None}
    if isinstance(r, FrameSample):
        return {"kind": "sample", "ts": r.ts, "diameter": r.diameter}
    if isinstance(r, LoadEstimate):
        return {"kind": "estimate", "ts": r.ts, "running_avg": r.running_avg,
                "windowed_avg": r.windowed_avg, "running_max": r.running_max,
                "high_load": r.high_load, "frames_seen": r.frames_seen}
    if isinstance(r, EventMarker):
        return {"kind": "event", "label": r.label, "ts": r.ts}
    if isinstance(r, Footer):
        return {"kind": "footer", "end_ts": r.end_ts, "frame_total": r.frame_total,
                "estimate_total": r.estimate_total}
    raise TypeError(f"not a session record: {r!r}")


def record_from_dict(d: dict) -> SessionRecord:
    kind = d.get("kind")
    body = {k: v for k, v in d.items() if k != "kind"}
    if kind == "header":
        profile = body.get("profile")
        return Header(str(body["session_id"]), int(body["start_ts"]), dict(body["config"]),
                      CalibrationProfile.from_dict(profile) if profile else None)
    if kind == "sample":
        return FrameSample(int(body["ts"]), float(body["diameter"]))
    if kind == "estimate":
        return LoadEstimate(int(body["ts"]), float(body["running_avg"]),
                            float(body["windowed_avg"]), float(body["running_max"]),
                            bool(body["high_load"]), int(body["frames_seen"]))
    if kind == "event":
        return EventMarker(str(body["label"]), int(body["ts"]))
    if kind == "footer":
        return Footer(int(body["end_ts"]), int(body["frame_total"]), int(body["estimate_total"]))
    raise ValueError(f"unknown record kind {kind!r}")


def _ts_of(r: SessionRecord) -> int:
    if isinstance(r, Header):
        return r.start_ts
    if isinstance(r, Footer):
        return r.end_ts
    return r.ts


class _Framing:
    """Shared ordering rules for writer and loader."""

    def __init__(self):
        self.header: Header | None = None
        self.footer: Footer | None = None
        self.last_ts: dict[type, int] = {}
        self.counts: dict[type, int] = {}

    def check(self, r: SessionRecord) -> str | None:
        if self.footer is not None:
            return "record_after_footer"
        if isinstance(r, Header):
            return "duplicate_header" if self.header is not None else None
        if self.header is None:
            return "missing_header"
        ts = _ts_of(r)
        if isinstance(r, Footer):
            if ts < self.header.start_ts:
                return "nonmonotonic_ts"
            return None
        last = self.last_ts.get(type(r))
        if last is not None and ts < last:
            return "nonmonotonic_ts"
        return None

    def accept(self, r: SessionRecord) -> None:
        if isinstance(r, Header):
            self.header = r
        elif isinstance(r, Footer):
            self.footer = r
        else:
            self.last_ts[type(r)] = _ts_of(r)
            self.counts[type(r)] = self.counts.get(type(r), 0) + 1


class SessionWriter:
    """Appends records as JSON lines, flushing after every record.

    Safe to share between the estimator and emitter activities.
    """

    def __init__(self, target: str | Path | IO[str]):
        if isinstance(target, (str, Path)):
            self._out: IO[str] = open(target, "w", encoding="utf-8")
            self._owns = True
        else:
            self._out = target
            self._owns = False
        self._framing = _Framing()
        self._lock = threading.Lock()

    @property
    def header(self) -> Header | None:
        return self._framing.header

    @property
    def closed(self) -> bool:
        return self._framing.footer is not None

    @property
    def frame_total(self) -> int:
        return self._framing.counts.get(FrameSample, 0)

    @property
    def estimate_total(self) -> int:
        return self._framing.counts.get(LoadEstimate, 0)

    def append(self, r: SessionRecord) -> None:
        with self._lock:
            problem = self._framing.check(r)
            if problem:
                raise OrderingError(f"{problem}: {type(r).__name__}")
            line = json.dumps(record_to_dict(r), separators=(",", ":"), allow_nan=False)
            self._out.write(line + "\n")
            self._out.flush()
            self._framing.accept(r)

    def write_footer(self, end_ts: int | None = None) -> Footer:
        with self._lock:
            f = self._framing
            if end_ts is None:
                end_ts = max([f.header.start_ts, *f.last_ts.values()])
            footer = Footer(end_ts, f.counts.get(FrameSample, 0), f.counts.get(LoadEstimate, 0))
        self.append(footer)
        return footer

    def close(self) -> None:
        if self._owns:
            self._out.close()

    def __enter__(self) -> "SessionWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def append_record(log: SessionWriter, r: SessionRecord) -> None:
    log.append(r)


def iter_session(path: str | Path) -> Iterator[SessionRecord]:
    """Yield validated records in file order; FormatError on the first violation."""
    framing = _Framing()
    lineno = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = record_from_dict(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(lineno, "malformed_json", str(exc)) from None
            except (KeyError, TypeError, ValueError, AttributeError) as exc:
                raise FormatError(lineno, "bad_record", str(exc)) from None
            problem = framing.check(r)
            if problem:
                raise FormatError(lineno, problem)
            if isinstance(r, Footer):
                if (r.frame_total != framing.counts.get(FrameSample, 0)
                        or r.estimate_total != framing.counts.get(LoadEstimate, 0)):
                    raise FormatError(lineno, "count_mismatch")
            framing.accept(r)
            yield r
    if framing.header is None:
        raise FormatError(lineno, "missing_header")
    if framing.footer is None:
        raise FormatError(lineno, "missing_footer")


def load_session(path: str | Path) -> list[SessionRecord]:
    return list(iter_session(path))


@dataclass
class Session:
    header: Header
    footer: Footer
    samples: list[FrameSample]
    estimates: list[LoadEstimate]
    events: list[EventMarker]
    path: Path | None = None

    @classmethod
    def from_records(cls, records: Iterable[SessionRecord], path=None) -> "Session":
        header = footer = None
        samples, estimates, events = [], [], []
        for r in records:
            if isinstance(r, Header):
                header = r
            elif isinstance(r, Footer):
                footer = r
            elif isinstance(r, FrameSample):
                samples.append(r)
            elif isinstance(r, LoadEstimate):
                estimates.append(r)
            else:
                events.append(r)
        if header is None or footer is None:
            raise ValueError("records lack header/footer framing")
        return cls(header, footer, samples, estimates, events, Path(path) if path else None)

    @classmethod
    def load(cls, path: str | Path) -> "Session":
        return cls.from_records(iter_session(path), path)

    @property
    def duration(self) -> float:
        return (self.footer.end_ts - self.header.start_ts) / 1e6


# -- traces & exports ----------------------------------------------------------

@dataclass
class TraceGroup:
    event_index: int
    event_ts: int
    rows: list[tuple[float, float]]  # (t_rel seconds, value)


def extract_event_trace(session: Session, label: str, window: float,
                        which: str = "samples") -> list[TraceGroup]:
    """Values within ``±window`` s of each ``label`` event, re-zeroed at the event.

    ``which="samples"`` gives frame diameters, ``"estimates"`` the windowed
    average. ``t_rel`` is the exact difference of stored timestamps.
    """
    if which == "samples":
        series = [(s.ts, s.diameter) for s in session.samples]
    elif which == "estimates":
        series = [(e.ts, e.windowed_avg) for e in session.estimates]
    else:
        raise ValueError(f"which must be 'samples' or 'estimates', not {which!r}")
    half = round(window * 1e6)
    groups = []
    for i, ev in enumerate(e for e in session.events if e.label == label):
        rows = [((ts - ev.ts) / 1e6, v) for ts, v in series if abs(ts - ev.ts) <= half]
        groups.append(TraceGroup(i, ev.ts, rows))
    return groups


def write_trace_csv(groups: list[TraceGroup], out: str | Path | IO[str]) -> None:
    own = isinstance(out, (str, Path))
    fh = open(out, "w", newline="", encoding="utf-8") if own else out
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("event_index", "event_ts_us", "t_rel", "value"))
        for g in groups:
            for t_rel, value in g.rows:
                w.writerow((g.event_index, g.event_ts, repr(t_rel), repr(value)))
    finally:
        if own:
            fh.close()


def write_estimates_csv(estimates: Iterable[LoadEstimate], out: str | Path | IO[str]) -> None:
    own = isinstance(out, (str, Path))
    fh = open(out, "w", newline="", encoding="utf-8") if own else out
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ESTIMATE_CSV_HEADER)
        for e in estimates:
            w.writerow((e.ts, repr(e.running_avg), repr(e.windowed_avg), repr(e.running_max),
                        int(e.high_load)))
    finally:
        if own:
            fh.close()


def estimates_csv_text(estimates: Iterable[LoadEstimate]) -> str:
    buf = io.StringIO()
    write_estimates_csv(estimates, buf)
    return buf.getvalue()
