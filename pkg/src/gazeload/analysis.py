"""Offline session statistics: peak counting, per-session features, Pearson r and its p-value."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .estimator import LoadEstimate
from .session import Session

log = logging.getLogger(__name__)

MIN_PEAK_RUN = 3
GAP_CLOSE = 2


class StatsError(ValueError):
    """Degenerate input for a statistic (too few points, length mismatch, zero variance)."""


# -- peaks ---------------------------------------------------------------------

def count_peaks(flags: Iterable[bool | LoadEstimate], min_run: int = MIN_PEAK_RUN,
                gap: int = GAP_CLOSE) -> int:
    """Number of debounced high-load episodes.

    True estimates separated by fewer than ``gap`` consecutive False ones
    belong to the same episode; an episode counts when it holds at least
    ``min_run`` True estimates.
    """
    peaks = 0
    run_true = 0
    falses = 0
    for f in flags:
        high = f.high_load if isinstance(f, LoadEstimate) else bool(f)
        if high:
            if falses >= gap:
                peaks += run_true >= min_run
                run_true = 0
            falses = 0
            run_true += 1
        else:
            falses += 1
    return peaks + (run_true >= min_run)


# -- correlation ---------------------------------------------------------------

def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    n = len(x)
    if n != len(y):
        raise StatsError(f"length mismatch: {n} vs {len(y)}")
    if n < 3:
        raise StatsError(f"need at least 3 pairs, got {n}")
    mx = math.fsum(x) / n
    my = math.fsum(y) / n
    dx = [v - mx for v in x]
    dy = [v - my for v in y]
    sxx = math.fsum(d * d for d in dx)
    syy = math.fsum(d * d for d in dy)
    if sxx == 0 or syy == 0:
        raise StatsError("zero variance")
    sxy = math.fsum(a * b for a, b in zip(dx, dy))
    r = sxy / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def _betacf(a: float, b: float, x: float, eps: float = 1e-16, max_iter: int = 10_000) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if not (a > 0 and b > 0):
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_statistic(r: float, n: int) -> float:
    return r * math.sqrt((n - 2) / (1.0 - r * r))


def p_value(r: float, n: int) -> float:
    """Two-tailed p for H0: rho = 0, via Student's t with n - 2 degrees of freedom.

    ``|r| == 1`` returns 0.0 by convention.
    """
    if n < 3:
        raise StatsError(f"need n >= 3, got {n}")
    if not -1.0 <= r <= 1.0:
        raise StatsError(f"r out of range: {r}")
    if abs(r) == 1.0:
        return 0.0
    df = n - 2
    # P(|T| > t) = I_{df/(df+t^2)}(df/2, 1/2); df/(df+t^2) simplifies to 1 - r^2.
    # Near p = 1 (small r), 1 - r^2 rounds away the signal: use the complement in r^2.
    r2 = r * r
    p = betainc(df / 2.0, 0.5, 1.0 - r2)
    if p > 0.5:
        p = 1.0 - betainc(0.5, df / 2.0, r2)
    return min(1.0, p)


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    n: int
    p_two_tailed: float


def correlate(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    r = pearson_r(x, y)
    return CorrelationResult(r, len(x), p_value(r, len(x)))


# -- session features ----------------------------------------------------------

@dataclass
class SessionFeatures:
    session_id: str
    peak_count: int
    duration: float
    event_counts: dict[str, int] = field(default_factory=dict)
    tags: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.peak_count < 0:
            raise ValueError("peak_count must be >= 0")
        if not self.duration > 0:
            raise ValueError(f"session {self.session_id}: duration must be > 0")

    @classmethod
    def from_session(cls, session: Session) -> "SessionFeatures":
        tags = session.header.config.get("tags") or {}
        return cls(
            session_id=session.header.session_id,
            peak_count=count_peaks(session.estimates),
            duration=session.duration,
            event_counts=dict(Counter(e.label for e in session.events)),
            tags={str(k): str(v) for k, v in tags.items()},
        )

    def value(self, name: str, mappings: Mapping[str, Mapping[str, float]] | None = None):
        """Numeric value of feature ``name``, or None when undefined for this session.

        Names: ``peaks`` (or ``peak_count``), ``duration``, ``events:<label>``
        (absent label counts 0), ``tag:<name>`` (numeric tag value, or looked up
        in ``mappings[name]``). A bare name is tried as a tag, then as an event label.
        """
        mappings = mappings or {}
        if name in ("peaks", "peak_count"):
            return float(self.peak_count)
        if name == "duration":
            return self.duration
        if name.startswith("events:"):
            return float(self.event_counts.get(name[len("events:"):], 0))
        if name.startswith("tag:"):
            return self._tag_value(name[len("tag:"):], mappings)
        if name in self.tags or name in mappings:
            return self._tag_value(name, mappings)
        if name in self.event_counts:
            return float(self.event_counts[name])
        return None

    def _tag_value(self, tag: str, mappings) -> float | None:
        raw = self.tags.get(tag)
        if raw is None:
            return None
        if tag in mappings:
            v = mappings[tag].get(raw)
            return None if v is None else float(v)
        try:
            return float(raw)
        except ValueError:
            return None


def correlate_features(table: Sequence[SessionFeatures], feature_x: str, feature_y: str,
                       mappings: Mapping[str, Mapping[str, float]] | None = None
                       ) -> CorrelationResult:
    """Pearson correlation across sessions; sessions lacking either feature are dropped."""
    xs, ys = [], []
    for row in table:
        vx, vy = row.value(feature_x, mappings), row.value(feature_y, mappings)
        if vx is None or vy is None:
            log.info("session %s lacks %s/%s, excluded", row.session_id, feature_x, feature_y)
            continue
        xs.append(vx)
        ys.append(vy)
    return correlate(xs, ys)


def load_feature_table(directory: str | Path, pattern: str = "*.jsonl") -> list[SessionFeatures]:
    paths = sorted(Path(directory).glob(pattern))
    return [SessionFeatures.from_session(Session.load(p)) for p in paths]


def build_report(table: Sequence[SessionFeatures], feature_x: str, feature_y: str,
                 mappings=None) -> dict:
    result = correlate_features(table, feature_x, feature_y, mappings)
    return {"x": feature_x, "y": feature_y, **asdict(result),
            "mappings": {k: dict(v) for k, v in (mappings or {}).items()},
            "features": [asdict(row) for row in table]}


def write_report(report: dict, out: str | Path) -> None:
    Path(out).write_text(json.dumps(report, indent=2) + "\n")
