"""Light-reflex calibration: a bright phase then a dim phase establish the pupil range."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .estimator import EyePairer, FrameSample, filter_sample
from .protocol import PupilSample

SETTLE_S = 1.0
MIN_FRAMES = 20
MIN_RANGE_MM = 0.3
LOW_PERCENTILE = 5.0
HIGH_PERCENTILE = 95.0


class CalibrationError(RuntimeError):
    """``reason`` is ``insufficient_data`` or ``range_too_small``."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


@dataclass(frozen=True)
class CalibrationProfile:
    d_min: float
    d_max: float
    created_ts: int
    sample_counts: tuple[int, int]  # (bright, dim)

    def __post_init__(self):
        if self.d_max - self.d_min < MIN_RANGE_MM - 1e-12:
            raise CalibrationError("range_too_small", f"{self.d_min:.3f}..{self.d_max:.3f} mm")

    def to_dict(self) -> dict:
        return {"d_min": self.d_min, "d_max": self.d_max, "created_ts": self.created_ts,
                "sample_counts": {"bright": self.sample_counts[0], "dim": self.sample_counts[1]}}

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationProfile":
        counts = d["sample_counts"]
        return cls(float(d["d_min"]), float(d["d_max"]), int(d["created_ts"]),
                   (int(counts["bright"]), int(counts["dim"])))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CalibrationProfile":
        return cls.from_dict(json.loads(Path(path).read_text()))


def percentile(values: Sequence[float], q: float) -> float:
    """``q``-th percentile, linear interpolation between order statistics."""
    xs = sorted(values)
    if not xs:
        raise ValueError("percentile of empty sequence")
    pos = (len(xs) - 1) * q / 100.0
    lo = math.floor(pos)
    hi = min(lo + 1, len(xs) - 1)
    frac = pos - lo
    return xs[lo] + (xs[hi] - xs[lo]) * frac


def compute_profile(bright: Sequence[float], dim: Sequence[float],
                    created_ts: int = 0) -> CalibrationProfile:
    if not bright or not dim:
        raise CalibrationError("insufficient_data", "empty phase")
    d_min = percentile(bright, LOW_PERCENTILE)
    d_max = percentile(dim, HIGH_PERCENTILE)
    if d_max - d_min < MIN_RANGE_MM:
        raise CalibrationError("range_too_small",
                               f"d_min {d_min:.3f} mm, d_max {d_max:.3f} mm")
    return CalibrationProfile(d_min, d_max, created_ts, (len(bright), len(dim)))


class Calibrator:
    """Push-style collector for the two calibration phases.

    Phase timing follows device timestamps, starting at the first sample fed.
    ``feed`` returns True once the sample lies past the end of the dim phase;
    that sample is not consumed and belongs to whatever follows calibration.
    """

    def __init__(self, bright_duration: float = 5.0, dim_duration: float = 5.0,
                 settle: float = SETTLE_S):
        self.bright_us = round(bright_duration * 1e6)
        self.dim_us = round(dim_duration * 1e6)
        self.settle_us = round(settle * 1e6)
        self.start_ts: int | None = None
        self.pairer = EyePairer()
        self.prev: FrameSample | None = None
        self.bright: list[float] = []
        self.dim: list[float] = []
        self.done = False

    @property
    def end_ts(self) -> int:
        return self.start_ts + self.bright_us + self.dim_us

    def _collect(self, frames: Iterable[FrameSample]) -> None:
        for f in frames:
            if filter_sample(f, self.prev) is None:
                continue
            self.prev = f
            t = f.ts - self.start_ts
            if self.settle_us <= t < self.bright_us:
                self.bright.append(f.diameter)
            elif self.bright_us + self.settle_us <= t < self.bright_us + self.dim_us:
                self.dim.append(f.diameter)

    def feed(self, sample: PupilSample) -> bool:
        if self.done:
            return True
        if self.start_ts is None:
            self.start_ts = sample.ts
        if sample.ts >= self.end_ts:
            self._collect(self.pairer.flush())
            self.done = True
            return True
        self._collect(self.pairer.push(sample))
        return False

    def finish(self) -> tuple[list[float], list[float]]:
        if not self.done:
            self._collect(self.pairer.flush())
            self.done = True
        if len(self.bright) < MIN_FRAMES or len(self.dim) < MIN_FRAMES:
            raise CalibrationError(
                "insufficient_data",
                f"{len(self.bright)} bright / {len(self.dim)} dim valid frames, need {MIN_FRAMES}")
        return self.bright, self.dim

    def profile(self) -> CalibrationProfile:
        bright, dim = self.finish()
        return compute_profile(bright, dim, created_ts=self.end_ts)


def run_calibration(stream: Iterable[PupilSample], bright_duration: float = 5.0,
                    dim_duration: float = 5.0) -> tuple[list[float], list[float]]:
    """Collect (bright, dim) diameters from a sample stream, discarding 1 s settle per phase."""
    cal = Calibrator(bright_duration, dim_duration)
    for s in stream:
        if cal.feed(s):
            break
    return cal.finish()
