"""Timestamped labeled speech segments and their serializations.

The RTTM line layout is
``SPEAKER <rec-id> 1 <onset> <duration> <NA> <NA> <speaker> <NA> <NA>``
with onset and duration at millisecond precision.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


class RttmError(ValueError):
    """Malformed RTTM content."""


@dataclass(frozen=True)
class Segment:
    speaker: str
    onset: float
    offset: float

    def __post_init__(self):
        if not self.speaker:
            raise ValueError("segment speaker label must be non-empty")
        if not self.offset > self.onset:
            raise ValueError(f"segment offset must exceed onset: [{self.onset}, {self.offset})")

    @property
    def duration(self) -> float:
        return self.offset - self.onset


@dataclass
class SegmentList:
    """Segments sorted by onset; the common ground-truth/hypothesis currency."""

    segments: list[Segment] = field(default_factory=list)

    def __post_init__(self):
        self.segments = sorted(self.segments, key=lambda s: (s.onset, s.offset, s.speaker))

    def __len__(self):
        return len(self.segments)

    def __iter__(self):
        return iter(self.segments)

    def speakers(self) -> list[str]:
        return sorted({s.speaker for s in self.segments})

    def extent(self) -> float:
        return max((s.offset for s in self.segments), default=0.0)

    def total_speech_time(self) -> float:
        """Union length of each speaker's segments, summed over speakers."""
        total = 0.0
        for spk in self.speakers():
            total += sum(b - a for a, b in merge_intervals(
                [(s.onset, s.offset) for s in self.segments if s.speaker == spk]))
        return total


def merge_intervals(intervals: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """Union of possibly-overlapping [a, b) intervals."""
    merged: list[list[float]] = []
    for a, b in sorted(intervals):
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return [(a, b) for a, b in merged]


def segments_to_frames(segs: SegmentList, frame_shift_s: float, n_frames: int,
                       speaker_order: list[str] | None = None) -> tuple[np.ndarray, list[str]]:
    """Rasterize to a (T, S) binary matrix; a frame is active when its
    midpoint falls inside one of the speaker's segments."""
    speakers = speaker_order if speaker_order is not None else segs.speakers()
    col = {s: i for i, s in enumerate(speakers)}
    y = np.zeros((n_frames, len(speakers)))
    mid = (np.arange(n_frames) + 0.5) * frame_shift_s
    for seg in segs:
        if seg.speaker not in col:
            continue
        lo = np.searchsorted(mid, seg.onset, side="left")
        hi = np.searchsorted(mid, seg.offset, side="left")
        y[lo:hi, col[seg.speaker]] = 1.0
    return y, speakers


def frames_to_segments(active: np.ndarray, frame_shift_s: float,
                       speakers: list[str]) -> SegmentList:
    """Turn a (T, S) binary matrix back into segments at frame boundaries."""
    segs = []
    t = active.shape[0]
    for s, name in enumerate(speakers):
        on = None
        for i in range(t):
            if active[i, s] and on is None:
                on = i
            elif not active[i, s] and on is not None:
                segs.append(Segment(name, on * frame_shift_s, i * frame_shift_s))
                on = None
        if on is not None:
            segs.append(Segment(name, on * frame_shift_s, t * frame_shift_s))
    return SegmentList(segs)


def write_rttm(path, segs: SegmentList, rec_id: str) -> None:
    with open(path, "w") as f:
        f.write(format_rttm(segs, rec_id))


def format_rttm(segs: SegmentList, rec_id: str) -> str:
    lines = []
    for s in segs:
        lines.append(
            f"SPEAKER {rec_id} 1 {s.onset:.3f} {s.duration:.3f} "
            f"<NA> <NA> {s.speaker} <NA> <NA>\n")
    return "".join(lines)


def parse_rttm(path) -> dict[str, SegmentList]:
    """Parse an RTTM file into per-recording SegmentLists.

    Unknown line types are skipped with a warning; malformed fields raise
    with the offending line number.
    """
    by_rec: dict[str, list[Segment]] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] != "SPEAKER":
                warnings.warn(f"{path}:{lineno}: skipping {parts[0]!r} line")
                continue
            if len(parts) < 8:
                raise RttmError(f"{path}:{lineno}: expected >= 8 fields, got {len(parts)}")
            rec_id, onset_s, dur_s, speaker = parts[1], parts[3], parts[4], parts[7]
            try:
                onset, dur = float(onset_s), float(dur_s)
            except ValueError:
                raise RttmError(
                    f"{path}:{lineno}: bad onset/duration {onset_s!r}/{dur_s!r}") from None
            if dur <= 0:
                raise RttmError(f"{path}:{lineno}: non-positive duration {dur}")
            by_rec.setdefault(rec_id, []).append(Segment(speaker, onset, onset + dur))
    return {rec: SegmentList(segs) for rec, segs in by_rec.items()}
