"""Diarization scoring: binarization, collar-based DER, and JER.

DER follows the md-eval convention: a no-score collar is carved around every
reference segment boundary, the reference↔hypothesis speaker mapping is the
assignment maximizing scored overlap time, and missed speech / false alarm /
speaker error are accumulated overlap-aware over atomic intervals and
normalized by scored reference speech time.  JER is the per-reference-speaker
Jaccard distance between full (uncollared) time supports under the DER
mapping, averaged over reference speakers.
"""

from __future__ import annotations

from bisect import bisect_right
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.signal import medfilt

from .model import ActivityMatrix
from .segments import (SegmentList, frames_to_segments, merge_intervals,
                       parse_rttm, write_rttm)

__all__ = ["ScoreReport", "binarize", "der", "jer", "jer_breakdown",
           "score_recording", "aggregate_reports", "format_report_table",
           "proxy_speaker_labels", "parse_rttm", "write_rttm"]


@dataclass
class ScoreReport:
    """Error times plus the derived percentages.

    Absolute times are the ground truth here; percentages are views so that
    corpus aggregation (summing times across recordings) and the additive
    identity der == ms + fa + se stay exact by construction."""

    scored_speech_s: float
    ms_s: float
    fa_s: float
    se_s: float
    mapping: dict[str, str] = field(default_factory=dict)
    jer_per_speaker: dict[str, float] = field(default_factory=dict)
    recording_ids: list[str] = field(default_factory=list)

    @property
    def unscorable(self) -> bool:
        return self.scored_speech_s <= 0.0

    def _pct(self, t: float) -> float | None:
        return None if self.unscorable else 100.0 * t / self.scored_speech_s

    @property
    def ms(self) -> float | None:
        return self._pct(self.ms_s)

    @property
    def fa(self) -> float | None:
        return self._pct(self.fa_s)

    @property
    def se(self) -> float | None:
        return self._pct(self.se_s)

    @property
    def der(self) -> float | None:
        return self._pct(self.ms_s + self.fa_s + self.se_s)

    @property
    def jer(self) -> float | None:
        if not self.jer_per_speaker:
            return None
        return float(np.mean(list(self.jer_per_speaker.values())))

    def as_dict(self) -> dict:
        return {"recordings": self.recording_ids,
                "scored_speech_s": self.scored_speech_s,
                "ms": self.ms, "fa": self.fa, "se": self.se,
                "der": self.der, "jer": self.jer,
                "mapping": self.mapping}


# ---- interval helpers ----------------------------------------------------


def _speaker_intervals(segs: SegmentList) -> dict[str, list[tuple[float, float]]]:
    per: dict[str, list] = defaultdict(list)
    for s in segs:
        per[s.speaker].append((s.onset, s.offset))
    return {spk: merge_intervals(iv) for spk, iv in per.items()}


def _total(ivs) -> float:
    return sum(b - a for a, b in ivs)


def _intersect_len(a, b) -> float:
    out, i, j = 0.0, 0, 0
    while i < len(a) and j < len(b):
        lo = max(a[i][0], b[j][0])
        hi = min(a[i][1], b[j][1])
        if hi > lo:
            out += hi - lo
        if a[i][1] <= b[j][1]:
            i += 1
        else:
            j += 1
    return out


class _Lookup:
    """Point-in-merged-intervals membership by binary search."""

    def __init__(self, ivs):
        self.starts = [a for a, _ in ivs]
        self.ends = [b for _, b in ivs]

    def __call__(self, x: float) -> bool:
        k = bisect_right(self.starts, x) - 1
        return k >= 0 and x < self.ends[k]


# ---- DER -----------------------------------------------------------------


def der(ref: SegmentList, hyp: SegmentList, collar_s: float = 0.25) -> ScoreReport:
    """Collar-based DER with overlap-aware MS/FA/SE decomposition."""
    if collar_s < 0:
        raise ValueError("collar_s must be non-negative")
    ref_iv = _speaker_intervals(ref)
    hyp_iv = _speaker_intervals(hyp)
    zones = merge_intervals(
        [(s.onset - collar_s, s.onset + collar_s) for s in ref]
        + [(s.offset - collar_s, s.offset + collar_s) for s in ref]
    ) if collar_s > 0 else []

    points: set[float] = set()
    for ivs in list(ref_iv.values()) + list(hyp_iv.values()) + [zones]:
        for a, b in ivs:
            points.add(a)
            points.add(b)
    grid = sorted(points)

    ref_names = sorted(ref_iv)
    hyp_names = sorted(hyp_iv)
    in_zone = _Lookup(zones)
    ref_look = [_Lookup(ref_iv[n]) for n in ref_names]
    hyp_look = [_Lookup(hyp_iv[n]) for n in hyp_names]

    # scored atomic intervals, each homogeneous in active speakers and collar
    atoms: list[tuple[float, list[int], list[int]]] = []
    for a, b in zip(grid, grid[1:]):
        if b <= a:
            continue
        mid = 0.5 * (a + b)
        if in_zone(mid):
            continue
        r_act = [i for i, look in enumerate(ref_look) if look(mid)]
        h_act = [j for j, look in enumerate(hyp_look) if look(mid)]
        if r_act or h_act:
            atoms.append((b - a, r_act, h_act))

    overlap = np.zeros((len(ref_names), len(hyp_names)))
    for dt, r_act, h_act in atoms:
        for i in r_act:
            for j in h_act:
                overlap[i, j] += dt
    if overlap.size:
        rows, cols = linear_sum_assignment(-overlap)
    else:
        rows, cols = np.array([], dtype=int), np.array([], dtype=int)
    assigned = dict(zip(rows.tolist(), cols.tolist()))
    mapping = {ref_names[i]: hyp_names[j] for i, j in assigned.items()}

    ms_s = fa_s = se_s = speech_s = 0.0
    for dt, r_act, h_act in atoms:
        n_ref, n_hyp = len(r_act), len(h_act)
        h_set = set(h_act)
        n_correct = sum(1 for i in r_act if assigned.get(i) in h_set)
        ms_s += max(0, n_ref - n_hyp) * dt
        fa_s += max(0, n_hyp - n_ref) * dt
        se_s += (min(n_ref, n_hyp) - n_correct) * dt
        speech_s += n_ref * dt
    return ScoreReport(speech_s, ms_s, fa_s, se_s, mapping=mapping)


# ---- JER -----------------------------------------------------------------


def jer_breakdown(ref: SegmentList, hyp: SegmentList,
                  mapping: dict[str, str]) -> dict[str, float]:
    """Per-reference-speaker Jaccard error (0–100) on full time supports;
    a reference speaker with no mapped hypothesis speaker scores 100."""
    ref_iv = _speaker_intervals(ref)
    hyp_iv = _speaker_intervals(hyp)
    out = {}
    for spk in sorted(ref_iv):
        h = mapping.get(spk)
        if h is None or h not in hyp_iv:
            out[spk] = 100.0
            continue
        inter = _intersect_len(ref_iv[spk], hyp_iv[h])
        union = _total(ref_iv[spk]) + _total(hyp_iv[h]) - inter
        out[spk] = 100.0 * (1.0 - inter / union)
    return out


def jer(ref: SegmentList, hyp: SegmentList,
        mapping: dict[str, str]) -> float | None:
    values = jer_breakdown(ref, hyp, mapping)
    if not values:
        return None
    return float(np.mean(list(values.values())))


def score_recording(ref: SegmentList, hyp: SegmentList,
                    collar_s: float = 0.25, rec_id: str = "") -> ScoreReport:
    report = der(ref, hyp, collar_s)
    report.jer_per_speaker = jer_breakdown(ref, hyp, report.mapping)
    report.recording_ids = [rec_id] if rec_id else []
    return report


def aggregate_reports(reports: list[ScoreReport]) -> ScoreReport:
    """Corpus-level scores: error times summed across recordings, JER
    averaged over every reference speaker of every recording."""
    agg = ScoreReport(sum(r.scored_speech_s for r in reports),
                      sum(r.ms_s for r in reports),
                      sum(r.fa_s for r in reports),
                      sum(r.se_s for r in reports))
    for idx, r in enumerate(reports):
        rid = r.recording_ids[0] if r.recording_ids else str(idx)
        agg.recording_ids.extend(r.recording_ids or [rid])
        for spk, v in r.jer_per_speaker.items():
            agg.jer_per_speaker[f"{rid}:{spk}"] = v
    return agg


def format_report_table(rows: list[tuple[str, ScoreReport]]) -> str:
    def fmt(v):
        return "--" if v is None else f"{v:.2f}"

    header = ["recording", "MS", "FA", "SE", "DER", "JER"]
    body = [[name, fmt(r.ms), fmt(r.fa), fmt(r.se), fmt(r.der), fmt(r.jer)]
            for name, r in rows]
    widths = [max(len(row[c]) for row in [header] + body)
              for c in range(len(header))]
    lines = []
    for row in [header] + body:
        lines.append("  ".join(cell.ljust(w) if c == 0 else cell.rjust(w)
                               for c, (cell, w) in enumerate(zip(row, widths))))
    return "\n".join(lines) + "\n"


# ---- binarization --------------------------------------------------------


def binarize(y: ActivityMatrix, threshold: float = 0.5,
             median_frames: int = 11,
             speakers: list[str] | None = None) -> SegmentList:
    """Per-stream threshold + odd-length median smoothing, then active runs
    become segments at frame boundaries."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie strictly inside (0, 1)")
    if median_frames < 1 or median_frames % 2 == 0:
        raise ValueError("median_frames must be a positive odd integer")
    probs = y.y_hat
    if speakers is None:
        speakers = [f"s{j}" for j in range(probs.shape[1])]
    active = (probs >= threshold).astype(float)
    if median_frames > 1 and active.shape[0] and active.shape[1]:
        active = medfilt(active, kernel_size=[median_frames, 1])
    return frames_to_segments(active > 0.5, y.frame_shift_s, speakers)


# ---- proxy speaker labels ------------------------------------------------


def proxy_speaker_labels(target_embs: dict[str, np.ndarray],
                         corpus_embs: dict[str, np.ndarray]) -> dict[str, str]:
    """Map each target speaker to the L2-nearest corpus speaker (ties to the
    lexicographically smallest corpus id)."""
    if not corpus_embs:
        raise ValueError("corpus embeddings are empty")
    corpus = sorted(corpus_embs.items())
    dims = {v.shape for _, v in corpus} | {v.shape for v in target_embs.values()}
    if len(dims) > 1:
        raise ValueError(f"embedding shapes disagree: {sorted(dims)}")
    out = {}
    for tgt, emb in sorted(target_embs.items()):
        best_id = min(corpus,
                      key=lambda kv: (float(np.linalg.norm(kv[1] - emb)), kv[0]))[0]
        out[tgt] = best_id
    return out
