"""Multi-speaker mixture simulation with statistically controlled structure.

A recording is built by chaining cropped speaker utterances, each joined to
the previous one by bounded overlap (probability ``overlap_prob``), a drawn
silence gap (``silence_prob``), or direct concatenation (any remaining
probability mass), then layering noise and music beds scheduled to a
coverage target, with every clip gain-adjusted to a loudness target sampled
per recording and per clip.

Concurrency bookkeeping: utterance onsets are non-decreasing, and on overlap
joints the overlap depth is capped by both the previous utterance's length
and the distance back to the latest earlier utterance end, which provably
bounds simultaneous speakers at two.  Same-speaker self-overlap is avoided
by re-drawing the speaker when the candidate interval intersects that
speaker's own earlier utterance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus
from .features import SAMPLE_RATE, Waveform, read_wav, write_wav
from .loudness import apply_gain_db, gain_to_target_db, measure_lufs  # noqa: F401  (re-exported op)
from .segments import Segment, SegmentList, merge_intervals, write_rttm


@dataclass
class LufsTargets:
    speech: float = -17.0
    music: float = -24.0
    fg_noise: float = -21.0
    bg_noise: float = -29.0


@dataclass
class SimConfig:
    n_speakers_mean: float = 8.0
    n_speakers_std: float = 2.5
    n_speakers_min: int = 2
    n_speakers_max: int = 18
    utt_len_mean: float = 0.0
    utt_len_std: float = 1.5
    utt_len_min_s: float = 0.25
    silence_prob: float = 0.8
    silence_mean: float = 0.25
    silence_std: float = 1.0
    silence_min_s: float = 0.25
    overlap_prob: float = 0.2
    overlap_min_s: float = 0.25
    overlap_max_s: float = 2.0
    recording_len_s: float = 300.0
    noise_coverage: float = 0.5
    noise_event_min_s: float = 2.0
    noise_event_max_s: float = 10.0
    fg_noise_prob: float = 0.5
    lufs: LufsTargets = field(default_factory=LufsTargets)
    recording_jitter_lu: float = 2.0
    clip_jitter_lu: float = 1.0
    fade_s: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_speakers_min > self.n_speakers_max:
            raise ValueError("n_speakers_min > n_speakers_max")
        if self.overlap_min_s > self.overlap_max_s:
            raise ValueError("overlap_min_s > overlap_max_s")
        if self.noise_event_min_s > self.noise_event_max_s:
            raise ValueError("noise_event_min_s > noise_event_max_s")
        for name in ("silence_prob", "overlap_prob", "fg_noise_prob", "noise_coverage"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} {v} outside [0, 1]")
        if self.recording_len_s <= 0:
            raise ValueError("recording_len_s must be positive")


def desk_config(seed: int = 0, recording_len_s: float = 10.0,
                n_speakers: int = 2) -> SimConfig:
    """Small fixed-speaker-count recordings for fast local experiments."""
    return SimConfig(n_speakers_mean=float(n_speakers), n_speakers_std=0.0,
                     n_speakers_min=n_speakers, n_speakers_max=n_speakers,
                     recording_len_s=recording_len_s, seed=seed)


@dataclass(frozen=True)
class MixEvent:
    kind: str              # "speech" | "noise" | "music"
    label: str             # speaker id for speech, "" for beds
    source: Path
    source_offset_s: float
    onset_s: float
    duration_s: float
    target_lufs: float
    lufs_class: str        # "speech" | "music" | "fg_noise" | "bg_noise"

    @property
    def offset_s(self) -> float:
        return self.onset_s + self.duration_s


@dataclass
class MixPlan:
    recording_len_s: float
    utterances: list[MixEvent]
    noise_events: list[MixEvent]
    music_events: list[MixEvent]
    class_lufs: dict[str, float]

    @property
    def events(self) -> list[MixEvent]:
        return self.utterances + self.noise_events + self.music_events


def draw_speaker_count(cfg: SimConfig, rng: np.random.Generator) -> int:
    raw = rng.normal(cfg.n_speakers_mean, cfg.n_speakers_std)
    return int(round(float(np.clip(raw, cfg.n_speakers_min, cfg.n_speakers_max))))


def speaker_count_analytic_mean(cfg: SimConfig) -> float:
    """Exact mean of round(clip(N(mean, std), min, max)) by integer binning."""
    from scipy.stats import norm
    if cfg.n_speakers_std == 0:
        return float(np.clip(round(cfg.n_speakers_mean), cfg.n_speakers_min,
                             cfg.n_speakers_max))
    z = lambda x: norm.cdf((x - cfg.n_speakers_mean) / cfg.n_speakers_std)
    lo, hi = cfg.n_speakers_min, cfg.n_speakers_max
    mean = lo * z(lo + 0.5) + hi * (1.0 - z(hi - 0.5))
    for k in range(lo + 1, hi):
        mean += k * (z(k + 0.5) - z(k - 0.5))
    return float(mean)


def _draw_length(rng, mean, std, floor):
    return max(floor, abs(float(rng.normal(mean, std))))


def _crop(rng, duration_s: float, want_s: float) -> tuple[float, float]:
    """(source offset, effective length) for a random window of want_s."""
    if duration_s <= want_s:
        return 0.0, duration_s
    return float(rng.uniform(0.0, duration_s - want_s)), want_s


def sample_plan(cfg: SimConfig, corpus: Corpus,
                rng: np.random.Generator) -> tuple[MixPlan, SegmentList]:
    if corpus.n_speakers < cfg.n_speakers_max:
        raise ValueError(
            f"corpus has {corpus.n_speakers} speakers; config needs at least "
            f"n_speakers_max={cfg.n_speakers_max}")
    n_spk = draw_speaker_count(cfg, rng)
    chosen = [str(s) for s in rng.choice(corpus.speaker_ids, size=n_spk,
                                         replace=False)]
    jit = cfg.recording_jitter_lu
    class_lufs = {
        "speech": cfg.lufs.speech + float(rng.uniform(-jit, jit)),
        "music": cfg.lufs.music + float(rng.uniform(-jit, jit)),
        "fg_noise": cfg.lufs.fg_noise + float(rng.uniform(-jit, jit)),
        "bg_noise": cfg.lufs.bg_noise + float(rng.uniform(-jit, jit)),
    }

    def speech_event(speaker, onset, length):
        clips = corpus.speakers[speaker]
        source = clips[int(rng.integers(len(clips)))]
        offset, eff_len = _crop(rng, corpus.duration_s(source), length)
        eff_len = min(eff_len, cfg.recording_len_s - onset)
        target = class_lufs["speech"] + float(
            rng.uniform(-cfg.clip_jitter_lu, cfg.clip_jitter_lu))
        return MixEvent("speech", speaker, source, offset, onset, eff_len,
                        target, "speech")

    utterances: list[MixEvent] = []
    max_end_before_prev = 0.0     # latest end among events before prev

    while True:
        speaker = chosen[int(rng.integers(len(chosen)))]
        length = _draw_length(rng, cfg.utt_len_mean, cfg.utt_len_std,
                              cfg.utt_len_min_s)
        if not utterances:
            onset = 0.0
        else:
            prev = utterances[-1]
            joint = rng.random()
            if joint < cfg.overlap_prob:
                depth_cap = min(cfg.overlap_max_s, prev.duration_s,
                                prev.offset_s - max_end_before_prev)
                if depth_cap >= cfg.overlap_min_s:
                    depth = float(rng.uniform(cfg.overlap_min_s, depth_cap))
                    onset = prev.offset_s - depth
                    if speaker == prev.label:
                        others = [s for s in chosen if s != prev.label]
                        if others:
                            speaker = others[int(rng.integers(len(others)))]
                        else:
                            onset = prev.offset_s + _draw_length(
                                rng, cfg.silence_mean, cfg.silence_std,
                                cfg.silence_min_s)
                else:
                    # a deeper overlap would reach a third concurrent
                    # speaker; degrade this joint to silence
                    onset = prev.offset_s + _draw_length(
                        rng, cfg.silence_mean, cfg.silence_std, cfg.silence_min_s)
            elif joint < cfg.overlap_prob + cfg.silence_prob:
                onset = prev.offset_s + _draw_length(
                    rng, cfg.silence_mean, cfg.silence_std, cfg.silence_min_s)
            else:
                onset = prev.offset_s    # butt joint: concatenate directly
            # an earlier long utterance may still be running; never let the
            # same speaker overlap themselves
            blocker = next((u for u in utterances
                            if u.label == speaker and u.offset_s > onset), None)
            if blocker is not None and onset < blocker.offset_s:
                others = [s for s in chosen if s != speaker]
                if others:
                    speaker = others[int(rng.integers(len(others)))]
                else:
                    onset = blocker.offset_s + cfg.silence_min_s
        if onset >= cfg.recording_len_s:
            break
        utterances.append(speech_event(speaker, onset, length))
        if len(utterances) >= 2:
            max_end_before_prev = max(max_end_before_prev,
                                      utterances[-2].offset_s)

    noise_events = _schedule_beds(cfg, rng, corpus, corpus.noise,
                                  is_music=False, class_lufs=class_lufs)
    music_events = _schedule_beds(cfg, rng, corpus, corpus.music,
                                  is_music=True, class_lufs=class_lufs)
    plan = MixPlan(cfg.recording_len_s, utterances, noise_events,
                   music_events, class_lufs)
    segs = SegmentList([Segment(u.label, u.onset_s, u.offset_s)
                        for u in utterances])
    return plan, segs


def _schedule_beds(cfg: SimConfig, rng: np.random.Generator, corpus: Corpus,
                   sources: list[Path], is_music: bool,
                   class_lufs: dict[str, float]) -> list[MixEvent]:
    """Mutually non-overlapping events of 2–10 s until the coverage target;
    the final event is shortened so coverage never overshoots the target."""
    if not sources or cfg.noise_coverage == 0.0:
        return []
    target = cfg.noise_coverage * cfg.recording_len_s
    events: list[MixEvent] = []
    total, attempts = 0.0, 0
    while total < target - 0.5 and attempts < 1000:
        attempts += 1
        length = float(rng.uniform(cfg.noise_event_min_s, cfg.noise_event_max_s))
        length = min(length, cfg.recording_len_s, target - total)
        if length < 0.5:
            break
        onset = float(rng.uniform(0.0, cfg.recording_len_s - length))
        if any(onset < e.offset_s and e.onset_s < onset + length for e in events):
            continue
        if is_music:
            lufs_class = "music"
        else:
            lufs_class = ("fg_noise" if rng.random() < cfg.fg_noise_prob
                          else "bg_noise")
        source = sources[int(rng.integers(len(sources)))]
        offset, eff_len = _crop(rng, corpus.duration_s(source), length)
        target_lufs = class_lufs[lufs_class] + float(
            rng.uniform(-cfg.clip_jitter_lu, cfg.clip_jitter_lu))
        events.append(MixEvent("music" if is_music else "noise", "", source,
                               offset, onset, eff_len, target_lufs, lufs_class))
        total += eff_len
    return events


def plan_noise_coverage(plan: MixPlan) -> float:
    intervals = [(e.onset_s, e.offset_s) for e in plan.noise_events]
    covered = sum(b - a for a, b in merge_intervals(intervals))
    return covered / plan.recording_len_s


def plan_joint_counts(plan: MixPlan) -> tuple[int, int]:
    """(number of overlapped consecutive-utterance joints, total joints).

    A joint is an overlap exactly when the later utterance starts strictly
    inside the earlier one; joints degraded to silence to keep concurrency
    at two count as silence."""
    overlaps = 0
    utts = plan.utterances
    for prev, nxt in zip(utts, utts[1:]):
        if nxt.onset_s < prev.offset_s:
            overlaps += 1
    return overlaps, max(len(utts) - 1, 0)


# ---- rendering ----------------------------------------------------------


def render_event_clip(event: MixEvent, cfg: SimConfig,
                      cache: dict[Path, Waveform] | None = None) -> np.ndarray:
    """The event's samples: cropped, linearly faded, and gain-adjusted so the
    faded clip in isolation measures its target LUFS (unmeasurable clips are
    mixed at unity gain)."""
    cache = cache if cache is not None else {}
    if event.source not in cache:
        cache[event.source] = read_wav(event.source)
    w = cache[event.source]
    i0 = int(round(event.source_offset_s * SAMPLE_RATE))
    n = int(round(event.duration_s * SAMPLE_RATE))
    clip = w.samples[i0:i0 + n].astype(np.float64).copy()
    fade = min(int(round(cfg.fade_s * SAMPLE_RATE)), clip.size // 2)
    if fade > 0:
        ramp = np.linspace(0.0, 1.0, fade, endpoint=False)
        clip[:fade] *= ramp
        clip[-fade:] *= ramp[::-1]
    if clip.size >= int(0.4 * SAMPLE_RATE):
        gain = gain_to_target_db(clip, event.target_lufs)
    else:
        base = measure_lufs(w.samples) if w.samples.size >= 0.4 * SAMPLE_RATE else None
        gain = None if base is None else event.target_lufs - base
    if gain is not None:
        clip = apply_gain_db(clip, gain)
    return clip


def render(plan: MixPlan, cfg: SimConfig) -> tuple[Waveform, SegmentList]:
    n_total = int(round(plan.recording_len_s * SAMPLE_RATE))
    buf = np.zeros(n_total)
    cache: dict[Path, Waveform] = {}
    for event in plan.events:
        clip = render_event_clip(event, cfg, cache)
        i0 = int(round(event.onset_s * SAMPLE_RATE))
        i1 = min(i0 + clip.size, n_total)
        buf[i0:i1] += clip[:i1 - i0]
    if np.max(np.abs(buf), initial=0.0) > 1.0:
        # soft limiter: tanh saturates into [-1, 1] while leaving quiet
        # passages essentially linear
        buf = np.tanh(buf)
    segs = SegmentList([Segment(u.label, u.onset_s, u.offset_s)
                        for u in plan.utterances])
    return Waveform(buf), segs


def emit_dataset(cfg: SimConfig, corpus: Corpus, n_recordings: int,
                 out_dir, prefix: str = "rec") -> list[dict]:
    """Write WAV + RTTM + speaker map per recording plus a JSON manifest;
    byte-deterministic for a given config seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for idx in range(n_recordings):
        rng = np.random.default_rng([cfg.seed, idx])
        plan, segs = sample_plan(cfg, corpus, rng)
        wav, _ = render(plan, cfg)
        rec_id = f"{prefix}{idx:04d}"
        write_wav(out / f"{rec_id}.wav", wav)
        write_rttm(out / f"{rec_id}.rttm", segs, rec_id)
        speaker_map = {spk: corpus.speaker_index(spk) for spk in segs.speakers()}
        (out / f"{rec_id}.speakers.json").write_text(
            json.dumps(speaker_map, sort_keys=True) + "\n")
        manifest.append({"id": rec_id, "wav": f"{rec_id}.wav",
                         "rttm": f"{rec_id}.rttm", "speakers": speaker_map})
    (out / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
