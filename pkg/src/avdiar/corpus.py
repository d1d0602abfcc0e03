"""Source-audio corpus: speaker clips plus noise and music beds.

Two layouts are accepted:

- a directory with ``<speaker-id>/*.wav`` per speaker, and the reserved
  subdirectories ``_noise/`` and ``_music/`` for non-speech sources;
- an explicit JSON index ``{"speakers": {id: [paths]}, "noise": [paths],
  "music": [paths]}`` with paths relative to the index file.

A bundled synthesizer fabricates a corpus of distinct "speakers" — each a
deterministic harmonic timbre (speaker-specific fundamental and spectral
envelope) with a syllable-rate amplitude modulation — plus colored-noise and
chord-loop clips, so the simulator and tests run without any external data.
"""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import SAMPLE_RATE, Waveform, read_wav, write_wav


@dataclass
class Corpus:
    speakers: dict[str, list[Path]]        # speaker id -> clip paths
    noise: list[Path] = field(default_factory=list)
    music: list[Path] = field(default_factory=list)
    _durations: dict[Path, float] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for spk, clips in self.speakers.items():
            if not clips:
                raise ValueError(f"speaker {spk!r} has no clips")

    @property
    def speaker_ids(self) -> list[str]:
        return sorted(self.speakers)

    def speaker_index(self, speaker_id: str) -> int:
        """1-based corpus identity, stable under sorting; 0 is reserved for
        the "not a speaker" class."""
        return self.speaker_ids.index(speaker_id) + 1

    @property
    def n_speakers(self) -> int:
        return len(self.speakers)

    def duration_s(self, path: Path) -> float:
        if path not in self._durations:
            self._durations[path] = _wav_duration_s(path)
        return self._durations[path]

    def subset(self, speaker_ids: list[str]) -> "Corpus":
        missing = sorted(set(speaker_ids) - set(self.speakers))
        if missing:
            raise KeyError(f"speakers not in corpus: {missing}")
        return Corpus({s: self.speakers[s] for s in speaker_ids},
                      noise=self.noise, music=self.music)

    @classmethod
    def from_dir(cls, root) -> "Corpus":
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"corpus directory {root} does not exist")
        speakers: dict[str, list[Path]] = {}
        noise: list[Path] = []
        music: list[Path] = []
        for sub in sorted(p for p in root.iterdir() if p.is_dir()):
            clips = sorted(sub.glob("*.wav"))
            if sub.name == "_noise":
                noise = clips
            elif sub.name == "_music":
                music = clips
            elif clips:
                speakers[sub.name] = clips
        if not speakers:
            raise ValueError(f"corpus directory {root} has no speaker clips")
        return cls(speakers, noise=noise, music=music)

    @classmethod
    def from_index(cls, index_path) -> "Corpus":
        index_path = Path(index_path)
        spec = json.loads(index_path.read_text())
        base = index_path.parent
        return cls({spk: [base / p for p in clips]
                    for spk, clips in spec["speakers"].items()},
                   noise=[base / p for p in spec.get("noise", [])],
                   music=[base / p for p in spec.get("music", [])])


def _wav_duration_s(path: Path) -> float:
    try:
        with wave.open(str(path), "rb") as w:
            return w.getnframes() / w.getframerate()
    except wave.Error:
        return read_wav(path).duration_s


# ---- synthetic corpus ---------------------------------------------------


def _speech_like(rng: np.random.Generator, f0: float, envelope: np.ndarray,
                 seconds: float) -> np.ndarray:
    """Harmonic stack with a speaker-specific spectral envelope, light vibrato,
    syllable-rate amplitude modulation, and a whisper of breath noise."""
    n = int(seconds * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    vibrato = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(4.0, 7.0) * t)
    phase = np.cumsum(2 * np.pi * f0 * vibrato / SAMPLE_RATE)
    x = np.zeros(n)
    for k, amp in enumerate(envelope, start=1):
        if k * f0 > 0.45 * SAMPLE_RATE:
            break
        x += amp * np.sin(k * phase + rng.uniform(0, 2 * np.pi))
    syllable = 0.55 + 0.45 * np.sin(
        2 * np.pi * rng.uniform(2.5, 5.0) * t + rng.uniform(0, 2 * np.pi))
    x = x * syllable + 0.01 * rng.normal(size=n)
    return 0.5 * x / np.max(np.abs(x))


def _colored_noise(rng: np.random.Generator, seconds: float,
                   tilt: float) -> np.ndarray:
    """Noise with a 1/f^tilt spectral slope."""
    n = int(seconds * SAMPLE_RATE)
    spectrum = np.fft.rfft(rng.normal(size=n))
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    shaping = np.ones_like(freqs)
    shaping[1:] = freqs[1:] ** (-tilt / 2.0)
    x = np.fft.irfft(spectrum * shaping, n)
    return 0.5 * x / np.max(np.abs(x))


def _chord_loop(rng: np.random.Generator, seconds: float) -> np.ndarray:
    n = int(seconds * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    root = rng.uniform(110.0, 220.0)
    x = np.zeros(n)
    for ratio in (1.0, 1.25, 1.5, 2.0):
        x += rng.uniform(0.4, 1.0) * np.sin(2 * np.pi * root * ratio * t)
    beat = 0.6 + 0.4 * np.square(np.sin(2 * np.pi * rng.uniform(1.0, 2.0) * t))
    x *= beat
    return 0.5 * x / np.max(np.abs(x))


def generate_synthetic_corpus(out_dir, n_speakers: int = 20,
                              clips_per_speaker: int = 2,
                              clip_len_s: float = 6.0,
                              n_noise: int = 4, n_music: int = 4,
                              bed_len_s: float = 12.0,
                              seed: int = 0) -> Corpus:
    """Write a deterministic synthetic corpus and return its index."""
    out_dir = Path(out_dir)
    for idx in range(n_speakers):
        rng = np.random.default_rng([seed, 1, idx])
        spk_dir = out_dir / f"spk{idx:02d}"
        spk_dir.mkdir(parents=True, exist_ok=True)
        f0 = rng.uniform(85.0, 300.0)
        envelope = rng.uniform(0.05, 1.0, size=12) / np.arange(1, 13) ** 0.5
        for c in range(clips_per_speaker):
            write_wav(spk_dir / f"clip{c}.wav",
                      Waveform(_speech_like(rng, f0, envelope, clip_len_s)))
    noise_dir = out_dir / "_noise"
    noise_dir.mkdir(parents=True, exist_ok=True)
    for idx in range(n_noise):
        rng = np.random.default_rng([seed, 2, idx])
        write_wav(noise_dir / f"noise{idx}.wav",
                  Waveform(_colored_noise(rng, bed_len_s, tilt=rng.uniform(0.5, 2.0))))
    music_dir = out_dir / "_music"
    music_dir.mkdir(parents=True, exist_ok=True)
    for idx in range(n_music):
        rng = np.random.default_rng([seed, 3, idx])
        write_wav(music_dir / f"music{idx}.wav", Waveform(_chord_loop(rng, bed_len_s)))
    return Corpus.from_dir(out_dir)
