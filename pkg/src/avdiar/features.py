"""16 kHz waveform to spliced, subsampled log-mel features.

40 log-mel bins over 25 ms frames with a 10 ms hop, each frame concatenated
with its 7 neighbours on both sides and the result subsampled by 10, giving
600-dim vectors every 100 ms at the full-scale settings.

Conventions the recipe leaves open, pinned here: HTK mel scale over 0-8 kHz,
periodic Hann window, energy floor 1e-10 before the log, edge-replication
padding for splicing (so silence stays silence at the boundaries).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000
FRAME_LEN = 400     # 25 ms
FRAME_HOP = 160     # 10 ms
N_FFT = 512
ENERGY_FLOOR = 1e-10


class AudioFormatError(ValueError):
    """Input audio does not match the required layout."""


@dataclass
class Waveform:
    """Mono 16 kHz samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError(f"sample rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise AudioFormatError(f"waveform must be mono 1-D, got shape {self.samples.shape}")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise AudioFormatError("waveform contains non-finite samples")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureSequence:
    """T x F feature matrix with its frame shift in seconds."""

    frames: np.ndarray
    frame_shift_s: float


def read_wav(path) -> Waveform:
    """Read a mono 16 kHz RIFF WAV (16-bit PCM or 32-bit float)."""
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise AudioFormatError(f"{path}: not a readable WAV file ({e})") from e
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: sample rate {rate}, need {SAMPLE_RATE}")
    if data.ndim != 1:
        raise AudioFormatError(f"{path}: {data.shape[1]} channels, need mono")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: dtype {data.dtype}, need int16 or float32")
    return Waveform(samples)


def write_wav(path, w: Waveform) -> None:
    """Write 16-bit PCM; values are clipped into [-1, 1] first."""
    clipped = np.clip(w.samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype(np.int16)
    wavfile.write(path, w.sample_rate, pcm)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = 40, n_fft: int = N_FFT,
                   fmin: float = 0.0, fmax: float = SAMPLE_RATE / 2) -> np.ndarray:
    """Triangular mel filters on the HTK scale, (n_mels, n_fft//2+1)."""
    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_freqs = np.arange(n_fft // 2 + 1) * SAMPLE_RATE / n_fft
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for i in range(n_mels):
        left, center, right = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (bin_freqs - left) / (center - left)
        down = (right - bin_freqs) / (right - center)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def frame_count(n_samples: int) -> int:
    """Frames produced by logmel for a given sample count (no padding)."""
    if n_samples < FRAME_LEN:
        return 0
    return (n_samples - FRAME_LEN) // FRAME_HOP + 1


def logmel(w: Waveform, n_mels: int = 40) -> FeatureSequence:
    """Log mel-filterbank energies, one row per 10 ms hop."""
    n = w.samples.size
    t = frame_count(n)
    if t == 0:
        raise AudioFormatError(f"waveform too short: {n} samples < one {FRAME_LEN}-sample frame")
    idx = np.arange(FRAME_LEN)[None, :] + FRAME_HOP * np.arange(t)[:, None]
    frames = w.samples[idx]
    window = np.hanning(FRAME_LEN + 1)[:-1]  # periodic Hann
    spec = np.abs(np.fft.rfft(frames * window, n=N_FFT, axis=1)) ** 2
    mel = spec @ mel_filterbank(n_mels).T
    return FeatureSequence(np.log(np.maximum(mel, ENERGY_FLOOR)), FRAME_HOP / SAMPLE_RATE)


def splice_subsample(f: FeatureSequence, context: int = 7, factor: int = 10) -> FeatureSequence:
    """Concatenate each frame with its +-context neighbours, keep every factor-th.

    Edges replicate the first/last frame.  Output width is
    input_width * (2*context + 1) and length ceil(T / factor).
    """
    if context < 0 or factor < 1:
        raise ValueError(f"need context >= 0 and factor >= 1, got {context}/{factor}")
    t, width = f.frames.shape
    padded = np.pad(f.frames, ((context, context), (0, 0)), mode="edge")
    spliced = np.concatenate(
        [padded[k:k + t] for k in range(2 * context + 1)], axis=1)
    out = spliced[::factor]
    assert out.shape == (-(-t // factor), width * (2 * context + 1))
    return FeatureSequence(out, f.frame_shift_s * factor)
