"""Waveform loading and standardization.

Everything downstream assumes mono float waveforms at 16 kHz with the DC
offset removed; this module is the only place that deals with files and
sample-rate conversion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

TARGET_SAMPLE_RATE = 16000


class AudioError(Exception):
    """Unreadable, corrupt, or empty audio input."""


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray  # 1-D float64, amplitudes in [-1, 1]
    sample_rate_hz: int
    speaker_id: str = ""
    clip_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=np.float64))

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


_PCM_SCALES = {
    np.dtype(np.int16): 2**15,
    np.dtype(np.int32): 2**31,  # also covers 24-bit, which scipy widens to int32
}


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype in _PCM_SCALES:
        return data.astype(np.float64) / _PCM_SCALES[data.dtype]
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    return data.astype(np.float64)


def standardize(samples: np.ndarray, sample_rate_hz: int, speaker_id: str = "",
                clip_id: str = "") -> AudioClip:
    """Downmix, resample to 16 kHz, remove DC, and clamp an in-memory signal."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise AudioError("empty audio input")
    if sample_rate_hz != TARGET_SAMPLE_RATE:
        g = math.gcd(TARGET_SAMPLE_RATE, sample_rate_hz)
        x = scipy.signal.resample_poly(x, TARGET_SAMPLE_RATE // g, sample_rate_hz // g)
    x = x - x.mean()
    x = np.clip(x, -1.0, 1.0)
    return AudioClip(x, TARGET_SAMPLE_RATE, speaker_id=speaker_id, clip_id=clip_id)


def load_and_standardize(path: str | Path, speaker_id: str = "",
                         clip_id: str = "") -> AudioClip:
    """Load a PCM WAV file and standardize it to the pipeline format."""
    try:
        rate, data = scipy.io.wavfile.read(str(path))
    except FileNotFoundError:
        raise
    except Exception as exc:  # scipy raises ValueError on malformed WAVs
        raise AudioError(f"cannot read WAV file {path}: {exc}") from exc
    if data.size == 0:
        raise AudioError(f"zero-length audio: {path}")
    return standardize(_to_float(data), rate, speaker_id=speaker_id, clip_id=clip_id)


def fix_duration(clip: AudioClip, target_s: float) -> AudioClip:
    """Center-crop or symmetrically zero-pad to an exact duration.

    Odd remainders go to the trailing side.
    """
    if target_s <= 0:
        raise ValueError("target duration must be positive")
    n_target = round(target_s * clip.sample_rate_hz)
    x = clip.samples
    n = len(x)
    if n == n_target:
        return clip
    if n > n_target:
        start = (n - n_target) // 2
        out = x[start:start + n_target]
    else:
        pad = n_target - n
        left = pad // 2
        out = np.pad(x, (left, pad - left))
    return replace(clip, samples=out)


def save_wav(clip: AudioClip, path: str | Path) -> None:
    """Write 16-bit PCM WAV at the clip's sample rate."""
    x = np.clip(clip.samples, -1.0, 1.0)
    pcm = np.round(x * (2**15 - 1)).astype(np.int16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    scipy.io.wavfile.write(str(path), clip.sample_rate_hz, pcm)
