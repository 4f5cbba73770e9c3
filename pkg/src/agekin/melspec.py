"""Mel-spectrogram extraction, domain normalization, and training crops.

Conventions are fixed project-wide: Slaney mel scale with area-normalized
triangular filters, Hann-windowed center-padded STFT, natural-log mel power
with a 1e-5 floor.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .audio_io import AudioClip

LOG_FLOOR = 1e-5
STD_FLOOR = 1e-8

_MEL_BREAK_HZ = 1000.0
_MEL_SLOPE = 200.0 / 3.0  # mels per Hz below the break
_MEL_LOGSTEP = np.log(6.4) / 27.0


class MelError(Exception):
    pass


@dataclass(frozen=True)
class MelConfig:
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 256
    n_mels: int = 80
    f_min_hz: float = 0.0
    f_max_hz: float = 8000.0

    def __post_init__(self):
        if not (self.hop_length <= self.win_length <= self.n_fft):
            raise MelError("need hop_length <= win_length <= n_fft")
        if self.n_mels < 1:
            raise MelError("n_mels must be >= 1")

    def validate_rate(self, sample_rate: int) -> None:
        if self.f_max_hz > sample_rate / 2:
            raise MelError(f"f_max {self.f_max_hz} exceeds Nyquist {sample_rate / 2}")

    def content_hash(self) -> str:
        blob = json.dumps(self.__dict__, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # n_mels x T
    config: MelConfig
    normalized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # length n_mels
    std: np.ndarray   # length n_mels, strictly positive

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float64))
        if np.any(self.std <= 0):
            raise MelError("std must be strictly positive")


def hz_to_mel(f_hz):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f_hz, dtype=np.float64)
    mel = f / _MEL_SLOPE
    above = f >= _MEL_BREAK_HZ
    mel = np.where(above,
                   _MEL_BREAK_HZ / _MEL_SLOPE + np.log(np.maximum(f, _MEL_BREAK_HZ) / _MEL_BREAK_HZ) / _MEL_LOGSTEP,
                   mel)
    return mel if mel.ndim else float(mel)


def mel_to_hz(mel):
    m = np.asarray(mel, dtype=np.float64)
    break_mel = _MEL_BREAK_HZ / _MEL_SLOPE
    f = m * _MEL_SLOPE
    above = m >= break_mel
    f = np.where(above, _MEL_BREAK_HZ * np.exp(_MEL_LOGSTEP * (m - break_mel)), f)
    return f if f.ndim else float(f)


def mel_filterbank(config: MelConfig, sample_rate: int) -> np.ndarray:
    """Triangular Slaney filters, each area-normalized to 2/(f_upper - f_lower).

    Returns an (n_mels, n_fft//2 + 1) matrix.
    """
    config.validate_rate(sample_rate)
    n_bins = config.n_fft // 2 + 1
    fft_freqs = np.linspace(0, sample_rate / 2, n_bins)
    mel_pts = np.linspace(hz_to_mel(config.f_min_hz), hz_to_mel(config.f_max_hz),
                          config.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)

    fb = np.zeros((config.n_mels, n_bins))
    for i in range(config.n_mels):
        lo, ctr, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        rising = (fft_freqs - lo) / max(ctr - lo, 1e-12)
        falling = (hi - fft_freqs) / max(hi - ctr, 1e-12)
        fb[i] = np.maximum(0.0, np.minimum(rising, falling))
        fb[i] *= 2.0 / (hi - lo)
    return fb


def stft_frames(samples: np.ndarray, config: MelConfig) -> np.ndarray:
    """Center-padded (reflect) Hann STFT; returns complex (n_fft//2+1, T)
    with T = floor(len/hop) + 1."""
    pad = config.n_fft // 2
    x = np.pad(np.asarray(samples, dtype=np.float64), pad, mode="reflect")
    window = np.hanning(config.win_length + 1)[:-1]  # periodic Hann
    if config.win_length < config.n_fft:
        lpad = (config.n_fft - config.win_length) // 2
        window = np.pad(window, (lpad, config.n_fft - config.win_length - lpad))
    n_frames = (len(samples)) // config.hop_length + 1
    idx = np.arange(config.n_fft)[None, :] + config.hop_length * np.arange(n_frames)[:, None]
    frames = x[idx] * window
    return np.fft.rfft(frames, n=config.n_fft, axis=1).T


def compute_mel(clip: AudioClip, config: MelConfig = MelConfig()) -> MelSpectrogram:
    """Log-mel power spectrogram of a standardized clip."""
    config.validate_rate(clip.sample_rate_hz)
    if len(clip.samples) < config.hop_length:
        raise MelError("clip shorter than one hop")
    spec = np.abs(stft_frames(clip.samples, config)) ** 2
    fb = mel_filterbank(config, clip.sample_rate_hz)
    mel_power = fb @ spec
    return MelSpectrogram(np.log(np.maximum(mel_power, LOG_FLOOR)), config)


def fit_norm_stats(mels) -> NormStats:
    """Per-bin mean/std over all frames of all spectrograms (population std)."""
    mels = list(mels)
    if not mels:
        raise MelError("empty collection")
    cfg = mels[0].config
    for m in mels:
        if m.normalized:
            raise MelError("fit_norm_stats expects unnormalized spectrograms")
        if m.config != cfg:
            raise MelError("mixed mel configs")
    stacked = np.concatenate([m.values for m in mels], axis=1)
    mean = stacked.mean(axis=1)
    std = np.maximum(stacked.std(axis=1), STD_FLOOR)
    return NormStats(mean, std)


def normalize(mel: MelSpectrogram, stats: NormStats) -> MelSpectrogram:
    if mel.normalized:
        raise MelError("spectrogram already normalized")
    if len(stats.mean) != mel.values.shape[0]:
        raise MelError("n_mels mismatch")
    vals = (mel.values - stats.mean[:, None]) / stats.std[:, None]
    return MelSpectrogram(vals, mel.config, normalized=True)


def denormalize(mel: MelSpectrogram, stats: NormStats) -> MelSpectrogram:
    if not mel.normalized:
        raise MelError("spectrogram is not normalized")
    if len(stats.mean) != mel.values.shape[0]:
        raise MelError("n_mels mismatch")
    vals = mel.values * stats.std[:, None] + stats.mean[:, None]
    return MelSpectrogram(vals, mel.config, normalized=False)


def crop_frames(mel: MelSpectrogram, n_frames: int = 64,
                rng: np.random.Generator | None = None) -> MelSpectrogram:
    """Contiguous random crop; short inputs are right-padded with the per-bin
    minimum first."""
    rng = rng or np.random.default_rng()
    vals = mel.values
    t = vals.shape[1]
    if t < n_frames:
        fill = vals.min(axis=1, keepdims=True)
        vals = np.concatenate([vals, np.tile(fill, (1, n_frames - t))], axis=1)
        t = n_frames
    offset = int(rng.integers(0, t - n_frames + 1))
    return replace(mel, values=vals[:, offset:offset + n_frames])


# --- persistence -----------------------------------------------------------

def save_norm_stats(stats: NormStats, config: MelConfig, path: str | Path) -> None:
    doc = {"mean": stats.mean.tolist(), "std": stats.std.tolist(),
           "config_hash": config.content_hash()}
    Path(path).write_text(json.dumps(doc))


def load_norm_stats(path: str | Path, config: MelConfig | None = None) -> NormStats:
    doc = json.loads(Path(path).read_text())
    if config is not None and doc.get("config_hash") != config.content_hash():
        raise MelError("norm stats were fitted under a different mel config")
    return NormStats(np.array(doc["mean"]), np.array(doc["std"]))


def write_mel_binary(mel_values: np.ndarray, path: str | Path) -> None:
    """Binary exchange format: 8-byte header (two little-endian uint32:
    n_mels, T) followed by row-major float32 values."""
    vals = np.ascontiguousarray(mel_values, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", vals.shape[0], vals.shape[1]))
        fh.write(vals.tobytes())


def read_mel_binary(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise MelError(f"truncated mel binary: {path}")
    n_mels, t = struct.unpack("<II", raw[:8])
    body = np.frombuffer(raw[8:], dtype="<f4")
    if body.size != n_mels * t:
        raise MelError(f"mel binary size mismatch in {path}")
    return body.reshape(n_mels, t).astype(np.float64)
