"""Waveform reconstruction from Mel-spectrograms.

Griffin-Lim with momentum is the built-in default; an external neural
vocoder can be plugged in via a subprocess adapter speaking the project's
mel binary format.
"""

from __future__ import annotations

import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.optimize

from .audio_io import AudioClip, load_and_standardize
from .melspec import (MelConfig, MelError, MelSpectrogram, mel_filterbank,
                      stft_frames, write_mel_binary)


class VocoderError(Exception):
    pass


@dataclass(frozen=True)
class VocoderConfig:
    n_iters: int = 60
    momentum: float = 0.99
    mel_config: MelConfig = MelConfig()
    use_nnls: bool = False  # per-frame NNLS instead of clamped pseudo-inverse

    def __post_init__(self):
        if self.n_iters < 1:
            raise VocoderError("n_iters must be >= 1")
        if not (0.0 <= self.momentum < 1.0):
            raise VocoderError("momentum must be in [0, 1)")


def mel_to_linear(mel: MelSpectrogram, sample_rate: int = 16000,
                  use_nnls: bool = False) -> np.ndarray:
    """Invert the mel filterbank back to a linear magnitude spectrogram."""
    if mel.normalized:
        raise MelError("mel must be denormalized before inversion")
    fb = mel_filterbank(mel.config, sample_rate)
    mel_power = np.exp(mel.values)
    if use_nnls:
        power = np.stack([scipy.optimize.nnls(fb, col)[0] for col in mel_power.T], axis=1)
    else:
        power = np.maximum(np.linalg.pinv(fb) @ mel_power, 0.0)
    return np.sqrt(power)


def _istft(spec: np.ndarray, config: MelConfig, length: int) -> np.ndarray:
    window = np.hanning(config.win_length + 1)[:-1]
    if config.win_length < config.n_fft:
        lpad = (config.n_fft - config.win_length) // 2
        window = np.pad(window, (lpad, config.n_fft - config.win_length - lpad))
    frames = np.fft.irfft(spec.T, n=config.n_fft, axis=1)
    pad = config.n_fft // 2
    out = np.zeros(length + 2 * pad)
    wsum = np.zeros_like(out)
    for i in range(frames.shape[0]):
        s = i * config.hop_length
        out[s:s + config.n_fft] += frames[i] * window
        wsum[s:s + config.n_fft] += window ** 2
    out = out / np.maximum(wsum, 1e-10)
    return out[pad:pad + length]


def spectral_convergence(magnitude: np.ndarray, estimate: np.ndarray) -> float:
    denom = np.linalg.norm(magnitude)
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(np.abs(estimate) - magnitude) / denom)


def griffin_lim(magnitude: np.ndarray, config: VocoderConfig = VocoderConfig(),
                seed: int = 0, return_history: bool = False):
    """Momentum Griffin-Lim phase reconstruction.

    Returns an AudioClip (and optionally the per-iteration spectral
    convergence history).
    """
    magnitude = np.asarray(magnitude, dtype=np.float64)
    if not np.all(np.isfinite(magnitude)) or np.any(magnitude < 0):
        raise VocoderError("magnitudes must be finite and non-negative")
    mc = config.mel_config
    t = magnitude.shape[1]
    length = (t - 1) * mc.hop_length

    rng = np.random.default_rng(seed)
    angles = np.exp(2j * np.pi * rng.random(magnitude.shape))
    rebuilt_prev = np.zeros_like(magnitude, dtype=np.complex128)
    history = []
    x = np.zeros(length)
    for _ in range(config.n_iters):
        full = magnitude * angles
        x = _istft(full, mc, length)
        rebuilt = stft_frames(x, mc)
        history.append(spectral_convergence(magnitude, rebuilt))
        accel = rebuilt + config.momentum * (rebuilt - rebuilt_prev)
        rebuilt_prev = rebuilt
        mag = np.abs(accel)
        angles = np.where(mag > 1e-16, accel / np.maximum(mag, 1e-16), 1.0)
    x = _istft(magnitude * angles, mc, length)
    peak = np.max(np.abs(x))
    if peak > 1.0:
        x = x / peak
    clip = AudioClip(x, 16000)
    if return_history:
        return clip, history
    return clip


def mel_to_audio(mel: MelSpectrogram, config: VocoderConfig = VocoderConfig(),
                 seed: int = 0) -> AudioClip:
    return griffin_lim(mel_to_linear(mel, use_nnls=config.use_nnls), config, seed)


def external_vocoder_adapter(mel: MelSpectrogram, command_template: str) -> AudioClip:
    """Run an external vocoder: `command_template` contains {in} and {out}
    placeholders; {in} receives the mel binary, {out} must be written as WAV."""
    if "{in}" not in command_template or "{out}" not in command_template:
        raise VocoderError("command template needs {in} and {out} placeholders")
    with tempfile.TemporaryDirectory() as tmp:
        mel_path = Path(tmp) / "mel.bin"
        wav_path = Path(tmp) / "out.wav"
        write_mel_binary(mel.values, mel_path)
        cmd = command_template.format(**{"in": str(mel_path), "out": str(wav_path)})
        try:
            proc = subprocess.run(cmd, shell=True, capture_output=True, text=True,
                                  timeout=600)
        except subprocess.TimeoutExpired as exc:
            raise VocoderError(f"external vocoder timed out: {cmd}") from exc
        if proc.returncode != 0:
            raise VocoderError(
                f"external vocoder failed (exit {proc.returncode}): {cmd}\n"
                f"stdout: {proc.stdout}\nstderr: {proc.stderr}")
        if not wav_path.exists():
            raise VocoderError(f"external vocoder produced no output: {cmd}")
        try:
            return load_and_standardize(wav_path)
        except Exception as exc:
            raise VocoderError(f"external vocoder wrote malformed WAV: {exc}") from exc
