import numpy as np
import pytest
import scipy.io.wavfile

from agekin.audio_io import (AudioClip, AudioError, fix_duration,
                             load_and_standardize, save_wav, standardize)


def write_wav(path, rate, data):
    scipy.io.wavfile.write(str(path), rate, data)


def test_constant_signal_loses_dc(tmp_path):
    data = np.full(16000, 0.5, dtype=np.float32)
    write_wav(tmp_path / "c.wav", 16000, data)
    clip = load_and_standardize(tmp_path / "c.wav")
    assert np.allclose(clip.samples, 0.0, atol=1e-6)


def test_stereo_opposite_channels_cancel(tmp_path):
    x = np.random.default_rng(0).normal(0, 0.1, 16000).astype(np.float32)
    write_wav(tmp_path / "s.wav", 16000, np.stack([x, -x], axis=1))
    clip = load_and_standardize(tmp_path / "s.wav")
    assert np.allclose(clip.samples, 0.0, atol=1e-6)


def test_resample_32k_sine_keeps_pitch(tmp_path):
    t = np.arange(32000) / 32000
    write_wav(tmp_path / "r.wav", 32000,
              (0.5 * np.sin(2 * np.pi * 440 * t)).astype(np.float32))
    clip = load_and_standardize(tmp_path / "r.wav")
    assert len(clip.samples) == 16000
    spec = np.abs(np.fft.rfft(clip.samples))
    peak_hz = np.argmax(spec) * 16000 / len(clip.samples)
    assert abs(peak_hz - 440) <= 1.0  # 1 s clip: 1 Hz per DFT bin


def test_int16_pcm_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    x = rng.uniform(-0.5, 0.5, 8000)
    clip = AudioClip(x - x.mean(), 16000)
    save_wav(clip, tmp_path / "w.wav")
    back = load_and_standardize(tmp_path / "w.wav")
    assert np.max(np.abs(back.samples - clip.samples)) < 2e-4  # 16-bit quantization


def test_unreadable_file_raises(tmp_path):
    (tmp_path / "bad.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(AudioError):
        load_and_standardize(tmp_path / "bad.wav")


def test_empty_audio_raises():
    with pytest.raises(AudioError):
        standardize(np.array([]), 16000)


def test_idempotent_standardization(tmp_path):
    rng = np.random.default_rng(2)
    clip = standardize(rng.normal(0, 0.1, 16000), 16000)
    again = standardize(clip.samples, clip.sample_rate_hz)
    assert np.max(np.abs(again.samples - clip.samples)) < 1e-6


class TestFixDuration:
    def test_center_crop(self):
        clip = AudioClip(np.arange(80000, dtype=float) / 80000 - 0.5, 16000)
        out = fix_duration(clip, 3.0)
        assert len(out.samples) == 48000
        np.testing.assert_array_equal(out.samples, clip.samples[16000:64000])

    def test_symmetric_pad(self):
        clip = AudioClip(np.ones(16000) * 0.1, 16000)
        out = fix_duration(clip, 3.0)
        assert len(out.samples) == 48000
        assert np.all(out.samples[:16000] == 0)
        assert np.all(out.samples[32000:] == 0)
        assert np.all(out.samples[16000:32000] == 0.1)

    def test_identity(self):
        clip = AudioClip(np.random.default_rng(3).normal(size=48000), 16000)
        out = fix_duration(clip, 3.0)
        np.testing.assert_array_equal(out.samples, clip.samples)

    def test_idempotent(self):
        clip = AudioClip(np.random.default_rng(4).normal(size=10001), 16000)
        once = fix_duration(clip, 0.7)
        twice = fix_duration(once, 0.7)
        np.testing.assert_array_equal(once.samples, twice.samples)

    def test_odd_remainder_trails(self):
        clip = AudioClip(np.ones(3), 16000)
        out = fix_duration(clip, 6 / 16000)
        np.testing.assert_array_equal(out.samples, [0, 1, 1, 1, 0, 0])
