import numpy as np
import pytest

from agekin.audio_io import AudioClip


@pytest.fixture
def tone_440():
    t = np.arange(16000) / 16000
    return AudioClip(0.5 * np.sin(2 * np.pi * 440 * t), 16000, clip_id="tone440")


@pytest.fixture
def small_corpus(tmp_path):
    from agekin.corpus import synthesize_family_corpus
    return synthesize_family_corpus(4, 2, seed=7, out_dir=tmp_path / "corpus",
                                    clip_duration_s=1.0)
