"""Fixed-length speaker embeddings.

The self-contained baseline pools VAD-masked MFCC(+delta) frames into
per-coefficient mean/std statistics. i-vector / x-vector / Wav2Vec features
come from external tooling through a file adapter.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft

from .audio_io import AudioClip
from .melspec import MelConfig, mel_filterbank

MFCC_WIN = 400   # 25 ms at 16 kHz
MFCC_HOP = 160   # 10 ms
MFCC_N_FILTERS = 40
MFCC_N_CEPS = 30

EMBEDDING_DIMS = {"baseline_stats": 120, "ivector": 400, "xvector": 512,
                  "wav2vec": 1024}


class EmbeddingError(Exception):
    pass


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    kind: str
    clip_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=np.float64))
        if self.kind not in EMBEDDING_DIMS:
            raise EmbeddingError(f"unknown embedding kind {self.kind!r}")
        if len(self.vector) != EMBEDDING_DIMS[self.kind]:
            raise EmbeddingError(
                f"{self.kind} embedding must have dim {EMBEDDING_DIMS[self.kind]}, "
                f"got {len(self.vector)}")
        if not np.all(np.isfinite(self.vector)):
            raise EmbeddingError("non-finite embedding values")

    @property
    def dim(self) -> int:
        return len(self.vector)


def _frame(samples: np.ndarray) -> np.ndarray:
    n = len(samples)
    if n < MFCC_WIN:
        raise EmbeddingError("clip shorter than one MFCC window")
    n_frames = (n - MFCC_WIN) // MFCC_HOP + 1
    idx = np.arange(MFCC_WIN)[None, :] + MFCC_HOP * np.arange(n_frames)[:, None]
    return samples[idx]


def _frame_energies(clip: AudioClip) -> np.ndarray:
    frames = _frame(clip.samples)
    return np.maximum((frames ** 2).sum(axis=1), 1e-12)


def mfcc(clip: AudioClip) -> np.ndarray:
    """30 cepstral coefficients per 25 ms/10 ms frame (no centering)."""
    frames = _frame(clip.samples) * np.hanning(MFCC_WIN + 1)[:-1]
    spec = np.abs(np.fft.rfft(frames, n=512, axis=1)) ** 2
    fb = mel_filterbank(
        MelConfig(n_fft=512, win_length=512, hop_length=MFCC_HOP,
                  n_mels=MFCC_N_FILTERS, f_min_hz=0.0, f_max_hz=8000.0),
        clip.sample_rate_hz)
    log_energies = np.log(np.maximum(spec @ fb.T, 1e-10))
    ceps = scipy.fft.dct(log_energies, type=2, norm="ortho", axis=1)
    return ceps[:, :MFCC_N_CEPS].T


def energy_vad(clip: AudioClip, threshold_db: float = 30.0) -> np.ndarray:
    """Boolean speech mask per MFCC frame; frames within `threshold_db` of the
    loudest frame count as speech. The loudest frame is always kept."""
    log_e = 10.0 * np.log10(_frame_energies(clip))
    mask = log_e > (log_e.max() - threshold_db)
    mask[np.argmax(log_e)] = True
    return mask


def _trim_trailing_zeros(clip: AudioClip) -> AudioClip:
    # appended digital silence must not perturb the pooled statistics, so
    # strip it before framing; windows straddling the old endpoint would
    # otherwise add new high-energy frames
    n = len(np.trim_zeros(clip.samples, "b"))
    if n == len(clip.samples) or n == 0:
        return clip
    return AudioClip(clip.samples[:n], clip.sample_rate_hz,
                     speaker_id=clip.speaker_id, clip_id=clip.clip_id)


def baseline_embedding(clip: AudioClip, vad_threshold_db: float = 30.0) -> Embedding:
    """Mean/std pooling of VAD-masked MFCC and delta-MFCC frames (120 dims)."""
    clip = _trim_trailing_zeros(clip)
    coeffs = mfcc(clip)
    delta = np.gradient(coeffs, axis=1)
    feats = np.vstack([coeffs, delta])  # 60 x frames
    if _frame_energies(clip).max() <= 1e-12:
        # the VAD threshold is relative to the loudest frame, so it cannot
        # detect a clip with no signal at all; fall back on absolute energy
        warnings.warn("all frames silent; pooling without VAD mask")
        mask = np.ones(feats.shape[1], dtype=bool)
    else:
        mask = energy_vad(clip, vad_threshold_db)
    sel = feats[:, mask]
    vec = np.concatenate([sel.mean(axis=1), sel.std(axis=1)])
    return Embedding(vec, "baseline_stats", clip_id=clip.clip_id)


def load_external_embeddings(path: str | Path, expected_kind: str) -> dict[str, Embedding]:
    """Read a TSV or JSONL embedding table, validating dimensions and
    rejecting duplicate clip ids."""
    if expected_kind not in EMBEDDING_DIMS:
        raise EmbeddingError(f"unknown embedding kind {expected_kind!r}")
    path = Path(path)
    out: dict[str, Embedding] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        where = f"{path.name}:{lineno}"
        if line.startswith("{"):
            rec = json.loads(line)
            clip_id, kind = rec["clip_id"], rec["kind"]
            dim, values = int(rec["dim"]), np.array(rec["values"], dtype=np.float64)
        else:
            parts = line.split("\t")
            if len(parts) != 4:
                raise EmbeddingError(f"{where}: expected 4 TSV columns")
            clip_id, kind, dim_s, vals_s = parts
            dim = int(dim_s)
            values = np.array([float(v) for v in vals_s.split(",")])
        if kind != expected_kind:
            raise EmbeddingError(f"{where}: kind {kind!r}, expected {expected_kind!r}")
        if dim != EMBEDDING_DIMS[expected_kind] or len(values) != dim:
            raise EmbeddingError(
                f"{where}: clip {clip_id} has dim {len(values)}, "
                f"expected {EMBEDDING_DIMS[expected_kind]}")
        if clip_id in out:
            raise EmbeddingError(f"{where}: duplicate clip id {clip_id}")
        out[clip_id] = Embedding(values, expected_kind, clip_id=clip_id)
    return out


def save_embeddings(embeddings: dict[str, Embedding], path: str | Path) -> None:
    lines = []
    for cid, emb in embeddings.items():
        vals = ",".join(f"{v:.8g}" for v in emb.vector)
        lines.append(f"{cid}\t{emb.kind}\t{emb.dim}\t{vals}")
    Path(path).write_text("\n".join(lines) + "\n")
