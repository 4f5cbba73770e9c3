"""Dataset modeling: manifest ingestion and a synthetic family-voice corpus.

The synthetic generator builds families whose children inherit perturbed
vocal-tract parameters from the gender-matched parent, with an age-dependent
pitch/formant shift. That shift is exactly the domain bias the conversion
pipeline is supposed to remove.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.signal

from .audio_io import AudioClip, save_wav

MANIFEST_VERSION = "akv-manifest/1"

RELATIONS = ("FS", "FD", "MS", "MD", "BS", "BB", "SS")

# gender multiset each relation implies
_RELATION_GENDERS = {
    "FS": ("M", "M"), "FD": ("M", "F"), "MS": ("F", "M"), "MD": ("F", "F"),
    "BS": ("M", "F"), "BB": ("M", "M"), "SS": ("F", "F"),
}


class ManifestError(Exception):
    pass


class AgeGroup(Enum):
    YOUNG = "young"
    MIDDLE = "middle"
    OLD = "old"


def age_group_of(age_years: int) -> AgeGroup:
    """<35 young, 35-55 inclusive middle, >55 old."""
    if age_years < 0:
        raise ValueError("age must be non-negative")
    if age_years < 35:
        return AgeGroup.YOUNG
    if age_years <= 55:
        return AgeGroup.MIDDLE
    return AgeGroup.OLD


@dataclass(frozen=True)
class SpeakerRecord:
    speaker_id: str
    age_years: int
    gender: str  # "M" | "F"
    clip_ids: tuple[str, ...]

    @property
    def age_group(self) -> AgeGroup:
        return age_group_of(self.age_years)


@dataclass(frozen=True)
class KinPair:
    speaker_a: str
    speaker_b: str
    relation: str


@dataclass(frozen=True)
class Manifest:
    speakers: tuple[SpeakerRecord, ...]
    pairs: tuple[KinPair, ...]
    clip_paths: dict  # clip_id -> path
    version: str = MANIFEST_VERSION

    def speaker(self, speaker_id: str) -> SpeakerRecord:
        return self._by_id[speaker_id]

    @property
    def _by_id(self):
        return {s.speaker_id: s for s in self.speakers}


def _check_pair_genders(pair: KinPair, by_id: dict, where: str) -> None:
    expect = sorted(_RELATION_GENDERS[pair.relation])
    got = sorted((by_id[pair.speaker_a].gender, by_id[pair.speaker_b].gender))
    if expect != got:
        raise ManifestError(
            f"{where}: relation {pair.relation} inconsistent with genders {got}")


def load_manifest(path: str | Path, check_files: bool = True) -> Manifest:
    """Parse and validate a JSONL manifest."""
    path = Path(path)
    speakers, pairs, clip_paths = [], [], {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        where = f"{path.name}:{lineno}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{where}: invalid JSON: {exc}") from exc
        kind = rec.get("type")
        if kind == "speaker":
            try:
                sid, age, gender = rec["id"], int(rec["age"]), rec["gender"]
                clips = list(rec["clips"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ManifestError(f"{where}: bad speaker record: {exc}") from exc
            if gender not in ("M", "F"):
                raise ManifestError(f"{where}: gender must be M or F")
            if age < 0 or not clips:
                raise ManifestError(f"{where}: need age >= 0 and at least one clip")
            clip_ids = []
            for c in clips:
                cid = Path(c).stem
                if cid in clip_paths:
                    raise ManifestError(f"{where}: duplicate clip id {cid}")
                clip_path = (path.parent / c) if not Path(c).is_absolute() else Path(c)
                if check_files and not clip_path.exists():
                    raise ManifestError(f"{where}: clip file not found: {clip_path}")
                clip_paths[cid] = clip_path
                clip_ids.append(cid)
            speakers.append(SpeakerRecord(sid, age, gender, tuple(clip_ids)))
        elif kind == "pair":
            try:
                pairs.append(KinPair(rec["a"], rec["b"], rec["relation"]))
            except KeyError as exc:
                raise ManifestError(f"{where}: bad pair record: {exc}") from exc
            if pairs[-1].relation not in RELATIONS:
                raise ManifestError(f"{where}: unknown relation {pairs[-1].relation}")
        elif kind == "meta":
            if rec.get("version") != MANIFEST_VERSION:
                raise ManifestError(f"{where}: unsupported version {rec.get('version')}")
        else:
            raise ManifestError(f"{where}: unknown record type {kind!r}")

    by_id = {s.speaker_id: s for s in speakers}
    if len(by_id) != len(speakers):
        raise ManifestError("duplicate speaker ids")
    for i, p in enumerate(pairs):
        where = f"pair #{i + 1} ({p.speaker_a}, {p.speaker_b})"
        if p.speaker_a == p.speaker_b:
            raise ManifestError(f"{where}: self-pair")
        for sid in (p.speaker_a, p.speaker_b):
            if sid not in by_id:
                raise ManifestError(f"{where}: unknown speaker {sid}")
        _check_pair_genders(p, by_id, where)
    return Manifest(tuple(speakers), tuple(pairs), clip_paths)


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    lines = [json.dumps({"type": "meta", "version": manifest.version})]
    for s in manifest.speakers:
        clips = [str(Path(manifest.clip_paths[c]).relative_to(path.parent))
                 if Path(manifest.clip_paths[c]).is_relative_to(path.parent)
                 else str(manifest.clip_paths[c]) for c in s.clip_ids]
        lines.append(json.dumps({"type": "speaker", "id": s.speaker_id,
                                 "age": s.age_years, "gender": s.gender,
                                 "clips": clips}))
    for p in manifest.pairs:
        lines.append(json.dumps({"type": "pair", "a": p.speaker_a,
                                 "b": p.speaker_b, "relation": p.relation}))
    path.write_text("\n".join(lines) + "\n")


# --- synthetic voices ------------------------------------------------------

@dataclass(frozen=True)
class SynthVoiceParams:
    base_f0_hz: float
    formants_hz: tuple[float, float, float]
    jitter: float
    family_id: str

    def __post_init__(self):
        if not (70.0 <= self.base_f0_hz <= 400.0):
            raise ValueError("f0 out of range")
        if list(self.formants_hz) != sorted(self.formants_hz):
            raise ValueError("formants must be increasing")


# age bias applied on top of the inherited voice parameters
_AGE_F0_SHIFT = {AgeGroup.YOUNG: 1.15, AgeGroup.MIDDLE: 1.0, AgeGroup.OLD: 0.85}
_AGE_FORMANT_SHIFT = {AgeGroup.YOUNG: 1.05, AgeGroup.MIDDLE: 1.0, AgeGroup.OLD: 0.97}


def _base_params(gender: str, family_id: str, rng: np.random.Generator) -> SynthVoiceParams:
    if gender == "M":
        f0 = rng.uniform(95, 135)
        formants = (rng.uniform(550, 750), rng.uniform(1100, 1500), rng.uniform(2300, 2700))
    else:
        f0 = rng.uniform(180, 240)
        formants = (rng.uniform(700, 950), rng.uniform(1400, 1900), rng.uniform(2700, 3100))
    return SynthVoiceParams(f0, tuple(sorted(formants)), rng.uniform(0.004, 0.012), family_id)


def _inherit(parent: SynthVoiceParams, rng: np.random.Generator) -> SynthVoiceParams:
    # bounded heritable perturbation: the within-family signal
    f0 = float(np.clip(parent.base_f0_hz * rng.uniform(0.96, 1.04), 70, 400))
    formants = tuple(sorted(f * rng.uniform(0.97, 1.03) for f in parent.formants_hz))
    jitter = float(np.clip(parent.jitter * rng.uniform(0.85, 1.15), 0.002, 0.02))
    return SynthVoiceParams(f0, formants, jitter, parent.family_id)


def synthesize_clip(params: SynthVoiceParams, age_years: int, duration_s: float,
                    rng: np.random.Generator, sample_rate: int = 16000) -> AudioClip:
    """Sawtooth source with jitter and vibrato, shaped by three formant
    resonators; age applies a multiplicative f0 and formant shift."""
    group = age_group_of(age_years)
    f0 = params.base_f0_hz * _AGE_F0_SHIFT[group]
    formants = [f * _AGE_FORMANT_SHIFT[group] for f in params.formants_hz]

    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    vibrato = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(4.5, 6.5) * t)
    # slow jitter track, interpolated from a coarse random walk
    n_ctrl = max(2, int(duration_s * 40))
    ctrl = 1.0 + params.jitter * rng.standard_normal(n_ctrl)
    jit = np.interp(t, np.linspace(0, duration_s, n_ctrl), ctrl)
    phase = 2 * np.pi * np.cumsum(f0 * vibrato * jit) / sample_rate
    source = scipy.signal.sawtooth(phase)

    out = np.zeros(n)
    for fc, bw in zip(formants, (80.0, 120.0, 180.0)):
        r = np.exp(-np.pi * bw / sample_rate)
        theta = 2 * np.pi * fc / sample_rate
        b = [1.0 - r]
        a = [1.0, -2 * r * np.cos(theta), r * r]
        out += scipy.signal.lfilter(b, a, source)
    out += 0.001 * rng.standard_normal(n)  # breath noise floor
    out = out - out.mean()
    out = 0.5 * out / np.max(np.abs(out))
    return AudioClip(out, sample_rate)


def synthesize_family_corpus(n_families: int, clips_per_speaker: int, seed: int,
                             out_dir: str | Path,
                             clip_duration_s: float = 3.0) -> Manifest:
    """Generate WAV files plus a validated manifest; deterministic under seed."""
    if n_families < 2:
        raise ValueError("need at least 2 families")
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    speakers: list[SpeakerRecord] = []
    pairs: list[KinPair] = []
    clip_paths: dict[str, Path] = {}

    for fam in range(n_families):
        fam_id = f"fam{fam:03d}"
        father_p = _base_params("M", fam_id, rng)
        mother_p = _base_params("F", fam_id, rng)
        n_children = int(rng.integers(1, 4))
        members = [("father", "M", int(rng.integers(36, 71)), father_p),
                   ("mother", "F", int(rng.integers(36, 71)), mother_p)]
        child_meta = []
        for c in range(n_children):
            gender = "M" if rng.random() < 0.5 else "F"
            parent = father_p if gender == "M" else mother_p
            params = _inherit(parent, rng)
            members.append((f"child{c}", gender, int(rng.integers(16, 35)), params))
            child_meta.append((f"{fam_id}_child{c}", gender))

        for role, gender, age, params in members:
            sid = f"{fam_id}_{role}"
            clip_ids = []
            for k in range(clips_per_speaker):
                cid = f"{sid}_c{k}"
                clip = synthesize_clip(params, age, clip_duration_s, rng)
                rel = Path("wav") / f"{cid}.wav"
                save_wav(clip, out_dir / rel)
                clip_paths[cid] = out_dir / rel
                clip_ids.append(cid)
            speakers.append(SpeakerRecord(sid, age, gender, tuple(clip_ids)))

        father_id, mother_id = f"{fam_id}_father", f"{fam_id}_mother"
        for cid_s, gender in child_meta:
            pairs.append(KinPair(father_id, cid_s, "FS" if gender == "M" else "FD"))
            pairs.append(KinPair(mother_id, cid_s, "MS" if gender == "M" else "MD"))
        for i in range(len(child_meta)):
            for j in range(i + 1, len(child_meta)):
                g1, g2 = child_meta[i][1], child_meta[j][1]
                rel = {"MM": "BB", "FF": "SS"}.get(g1 + g2, "BS")
                a, b = child_meta[i][0], child_meta[j][0]
                if rel == "BS" and g1 == "F":  # BS lists the brother first
                    a, b = b, a
                pairs.append(KinPair(a, b, rel))

    manifest = Manifest(tuple(speakers), tuple(pairs), clip_paths)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return load_manifest(out_dir / "manifest.jsonl")


def family_of(manifest: Manifest) -> dict[str, int]:
    """Connected components over kin pairs; speakers with no pair get their
    own singleton component."""
    parent = {s.speaker_id: s.speaker_id for s in manifest.speakers}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for p in manifest.pairs:
        ra, rb = find(p.speaker_a), find(p.speaker_b)
        if ra != rb:
            parent[ra] = rb
    roots = {}
    out = {}
    for s in manifest.speakers:
        r = find(s.speaker_id)
        out[s.speaker_id] = roots.setdefault(r, len(roots))
    return out
