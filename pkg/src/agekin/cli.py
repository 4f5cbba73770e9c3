"""Command-line pipeline orchestration.

Stages communicate through files under a working directory:

    workdir/corpus/            synth-corpus: WAVs + manifest.jsonl
    workdir/mels/              preprocess: one mel binary per clip
    workdir/norm_stats.json    preprocess: middle-aged-group statistics
    workdir/vc/{y2m,o2m}/      train-vc: checkpoints + loss CSVs
    workdir/converted/         convert: age-standardized WAVs + manifest
    workdir/emb_<dataset>.tsv  embed
    workdir/kv_<dataset>/      train-kv: verifier + threshold + partition
    workdir/eval_<dataset>.json
    workdir/proj_<dataset>.csv

Every command writes a run-record JSON next to its outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .audio_io import fix_duration, load_and_standardize, save_wav
from .corpus import (AgeGroup, Manifest, load_manifest,
                     save_manifest, synthesize_family_corpus)
from .embeddings import baseline_embedding, load_external_embeddings, save_embeddings
from .kinship import (KvTrainConfig, VerifierConfig, build_partition, evaluate,
                      load_verifier, mine_triplets, render_report_table,
                      save_verifier, select_threshold, train_verifier,
                      verifier_forward, EvalReport, pairs_in_split,
                      sample_nonkin_pairs, KinshipError)
from .melspec import (MelConfig, compute_mel, fit_norm_stats, load_norm_stats,
                      MelSpectrogram, read_mel_binary, save_norm_stats,
                      write_mel_binary)
from .tfan_gan import GanConfig
from .vc_training import (VcTrainConfig, convert_to_standard_domain, load_bundle,
                          train_cyclegan, write_loss_history, IdentityDecay,
                          LossWeights)
from .vocoder import VocoderConfig, external_vocoder_adapter, mel_to_audio
from .analysis import compactness_report, project_2d, write_projection_csv


class CliValidationError(Exception):
    pass


def _run_record(workdir: Path, command: str, args_doc: dict, started: float) -> None:
    doc = {
        "command": command,
        "config_hash": hashlib.sha256(
            json.dumps(args_doc, sort_keys=True, default=str).encode()).hexdigest()[:16],
        "args": args_doc,
        "version": f"agekin-{__version__}",
        "wall_time_s": round(time.time() - started, 3),
    }
    (workdir / f"run_{command.replace('-', '_')}.json").write_text(
        json.dumps(doc, indent=2, default=str))


def _refuse_overwrite(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise CliValidationError(f"{path} exists; pass --force to overwrite")


def _need(path: Path, producer: str) -> Path:
    if not path.exists():
        raise CliValidationError(f"missing {path}; run `{producer}` first")
    return path


def _load_mels(workdir: Path, manifest: Manifest, mel_config: MelConfig,
               subdir: str = "mels") -> dict[str, MelSpectrogram]:
    mel_dir = _need(workdir / subdir, "preprocess")
    out = {}
    for cid in manifest.clip_paths:
        vals = read_mel_binary(_need(mel_dir / f"{cid}.bin", "preprocess"))
        out[cid] = MelSpectrogram(vals, mel_config)
    return out


def _group_of(manifest: Manifest, clip_id: str) -> AgeGroup:
    for s in manifest.speakers:
        if clip_id in s.clip_ids:
            return s.age_group
    raise CliValidationError(f"clip {clip_id} not in manifest")


# --- commands --------------------------------------------------------------

def cmd_synth_corpus(args) -> None:
    out_dir = Path(args.workdir) / "corpus"
    _refuse_overwrite(out_dir / "manifest.jsonl", args.force)
    synthesize_family_corpus(args.families, args.clips_per_speaker, args.seed,
                             out_dir, clip_duration_s=args.duration)


def cmd_preprocess(args) -> None:
    workdir = Path(args.workdir)
    manifest = load_manifest(_need(Path(args.manifest or workdir / "corpus" / "manifest.jsonl"),
                                   "synth-corpus"))
    mel_dir = workdir / "mels"
    _refuse_overwrite(workdir / "norm_stats.json", args.force)
    mel_dir.mkdir(parents=True, exist_ok=True)
    config = MelConfig()
    middle_mels = []
    for s in manifest.speakers:
        for cid in s.clip_ids:
            clip = load_and_standardize(manifest.clip_paths[cid], s.speaker_id, cid)
            clip = fix_duration(clip, args.duration)
            mel = compute_mel(clip, config)
            write_mel_binary(mel.values, mel_dir / f"{cid}.bin")
            if s.age_group == AgeGroup.MIDDLE:
                middle_mels.append(mel)
    if not middle_mels:
        raise CliValidationError("no middle-aged speakers; cannot fit norm stats")
    save_norm_stats(fit_norm_stats(middle_mels), config, workdir / "norm_stats.json")


def cmd_train_vc(args) -> None:
    workdir = Path(args.workdir)
    manifest = load_manifest(_need(workdir / "corpus" / "manifest.jsonl", "synth-corpus"))
    config_doc = _load_config(args.config)
    mel_config = MelConfig()
    stats = load_norm_stats(_need(workdir / "norm_stats.json", "preprocess"), mel_config)
    mels = _load_mels(workdir, manifest, mel_config)

    from .melspec import normalize
    by_group = {g: [] for g in AgeGroup}
    for s in manifest.speakers:
        for cid in s.clip_ids:
            by_group[s.age_group].append(normalize(mels[cid], stats))
    for direction, group in (("y2m", AgeGroup.YOUNG), ("o2m", AgeGroup.OLD)):
        out = workdir / "vc" / direction
        _refuse_overwrite(out / "G" / "manifest.json", args.force)
        vc_config = _vc_config_from(config_doc, seed=args.seed)
        if not by_group[group]:
            raise CliValidationError(f"no {group.value} clips to train {direction}")
        bundle, history = train_cyclegan(by_group[group], by_group[AgeGroup.MIDDLE],
                                         vc_config, checkpoint_dir=out)
        write_loss_history(history, out / "loss_history.csv")


def cmd_convert(args) -> None:
    workdir = Path(args.workdir)
    manifest = load_manifest(_need(workdir / "corpus" / "manifest.jsonl", "synth-corpus"))
    mel_config = MelConfig()
    stats = load_norm_stats(_need(workdir / "norm_stats.json", "preprocess"), mel_config)
    bundles = {"y2m": load_bundle(_need(workdir / "vc" / "y2m" / "G", "train-vc").parent),
               "o2m": load_bundle(_need(workdir / "vc" / "o2m" / "G", "train-vc").parent)}
    mels = _load_mels(workdir, manifest, mel_config)
    out_dir = workdir / "converted"
    _refuse_overwrite(out_dir / "manifest.jsonl", args.force)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    voc_config = VocoderConfig(mel_config=mel_config)

    clip_paths = {}
    for s in manifest.speakers:
        for cid in s.clip_ids:
            dest = out_dir / "wav" / f"{cid}.wav"
            # Middle-aged spectrograms pass through unchanged, but every clip
            # is re-rendered by the same vocoder so that all converted-dataset
            # audio shares one processing channel; otherwise the vocoder
            # signature itself becomes an age-correlated artifact.
            converted = convert_to_standard_domain(mels[cid], s.age_group,
                                                   bundles, stats)
            if args.vocoder_cmd:
                clip = external_vocoder_adapter(converted, args.vocoder_cmd)
            else:
                clip = mel_to_audio(converted, voc_config, seed=args.seed)
            clip = fix_duration(clip, args.duration)
            save_wav(clip, dest)
            clip_paths[cid] = dest
    save_manifest(Manifest(manifest.speakers, manifest.pairs, clip_paths),
                  out_dir / "manifest.jsonl")


def _manifest_for_dataset(workdir: Path, dataset: str) -> Manifest:
    if dataset == "original":
        return load_manifest(_need(workdir / "corpus" / "manifest.jsonl", "synth-corpus"))
    if dataset == "converted":
        return load_manifest(_need(workdir / "converted" / "manifest.jsonl", "convert"))
    raise CliValidationError(f"unknown dataset {dataset!r}")


def cmd_embed(args) -> None:
    workdir = Path(args.workdir)
    manifest = _manifest_for_dataset(workdir, args.dataset)
    out_path = workdir / f"emb_{args.dataset}.tsv"
    _refuse_overwrite(out_path, args.force)
    if args.external:
        emb = load_external_embeddings(args.external, args.kind)
        missing = set(manifest.clip_paths) - set(emb)
        if missing:
            raise CliValidationError(
                f"external embeddings missing clips: {sorted(missing)[:5]}")
    else:
        emb = {}
        for s in manifest.speakers:
            for cid in s.clip_ids:
                clip = load_and_standardize(manifest.clip_paths[cid], s.speaker_id, cid)
                emb[cid] = baseline_embedding(clip)
    save_embeddings(emb, out_path)


def _load_embeddings_for(workdir: Path, dataset: str, kind: str):
    path = _need(workdir / f"emb_{dataset}.tsv", "embed")
    return load_external_embeddings(path, kind)


def cmd_train_kv(args) -> None:
    workdir = Path(args.workdir)
    manifest = _manifest_for_dataset(workdir, args.dataset)
    embeddings = _load_embeddings_for(workdir, args.dataset, args.kind)
    out_dir = workdir / f"kv_{args.dataset}"
    _refuse_overwrite(out_dir / "verifier.npz", args.force)
    out_dir.mkdir(parents=True, exist_ok=True)

    partition = build_partition(manifest, args.seed)
    input_dim = next(iter(embeddings.values())).dim
    vconfig = VerifierConfig(input_dim=input_dim, dropout=args.dropout)
    triplets, skipped = mine_triplets(manifest, partition.train, args.seed)
    verifier, history = train_verifier(
        triplets, embeddings, vconfig,
        KvTrainConfig(epochs=args.epochs, seed=args.seed))

    rng = np.random.default_rng(args.seed)
    labeled = _labeled_distances(manifest, partition.val, verifier, embeddings, rng)
    threshold_split = "val"
    if not (any(lab for _, lab in labeled) and any(not lab for _, lab in labeled)):
        # small corpora can leave the 10% validation split without an intact
        # kin pair; fall back to threshold selection on the training split
        labeled = _labeled_distances(manifest, partition.train, verifier,
                                     embeddings, rng)
        threshold_split = "train"
    threshold = select_threshold(labeled)

    save_verifier(verifier, out_dir / "verifier.npz")
    (out_dir / "threshold.json").write_text(json.dumps(
        {"threshold": threshold, "split": threshold_split}))
    (out_dir / "partition.json").write_text(json.dumps({
        "train": sorted(partition.train), "val": sorted(partition.val),
        "test": sorted(partition.test), "discarded_pairs": partition.discarded_pairs}))
    (out_dir / "kv_history.json").write_text(json.dumps(
        {"epoch_mean_loss": history, "triplets": len(triplets), "skipped": skipped}))


def _labeled_distances(manifest, split, verifier, embeddings, rng):
    by_id = {s.speaker_id: s for s in manifest.speakers}

    def dist(sa, sb):
        ds = [np.linalg.norm(verifier_forward(embeddings[ca].vector, verifier)
                             - verifier_forward(embeddings[cb].vector, verifier))
              for ca in by_id[sa].clip_ids for cb in by_id[sb].clip_ids]
        return float(np.median(ds))

    labeled = []
    kin = pairs_in_split(manifest, split)
    for p in kin:
        labeled.append((dist(p.speaker_a, p.speaker_b), True))
    for p in kin:
        for a, b in sample_nonkin_pairs(manifest, split, p.relation, 1, rng):
            labeled.append((dist(a, b), False))
    return labeled


def cmd_eval(args) -> None:
    workdir = Path(args.workdir)
    manifest = _manifest_for_dataset(workdir, args.dataset)
    embeddings = _load_embeddings_for(workdir, args.dataset, args.kind)
    kv_dir = _need(workdir / f"kv_{args.dataset}", "train-kv")
    verifier = load_verifier(_need(kv_dir / "verifier.npz", "train-kv"))
    threshold = json.loads(_need(kv_dir / "threshold.json", "train-kv").read_text())["threshold"]
    part = json.loads(_need(kv_dir / "partition.json", "train-kv").read_text())
    out_path = workdir / f"eval_{args.dataset}.json"
    _refuse_overwrite(out_path, args.force)
    report = evaluate(manifest, frozenset(part["test"]), verifier, embeddings,
                      threshold, seed=args.seed)
    out_path.write_text(report.to_json())


def cmd_project(args) -> None:
    workdir = Path(args.workdir)
    manifest = _manifest_for_dataset(workdir, args.dataset)
    embeddings = _load_embeddings_for(workdir, args.dataset, args.kind)
    out_path = workdir / f"proj_{args.dataset}.csv"
    _refuse_overwrite(out_path, args.force)
    ids = sorted(embeddings)
    x = np.stack([embeddings[c].vector for c in ids])
    labels = [(args.dataset, _group_of(manifest, c).value) for c in ids]
    result = project_2d(x, method=args.method, seed=args.seed,
                        perplexity=args.perplexity, labels=labels)
    write_projection_csv(result, ids, out_path)


def cmd_report(args) -> None:
    workdir = Path(args.workdir)
    reports = {}
    for dataset in ("original", "converted"):
        path = workdir / f"eval_{dataset}.json"
        if path.exists():
            reports[dataset] = EvalReport.from_json(path.read_text())
    if not reports:
        raise CliValidationError("no eval reports found; run `eval` first")
    table = render_report_table(reports)
    out = {"table": table,
           "overall": {k: v.overall_weighted for k, v in reports.items()}}
    if len(reports) == 2:
        emb_o = _load_embeddings_for(workdir, "original", args.kind)
        emb_c = _load_embeddings_for(workdir, "converted", args.kind)
        ids = sorted(set(emb_o) & set(emb_c))
        out["compactness"] = compactness_report(
            np.stack([emb_o[c].vector for c in ids]),
            np.stack([emb_c[c].vector for c in ids]))
    (workdir / "report.json").write_text(json.dumps(out, indent=2))
    print(table)


# --- config plumbing -------------------------------------------------------

def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise CliValidationError(f"config file not found: {p}")
    return json.loads(p.read_text())


def _vc_config_from(doc: dict, seed: int) -> VcTrainConfig:
    vc = doc.get("vc", {})
    gan = GanConfig(**vc.get("gan", {}))
    weights = LossWeights(**vc.get("weights", {}))
    decay = IdentityDecay(**vc.get("decay", {}))
    keys = {k: v for k, v in vc.items() if k not in ("gan", "weights", "decay")}
    return VcTrainConfig(gan=gan, weights=weights, decay=decay, seed=seed, **keys)


# --- entry point -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agekin",
        description="Age-standardising voice conversion and kinship verification")
    parser.add_argument("--workdir", default="work", help="pipeline working directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--force", action="store_true",
                        help="overwrite existing outputs")
    parser.add_argument("--config", default=None, help="JSON pipeline config")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-corpus", help="generate a synthetic family-voice corpus")
    p.add_argument("--families", type=int, default=10)
    p.add_argument("--clips-per-speaker", type=int, default=3)
    p.add_argument("--duration", type=float, default=3.0)
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("preprocess", help="extract mels and fit middle-group stats")
    p.add_argument("--manifest", default=None)
    p.add_argument("--duration", type=float, default=3.0)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train-vc", help="train the young->middle and old->middle GANs")
    p.set_defaults(func=cmd_train_vc)

    p = sub.add_parser("convert", help="age-standardize all audio")
    p.add_argument("--vocoder-cmd", default=None,
                   help="external vocoder command with {in} and {out} placeholders")
    p.add_argument("--duration", type=float, default=3.0)
    p.set_defaults(func=cmd_convert)

    for name, func in (("embed", cmd_embed), ("train-kv", cmd_train_kv),
                       ("eval", cmd_eval), ("project", cmd_project)):
        p = sub.add_parser(name)
        p.add_argument("--dataset", choices=("original", "converted"),
                       default="original")
        p.add_argument("--kind", default="baseline_stats")
        if name == "embed":
            p.add_argument("--external", default=None,
                           help="TSV/JSONL of externally computed embeddings")
        if name == "train-kv":
            p.add_argument("--epochs", type=int, default=20)
            p.add_argument("--dropout", type=float, default=0.3)
        if name == "project":
            p.add_argument("--method", choices=("pca", "tsne"), default="pca")
            p.add_argument("--perplexity", type=float, default=30.0)
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="join eval outputs into a results table")
    p.add_argument("--kind", default="baseline_stats")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    workdir = Path(args.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    try:
        args.func(args)
    except (CliValidationError, KinshipError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    args_doc = {k: v for k, v in vars(args).items() if k != "func"}
    _run_record(workdir, args.command, args_doc, started)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
