"""Triplet-metric kinship verification.

Covers speaker-level partitioning, triplet mining with the same-gender
negative rule, the two-layer embedding head, SGD training on triplet loss,
validation-set threshold selection, and per-relation weighted evaluation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .corpus import Manifest, KinPair, family_of
from .embeddings import Embedding

DEFAULT_RELATION_WEIGHTS = {"BB": 11.0, "SS": 5.0, "BS": 14.0, "FD": 28.0,
                            "FS": 19.0, "MD": 22.0, "MS": 1.0}


class KinshipError(Exception):
    pass


@dataclass(frozen=True)
class Partition:
    train: frozenset
    val: frozenset
    test: frozenset
    discarded_pairs: int = 0

    def split_of(self, speaker_id: str) -> str | None:
        for name in ("train", "val", "test"):
            if speaker_id in getattr(self, name):
                return name
        return None


@dataclass(frozen=True)
class Triplet:
    anchor: str    # clip ids
    positive: str
    negative: str


@dataclass(frozen=True)
class VerifierConfig:
    input_dim: int = 120
    hidden_dim: int = 256
    output_dim: int = 128
    dropout: float = 0.3
    batch_norm: bool = True
    margin: float = 1.0


@dataclass(frozen=True)
class KvTrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-4
    momentum: float = 0.9
    seed: int = 0


def build_partition(manifest: Manifest, seed: int) -> Partition:
    """7:1:2 speaker split with exact round(0.7n)/round(0.1n)/rest sizes.

    Speakers are ordered family-block-wise (a shuffled sequence of whole
    family components) before cutting, so related speakers land in the same
    split except at the two cut points. This keeps the splits mutually
    exclusive at the family level — a relative of a test speaker in the
    training set would leak family information — while preserving the exact
    split sizes. Pairs straddling a cut are discarded and counted."""
    speakers = [s.speaker_id for s in manifest.speakers]
    if len(speakers) < 10:
        raise KinshipError("need at least 10 speakers for a 7:1:2 split")
    rng = np.random.default_rng(seed)
    families = family_of(manifest)
    blocks: dict = {}
    for s in speakers:
        blocks.setdefault(families[s], []).append(s)
    block_list = [sorted(members) for _, members in sorted(blocks.items())]
    order = []
    for i in rng.permutation(len(block_list)):
        members = block_list[i]
        order.extend(members[j] for j in rng.permutation(len(members)))
    n = len(order)
    n_train = round(0.7 * n)
    n_val = round(0.1 * n)
    train = frozenset(order[:n_train])
    val = frozenset(order[n_train:n_train + n_val])
    test = frozenset(order[n_train + n_val:])
    discarded = 0
    for p in manifest.pairs:
        splits = {("train" if s in train else "val" if s in val else "test")
                  for s in (p.speaker_a, p.speaker_b)}
        if len(splits) > 1:
            discarded += 1
    return Partition(train, val, test, discarded_pairs=discarded)


def pairs_in_split(manifest: Manifest, split: frozenset) -> list[KinPair]:
    return [p for p in manifest.pairs
            if p.speaker_a in split and p.speaker_b in split]


def mine_triplets(manifest: Manifest, split: frozenset, seed: int,
                  negatives_per_pair: int = 2,
                  max_clip_combos: int = 4) -> tuple[list[Triplet], int]:
    """Anchor/positive from each ordered kin pair's clip combinations;
    negatives drawn from same-gender speakers outside the positive's family.
    Returns (triplets, skipped_count)."""
    by_id = {s.speaker_id: s for s in manifest.speakers}
    families = family_of(manifest)
    rng = np.random.default_rng(seed)
    split_speakers = sorted(split)
    triplets: list[Triplet] = []
    skipped = 0
    for pair in pairs_in_split(manifest, split):
        for anchor_id, pos_id in ((pair.speaker_a, pair.speaker_b),
                                  (pair.speaker_b, pair.speaker_a)):
            pos = by_id[pos_id]
            candidates = [s for s in split_speakers
                          if by_id[s].gender == pos.gender
                          and families[s] != families[pos_id]]
            combos = [(a, p) for a in by_id[anchor_id].clip_ids
                      for p in pos.clip_ids]
            if len(combos) > max_clip_combos:
                picks = rng.choice(len(combos), size=max_clip_combos, replace=False)
                combos = [combos[i] for i in sorted(picks)]
            for a_clip, p_clip in combos:
                if not candidates:
                    skipped += 1
                    continue
                for _ in range(negatives_per_pair):
                    neg = by_id[candidates[int(rng.integers(len(candidates)))]]
                    n_clip = neg.clip_ids[int(rng.integers(len(neg.clip_ids)))]
                    triplets.append(Triplet(a_clip, p_clip, n_clip))
    return triplets, skipped


class Verifier(nn.Module):
    """Two-layer head: input -> 256 (batch-norm, ReLU, dropout) -> 128."""

    def __init__(self, config: VerifierConfig = VerifierConfig(), dtype=torch.float32):
        super().__init__()
        self.config = config
        self.fc1 = nn.Linear(config.input_dim, config.hidden_dim, dtype=dtype)
        self.bn = (nn.BatchNorm1d(config.hidden_dim, dtype=dtype)
                   if config.batch_norm else nn.Identity())
        self.dropout = nn.Dropout(config.dropout)
        self.fc2 = nn.Linear(config.hidden_dim, config.output_dim, dtype=dtype)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 1
        if squeeze:
            x = x.unsqueeze(0)
        if x.shape[1] != self.config.input_dim:
            raise KinshipError(
                f"embedding dim {x.shape[1]} != verifier input {self.config.input_dim}")
        h = F.relu(self.bn(self.fc1(x)))
        h = self.dropout(h)
        out = self.fc2(h)
        return out.squeeze(0) if squeeze else out


def verifier_forward(embedding: np.ndarray, verifier: Verifier,
                     training_mode: bool = False) -> np.ndarray:
    verifier.train(training_mode)
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(embedding), dtype=next(verifier.parameters()).dtype)
        return verifier(x).numpy()


def triplet_loss(a: torch.Tensor, p: torch.Tensor, n: torch.Tensor,
                 margin: float = 1.0) -> torch.Tensor:
    """Squared-Euclidean hinge: max(0, d(a,p)^2 - d(a,n)^2 + margin)."""
    d_ap = ((a - p) ** 2).sum(dim=-1)
    d_an = ((a - n) ** 2).sum(dim=-1)
    return torch.clamp(d_ap - d_an + margin, min=0.0).mean()


def train_verifier(triplets: list[Triplet], embeddings: dict[str, Embedding],
                   config: VerifierConfig, train_config: KvTrainConfig,
                   verifier: Verifier | None = None):
    """Mini-batch SGD on triplet loss; deterministic under seed."""
    if not triplets:
        raise KinshipError("no triplets to train on")
    missing = {c for t in triplets for c in (t.anchor, t.positive, t.negative)
               if c not in embeddings}
    if missing:
        raise KinshipError(f"missing embeddings for clips: {sorted(missing)[:5]}")
    torch.manual_seed(train_config.seed)
    if verifier is None:
        verifier = Verifier(config)
    opt = torch.optim.SGD(verifier.parameters(), lr=train_config.lr,
                          momentum=train_config.momentum)
    vecs = {cid: torch.tensor(e.vector, dtype=torch.float32)
            for cid, e in embeddings.items()}
    rng = np.random.default_rng(train_config.seed)
    history = []
    for _ in range(train_config.epochs):
        order = rng.permutation(len(triplets))
        epoch_losses = []
        verifier.train(True)
        for start in range(0, len(order), train_config.batch_size):
            batch = [triplets[i] for i in order[start:start + train_config.batch_size]]
            a = verifier(torch.stack([vecs[t.anchor] for t in batch]))
            p = verifier(torch.stack([vecs[t.positive] for t in batch]))
            n = verifier(torch.stack([vecs[t.negative] for t in batch]))
            loss = triplet_loss(a, p, n, config.margin)
            if not torch.isfinite(loss):
                raise KinshipError("non-finite triplet loss; aborting")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.detach()))
        history.append(float(np.mean(epoch_losses)))
    verifier.train(False)
    return verifier, history


def save_verifier(verifier: Verifier, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu().numpy() for k, v in verifier.state_dict().items()}
    np.savez(path, __config__=json.dumps(verifier.config.__dict__), **state)


def load_verifier(path: str | Path) -> Verifier:
    data = np.load(path, allow_pickle=False)
    config = VerifierConfig(**json.loads(str(data["__config__"])))
    verifier = Verifier(config)
    state = {k: torch.tensor(data[k]) for k in data.files if k != "__config__"}
    verifier.load_state_dict(state)
    verifier.train(False)
    return verifier


def pair_distance(verifier: Verifier, emb_a: Embedding, emb_b: Embedding) -> float:
    za = verifier_forward(emb_a.vector, verifier)
    zb = verifier_forward(emb_b.vector, verifier)
    return float(np.linalg.norm(za - zb))


def select_threshold(labeled_distances: list[tuple[float, bool]]) -> float:
    """Accuracy-maximizing threshold over midpoints of sorted distinct
    distances; ties break toward the smaller threshold. A pair is declared
    kin iff distance <= threshold."""
    if not any(lab for _, lab in labeled_distances) or \
       not any(not lab for _, lab in labeled_distances):
        raise KinshipError("need at least one positive and one negative pair")
    dists = sorted({d for d, _ in labeled_distances})
    candidates = [dists[0] - 1.0]
    candidates += [(a + b) / 2 for a, b in zip(dists, dists[1:])]
    candidates.append(dists[-1] + 1.0)
    best_thr, best_acc = None, -1.0
    for thr in candidates:
        acc = np.mean([(d <= thr) == lab for d, lab in labeled_distances])
        if acc > best_acc:
            best_acc, best_thr = acc, thr
    return float(best_thr)


@dataclass(frozen=True)
class EvalReport:
    per_relation_accuracy: dict   # relation -> percent
    relation_weights: dict        # relation -> percent, sums to 100
    overall_weighted: float
    threshold: float
    n_pairs: dict                 # relation -> evaluated pair count
    weights_renormalized: bool = False

    def to_json(self) -> str:
        return json.dumps({
            "per_relation_accuracy": self.per_relation_accuracy,
            "relation_weights": self.relation_weights,
            "overall_weighted": self.overall_weighted,
            "threshold": self.threshold,
            "n_pairs": self.n_pairs,
            "weights_renormalized": self.weights_renormalized,
        }, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        doc = json.loads(text)
        return EvalReport(doc["per_relation_accuracy"], doc["relation_weights"],
                          doc["overall_weighted"], doc["threshold"],
                          doc["n_pairs"], doc.get("weights_renormalized", False))


def weighted_overall(per_relation_accuracy: dict, weights: dict) -> float:
    """Sum of weight * accuracy / 100 over the relations present in both."""
    return sum(weights[r] * per_relation_accuracy[r]
               for r in per_relation_accuracy) / 100.0


def sample_nonkin_pairs(manifest: Manifest, split: frozenset, relation: str,
                        n: int, rng: np.random.Generator) -> list[tuple[str, str]]:
    """Gender-matched unrelated speaker pairs mirroring a relation's gender
    pattern."""
    from .corpus import _RELATION_GENDERS
    by_id = {s.speaker_id: s for s in manifest.speakers}
    families = family_of(manifest)
    g1, g2 = _RELATION_GENDERS[relation]
    pool1 = sorted(s for s in split if by_id[s].gender == g1)
    pool2 = sorted(s for s in split if by_id[s].gender == g2)
    out = []
    attempts = 0
    while len(out) < n and attempts < 50 * n:
        attempts += 1
        a = pool1[int(rng.integers(len(pool1)))] if pool1 else None
        b = pool2[int(rng.integers(len(pool2)))] if pool2 else None
        if a is None or b is None or a == b:
            continue
        if families[a] == families[b]:
            continue
        out.append((a, b))
    return out


def evaluate(manifest: Manifest, split: frozenset, verifier: Verifier,
             embeddings: dict[str, Embedding], threshold: float,
             weights: dict | None = None, seed: int = 0) -> EvalReport:
    """Balanced per-relation accuracy: each relation's kin pairs plus an
    equal number of sampled gender-matched non-kin pairs."""
    weights = dict(weights or DEFAULT_RELATION_WEIGHTS)
    by_id = {s.speaker_id: s for s in manifest.speakers}
    rng = np.random.default_rng(seed)

    def speaker_distance(sa: str, sb: str) -> float:
        # median over clip-pair distances keeps one odd clip from flipping a pair
        ds = [np.linalg.norm(verifier_forward(embeddings[ca].vector, verifier)
                             - verifier_forward(embeddings[cb].vector, verifier))
              for ca in by_id[sa].clip_ids for cb in by_id[sb].clip_ids]
        return float(np.median(ds))

    per_rel_acc, n_pairs = {}, {}
    for relation in weights:
        kin = [p for p in pairs_in_split(manifest, split) if p.relation == relation]
        if not kin:
            continue
        nonkin = sample_nonkin_pairs(manifest, split, relation, len(kin), rng)
        correct = 0
        total = 0
        for p in kin:
            correct += speaker_distance(p.speaker_a, p.speaker_b) <= threshold
            total += 1
        for a, b in nonkin:
            correct += speaker_distance(a, b) > threshold
            total += 1
        per_rel_acc[relation] = 100.0 * correct / total
        n_pairs[relation] = total

    if not per_rel_acc:
        raise KinshipError("no kin pairs of any weighted relation in this split")

    renormalized = set(per_rel_acc) != set(weights)
    if renormalized:
        present = {r: weights[r] for r in per_rel_acc}
        scale = 100.0 / sum(present.values())
        weights = {r: w * scale for r, w in present.items()}
    overall = weighted_overall(per_rel_acc, weights)
    return EvalReport(per_rel_acc, weights, overall, threshold, n_pairs,
                      weights_renormalized=renormalized)


def render_report_table(reports: dict[str, EvalReport]) -> str:
    """Aligned text table, one row per labeled report, Table-I column order."""
    order = ["BB", "SS", "BS", "FD", "FS", "MD", "MS"]
    header = (["Dataset", "Overall"]
              + [f"{r} ({DEFAULT_RELATION_WEIGHTS[r]:g})" for r in order])
    rows = [header]
    for label, rep in reports.items():
        row = [label, f"{rep.overall_weighted:.1f}"]
        for r in order:
            acc = rep.per_relation_accuracy.get(r)
            row.append("-" if acc is None else f"{acc:.1f}")
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths))
                     for row in rows)
