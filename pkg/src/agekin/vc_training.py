"""Losses and training loops for the two age-conversion CycleGANs.

Convention: G maps the source age domain (young or old) to the middle-aged
domain, F maps back. D_middle judges real middle-aged spectrograms against
G's fakes; D_source judges real source spectrograms against F's fakes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import AgeGroup
from .melspec import MelSpectrogram, NormStats, denormalize, normalize
from .tfan_gan import (Discriminator, GanConfig, Generator, init_params,
                       save_checkpoint)


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_cycle: float = 10.0
    lambda_identity: float = 5.0

    def __post_init__(self):
        if self.lambda_cycle < 0 or self.lambda_identity < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class IdentityDecay:
    hold_steps: int = 10_000
    zero_step: int = 20_000

    def __post_init__(self):
        if not (self.zero_step > self.hold_steps >= 0):
            raise ValueError("need zero_step > hold_steps >= 0")


@dataclass(frozen=True)
class VcTrainConfig:
    gan: GanConfig = GanConfig()
    weights: LossWeights = LossWeights()
    decay: IdentityDecay = IdentityDecay()
    steps: int = 2000
    batch_size: int = 8
    crop_frames: int = 64
    lr_generator: float = 2e-4
    lr_discriminator: float = 1e-4
    adam_betas: tuple[float, float] = (0.5, 0.999)
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    seed: int = 0


@dataclass
class GanBundle:
    G: Generator          # source -> middle
    F: Generator          # middle -> source
    D_source: Discriminator
    D_middle: Discriminator
    step: int = 0


def lsgan_losses(d_real_logits: torch.Tensor, d_fake_logits: torch.Tensor):
    """Least-squares adversarial losses: (loss_D, loss_G)."""
    if d_real_logits.shape != d_fake_logits.shape:
        raise TrainingError("logit grids must have the same shape")
    loss_d = ((d_real_logits - 1.0) ** 2).mean() + (d_fake_logits ** 2).mean()
    loss_g = ((d_fake_logits - 1.0) ** 2).mean()
    return loss_d, loss_g


def cycle_loss(x: torch.Tensor, x_reconstructed: torch.Tensor) -> torch.Tensor:
    if x.shape != x_reconstructed.shape:
        raise TrainingError("cycle loss requires equal shapes")
    return (x - x_reconstructed).abs().mean()


def identity_loss(y: torch.Tensor, g_of_y: torch.Tensor) -> torch.Tensor:
    return cycle_loss(y, g_of_y)


def lambda_identity_at(step: int, decay: IdentityDecay,
                       initial: float = 5.0) -> float:
    """Hold at the initial value, then decay linearly to zero."""
    if step <= decay.hold_steps:
        return initial
    if step >= decay.zero_step:
        return 0.0
    frac = (step - decay.hold_steps) / (decay.zero_step - decay.hold_steps)
    return initial * (1.0 - frac)


def total_loss(bundle: GanBundle, batch_source: torch.Tensor,
               batch_middle: torch.Tensor, weights: LossWeights) -> dict:
    """Generator-side objective with per-term breakdown. Inputs are batches
    of normalized 80 x T crops shaped (B, 1, 80, T)."""
    fake_middle = bundle.G(batch_source)
    fake_source = bundle.F(batch_middle)
    _, gan_g = lsgan_losses(bundle.D_middle(batch_middle), bundle.D_middle(fake_middle))
    _, gan_f = lsgan_losses(bundle.D_source(batch_source), bundle.D_source(fake_source))
    cyc = (cycle_loss(batch_source, bundle.F(fake_middle))
           + cycle_loss(batch_middle, bundle.G(fake_source)))
    ident = (identity_loss(batch_middle, bundle.G(batch_middle))
             + identity_loss(batch_source, bundle.F(batch_source)))
    total = gan_g + gan_f + weights.lambda_cycle * cyc + weights.lambda_identity * ident
    return {"gan_G": gan_g, "gan_F": gan_f, "cycle": cyc, "identity": ident,
            "total": total}


class _CropSampler:
    """Seed-determined sampler of normalized 80 x n crops from a corpus of
    spectrograms."""

    def __init__(self, mels: list[MelSpectrogram], n_frames: int, rng: np.random.Generator):
        if not mels:
            raise TrainingError("empty training corpus")
        self.arrays = []
        for m in mels:
            vals = m.values
            if vals.shape[1] < n_frames:
                fill = vals.min(axis=1, keepdims=True)
                vals = np.concatenate(
                    [vals, np.tile(fill, (1, n_frames - vals.shape[1]))], axis=1)
            self.arrays.append(vals)
        self.n_frames = n_frames
        self.rng = rng

    def batch(self, size: int) -> torch.Tensor:
        out = np.empty((size, 1, self.arrays[0].shape[0], self.n_frames), dtype=np.float32)
        for i in range(size):
            a = self.arrays[int(self.rng.integers(len(self.arrays)))]
            off = int(self.rng.integers(a.shape[1] - self.n_frames + 1))
            out[i, 0] = a[:, off:off + self.n_frames]
        return torch.from_numpy(out)


def new_bundle(config: VcTrainConfig) -> GanBundle:
    return GanBundle(
        G=init_params(Generator(config.gan), config.seed),
        F=init_params(Generator(config.gan), config.seed + 1),
        D_source=init_params(Discriminator(config.gan), config.seed + 2),
        D_middle=init_params(Discriminator(config.gan), config.seed + 3),
    )


def train_cyclegan(source_corpus: list[MelSpectrogram],
                   middle_corpus: list[MelSpectrogram],
                   config: VcTrainConfig,
                   checkpoint_dir: str | Path | None = None,
                   bundle: GanBundle | None = None):
    """Alternating discriminator/generator updates; returns the trained
    bundle and the per-step loss history."""
    for m in source_corpus + middle_corpus:
        if not m.normalized:
            raise TrainingError("training corpora must be normalized")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    bundle = bundle or new_bundle(config)
    src = _CropSampler(source_corpus, config.crop_frames, rng)
    mid = _CropSampler(middle_corpus, config.crop_frames, rng)

    opt_d = torch.optim.Adam(
        list(bundle.D_source.parameters()) + list(bundle.D_middle.parameters()),
        lr=config.lr_discriminator, betas=config.adam_betas)
    opt_g = torch.optim.Adam(
        list(bundle.G.parameters()) + list(bundle.F.parameters()),
        lr=config.lr_generator, betas=config.adam_betas)

    history = []
    for _ in range(config.steps):
        batch_s = src.batch(config.batch_size)
        batch_m = mid.batch(config.batch_size)
        lam_id = lambda_identity_at(bundle.step, config.decay,
                                    config.weights.lambda_identity)
        step_weights = LossWeights(config.weights.lambda_cycle, lam_id)

        # discriminators first (fixed order for determinism)
        with torch.no_grad():
            fake_m = bundle.G(batch_s)
            fake_s = bundle.F(batch_m)
        loss_dm, _ = lsgan_losses(bundle.D_middle(batch_m), bundle.D_middle(fake_m))
        loss_ds, _ = lsgan_losses(bundle.D_source(batch_s), bundle.D_source(fake_s))
        loss_d = 0.5 * (loss_dm + loss_ds)
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()

        breakdown = total_loss(bundle, batch_s, batch_m, step_weights)
        opt_g.zero_grad()
        breakdown["total"].backward()
        opt_g.step()

        record = {"step": bundle.step,
                  **{k: float(v.detach()) for k, v in breakdown.items()},
                  "loss_D": float(loss_d.detach()), "lambda_id": lam_id}
        if not all(np.isfinite(v) for v in record.values()):
            raise TrainingError(f"non-finite loss at step {bundle.step}: {record}")
        history.append(record)
        bundle.step += 1

        if (checkpoint_dir and config.checkpoint_every
                and bundle.step % config.checkpoint_every == 0):
            save_bundle(bundle, checkpoint_dir, config)
    if checkpoint_dir:
        save_bundle(bundle, checkpoint_dir, config)
    return bundle, history


def save_bundle(bundle: GanBundle, out_dir: str | Path, config: VcTrainConfig) -> None:
    out_dir = Path(out_dir)
    for name, model in (("G", bundle.G), ("F", bundle.F),
                        ("D_source", bundle.D_source), ("D_middle", bundle.D_middle)):
        save_checkpoint(model, out_dir / name, config.gan, config.seed, bundle.step)


def load_bundle(out_dir: str | Path) -> GanBundle:
    from .tfan_gan import load_checkpoint
    out_dir = Path(out_dir)
    parts = {}
    step = 0
    for name in ("G", "F", "D_source", "D_middle"):
        model, manifest = load_checkpoint(out_dir / name)
        parts[name] = model
        step = manifest["step"]
    return GanBundle(parts["G"], parts["F"], parts["D_source"], parts["D_middle"],
                     step=step)


def write_loss_history(history: list[dict], path: str | Path) -> None:
    cols = ["step", "gan_G", "gan_F", "cycle", "identity", "total", "lambda_id"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for rec in history:
            writer.writerow([rec[c] for c in cols])


def _pad_to_multiple_of_4(values: np.ndarray):
    t = values.shape[1]
    pad = (-t) % 4
    if pad:
        values = np.concatenate([values, np.tile(values[:, -1:], (1, pad))], axis=1)
    return values, t


def convert_to_standard_domain(mel: MelSpectrogram, age_group: AgeGroup,
                               bundles: dict, stats: NormStats) -> MelSpectrogram:
    """Route a spectrogram through the generator for its age group; the
    middle-aged domain passes through untouched."""
    if age_group == AgeGroup.MIDDLE:
        return mel
    key = {AgeGroup.YOUNG: "y2m", AgeGroup.OLD: "o2m"}[age_group]
    if key not in bundles or bundles[key] is None:
        raise TrainingError(f"no trained bundle for age group {age_group.value} ({key})")
    normed = normalize(mel, stats)
    vals, orig_t = _pad_to_multiple_of_4(normed.values)
    with torch.no_grad():
        x = torch.from_numpy(vals[None, None].astype(np.float32))
        y = bundles[key].G(x).numpy()[0, 0, :, :orig_t]
    converted = MelSpectrogram(y.astype(np.float64), mel.config, normalized=True)
    return denormalize(converted, stats)
