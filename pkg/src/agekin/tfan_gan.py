"""Generator with time-frequency adaptive normalization and PatchGAN
discriminator.

The generator follows the 2D-1D-2D conversion layout: 2D convs with two
downsampling stages, a 1D residual bottleneck over the time axis, and two
pixel-shuffle upsampling stages. Each down/up stage is modulated by a TFAN
block whose per-position scale and bias are predicted from the source
spectrogram resized to the feature map's resolution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

N_MELS = 80
DISC_MIN_WIDTH = 16  # four stride-2 stages, each needs width >= 2


@dataclass(frozen=True)
class GanConfig:
    base_channels: int = 128
    n_res_blocks: int = 6
    tfan_hidden: int = 64
    disc_channels: int = 64

    @property
    def down_channels(self) -> int:
        return 2 * self.base_channels

    @property
    def bottleneck_freq(self) -> int:
        return N_MELS // 4


TINY_CONFIG = GanConfig(base_channels=8, n_res_blocks=1, tfan_hidden=4,
                        disc_channels=8)


class TFAN(nn.Module):
    """Instance normalization with scale/bias predicted per time-frequency
    position from the (nearest-resized) source spectrogram."""

    def __init__(self, channels: int, hidden: int, dtype=torch.float32):
        super().__init__()
        self.channels = channels
        self.conv_in = nn.Conv2d(1, hidden, 3, padding=1, dtype=dtype)
        self.conv_mod = nn.Conv2d(hidden, 2 * channels, 3, padding=1, dtype=dtype)

    def forward(self, features: torch.Tensor, source_mel: torch.Tensor) -> torch.Tensor:
        if features.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {features.shape[1]}")
        mu = features.mean(dim=(2, 3), keepdim=True)
        var = features.var(dim=(2, 3), keepdim=True, unbiased=False)
        normed = (features - mu) / torch.sqrt(var + 1e-5)
        cond = F.interpolate(source_mel, size=features.shape[2:], mode="nearest")
        h = F.leaky_relu(self.conv_in(cond), 0.2)
        gamma, beta = self.conv_mod(h).chunk(2, dim=1)
        return gamma * normed + beta


class _ResBlock1d(nn.Module):
    """Gated 1D residual block: conv -> GLU -> conv, additive skip."""

    def __init__(self, channels: int, dtype=torch.float32):
        super().__init__()
        self.conv1 = nn.Conv1d(channels, 2 * channels, 3, padding=1, dtype=dtype)
        self.conv2 = nn.Conv1d(channels, channels, 3, padding=1, dtype=dtype)

    def forward(self, x):
        h = F.glu(self.conv1(x), dim=1)
        return x + self.conv2(h)


class Generator(nn.Module):
    """80 x T in, 80 x T out, for T divisible by 4."""

    def __init__(self, config: GanConfig = GanConfig(), dtype=torch.float32):
        super().__init__()
        self.config = config
        c, d = config.base_channels, config.down_channels
        fq = config.bottleneck_freq
        self.in_conv = nn.Conv2d(1, 2 * c, 5, padding=2, dtype=dtype)
        self.down1 = nn.Conv2d(c, 2 * d, 4, stride=2, padding=1, dtype=dtype)
        self.tfan_d1 = TFAN(d, config.tfan_hidden, dtype=dtype)
        self.down2 = nn.Conv2d(d, 2 * d, 4, stride=2, padding=1, dtype=dtype)
        self.tfan_d2 = TFAN(d, config.tfan_hidden, dtype=dtype)
        self.to_1d = nn.Conv1d(d * fq, d, 1, dtype=dtype)
        self.res_blocks = nn.ModuleList(
            [_ResBlock1d(d, dtype=dtype) for _ in range(config.n_res_blocks)])
        self.to_2d = nn.Conv1d(d, d * fq, 1, dtype=dtype)
        self.up1 = nn.Conv2d(d, 8 * c, 3, padding=1, dtype=dtype)
        self.tfan_u1 = TFAN(2 * c, config.tfan_hidden, dtype=dtype)
        self.up2 = nn.Conv2d(2 * c, 8 * c, 3, padding=1, dtype=dtype)
        self.tfan_u2 = TFAN(2 * c, config.tfan_hidden, dtype=dtype)
        self.out_conv = nn.Conv2d(2 * c, 1, 5, padding=2, dtype=dtype)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        if mel.dim() == 3:
            mel = mel.unsqueeze(0)
        b, _, f, t = mel.shape
        if f != N_MELS:
            raise ValueError(f"expected {N_MELS} mel bins, got {f}")
        if t % 4 != 0:
            raise ValueError(f"time length {t} not divisible by 4; pad the input")
        src = mel
        h = F.glu(self.in_conv(mel), dim=1)
        h = self.tfan_d1(F.glu(self.down1(h), dim=1), src)
        h = self.tfan_d2(F.glu(self.down2(h), dim=1), src)
        h = h.reshape(b, -1, t // 4)
        h = self.to_1d(h)
        for block in self.res_blocks:
            h = block(h)
        h = self.to_2d(h)
        h = h.reshape(b, self.config.down_channels, self.config.bottleneck_freq, t // 4)
        h = F.pixel_shuffle(self.up1(h), 2)
        h = F.leaky_relu(self.tfan_u1(h, src), 0.2)
        h = F.pixel_shuffle(self.up2(h), 2)
        h = F.leaky_relu(self.tfan_u2(h, src), 0.2)
        return self.out_conv(h)


class Discriminator(nn.Module):
    """PatchGAN: four stride-2 convs with leaky-ReLU, then a 1-channel logit
    map. No pooling; inputs must be at least DISC_MIN_WIDTH frames wide."""

    def __init__(self, config: GanConfig = GanConfig(), dtype=torch.float32):
        super().__init__()
        c = config.disc_channels
        self.layers = nn.ModuleList([
            nn.Conv2d(1, c, 4, stride=2, padding=1, dtype=dtype),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1, dtype=dtype),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1, dtype=dtype),
            nn.Conv2d(4 * c, 8 * c, 4, stride=2, padding=1, dtype=dtype),
        ])
        self.out_conv = nn.Conv2d(8 * c, 1, 3, padding=1, dtype=dtype)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        if mel.dim() == 3:
            mel = mel.unsqueeze(0)
        if mel.shape[3] < DISC_MIN_WIDTH:
            raise ValueError(
                f"input width {mel.shape[3]} below receptive minimum {DISC_MIN_WIDTH}")
        h = mel
        for layer in self.layers:
            h = F.leaky_relu(layer(h), 0.2)
        return self.out_conv(h)


def init_params(model: nn.Module, seed: int) -> nn.Module:
    """Weights ~ N(0, 0.02), biases 0; deterministic given seed."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in sorted(model.named_parameters()):
            if name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64)
                        .to(p.dtype) * 0.02)
    return model


def save_checkpoint(model: nn.Module, path: str | Path, config: GanConfig,
                    seed: int, step: int) -> None:
    """One .npy file per named parameter plus a JSON manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in model.named_parameters():
        arr = p.detach().cpu().numpy()
        fname = name.replace(".", "__") + ".npy"
        np.save(path / fname, arr)
        entries.append({"name": name, "file": fname, "shape": list(arr.shape),
                        "dtype": str(arr.dtype)})
    manifest = {"params": entries, "config": config.__dict__, "seed": seed,
                "step": step, "model_class": type(model).__name__}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(path: str | Path, dtype=torch.float32):
    """Rebuild the model named in the manifest and load its parameters."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    config = GanConfig(**manifest["config"])
    cls = {"Generator": Generator, "Discriminator": Discriminator}[manifest["model_class"]]
    model = cls(config, dtype=dtype)
    state = {}
    for entry in manifest["params"]:
        arr = np.load(path / entry["file"])
        state[entry["name"]] = torch.from_numpy(arr).to(dtype)
    model.load_state_dict(state)
    return model, manifest
