"""The e4e encoder: one base style code plus progressively unlocked offsets.

The encoder predicts ``w`` and offsets ``delta_1 .. delta_{N-1}``; the style
stack fed to the generator is ``(w, w + delta_1, ..., w + delta_{N-1})``.
Offset ``i`` only becomes trainable once the progressive schedule has unlocked
it. Locked heads are never evaluated, so their outputs are exact zeros and
their parameters receive no gradient at all.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import InvalidArgument


@dataclass(frozen=True)
class ProgressiveSchedule:
    warmup_steps: int = 2000
    unlock_interval: int = 500

    def __post_init__(self):
        if int(self.warmup_steps) != self.warmup_steps or self.warmup_steps < 0:
            raise InvalidArgument("warmup_steps must be a nonnegative integer")
        if int(self.unlock_interval) != self.unlock_interval or self.unlock_interval < 1:
            raise InvalidArgument("unlock_interval must be a positive integer")

    def to_dict(self) -> dict:
        return asdict(self)


def active_deltas(step: int, sched: ProgressiveSchedule, num_deltas: int) -> int:
    """Number of unlocked offsets at ``step``; the first one unlocks at ``step == warmup``."""
    if step < sched.warmup_steps:
        return 0
    return min(num_deltas, 1 + (step - sched.warmup_steps) // sched.unlock_interval)


@dataclass
class EncoderOutput:
    base: torch.Tensor  # (n, d)
    deltas: torch.Tensor  # (n, N-1, d); row j is the offset of layer j + 1
    active_count: int

    def final_codes(self) -> torch.Tensor:
        return final_codes(self)


def final_codes(out: EncoderOutput) -> torch.Tensor:
    """``(n, N, d)`` stack with row 0 = base and row i = base + delta_i."""
    base = out.base.unsqueeze(1)
    return torch.cat([base, base + out.deltas], dim=1)


@dataclass(frozen=True)
class EncoderConfig:
    latent_dim: int = 64
    num_layers: int = 6
    resolution: int = 32
    widths: tuple[int, ...] = (32, 64, 128, 256)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


class E4EEncoder(nn.Module):
    def __init__(self, config: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.config = config
        layers, c = [], 3
        for width in config.widths:
            layers += [nn.Conv2d(c, width, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c = width
        self.backbone = nn.Sequential(*layers)
        self.base_head = nn.Linear(c, config.latent_dim)
        self.offset_heads = nn.ModuleList(nn.Linear(c, config.latent_dim) for _ in range(config.num_layers - 1))
        for head in self.offset_heads:
            # Newly unlocked offsets start at exactly zero.
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
        self.register_buffer("w_avg", torch.zeros(config.latent_dim))

    @property
    def num_deltas(self) -> int:
        return len(self.offset_heads)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x).mean(dim=(2, 3))

    def forward(self, x: torch.Tensor, active_count: int) -> EncoderOutput:
        r = self.config.resolution
        if x.ndim != 4 or tuple(x.shape[1:]) != (3, r, r):
            raise InvalidArgument(f"expected images of shape (n, 3, {r}, {r}), got {tuple(x.shape)}")
        if not 0 <= active_count <= self.num_deltas:
            raise InvalidArgument(f"active_count must lie in [0, {self.num_deltas}], got {active_count}")
        feat = self.features(x)
        base = self.base_head(feat) + self.w_avg
        deltas = []
        for j, head in enumerate(self.offset_heads):
            if j < active_count:
                deltas.append(head(feat))
            else:
                deltas.append(torch.zeros_like(base))
        return EncoderOutput(base=base, deltas=torch.stack(deltas, dim=1), active_count=active_count)

    def encode(self, x: torch.Tensor, active_count: int | None = None) -> torch.Tensor:
        """Convenience: images -> final ``(n, N, d)`` stacks (all offsets unless told otherwise)."""
        n = self.num_deltas if active_count is None else active_count
        return final_codes(self(x, n))


def encode_images(enc: E4EEncoder, images, active_count: int | None = None, batch: int = 256) -> np.ndarray:
    """Numpy ``(n, H, W, 3)`` images -> float64 ``(n, N, d)`` stacks, without gradients."""
    from .toygen import images_to_tensor

    x = images_to_tensor(images).to(next(enc.parameters()).dtype)
    outs = []
    with torch.no_grad():
        for i in range(0, x.shape[0], batch):
            outs.append(enc.encode(x[i:i + batch], active_count))
    return torch.cat(outs).double().numpy()
