"""Training losses, the latent discriminator and the toy feature embedder.

Loss functions take batched tensors and return scalar tensors (or a scalar
plus a dict of detached float components for logging). Discriminators emit
raw logits; the sigmoid lives inside the losses.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import EncoderOutput, final_codes
from .errors import InvalidArgument, TrainingError


@dataclass(frozen=True)
class LossWeights:
    lambda_l2: float = 1.0
    lambda_lpips: float = 0.8
    lambda_sim: float = 0.5
    lambda_dreg: float = 2e-4
    lambda_adv: float = 0.1
    lambda_edit: float = 1.0
    r1_gamma: float = 10.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (math.isfinite(value) and value >= 0):
                raise InvalidArgument(f"{name}: loss weight must be finite and >= 0, got {value}")

    def to_dict(self) -> dict:
        return asdict(self)


class LatentDiscriminator(nn.Module):
    """4-layer MLP on single style codes, LeakyReLU(0.2) between layers."""

    def __init__(self, latent_dim: int = 64, hidden: int = 256):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(latent_dim, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, 1),
        )

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        return self.net(w).squeeze(-1)


class Embedder(nn.Module):
    """Small conv net producing unit-norm 64-d embeddings and 3 feature maps."""

    def __init__(self, dim: int = 64, widths: tuple[int, int, int] = (32, 64, 64)):
        super().__init__()
        c1, c2, c3 = widths
        self.stages = nn.ModuleList([
            nn.Sequential(nn.Conv2d(3, c1, 3, padding=1), nn.LeakyReLU(0.2)),
            nn.Sequential(nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.LeakyReLU(0.2)),
            nn.Sequential(nn.Conv2d(c2, c3, 3, stride=2, padding=1), nn.LeakyReLU(0.2)),
        ])
        self.head = nn.Sequential(nn.Linear(c3, c3), nn.LeakyReLU(0.2), nn.Linear(c3, dim))

    def feature_maps(self, x: torch.Tensor) -> list[torch.Tensor]:
        maps = []
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return maps

    def embed_from_maps(self, maps: list[torch.Tensor]) -> torch.Tensor:
        return F.normalize(self.head(maps[-1].mean(dim=(2, 3))), dim=1, eps=1e-12)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.embed_from_maps(self.feature_maps(x))


def _frozen(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


def delta_reg_loss(out: EncoderOutput) -> torch.Tensor:
    """Sum of offset Euclidean norms, averaged over the batch."""
    # Locked offsets are exact zeros; keep them out of the sqrt so the gradient stays finite.
    if out.active_count == 0:
        return out.deltas.sum() * 0.0
    active = out.deltas[:, : out.active_count]
    return active.norm(dim=2).sum(dim=1).mean()


def lpips_proxy(x: torch.Tensor, x_hat: torch.Tensor, emb: Embedder,
                maps_x: list[torch.Tensor] | None = None) -> torch.Tensor:
    """Per-image deep-feature distance: channel-normalized maps, squared diff, spatial mean, summed."""
    maps_x = emb.feature_maps(x) if maps_x is None else maps_x
    maps_y = emb.feature_maps(x_hat)
    return _map_distance(maps_x, maps_y)


def _map_distance(maps_x, maps_y) -> torch.Tensor:
    total = 0.0
    for a, b in zip(maps_x, maps_y):
        a = F.normalize(a, dim=1, eps=1e-10)
        b = F.normalize(b, dim=1, eps=1e-10)
        total = total + (a - b).pow(2).sum(dim=1).mean(dim=(1, 2))
    return total


def sim_loss(x: torch.Tensor, x_hat: torch.Tensor, emb: Embedder) -> torch.Tensor:
    """``1 - <C(x), C(x_hat)>`` averaged over the batch."""
    return (1.0 - (emb(x) * emb(x_hat)).sum(dim=1)).mean()


def distortion_loss(x: torch.Tensor, x_hat: torch.Tensor, emb: Embedder,
                    weights: LossWeights) -> tuple[torch.Tensor, dict[str, float]]:
    if x.shape != x_hat.shape:
        raise InvalidArgument(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    l2 = (x_hat - x).pow(2).mean()
    maps_x, maps_y = emb.feature_maps(x), emb.feature_maps(x_hat)
    lp = _map_distance(maps_x, maps_y).mean()
    sim = (1.0 - (emb.embed_from_maps(maps_x) * emb.embed_from_maps(maps_y)).sum(dim=1)).mean()
    total = weights.lambda_l2 * l2 + weights.lambda_lpips * lp + weights.lambda_sim * sim
    return total, {"l2": float(l2.detach()), "lpips": float(lp.detach()), "sim": float(sim.detach())}


def nonsaturating_d_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> torch.Tensor:
    """``-E log sigmoid(real) - E log(1 - sigmoid(fake))``."""
    return F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()


def r1_penalty(real_inputs: torch.Tensor, real_logits: torch.Tensor, gamma: float) -> torch.Tensor:
    """``gamma/2 * E |grad_x D(x)|^2``; ``real_inputs`` must require grad."""
    (grad,) = torch.autograd.grad(real_logits.sum(), real_inputs, create_graph=True)
    return 0.5 * gamma * grad.pow(2).flatten(1).sum(dim=1).mean()


def discriminator_loss(real_w: torch.Tensor, fake_stacks: torch.Tensor, disc: nn.Module,
                       gamma: float) -> tuple[torch.Tensor, dict[str, float]]:
    """Latent-discriminator objective; fakes are averaged over every stack entry."""
    if real_w.shape[0] == 0 or fake_stacks.shape[0] == 0:
        raise InvalidArgument("empty batch")
    fake = fake_stacks.detach().reshape(-1, fake_stacks.shape[-1])
    real = real_w.detach().requires_grad_(gamma > 0)
    real_logits = disc(real)
    adv = nonsaturating_d_loss(real_logits, disc(fake))
    r1 = r1_penalty(real, real_logits, gamma) if gamma > 0 else adv.new_zeros(())
    return adv + r1, {"adv_d": float(adv.detach()), "r1": float(r1.detach())}


def encoder_adv_loss(fake_stacks: torch.Tensor, disc: nn.Module) -> torch.Tensor:
    """``-E log sigmoid(D(E(x)_i))`` over every entry of every stack."""
    if fake_stacks.shape[0] == 0:
        raise InvalidArgument("empty batch")
    return F.softplus(-disc(fake_stacks.reshape(-1, fake_stacks.shape[-1]))).mean()


def total_loss(x: torch.Tensor, out: EncoderOutput, x_hat: torch.Tensor, disc: nn.Module | None,
               emb: Embedder, weights: LossWeights, *, use_dreg: bool = True,
               ) -> tuple[torch.Tensor, dict[str, float]]:
    """Distortion plus ``lambda_edit * (lambda_dreg * L_dreg + lambda_adv * L_adv)``.

    Passing ``disc=None`` or ``use_dreg=False`` removes that term from the
    graph entirely (it is then reported as 0).
    """
    total, parts = distortion_loss(x, x_hat, emb, weights)
    edit = None
    parts["dreg"] = 0.0
    parts["adv_e"] = 0.0
    if use_dreg:
        dreg = delta_reg_loss(out)
        edit = weights.lambda_dreg * dreg
        parts["dreg"] = float(dreg.detach())
    if disc is not None:
        adv = encoder_adv_loss(final_codes(out), disc)
        edit = weights.lambda_adv * adv if edit is None else edit + weights.lambda_adv * adv
        parts["adv_e"] = float(adv.detach())
    if edit is not None:
        total = total + weights.lambda_edit * edit
    parts["total"] = float(total.detach())
    return total, parts


def augment(x: torch.Tensor, gen: torch.Generator, max_shift: int = 2) -> torch.Tensor:
    """Random integer translation (edge padded) and horizontal flip, per image."""
    n, _, h, w = x.shape
    pad = F.pad(x, (max_shift,) * 4, mode="replicate")
    shifts = torch.randint(0, 2 * max_shift + 1, (n, 2), generator=gen)
    flips = torch.rand(n, generator=gen) < 0.5
    out = torch.empty_like(x)
    for i in range(n):
        dy, dx = int(shifts[i, 0]), int(shifts[i, 1])
        crop = pad[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop.flip(-1) if flips[i] else crop
    return out


def info_nce(z1: torch.Tensor, z2: torch.Tensor, temperature: float = 0.2) -> torch.Tensor:
    n = z1.shape[0]
    z = torch.cat([z1, z2])
    logits = z @ z.t() / temperature
    logits = logits.masked_fill(torch.eye(2 * n, dtype=torch.bool), float("-inf"))
    target = torch.cat([torch.arange(n, 2 * n), torch.arange(n)])
    return F.cross_entropy(logits, target)


def train_embedder(images: torch.Tensor, seed: int, steps: int = 1500, batch_size: int = 128,
                   lr: float = 1e-3, dim: int = 64, log=None) -> Embedder:
    """Contrastive training: positives are two augmentations of one image, negatives the rest of the batch."""
    if images.shape[0] < 256:
        raise InvalidArgument(f"embedder training needs >= 256 images, got {images.shape[0]}")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    emb = Embedder(dim)
    opt = torch.optim.Adam(emb.parameters(), lr=lr)
    for step in range(steps):
        idx = torch.randint(0, images.shape[0], (batch_size,), generator=gen)
        x = images[idx]
        loss = info_nce(emb(augment(x, gen)), emb(augment(x, gen)))
        if not torch.isfinite(loss):
            raise TrainingError(f"embedder loss became non-finite at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if log is not None and step % 100 == 0:
            log({"step": step, "nce": float(loss.detach())})
    return _frozen(emb)


def embed_images(emb: Embedder, x: torch.Tensor, batch: int = 512) -> np.ndarray:
    """Embedder outputs as float64 numpy, computed without gradients."""
    outs = []
    with torch.no_grad():
        for i in range(0, x.shape[0], batch):
            outs.append(emb(x[i:i + batch]))
    return torch.cat(outs).double().numpy()
