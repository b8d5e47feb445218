"""A miniature style-based generator.

The mapping network sends ``z ~ N(0, I)`` to a style code ``w``. The synthesis
network starts from a learned 4x4 constant and runs ``k`` style blocks, each
modulated only by its own row of the style-code stack::

    [upsample] -> instance-norm -> (1 + scale(w_i)) * x + shift(w_i) -> conv3x3 -> lrelu

Upsampling happens at every second block (odd indices) until the target
resolution is reached; a final unmodulated 1x1 convolution produces RGB.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .editing import EditDirection, canonical_sign
from .errors import InvalidArgument, NumericError


@dataclass(frozen=True)
class GeneratorConfig:
    z_dim: int = 32
    latent_dim: int = 64
    num_layers: int = 6
    resolution: int = 32
    channels: int = 32
    mapping_layers: int = 3

    def block_resolutions(self) -> list[int]:
        res, out = 4, []
        for i in range(self.num_layers):
            if i % 2 == 1 and res < self.resolution:
                res *= 2
            out.append(res)
        if res != self.resolution:
            raise InvalidArgument(
                f"{self.num_layers} style layers cannot reach resolution {self.resolution}"
            )
        return out

    def block_channels(self, res: int) -> int:
        # Halve the width at 32x32 and above; that is where most of the compute goes.
        return self.channels if res <= 16 else max(self.channels // 2, 4)

    def to_dict(self) -> dict:
        return asdict(self)


def _kaiming(layer: nn.Module, slope: float = 0.2) -> nn.Module:
    nn.init.kaiming_normal_(layer.weight, a=slope, nonlinearity="leaky_relu")
    nn.init.zeros_(layer.bias)
    return layer


class MappingNetwork(nn.Module):
    def __init__(self, z_dim: int, latent_dim: int, num_layers: int = 3):
        super().__init__()
        dims = [z_dim] + [latent_dim] * num_layers
        self.layers = nn.ModuleList(_kaiming(nn.Linear(a, b)) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = z
        for layer in self.layers:
            x = F.leaky_relu(layer(x), 0.2)
        return x


class StyleBlock(nn.Module):
    def __init__(self, latent_dim: int, in_ch: int, out_ch: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.affine = nn.Linear(latent_dim, 2 * in_ch)
        nn.init.normal_(self.affine.weight, std=1.0 / math.sqrt(latent_dim))
        nn.init.zeros_(self.affine.bias)
        self.conv = _kaiming(nn.Conv2d(in_ch, out_ch, 3, padding=1))

    def forward(self, x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        scale, shift = self.affine(w).chunk(2, dim=1)
        x = F.instance_norm(x) * (1 + scale[..., None, None]) + shift[..., None, None]
        return F.leaky_relu(self.conv(x), 0.2)


class ToyGenerator(nn.Module):
    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config
        self.mapping = MappingNetwork(config.z_dim, config.latent_dim, config.mapping_layers)
        resolutions = config.block_resolutions()
        in_ch = config.block_channels(4)
        self.const = nn.Parameter(torch.randn(1, in_ch, 4, 4))
        blocks, prev = [], 4
        for res in resolutions:
            out_ch = config.block_channels(res)
            blocks.append(StyleBlock(config.latent_dim, in_ch, out_ch, upsample=res > prev))
            in_ch, prev = out_ch, res
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = nn.Conv2d(in_ch, 3, 1)
        nn.init.normal_(self.to_rgb.weight, std=0.1)
        nn.init.zeros_(self.to_rgb.bias)

    @property
    def num_layers(self) -> int:
        return len(self.blocks)

    def synthesize(self, ws: torch.Tensor, check_finite: bool = True) -> torch.Tensor:
        """Style-code stacks ``(n, k, d)`` -> images ``(n, 3, H, W)``."""
        k, d = self.num_layers, self.config.latent_dim
        if ws.ndim != 3 or ws.shape[1:] != (k, d):
            raise InvalidArgument(f"expected stacks of shape (n, {k}, {d}), got {tuple(ws.shape)}")
        x = self.const.expand(ws.shape[0], -1, -1, -1)
        for i, block in enumerate(self.blocks):
            x = block(x, ws[:, i])
            if check_finite and not torch.isfinite(x).all():
                raise NumericError(f"non-finite activation after style layer {i}")
        return self.to_rgb(x)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        w = self.mapping(z)
        return self.synthesize(w.unsqueeze(1).expand(-1, self.num_layers, -1))


def images_to_tensor(images) -> torch.Tensor:
    """``(n, H, W, 3)`` or ``(H, W, 3)`` arrays -> float32 ``(n, 3, H, W)``."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def tensor_to_images(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().double().numpy().transpose(0, 2, 3, 1)


def _param_dtype(gen: nn.Module) -> torch.dtype:
    return next(gen.parameters()).dtype


def map_latent(z, gen: ToyGenerator) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (gen.config.z_dim,):
        raise InvalidArgument(f"z must have shape ({gen.config.z_dim},), got {z.shape}")
    with torch.no_grad():
        w = gen.mapping(torch.as_tensor(z, dtype=_param_dtype(gen))[None])[0]
    return w.double().numpy()


def synthesize(stack, gen: ToyGenerator) -> np.ndarray:
    """A single ``(k, d)`` stack -> one ``(H, W, 3)`` image."""
    s = torch.as_tensor(np.asarray(stack), dtype=_param_dtype(gen))
    if s.ndim != 2:
        raise InvalidArgument(f"expected a (k, d) stack, got shape {tuple(s.shape)}")
    with torch.no_grad():
        x = gen.synthesize(s[None])
    return tensor_to_images(x)[0]


def sample_z(n: int, z_dim: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n, z_dim))


def sample_w(n: int, gen: ToyGenerator, seed: int, batch: int = 1024) -> np.ndarray:
    """``n`` mapper outputs for i.i.d. standard-normal noise, shape ``(n, d)``."""
    if int(n) != n or n < 1:
        raise InvalidArgument(f"n must be a positive integer, got {n}")
    z = torch.as_tensor(sample_z(int(n), gen.config.z_dim, seed), dtype=_param_dtype(gen))
    with torch.no_grad():
        parts = [gen.mapping(z[i:i + batch]) for i in range(0, z.shape[0], batch)]
    return torch.cat(parts).double().numpy()


def sefa_from_weight(weight, m: int) -> tuple[list[np.ndarray], np.ndarray]:
    """Top-``m`` unit eigenvectors of ``A^T A`` and their eigenvalues, descending.

    Exactly tied eigenvalues are ordered by the position of each vector's
    largest-magnitude coordinate; every vector has that coordinate positive.
    """
    a = np.asarray(weight, dtype=np.float64)
    d = a.shape[1]
    if int(m) != m or not 1 <= m <= d:
        raise InvalidArgument(f"m must lie in [1, {d}], got {m}")
    lam, vecs = np.linalg.eigh(a.T @ a)
    vecs = np.stack([canonical_sign(vecs[:, j]) for j in range(d)], axis=1)
    scale = max(float(np.abs(lam).max()), 1e-300)
    lead = np.argmax(np.abs(vecs), axis=0)
    order = sorted(range(d), key=lambda j: (-round(lam[j] / scale, 10), lead[j]))[: int(m)]
    return [vecs[:, j].copy() for j in order], lam[order]


def sefa_directions(gen: ToyGenerator, m: int) -> list[EditDirection]:
    weight = gen.blocks[0].affine.weight.detach().double().numpy()
    vecs, _ = sefa_from_weight(weight, m)
    k = gen.num_layers
    return [EditDirection(v=v, method="sefa", name=str(i), layer_range=(0, k - 1)) for i, v in enumerate(vecs)]
