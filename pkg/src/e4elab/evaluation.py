"""Quantitative protocols: distortion, distribution distances, LEC, equivariance.

Encoders and generators enter these functions as batch callables on numpy
arrays:

* ``encode_fn(images (n, H, W, 3)) -> stacks (n, k, d)``
* ``synthesize_fn(stacks (n, k, d)) -> images (n, H, W, 3)``

so the metrics never touch model parameters and can be checked against
hand-built encoders.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .editing import EditDirection, apply_edit, invert_edit
from .errors import InvalidArgument, NumericError, RangeError
from .latent_geometry import interpolate, variance_metric
from .objectives import Embedder
from .scenes import SceneSpec, apply_image_edit, render_array
from .toygen import images_to_tensor

EncodeFn = Callable[[np.ndarray], np.ndarray]
SynthFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class MetricReport:
    name: str
    value: float
    sample_count: int
    config_id: str = ""
    seed: int = 0

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise NumericError(f"metric {self.name} is not finite")
        if self.sample_count < 1:
            raise InvalidArgument("sample_count must be positive")


CSV_COLUMNS = ("metric", "value", "n", "config", "seed")


def reports_to_csv(reports: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        writer.writerow([r.name, repr(float(r.value)), r.sample_count, r.config_id, r.seed])
    return buf.getvalue()


def reports_from_csv(text: str) -> list[MetricReport]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [MetricReport(r["metric"], float(r["value"]), int(r["n"]), r["config"], int(r["seed"])) for r in rows]


def _embedder_dtype(emb: Embedder) -> torch.dtype:
    return next(emb.parameters()).dtype


def perceptual_distances(x: np.ndarray, x_hat: np.ndarray, emb: Embedder, batch: int = 256) -> np.ndarray:
    """Per-image deep-feature distance (the LPIPS proxy), float64."""
    from .objectives import lpips_proxy

    dt = _embedder_dtype(emb)
    a, b = images_to_tensor(x).to(dt), images_to_tensor(x_hat).to(dt)
    out = []
    with torch.no_grad():
        for i in range(0, a.shape[0], batch):
            out.append(lpips_proxy(a[i:i + batch], b[i:i + batch], emb))
    return torch.cat(out).double().numpy()


def embed(images: np.ndarray, emb: Embedder, batch: int = 512) -> np.ndarray:
    x = images_to_tensor(images).to(_embedder_dtype(emb))
    out = []
    with torch.no_grad():
        for i in range(0, x.shape[0], batch):
            out.append(emb(x[i:i + batch]))
    return torch.cat(out).double().numpy()


def distortion_metrics(x: np.ndarray, x_hat: np.ndarray, emb: Embedder) -> dict[str, float]:
    """Mean squared pixel error and mean perceptual-proxy distance over image pairs."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.ndim == 3:
        x, x_hat = x[None], x_hat[None]
    if x.shape != x_hat.shape or x.shape[0] == 0:
        raise InvalidArgument(f"need matching non-empty image batches, got {x.shape} and {x_hat.shape}")
    l2 = ((x - x_hat) ** 2).reshape(x.shape[0], -1).mean(axis=1)
    return {"l2": float(l2.mean()), "perceptual": float(perceptual_distances(x, x_hat, emb).mean())}


# -- distribution distances ---------------------------------------------------

def random_projections(dim: int, n_proj: int, seed: int) -> np.ndarray:
    """``(n_proj, dim)`` directions drawn uniformly from the unit sphere."""
    p = np.random.default_rng(seed).standard_normal((n_proj, dim))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def wasserstein_1d(a: np.ndarray, b: np.ndarray) -> float:
    """W1 between two 1-D samples by sorting.

    Equal sizes pair the order statistics directly. Otherwise both quantile
    functions are evaluated at the larger sample's mid-ranks, the smaller one
    by linear interpolation between its own mid-ranks.
    """
    a, b = np.sort(np.asarray(a, dtype=np.float64)), np.sort(np.asarray(b, dtype=np.float64))
    if a.size == b.size:
        return float(np.abs(a - b).mean())
    if a.size < b.size:
        a, b = b, a
    t = (np.arange(a.size) + 0.5) / a.size
    tb = (np.arange(b.size) + 0.5) / b.size
    return float(np.abs(a - np.interp(t, tb, b)).mean())


def swd_per_projection(feats_a, feats_b, n_proj: int = 128, seed: int = 0,
                       projections: np.ndarray | None = None) -> np.ndarray:
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise InvalidArgument("both feature sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise InvalidArgument(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    if projections is None:
        if n_proj < 1:
            raise InvalidArgument("n_proj must be >= 1")
        projections = random_projections(a.shape[1], n_proj, seed)
    pa, pb = a @ projections.T, b @ projections.T
    return np.array([wasserstein_1d(pa[:, j], pb[:, j]) for j in range(projections.shape[0])])


def swd(feats_a, feats_b, n_proj: int = 128, seed: int = 0, projections: np.ndarray | None = None) -> float:
    """Sliced Wasserstein-1 distance: mean 1-D W1 over random unit projections."""
    return float(swd_per_projection(feats_a, feats_b, n_proj, seed, projections).mean())


def _psd_eig(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    lam, vec = np.linalg.eigh(0.5 * (m + m.T))
    tol = 1e-6 * max(1.0, float(np.abs(lam).max()))
    if lam.min() < -tol:
        raise NumericError(f"{what} is not positive semidefinite (min eigenvalue {lam.min():.3e})")
    return np.clip(lam, 0.0, None), vec


def frechet_distance(feats_a, feats_b) -> float:
    """``|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2))`` with a symmetric eigen square root."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if a.shape[1] != b.shape[1]:
        raise InvalidArgument(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    dim = a.shape[1]
    if a.shape[0] < dim + 1 or b.shape[0] < dim + 1:
        raise InvalidArgument(f"each set needs at least {dim + 1} samples")
    mu1, mu2 = a.mean(axis=0), b.mean(axis=0)
    s1 = np.atleast_2d(np.cov(a, rowvar=False))
    s2 = np.atleast_2d(np.cov(b, rowvar=False))
    lam1, v1 = _psd_eig(s1, "first covariance")
    root1 = (v1 * np.sqrt(lam1)) @ v1.T
    lam_mid, _ = _psd_eig(root1 @ s2 @ root1, "covariance product")
    # Tr((S1 S2)^(1/2)) equals Tr((S1^(1/2) S2 S1^(1/2))^(1/2)), which is symmetric in the two sets.
    value = float(((mu1 - mu2) ** 2).sum() + np.trace(s1) + np.trace(s2) - 2.0 * np.sqrt(lam_mid).sum())
    return max(value, 0.0)


# -- editing-consistency protocols --------------------------------------------

def _edit_all(stacks: np.ndarray, direction: EditDirection, alpha: float) -> np.ndarray:
    return np.stack([apply_edit(s, direction, alpha) for s in stacks])


def _row_distances(a: np.ndarray, b: np.ndarray, what: str) -> np.ndarray:
    dist = np.linalg.norm((a - b).reshape(a.shape[0], -1), axis=1)
    bad = np.flatnonzero(~np.isfinite(dist))
    if bad.size:
        raise NumericError(f"non-finite {what} at sample {int(bad[0])}")
    return dist


def lec_per_sample(encode_fn: EncodeFn, synthesize_fn: SynthFn, direction: EditDirection,
                   alpha: float, images: np.ndarray) -> np.ndarray:
    """Per-image ``|E(x) - f^-1(E(G(f(E(x)))))|`` with stacks flattened."""
    images = np.asarray(images)
    if images.shape[0] == 0:
        raise InvalidArgument("empty dataset")
    codes = np.asarray(encode_fn(images), dtype=np.float64)
    edited = _edit_all(codes, direction, alpha)
    reencoded = np.asarray(encode_fn(synthesize_fn(edited)), dtype=np.float64)
    inv_dir, inv_alpha = invert_edit(direction, alpha)
    back = _edit_all(reencoded, inv_dir, inv_alpha)
    return _row_distances(codes, back, "LEC distance")


def lec(encode_fn: EncodeFn, synthesize_fn: SynthFn, direction: EditDirection, alpha: float,
        images: np.ndarray, seed: int = 0, n: int | None = None) -> float:
    """Latent editing consistency, averaged over ``images`` (or a seeded subset of ``n``)."""
    images = np.asarray(images)
    if n is not None and n < images.shape[0]:
        idx = np.sort(np.random.default_rng(seed).choice(images.shape[0], n, replace=False))
        images = images[idx]
    return float(lec_per_sample(encode_fn, synthesize_fn, direction, alpha, images).mean())


def equivariance_gap(encode_fn: EncodeFn, direction: EditDirection, alpha: float, attribute: str,
                     amount: float, specs: Sequence[SceneSpec], resolution: int,
                     return_skipped: bool = False):
    """Mean ``|f(E(x)) - E(F(x))|`` where ``F`` is the exact scene-field edit.

    Scenes whose edit leaves the field range are skipped; more than 20%
    skipped is an error.
    """
    if len(specs) == 0:
        raise InvalidArgument("empty dataset")
    kept, edited = [], []
    for spec in specs:
        try:
            edited.append(apply_image_edit(spec, attribute, amount).as_array())
        except RangeError:
            continue
        kept.append(spec.as_array())
    skipped = len(specs) - len(kept)
    if skipped > 0.2 * len(specs):
        raise InvalidArgument(f"{skipped} of {len(specs)} scene edits are infeasible (limit 20%)")
    x = render_array(np.array(kept), resolution)
    fx = render_array(np.array(edited), resolution)
    lhs = _edit_all(np.asarray(encode_fn(x), dtype=np.float64), direction, alpha)
    rhs = np.asarray(encode_fn(fx), dtype=np.float64)
    value = float(_row_distances(lhs, rhs, "equivariance distance").mean())
    return (value, skipped) if return_skipped else value


@dataclass(frozen=True)
class TradeoffRow:
    t: float
    l2: float
    perceptual: float
    fd_edit: float
    variation: float

    def as_dict(self) -> dict:
        return asdict(self)


def tradeoff_curve(stacks_a: np.ndarray, stacks_d: np.ndarray, synthesize_fn: SynthFn,
                   direction: EditDirection, alpha: float, images: np.ndarray, emb: Embedder,
                   t_grid: Sequence[float]) -> list[TradeoffRow]:
    """Distortion and edited-image FD-toy along the segment between two inversions.

    ``stacks_a`` and ``stacks_d`` are the two encoders' inversions of
    ``images``; ``t = 0`` is the first encoder and ``t = 1`` the second.
    """
    t_grid = [float(t) for t in t_grid]
    if any(b < a for a, b in zip(t_grid, t_grid[1:])) or any(not 0 <= t <= 1 for t in t_grid):
        raise InvalidArgument("t_grid must be sorted and inside [0, 1]")
    real_feats = embed(images, emb)
    rows = []
    for t in t_grid:
        stacks = np.stack([interpolate(a, d, t) for a, d in zip(stacks_a, stacks_d)])
        recon = synthesize_fn(stacks)
        dist = distortion_metrics(images, recon, emb)
        edited = synthesize_fn(_edit_all(stacks, direction, alpha))
        fd = frechet_distance(real_feats, embed(edited, emb))
        var = float(np.mean([variance_metric(s) for s in stacks]))
        rows.append(TradeoffRow(t, dist["l2"], dist["perceptual"], fd, var))
    return rows
