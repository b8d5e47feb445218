"""Procedural single-ellipse scenes with ground-truth attributes.

Each scene is one rotated, colored ellipse on a dark gray background. Every
attribute is a plain number, so an image-space edit is just a field shift on
the scene description followed by re-rendering. That makes the equivariance
gap exactly computable on this domain.

Geometry conventions: ``cx`` is the horizontal (column) position and ``cy``
the vertical (row) position, both as fractions of the frame. The ellipse has
semi-axes ``radius * sqrt(elongation)`` along its rotated x-axis and
``radius / sqrt(elongation)`` across it, so its area is always
``pi * radius**2``. The ellipse color is HSV ``(hue, 1, 1)``; the background
gray level is ``background_shade`` (on a 0..1 intensity scale). Images are
``H x W x 3`` float arrays in ``[-1, 1]``.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .errors import InvalidArgument, RangeError

RENDERER_VERSION = "ellipse-v1"
SUPERSAMPLE = 4

FIELD_RANGES: dict[str, tuple[float, float]] = {
    "cx": (0.2, 0.8),
    "cy": (0.2, 0.8),
    "radius": (0.08, 0.25),
    "hue": (0.0, 2 * math.pi),
    "elongation": (0.5, 2.0),
    "rotation": (0.0, math.pi),
    "background_shade": (0.0, 0.3),
}
FIELD_NAMES = tuple(FIELD_RANGES)
# Half-open upper bounds for the angle fields.
_OPEN_UPPER = {"hue", "rotation"}
THRESHOLDS = {name: 0.5 * (lo + hi) for name, (lo, hi) in FIELD_RANGES.items()}


def _in_range(name: str, value: float) -> bool:
    lo, hi = FIELD_RANGES[name]
    if not math.isfinite(value) or value < lo:
        return False
    return value < hi if name in _OPEN_UPPER else value <= hi


@dataclass(frozen=True)
class SceneSpec:
    cx: float = 0.5
    cy: float = 0.5
    radius: float = 0.15
    hue: float = 0.0
    elongation: float = 1.0
    rotation: float = 0.0
    background_shade: float = 0.1

    def validate(self) -> "SceneSpec":
        for f in fields(self):
            value = getattr(self, f.name)
            if not _in_range(f.name, value):
                lo, hi = FIELD_RANGES[f.name]
                raise InvalidArgument(f"{f.name}={value} outside [{lo}, {hi}]")
        return self

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FIELD_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "SceneSpec":
        return cls(**{n: float(v) for n, v in zip(FIELD_NAMES, values)})

    def labels(self) -> dict[str, int]:
        return {n: (1 if getattr(self, n) > THRESHOLDS[n] else -1) for n in FIELD_NAMES}


@dataclass(frozen=True)
class LabeledImage:
    image: np.ndarray
    spec: SceneSpec
    binary_labels: dict[str, int]


def hsv_hue_to_rgb(hue: np.ndarray) -> np.ndarray:
    """Fully saturated, full-value RGB in [0, 1] for hue angles in radians."""
    h = np.mod(np.asarray(hue, dtype=np.float64) / (2 * math.pi), 1.0) * 6.0
    k = np.mod(np.array([5.0, 3.0, 1.0]) + h[..., None], 6.0)
    return 1.0 - np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


def _coverage(specs: np.ndarray, resolution: int) -> np.ndarray:
    """Box-filtered ellipse coverage, shape ``(n, resolution, resolution)``."""
    n = specs.shape[0]
    fine = resolution * SUPERSAMPLE
    coords = (np.arange(fine) + 0.5) / fine
    cx, cy, r, _, e, rot, _ = (specs[:, i][:, None, None] for i in range(7))
    dx = coords[None, None, :] - cx
    dy = coords[None, :, None] - cy
    c, s = np.cos(rot), np.sin(rot)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    a = r * np.sqrt(e)
    b = r / np.sqrt(e)
    inside = ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.float64)
    return inside.reshape(n, resolution, SUPERSAMPLE, resolution, SUPERSAMPLE).mean(axis=(2, 4))


def render_array(specs: np.ndarray, resolution: int = 32, chunk: int = 256) -> np.ndarray:
    """Render an ``(n, 7)`` array of scene fields (``FIELD_NAMES`` order) to ``(n, H, W, 3)``."""
    specs = np.atleast_2d(np.asarray(specs, dtype=np.float64))
    out = np.empty((specs.shape[0], resolution, resolution, 3), dtype=np.float64)
    for start in range(0, specs.shape[0], chunk):
        part = specs[start:start + chunk]
        cov = _coverage(part, resolution)[..., None]
        fg = hsv_hue_to_rgb(part[:, 3])[:, None, None, :]
        bg = part[:, 6][:, None, None, None]
        out[start:start + chunk] = 2.0 * (cov * fg + (1.0 - cov) * bg) - 1.0
    return out


def render(spec: SceneSpec, resolution: int = 32) -> np.ndarray:
    spec.validate()
    return render_array(spec.as_array()[None], resolution)[0]


def sample_specs(n: int, seed: int) -> np.ndarray:
    """Uniformly sampled scene fields, shape ``(n, 7)``."""
    if int(n) != n or n < 1:
        raise InvalidArgument(f"n must be a positive integer, got {n}")
    rng = np.random.default_rng(seed)
    lo = np.array([FIELD_RANGES[f][0] for f in FIELD_NAMES])
    hi = np.array([FIELD_RANGES[f][1] for f in FIELD_NAMES])
    return lo + (hi - lo) * rng.random((int(n), len(FIELD_NAMES)))


def labels_array(specs: np.ndarray) -> np.ndarray:
    thr = np.array([THRESHOLDS[f] for f in FIELD_NAMES])
    return np.where(np.asarray(specs) > thr, 1, -1).astype(np.int8)


def sample_dataset(n: int, seed: int, resolution: int = 32) -> list[LabeledImage]:
    specs = sample_specs(n, seed)
    images = render_array(specs, resolution)
    out = []
    for row, img in zip(specs, images):
        spec = SceneSpec.from_array(row)
        out.append(LabeledImage(image=img, spec=spec, binary_labels=spec.labels()))
    return out


def apply_image_edit(spec: SceneSpec, attribute: str, amount: float) -> SceneSpec:
    """Shift one scene field by ``amount``; the inverse edit is ``-amount``."""
    if attribute not in FIELD_RANGES:
        raise InvalidArgument(f"unknown scene attribute {attribute!r}")
    if amount == 0:
        return spec
    value = getattr(spec, attribute) + amount
    if not _in_range(attribute, value):
        lo, hi = FIELD_RANGES[attribute]
        raise RangeError(f"{attribute}={value} outside [{lo}, {hi}] after edit")
    return replace(spec, **{attribute: value})


def foreground_mask(image: np.ndarray) -> np.ndarray:
    """Soft foreground weight per pixel, from chroma (background is achromatic)."""
    img01 = (np.asarray(image) + 1.0) / 2.0
    chroma = img01.max(axis=-1) - img01.min(axis=-1)
    return np.clip(chroma, 0.0, 1.0)


def foreground_pixel_count(image: np.ndarray, threshold: float = 0.5) -> int:
    return int((foreground_mask(image) > threshold).sum())


def estimate_attributes(images: np.ndarray) -> dict[str, np.ndarray]:
    """Recover scene fields from (real or generated) images by image moments.

    Works on a batch ``(n, H, W, 3)``. Returns ``cx``, ``cy``, ``radius``,
    ``hue``, ``background_shade`` and, up to the elongation/rotation
    ambiguity of an ellipse, ``elongation`` (always >= 1) and ``rotation``
    of the major axis. Images without foreground get NaN geometry.
    """
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[None]
    n, h, w, _ = imgs.shape
    m = foreground_mask(imgs)
    mass = m.sum(axis=(1, 2))
    safe = np.where(mass > 0, mass, np.nan)
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    cx = (m * xs[None, None, :]).sum(axis=(1, 2)) / safe
    cy = (m * ys[None, :, None]).sum(axis=(1, 2)) / safe
    dx = xs[None, None, :] - cx[:, None, None]
    dy = ys[None, :, None] - cy[:, None, None]
    sxx = (m * dx * dx).sum(axis=(1, 2)) / safe
    syy = (m * dy * dy).sum(axis=(1, 2)) / safe
    sxy = (m * dx * dy).sum(axis=(1, 2)) / safe
    tr, det = sxx + syy, sxx * syy - sxy ** 2
    disc = np.sqrt(np.maximum(tr ** 2 / 4 - det, 0.0))
    l1, l2 = tr / 2 + disc, np.maximum(tr / 2 - disc, 1e-12)
    rotation = np.mod(0.5 * np.arctan2(2 * sxy, sxx - syy), math.pi)
    radius = np.sqrt(mass / (h * w) / math.pi)

    img01 = (imgs + 1.0) / 2.0
    # Blending with an achromatic background leaves the hexcone hue unchanged,
    # so any chroma-weighted mean color carries the foreground hue.
    mean_rgb = (img01 * m[..., None]).sum(axis=(1, 2)) / safe[:, None]
    hue = _rgb_to_hue(mean_rgb)
    weak = (m < 0.1)[..., None]
    bg = (img01 * weak).sum(axis=(1, 2, 3)) / np.maximum(weak.sum(axis=(1, 2, 3)) * 3, 1)
    return {
        "cx": cx, "cy": cy, "radius": radius, "hue": hue,
        "elongation": np.sqrt(l1 / l2), "rotation": rotation, "background_shade": bg,
    }


def _rgb_to_hue(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    # atan2 form of the hexcone hue; red = 0, green = 2pi/3, blue = 4pi/3.
    return np.mod(np.arctan2(math.sqrt(3) * (g - b), 2 * r - g - b), 2 * math.pi)


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(255.0 * (np.asarray(image) + 1.0) / 2.0), 0, 255).astype(np.uint8)


def save_png(image: np.ndarray, path: str) -> None:
    from PIL import Image as PILImage

    PILImage.fromarray(_to_uint8(image), mode="RGB").save(path)


def export_dataset(items: list[LabeledImage], out_dir: str, seed: int) -> str:
    """Write PNGs plus ``manifest.json``; returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i, item in enumerate(items):
        name = f"{i:06d}.png"
        save_png(item.image, os.path.join(out_dir, name))
        entries.append({"file": name, "spec": asdict(item.spec), "labels": item.binary_labels})
    manifest = {
        "renderer_version": RENDERER_VERSION,
        "seed": seed,
        "resolution": int(items[0].image.shape[0]) if items else None,
        "thresholds": THRESHOLDS,
        "field_ranges": {k: list(v) for k, v in FIELD_RANGES.items()},
        "images": entries,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return path
