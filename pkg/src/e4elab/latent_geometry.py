"""Latent-space taxonomy and proximity-to-W measurements.

A single style code ``w`` is a length-``d`` vector. A style-code stack is a
``(k, d)`` array holding one code per modulation layer. Stacks whose rows are
all equal lie on the "diagonal" of the extended space; rows that also come
from the mapping network make the stack a point of W itself.

All functions here are pure: they never modify their inputs and always
compute in float64.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidArgument, NumericError

__all__ = [
    "ProximityReport",
    "as_code",
    "as_stack",
    "replicate",
    "mean_code",
    "variance_metric",
    "interpolate",
    "roundtrip_deviation",
    "stack_to_bytes",
    "stack_from_bytes",
]


@dataclass(frozen=True)
class ProximityReport:
    variation: float
    roundtrip_deviation: float
    sample_count: int

    def __post_init__(self):
        for name in ("variation", "roundtrip_deviation"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise InvalidArgument(f"{name} must be finite and >= 0, got {v}")
        if self.sample_count < 1:
            raise InvalidArgument("sample_count must be positive")


def as_code(w) -> np.ndarray:
    """Validate and copy a single style code as a float64 vector."""
    arr = np.array(w, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvalidArgument(f"a latent code must be a non-empty vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument("latent code has non-finite entries")
    return arr


def as_stack(s) -> np.ndarray:
    """Validate and copy a ``(k, d)`` style-code stack as float64."""
    arr = np.array(s, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidArgument(f"a style-code stack must have shape (k, d), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument("style-code stack has non-finite entries")
    return arr


def replicate(w, k: int) -> np.ndarray:
    """Stack ``k`` identical copies of ``w``."""
    if int(k) != k or k < 1:
        raise InvalidArgument(f"k must be a positive integer, got {k}")
    w = as_code(w)
    return np.tile(w, (int(k), 1))


def mean_code(s) -> np.ndarray:
    # Centering on row 0 keeps the mean of identical rows bitwise equal to that row.
    s = as_stack(s)
    return s[0] + (s - s[0]).mean(axis=0)


def variance_metric(s) -> float:
    """Euclidean norm of ``s`` minus its mean code replicated over all layers."""
    s = as_stack(s)
    return float(np.linalg.norm((s - mean_code(s)).ravel()))


def interpolate(a, b, t: float) -> np.ndarray:
    a, b = as_stack(a), as_stack(b)
    if a.shape != b.shape:
        raise InvalidArgument(f"stack shapes differ: {a.shape} vs {b.shape}")
    if not (0.0 <= t <= 1.0):
        raise InvalidArgument(f"t must lie in [0, 1], got {t}")
    if t == 0.0:
        return a
    if t == 1.0:
        return b
    return (1.0 - t) * a + t * b


def roundtrip_deviation(
    sample_w: Callable[[int, int], np.ndarray],
    encode: Callable[[np.ndarray], np.ndarray],
    synthesize: Callable[[np.ndarray], np.ndarray],
    n: int,
    seed: int,
    *,
    k: int,
) -> float:
    """Mean distance between ``replicate(w, k)`` and ``encode(synthesize(replicate(w, k)))``.

    ``sample_w(n, seed)`` must return an ``(n, d)`` array of mapper outputs.
    Stacks are compared as flattened ``k * d`` vectors; the per-sample
    distances are summed in sample order.
    """
    if int(n) != n or n < 1:
        raise InvalidArgument(f"n must be a positive integer, got {n}")
    ws = np.asarray(sample_w(int(n), seed), dtype=np.float64)
    if ws.ndim != 2 or ws.shape[0] != n:
        raise InvalidArgument(f"sample_w returned shape {ws.shape}, expected ({n}, d)")
    total = 0.0
    for i, w in enumerate(ws):
        if not np.all(np.isfinite(w)):
            raise NumericError(f"non-finite sampled code at sample {i}")
        src = np.tile(w, (k, 1))
        rec = np.asarray(encode(synthesize(src)), dtype=np.float64)
        if rec.shape != src.shape:
            raise InvalidArgument(f"encoder returned shape {rec.shape}, expected {src.shape}")
        dist = float(np.linalg.norm((rec - src).ravel()))
        if not math.isfinite(dist):
            raise NumericError(f"non-finite round-trip distance at sample {i}")
        total += dist
    return total / n


def stack_to_bytes(s) -> bytes:
    """Serialize a stack: one JSON header line ``{"k":..,"d":..}`` then float32 LE rows."""
    s = as_stack(s)
    header = json.dumps({"k": s.shape[0], "d": s.shape[1]}, separators=(",", ":"))
    return header.encode("ascii") + b"\n" + s.astype("<f4").tobytes(order="C")


def stack_from_bytes(data: bytes) -> np.ndarray:
    buf = io.BytesIO(data)
    header = json.loads(buf.readline().decode("ascii"))
    k, d = int(header["k"]), int(header["d"])
    payload = buf.read()
    if len(payload) != 4 * k * d:
        raise InvalidArgument(f"payload holds {len(payload)} bytes, expected {4 * k * d}")
    return np.frombuffer(payload, dtype="<f4").reshape(k, d).astype(np.float64)
