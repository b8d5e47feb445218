"""Linear latent edits ``f(w) = w + alpha * v`` and ways to find ``v``.

Three direction families are supported:

* ``pca``: principal axes of sampled mapper outputs (unsupervised);
* ``supervised``: the normal of a logistic-regression boundary between two
  labeled groups of codes;
* ``sefa``: closed-form eigenvectors of the first modulation layer's weight,
  computed in :mod:`e4elab.toygen` because it needs the generator.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import InvalidArgument, RankError

METHODS = ("pca", "supervised", "sefa")
LOGREG_L2 = 1e-2


def canonical_sign(v: np.ndarray) -> np.ndarray:
    """Flip ``v`` so that its largest-magnitude coordinate is positive."""
    v = np.asarray(v, dtype=np.float64)
    j = int(np.argmax(np.abs(v)))
    return -v if v[j] < 0 else v.copy()


@dataclass(frozen=True, eq=False)
class EditDirection:
    v: np.ndarray
    method: str
    name: str
    layer_range: tuple[int, int] | None = None

    def __post_init__(self):
        v = np.array(self.v, dtype=np.float64)
        if v.ndim != 1 or abs(np.linalg.norm(v) - 1.0) > 1e-9:
            raise InvalidArgument("edit direction must be a unit vector")
        if self.method not in METHODS:
            raise InvalidArgument(f"unknown direction method {self.method!r}")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "name", str(self.name))
        if self.layer_range is not None:
            lo, hi = (int(x) for x in self.layer_range)
            if not 0 <= lo <= hi:
                raise InvalidArgument(f"bad layer range {self.layer_range}")
            object.__setattr__(self, "layer_range", (lo, hi))

    def layers(self, k: int) -> tuple[int, int]:
        if self.layer_range is None:
            return 0, k - 1
        lo, hi = self.layer_range
        if hi > k - 1:
            raise InvalidArgument(f"layer range {self.layer_range} exceeds {k} layers")
        return lo, hi

    def to_json(self, k: int | None = None) -> str:
        rng = self.layer_range if self.layer_range is not None or k is None else (0, k - 1)
        return json.dumps({
            "method": self.method,
            "name": self.name,
            "v": self.v.tolist(),
            "layer_range": list(rng) if rng is not None else None,
        })

    @classmethod
    def from_json(cls, text: str) -> "EditDirection":
        obj = json.loads(text)
        rng = obj.get("layer_range")
        return cls(v=np.array(obj["v"]), method=obj["method"], name=obj["name"],
                   layer_range=tuple(rng) if rng is not None else None)


def pca_components(w_samples, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-``m`` principal axes (rows) and their explained-variance ratios."""
    x = np.asarray(w_samples, dtype=np.float64)
    n, d = x.shape
    if n < d:
        raise InvalidArgument(f"need at least d={d} samples, got {n}")
    if int(m) != m or not 1 <= m <= d:
        raise InvalidArgument(f"m must lie in [1, {d}], got {m}")
    xc = x - x.mean(axis=0)
    _, sing, vt = np.linalg.svd(xc, full_matrices=False)
    tol = sing.max() * max(n, d) * np.finfo(np.float64).eps if sing.size else 0.0
    rank = int((sing > tol).sum())
    if rank < m:
        raise RankError(f"sample covariance has rank {rank}; achievable m is 1..{rank}")
    var = sing ** 2
    axes = np.stack([canonical_sign(vt[i]) for i in range(int(m))])
    return axes, var[: int(m)] / var.sum()


def pca_directions(w_samples, m: int, layer_range=None) -> list[EditDirection]:
    axes, _ = pca_components(w_samples, m)
    return [EditDirection(v=a, method="pca", name=str(i), layer_range=layer_range) for i, a in enumerate(axes)]


def fit_logistic(x: np.ndarray, y: np.ndarray, l2: float = LOGREG_L2) -> tuple[np.ndarray, float]:
    """Mean log-loss plus ``l2/2 * |weights|^2`` (intercept unpenalized), via L-BFGS."""
    n, d = x.shape

    def objective(theta):
        wt, b = theta[:d], theta[d]
        margin = y * (x @ wt + b)
        loss = np.logaddexp(0.0, -margin).mean() + 0.5 * l2 * wt @ wt
        g = -y * np.exp(-np.logaddexp(0.0, margin)) / n
        grad = np.concatenate([x.T @ g + l2 * wt, [g.sum()]])
        return loss, grad

    res = minimize(objective, np.zeros(d + 1), jac=True, method="L-BFGS-B",
                   options={"maxiter": 2000, "gtol": 1e-10, "ftol": 1e-15})
    return res.x[:d], float(res.x[d])


def supervised_direction(w_samples, labels, name: str = "attribute", layer_range=None) -> EditDirection:
    """Unit normal of the logistic boundary; points toward the ``+1`` class."""
    x = np.asarray(w_samples, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise InvalidArgument("codes and labels disagree in count")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise InvalidArgument("labels must be -1 or +1")
    if np.all(y == y[0]):
        raise InvalidArgument("both classes must be present")
    if x.shape[0] < 32:
        raise InvalidArgument(f"need at least 32 labeled codes, got {x.shape[0]}")
    wt, _ = fit_logistic(x, y)
    norm = np.linalg.norm(wt)
    if norm == 0:
        raise InvalidArgument("classifier collapsed to a zero normal")
    return EditDirection(v=wt / norm, method="supervised", name=name, layer_range=layer_range)


def apply_edit(stack, direction: EditDirection, alpha: float) -> np.ndarray:
    """Shift the rows in the direction's layer range by ``alpha * v``."""
    s = np.array(stack, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != direction.v.shape[0]:
        raise InvalidArgument(f"stack shape {s.shape} does not match direction of length {direction.v.shape[0]}")
    if alpha == 0:
        return s
    lo, hi = direction.layers(s.shape[0])
    s[lo:hi + 1] += alpha * direction.v
    return s


def invert_edit(direction: EditDirection, alpha: float) -> tuple[EditDirection, float]:
    return direction, -alpha
