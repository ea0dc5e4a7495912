"""Task-vector construction and delta sparsification primitives.

These are the per-tensor building blocks for trim/sign-resolve merging and
for random drop-and-rescale merging.  Everything is computed in float64 and
is fully deterministic: the stochastic ops take an explicit generator, which
callers derive from :func:`geomerge.rng.keyed_stream` so masks depend only on
``(seed, tensor name, model index)`` and never on scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rng import keyed_stream


@dataclass
class SparsifySpec:
    """Density/drop-rate parameters for the sparsified delta transforms.

    ``density`` is the kept fraction for magnitude trimming; ``drop_rate``
    the expected zeroed fraction for random dropping; ``window`` the
    half-width of the magnitude-dependent drop-rate band (0 disables the
    magnitude dependence).
    """

    density: float = 0.5
    drop_rate: float = 0.5
    window: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.density <= 1.0:
            raise ValueError(f"density must be in (0, 1], got {self.density}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError(f"drop_rate must be in [0, 1), got {self.drop_rate}")
        if self.window < 0.0 or self.drop_rate - self.window < 0.0:
            raise ValueError("window must satisfy 0 <= window <= drop_rate")
        if self.drop_rate + self.window >= 1.0:
            raise ValueError("drop_rate + window must be < 1")


def sparsify_stream(seed: int, tensor_name: str, model_index: int) -> np.random.Generator:
    """Counter-based stream for one (tensor, model) pair."""
    return keyed_stream(seed, tensor_name, model_index)


def task_vector(expert: np.ndarray, base: np.ndarray) -> np.ndarray:
    """Elementwise update of an expert relative to its base (float64)."""
    e = np.asarray(expert, dtype=np.float64).reshape(-1)
    b = np.asarray(base, dtype=np.float64).reshape(-1)
    if e.shape != b.shape:
        raise ValueError(f"length mismatch: expert has {e.size}, base has {b.size}")
    return e - b


def trim_topk(delta: np.ndarray, density: float) -> np.ndarray:
    """Keep the ceil(density*n) largest-magnitude entries, zero the rest.

    Ties at the threshold keep the lower index first (stable order), so the
    result is deterministic.
    """
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must be in (0, 1], got {density}")
    d = np.asarray(delta, dtype=np.float64).reshape(-1)
    n = d.size
    if n == 0 or density == 1.0:
        return d.copy()
    k = int(np.ceil(density * n))
    order = np.argsort(-np.abs(d), kind="stable")
    out = np.zeros_like(d)
    keep = order[:k]
    out[keep] = d[keep]
    return out


def elect_signs(deltas: Sequence[np.ndarray], weights: np.ndarray) -> np.ndarray:
    """Per-coordinate sign of the weighted delta sum; zero sums become +1."""
    mat = _stack(deltas)
    w = np.asarray(weights, dtype=np.float64)
    totals = w @ mat
    return np.where(totals < 0.0, -1.0, 1.0)


def disjoint_merge(
    deltas: Sequence[np.ndarray], weights: np.ndarray, signs: np.ndarray
) -> np.ndarray:
    """Weighted mean over the nonzero entries agreeing with the elected sign.

    Weights are renormalized over the agreeing subset per coordinate; a
    coordinate with no agreeing model is 0.
    """
    mat = _stack(deltas)
    w = np.asarray(weights, dtype=np.float64)
    s = np.asarray(signs, dtype=np.float64)
    if s.shape != (mat.shape[1],):
        raise ValueError("signs length does not match delta length")
    agree = (mat * s[None, :]) > 0.0
    weighted = w[:, None] * agree
    denom = weighted.sum(axis=0)
    numer = (weighted * mat).sum(axis=0)
    safe = np.where(denom > 0.0, denom, 1.0)
    return np.where(denom > 0.0, numer / safe, 0.0)


def dare_drop(delta: np.ndarray, drop_rate: float, rng: np.random.Generator) -> np.ndarray:
    """Zero each coordinate independently with probability ``drop_rate`` and
    rescale survivors by 1/(1-drop_rate), preserving the delta in expectation.
    """
    if not 0.0 <= drop_rate < 1.0:
        raise ValueError(f"drop_rate must be in [0, 1), got {drop_rate}")
    d = np.asarray(delta, dtype=np.float64).reshape(-1)
    return _drop_rescale(d, drop_rate, rng)


def della_drop(delta: np.ndarray, spec: SparsifySpec, rng: np.random.Generator) -> np.ndarray:
    """Magnitude-aware random dropping.

    Coordinates ranked by |delta| ascending get drop probabilities falling
    linearly from ``drop_rate + window`` (smallest magnitude) to
    ``drop_rate - window`` (largest); survivors are rescaled per coordinate.
    With ``window=0`` this consumes randomness identically to
    :func:`dare_drop` and produces bit-identical output.
    """
    d = np.asarray(delta, dtype=np.float64).reshape(-1)
    n = d.size
    if n == 0:
        return d.copy()
    hi = spec.drop_rate + spec.window
    lo = spec.drop_rate - spec.window
    if n == 1:
        frac = np.array([0.5])
    else:
        ranks = np.empty(n, dtype=np.float64)
        ranks[np.argsort(np.abs(d), kind="stable")] = np.arange(n, dtype=np.float64)
        frac = ranks / (n - 1)
    p = hi - (hi - lo) * frac
    return _drop_rescale(d, p, rng)


def _drop_rescale(
    d: np.ndarray, p: "float | np.ndarray", rng: np.random.Generator
) -> np.ndarray:
    """Shared drop/rescale core so scalar and per-coordinate rates match
    bit-for-bit under the same stream."""
    draws = rng.random(d.size)
    keep = draws >= p
    scale = 1.0 / (1.0 - p)
    return np.where(keep, d * scale, 0.0)


def _stack(deltas: Sequence[np.ndarray]) -> np.ndarray:
    if len(deltas) == 0:
        raise ValueError("need at least one delta")
    rows = [np.asarray(d, dtype=np.float64).reshape(-1) for d in deltas]
    length = rows[0].size
    for i, r in enumerate(rows):
        if r.size != length:
            raise ValueError(f"length mismatch: delta 0 has {length}, delta {i} has {r.size}")
    return np.vstack(rows)
