"""Closed-form geometry on the unit hypersphere and the weighted
geodesic-barycenter (Karcher mean) fixed-point solver.

Vectors are plain 1-D numpy arrays.  Every operation converts to float64
internally, so reductions carry full double-precision partials regardless of
the caller's working precision.  Points passed to the solver are
re-normalized on entry; outputs of the exp map are re-normalized before
return.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AntipodalError, NonFiniteError

#: Norms below this are treated as directionless (zero) vectors.
DEGENERATE_NORM = 1e-12

_ZERO_ANGLE = 1e-12


@dataclass
class KarcherConfig:
    """Solver controls: step size, stationarity tolerance, iteration cap."""

    eta: float = 1.0
    tol: float = 1e-6
    max_iter: int = 50
    antipodal_eps: float = 1e-8

    def __post_init__(self) -> None:
        if not 0.0 < self.eta <= 1.0:
            raise ValueError(f"eta must be in (0, 1], got {self.eta}")
        if self.tol <= 0.0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.antipodal_eps <= 0.0:
            raise ValueError(f"antipodal_eps must be positive, got {self.antipodal_eps}")


@dataclass
class KarcherResult:
    """Fixed point reached by the solver plus its exit diagnostics.

    ``residual`` is the norm of the weighted tangent-space mean at the final
    iterate; ``converged`` holds exactly when ``residual < tol``.
    """

    mean: np.ndarray
    iterations: int
    residual: float
    converged: bool


def _as_f64(v: np.ndarray) -> np.ndarray:
    return np.asarray(v, dtype=np.float64)


def normalize_to_sphere(v: np.ndarray) -> tuple[np.ndarray, float] | None:
    """Split a vector into (unit direction, norm).

    Returns ``None`` for degenerate (near-zero-norm) input, where no
    direction exists.  Non-finite entries raise :class:`NonFiniteError`.
    """
    arr = _as_f64(v)
    if not np.isfinite(arr).all():
        raise NonFiniteError("cannot normalize a vector with NaN/Inf entries")
    norm = float(np.linalg.norm(arr))
    if norm < DEGENERATE_NORM:
        return None
    return arr / norm, norm


def geodesic_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Great-circle distance between unit vectors, in [0, pi]."""
    c = float(np.dot(_as_f64(p), _as_f64(q)))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def sphere_log(p: np.ndarray, q: np.ndarray, antipodal_eps: float = 1e-8) -> np.ndarray:
    """Tangent vector at ``p`` pointing along the geodesic to ``q``.

    The result is orthogonal to ``p`` with norm equal to the geodesic
    distance.  Raises :class:`AntipodalError` when the points are antipodal
    up to ``antipodal_eps`` (the direction is then undefined).
    """
    p64, q64 = _as_f64(p), _as_f64(q)
    c = float(np.clip(np.dot(p64, q64), -1.0, 1.0))
    if c <= -1.0 + antipodal_eps:
        raise AntipodalError("log map undefined for (near-)antipodal points")
    theta = float(np.arccos(c))
    if theta < _ZERO_ANGLE:
        return np.zeros_like(p64)
    residual = q64 - c * p64
    rnorm = float(np.linalg.norm(residual))
    if rnorm < DEGENERATE_NORM:
        return np.zeros_like(p64)
    return residual * (theta / rnorm)


def sphere_exp(p: np.ndarray, v: np.ndarray, tangency_tol: float = 1e-6) -> np.ndarray:
    """Follow the geodesic from ``p`` with initial velocity ``v``.

    ``v`` must be tangent at ``p``; the output is re-normalized to the
    sphere.
    """
    p64, v64 = _as_f64(p), _as_f64(v)
    n = float(np.linalg.norm(v64))
    if n < _ZERO_ANGLE:
        return p64.copy()
    if abs(float(np.dot(p64, v64))) > tangency_tol * n:
        raise ValueError("exp map requires a tangent vector (<p, v> != 0)")
    out = np.cos(n) * p64 + np.sin(n) * (v64 / n)
    return out / float(np.linalg.norm(out))


def slerp(p: np.ndarray, q: np.ndarray, t: float, antipodal_eps: float = 1e-8) -> np.ndarray:
    """Constant-speed geodesic interpolation between unit vectors.

    Falls back to normalized linear interpolation when the angle vanishes.
    """
    p64, q64 = _as_f64(p), _as_f64(q)
    c = float(np.clip(np.dot(p64, q64), -1.0, 1.0))
    if c <= -1.0 + antipodal_eps:
        raise AntipodalError("slerp undefined for (near-)antipodal points")
    theta = float(np.arccos(c))
    if theta < _ZERO_ANGLE:
        mix = (1.0 - t) * p64 + t * q64
        return mix / float(np.linalg.norm(mix))
    s = np.sin(theta)
    return (np.sin((1.0 - t) * theta) / s) * p64 + (np.sin(t * theta) / s) * q64


def _normalized_weights(weights: np.ndarray, count: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (count,):
        raise ValueError(f"expected {count} weights, got shape {w.shape}")
    if (w < 0).any():
        raise ValueError("weights must be non-negative")
    total = float(w.sum())
    if total <= 0.0:
        raise ValueError("weights must not all be zero")
    return w / total


def frechet_objective(
    x: np.ndarray, points: "np.ndarray | list[np.ndarray]", weights: np.ndarray
) -> float:
    """Weighted sum of squared geodesic distances from ``x`` to ``points``."""
    pts = np.atleast_2d(_as_f64(np.asarray(points)))
    if pts.shape[0] == 0:
        raise ValueError("frechet_objective requires at least one point")
    w = _normalized_weights(weights, pts.shape[0])
    dots = np.clip(pts @ _as_f64(x), -1.0, 1.0)
    return float(np.dot(w, np.arccos(dots) ** 2))


def _tangent_mean(
    x: np.ndarray, pts: np.ndarray, w: np.ndarray, antipodal_eps: float, iteration: int
) -> np.ndarray:
    """Weighted mean of log maps at ``x``, vectorized over points."""
    dots = np.clip(pts @ x, -1.0, 1.0)
    bad = np.nonzero(dots <= -1.0 + antipodal_eps)[0]
    if bad.size:
        raise AntipodalError(
            f"point {int(bad[0])} is antipodal to the iterate at iteration {iteration}"
        )
    thetas = np.arccos(dots)
    residuals = pts - dots[:, None] * x[None, :]
    rnorms = np.linalg.norm(residuals, axis=1)
    coef = np.where(
        (thetas < _ZERO_ANGLE) | (rnorms < DEGENERATE_NORM), 0.0, thetas / np.maximum(rnorms, 1e-300)
    )
    # fixed summation order (input order) keeps results reproducible
    return (w * coef) @ residuals


def karcher_mean(
    points: "np.ndarray | list[np.ndarray]",
    weights: np.ndarray,
    config: KarcherConfig | None = None,
) -> KarcherResult:
    """Weighted geodesic barycenter of unit vectors via fixed-point iteration.

    Starting from the normalized weighted Euclidean mean (or the
    highest-weight point when that mean degenerates), each step moves along
    ``Exp_x(eta * mean_i w_i Log_x(u_i))`` until the tangent-mean norm drops
    below ``tol`` or ``max_iter`` steps have been taken.  Non-convergence
    returns the last iterate with ``converged=False`` rather than raising.
    """
    cfg = config or KarcherConfig()
    pts = np.atleast_2d(_as_f64(np.asarray(points)))
    m = pts.shape[0]
    if m == 0:
        raise ValueError("karcher_mean requires at least one point")
    norms = np.linalg.norm(pts, axis=1)
    if (norms < DEGENERATE_NORM).any():
        bad = int(np.argmin(norms))
        raise ValueError(f"point {bad} has (near-)zero norm; not a direction")
    pts = pts / norms[:, None]
    w = _normalized_weights(weights, m)

    chord = w @ pts
    chord_norm = float(np.linalg.norm(chord))
    if chord_norm < DEGENERATE_NORM:
        x = pts[int(np.argmax(w))].copy()
    else:
        x = chord / chord_norm

    for iteration in range(cfg.max_iter + 1):
        v = _tangent_mean(x, pts, w, cfg.antipodal_eps, iteration)
        residual = float(np.linalg.norm(v))
        if residual < cfg.tol:
            return KarcherResult(mean=x, iterations=iteration, residual=residual, converged=True)
        if iteration == cfg.max_iter:
            return KarcherResult(mean=x, iterations=iteration, residual=residual, converged=False)
        x = sphere_exp(x, cfg.eta * v)
