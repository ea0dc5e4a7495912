"""Per-tensor merge rules and the streaming merge orchestrator.

Each rule maps flat (row-major) source vectors to one merged vector,
computed in float64.  ``run_merge`` streams every mergeable tensor of a job
through the selected rule with a bounded worker pool and writes the output
checkpoint in deterministic name order; outputs are bit-identical for any
worker count because summation order is fixed and random masks are keyed by
(seed, tensor name, model index).

The geodesic rule normalizes each source to the unit sphere, solves for the
weighted geodesic barycenter of the directions, and rescales by the weighted
mean of the source norms, so the merged tensor's norm never shrinks the way
a straight weighted average does.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .delta_ops import (
    SparsifySpec,
    dare_drop,
    della_drop,
    disjoint_merge,
    elect_signs,
    sparsify_stream,
    task_vector,
    trim_topk,
)
from .errors import AlignmentError, ConfigError, DegenerateError
from .sphere import (
    DEGENERATE_NORM,
    KarcherConfig,
    karcher_mean,
    normalize_to_sphere,
    sphere_exp,
    sphere_log,
    slerp as unit_slerp,
)
from .tensor_io import CheckpointHandle, TensorRecord, validate_aligned, write_checkpoint

logger = logging.getLogger(__name__)

MERGE_KINDS = (
    "karcher",
    "lerp",
    "slerp",
    "multislerp",
    "task_arithmetic",
    "ties",
    "dare_lerp",
    "dare_ties",
    "della_lerp",
    "della_ties",
    "model_stock",
)

_BASE_KINDS = {
    "task_arithmetic",
    "ties",
    "dare_lerp",
    "dare_ties",
    "della_lerp",
    "della_ties",
    "model_stock",
}

DEFAULT_PARAMS: dict[str, Any] = {
    "t": 0.5,
    "density": 0.5,
    "drop_rate": 0.5,
    "window": 0.1,
    "lambda": 1.0,
    "eta": 1.0,
    "tol": 1e-6,
    "max_iter": 50,
    "seed": 0,
}


@dataclass
class SolverStats:
    """Barycenter solver exit diagnostics for one tensor."""

    iterations: int
    residual: float
    converged: bool


@dataclass
class MergeMethod:
    """A merge rule plus its parameter bag (defaults filled on access)."""

    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in MERGE_KINDS:
            raise ConfigError(
                f"unknown merge method {self.kind!r}; expected one of {', '.join(MERGE_KINDS)}"
            )

    def param(self, name: str) -> Any:
        return self.params.get(name, DEFAULT_PARAMS[name])

    @property
    def needs_base(self) -> bool:
        return self.kind in _BASE_KINDS

    def validate_sources(self, n_sources: int, has_base: bool) -> None:
        if n_sources < 1:
            raise ConfigError("merge requires at least one source model")
        if self.kind == "slerp" and n_sources != 2:
            raise ConfigError(f"slerp requires exactly 2 models, got {n_sources}")
        if self.kind == "multislerp" and n_sources < 2:
            raise ConfigError(f"multislerp requires at least 2 models, got {n_sources}")
        if self.kind == "model_stock" and n_sources < 2:
            raise ConfigError(f"model_stock requires at least 2 expert models, got {n_sources}")
        if self.needs_base and not has_base:
            raise ConfigError(f"{self.kind} requires a base model")


def _as_f64(v: np.ndarray) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape(-1)


def _norm_weights(weights: Sequence[float], count: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (count,):
        raise ValueError(f"expected {count} weights, got shape {w.shape}")
    if (w < 0).any() or float(w.sum()) <= 0.0:
        raise ValueError("weights must be non-negative and not all zero")
    return w / float(w.sum())


def weighted_sum(vectors: Sequence[np.ndarray], weights: np.ndarray) -> np.ndarray:
    """Fixed-order float64 weighted sum (deterministic across thread counts)."""
    acc = np.zeros(_as_f64(vectors[0]).size, dtype=np.float64)
    for w_i, vec in zip(weights, vectors):
        acc += w_i * _as_f64(vec)
    return acc


def _all_equal(vectors: Sequence[np.ndarray]) -> bool:
    first = _as_f64(vectors[0])
    return all(np.array_equal(first, _as_f64(v)) for v in vectors[1:])


# -- merge rules -----------------------------------------------------------


def merge_lerp(tensors: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Weighted Euclidean average."""
    w = _norm_weights(weights, len(tensors))
    return weighted_sum(tensors, w)


def merge_slerp(a: np.ndarray, b: np.ndarray, t: float = 0.5) -> np.ndarray:
    """Geodesic interpolation of directions, norm interpolated linearly."""
    a64, b64 = _as_f64(a), _as_f64(b)
    if t == 0.0 or np.array_equal(a64, b64):
        return a64.copy()
    if t == 1.0:
        return b64.copy()
    na = normalize_to_sphere(a64)
    nb = normalize_to_sphere(b64)
    if na is None or nb is None:
        raise DegenerateError("slerp sources must have nonzero norm")
    direction = unit_slerp(na[0], nb[0], t)
    return direction * ((1.0 - t) * na[1] + t * nb[1])


def merge_multislerp(tensors: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """One tangent-space average of all source directions.

    Directions are averaged in the tangent space at the normalized weighted
    Euclidean mean, then mapped back and rescaled by the weighted mean of
    the source norms.  Equivalent to a single unit-step of the barycenter
    iteration from the chord initialization.
    """
    if len(tensors) < 2:
        raise ValueError("multislerp requires at least 2 tensors")
    w = _norm_weights(weights, len(tensors))
    if _all_equal(tensors):
        return _as_f64(tensors[0]).copy()
    units = []
    norms = np.empty(len(tensors))
    for i, vec in enumerate(tensors):
        nv = normalize_to_sphere(vec)
        if nv is None:
            raise DegenerateError(f"multislerp source {i} has (near-)zero norm")
        units.append(nv[0])
        norms[i] = nv[1]
    chord = weighted_sum(units, w)
    chord_norm = float(np.linalg.norm(chord))
    if chord_norm < DEGENERATE_NORM:
        logger.warning("multislerp basepoint degenerate (symmetric sources); using lerp")
        return merge_lerp(tensors, weights)
    base = chord / chord_norm
    tangent = np.zeros_like(base)
    for w_i, u in zip(w, units):
        tangent += w_i * sphere_log(base, u)
    direction = sphere_exp(base, tangent)
    return direction * float(w @ norms)


def merge_karcher(
    tensors: Sequence[np.ndarray],
    weights: Sequence[float],
    config: KarcherConfig | None = None,
) -> tuple[np.ndarray, SolverStats]:
    """Norm-preserving geodesic barycenter merge.

    Sources with degenerate norm are excluded from the spherical solve and
    their weight redistributed; if every source is degenerate the weighted
    Euclidean mean is returned.  The merged direction is rescaled by the
    weighted mean of all source norms.
    """
    w = _norm_weights(weights, len(tensors))
    if _all_equal(tensors):
        return _as_f64(tensors[0]).copy(), SolverStats(0, 0.0, True)
    units: list[np.ndarray] = []
    kept_weights: list[float] = []
    norms = np.zeros(len(tensors))
    for i, vec in enumerate(tensors):
        nv = normalize_to_sphere(vec)
        if nv is None:
            continue
        units.append(nv[0])
        kept_weights.append(float(w[i]))
        norms[i] = nv[1]
    if not units:
        return weighted_sum(tensors, w), SolverStats(0, 0.0, True)
    result = karcher_mean(units, np.asarray(kept_weights), config)
    stats = SolverStats(result.iterations, result.residual, result.converged)
    return result.mean * float(w @ norms), stats


def merge_task_arithmetic(
    base: np.ndarray,
    experts: Sequence[np.ndarray],
    weights: Sequence[float],
    scaling: float = 1.0,
) -> np.ndarray:
    """base + scaling * weighted mean of expert deltas."""
    b = _as_f64(base)
    w = _norm_weights(weights, len(experts))
    deltas = [task_vector(e, b) for e in experts]
    return b + scaling * weighted_sum(deltas, w)


def merge_ties(
    base: np.ndarray,
    experts: Sequence[np.ndarray],
    weights: Sequence[float],
    density: float = 0.5,
) -> np.ndarray:
    """Trim small delta entries, elect per-coordinate signs, average agreers."""
    b = _as_f64(base)
    w = _norm_weights(weights, len(experts))
    trimmed = [trim_topk(task_vector(e, b), density) for e in experts]
    signs = elect_signs(trimmed, w)
    return b + disjoint_merge(trimmed, w, signs)


def merge_dare(
    base: np.ndarray,
    experts: Sequence[np.ndarray],
    weights: Sequence[float],
    drop_rate: float,
    combine: str = "lerp",
    density: float = 0.5,
    seed: int = 0,
    tensor_name: str = "",
    model_indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Random drop-and-rescale of each delta, then lerp or ties combination."""
    b = _as_f64(base)
    w = _norm_weights(weights, len(experts))
    indices = range(len(experts)) if model_indices is None else model_indices
    dropped = [
        dare_drop(task_vector(e, b), drop_rate, sparsify_stream(seed, tensor_name, idx))
        for e, idx in zip(experts, indices)
    ]
    return b + _combine_deltas(dropped, w, combine, density)


def merge_della(
    base: np.ndarray,
    experts: Sequence[np.ndarray],
    weights: Sequence[float],
    spec: SparsifySpec,
    combine: str = "lerp",
    tensor_name: str = "",
    model_indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Magnitude-aware drop-and-rescale, then lerp or ties combination."""
    b = _as_f64(base)
    w = _norm_weights(weights, len(experts))
    indices = range(len(experts)) if model_indices is None else model_indices
    dropped = [
        della_drop(task_vector(e, b), spec, sparsify_stream(spec.seed, tensor_name, idx))
        for e, idx in zip(experts, indices)
    ]
    return b + _combine_deltas(dropped, w, combine, spec.density)


def _combine_deltas(
    deltas: Sequence[np.ndarray], w: np.ndarray, combine: str, density: float
) -> np.ndarray:
    if combine == "lerp":
        return weighted_sum(deltas, w)
    if combine == "ties":
        trimmed = [trim_topk(d, density) for d in deltas]
        signs = elect_signs(trimmed, w)
        return disjoint_merge(trimmed, w, signs)
    raise ConfigError(f"unknown combine mode {combine!r}; expected 'lerp' or 'ties'")


def merge_model_stock(base: np.ndarray, experts: Sequence[np.ndarray]) -> np.ndarray:
    """Interpolate between the base and the expert mean by delta agreement.

    The ratio t = m*c / (1 + (m-1)*c) comes from the mean pairwise cosine c
    of the expert deltas: identical deltas (c=1) give the expert mean,
    orthogonal deltas (c=0) fall back to the base.  Zero-norm deltas count
    as cosine 1 with everything.
    """
    m = len(experts)
    if m < 2:
        raise ValueError(f"model_stock requires at least 2 experts, got {m}")
    b = _as_f64(base)
    deltas = [task_vector(e, b) for e in experts]
    norms = [float(np.linalg.norm(d)) for d in deltas]
    cosines = []
    for i in range(m):
        for j in range(i + 1, m):
            if norms[i] < DEGENERATE_NORM or norms[j] < DEGENERATE_NORM:
                cosines.append(1.0)
            else:
                cosines.append(float(np.dot(deltas[i], deltas[j])) / (norms[i] * norms[j]))
    c = float(np.mean(cosines))
    c = min(max(c, -1.0 / (m - 1) + 1e-6), 1.0)
    t = m * c / (1.0 + (m - 1) * c)
    expert_mean = weighted_sum(experts, np.full(m, 1.0 / m))
    return t * expert_mean + (1.0 - t) * b


# -- streaming orchestrator --------------------------------------------------


@dataclass
class MergeJob:
    """One merge over aligned checkpoints."""

    sources: Sequence[CheckpointHandle]
    method: MergeMethod
    out_path: Path | str
    base: CheckpointHandle | None = None
    weights: Sequence[float] | None = None
    out_dtype: str = "f32"
    precision: str = "f32"
    strict: bool = True
    clamp_overflow: bool = False
    threads: int | None = None
    metadata: dict[str, str] | None = None


@dataclass
class TensorStats:
    name: str
    iterations: int | None
    residual: float | None
    converged: bool | None
    norm_in: list[float]
    norm_out: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "iterations": self.iterations,
            "residual": self.residual,
            "converged": self.converged,
            "norm_in": self.norm_in,
            "norm_out": self.norm_out,
        }


@dataclass
class MergeSummary:
    method: str
    parameters: dict[str, Any]
    tensors_merged: int
    tensors_skipped: list[str]
    per_tensor: list[TensorStats]
    wall_ms: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "method": self.method,
            "parameters": self.parameters,
            "tensors_merged": self.tensors_merged,
            "tensors_skipped": self.tensors_skipped,
            "per_tensor": [t.to_dict() for t in self.per_tensor],
            "wall_ms": self.wall_ms,
        }


def _effective_params(method: MergeMethod) -> dict[str, Any]:
    relevant = {
        "karcher": ("eta", "tol", "max_iter"),
        "lerp": (),
        "slerp": ("t",),
        "multislerp": (),
        "task_arithmetic": ("lambda",),
        "ties": ("density",),
        "dare_lerp": ("drop_rate", "seed"),
        "dare_ties": ("drop_rate", "density", "seed"),
        "della_lerp": ("drop_rate", "window", "seed"),
        "della_ties": ("drop_rate", "window", "density", "seed"),
        "model_stock": (),
    }[method.kind]
    effective = {name: method.param(name) for name in relevant}
    effective.update(method.params)  # echo explicit settings even when unused
    return effective


def _make_tensor_merger(method: MergeMethod, weights: np.ndarray):
    """Bind the method's parameters into a (name, flats, base_flat) callable."""
    kind = method.kind

    def run(name: str, flats: list[np.ndarray], base_flat: np.ndarray | None):
        if kind == "karcher":
            cfg = KarcherConfig(
                eta=float(method.param("eta")),
                tol=float(method.param("tol")),
                max_iter=int(method.param("max_iter")),
            )
            return merge_karcher(flats, weights, cfg)
        if kind == "lerp":
            return merge_lerp(flats, weights), None
        if kind == "slerp":
            return merge_slerp(flats[0], flats[1], float(method.param("t"))), None
        if kind == "multislerp":
            return merge_multislerp(flats, weights), None
        if kind == "task_arithmetic":
            return (
                merge_task_arithmetic(base_flat, flats, weights, float(method.param("lambda"))),
                None,
            )
        if kind == "ties":
            return merge_ties(base_flat, flats, weights, float(method.param("density"))), None
        if kind in ("dare_lerp", "dare_ties"):
            return (
                merge_dare(
                    base_flat,
                    flats,
                    weights,
                    float(method.param("drop_rate")),
                    combine="ties" if kind.endswith("ties") else "lerp",
                    density=float(method.param("density")),
                    seed=int(method.param("seed")),
                    tensor_name=name,
                ),
                None,
            )
        if kind in ("della_lerp", "della_ties"):
            spec = SparsifySpec(
                density=float(method.param("density")),
                drop_rate=float(method.param("drop_rate")),
                window=float(method.param("window")),
                seed=int(method.param("seed")),
            )
            return (
                merge_della(
                    base_flat,
                    flats,
                    weights,
                    spec,
                    combine="ties" if kind.endswith("ties") else "lerp",
                    tensor_name=name,
                ),
                None,
            )
        if kind == "model_stock":
            return merge_model_stock(base_flat, flats), None
        raise ConfigError(f"unknown merge method {kind!r}")

    return run


def run_merge(job: MergeJob) -> MergeSummary:
    """Merge every aligned tensor of the job and write the output checkpoint.

    In strict mode any misalignment or per-tensor failure aborts with the
    tensor named; otherwise failing tensors are copied from the base (or the
    first source holding them) and reported as skipped.  Output tensors are
    written in lexicographic name order, so results are byte-identical for
    any thread count.
    """
    start = time.perf_counter()
    sources = list(job.sources)
    method = job.method
    method.validate_sources(len(sources), job.base is not None)
    weights = (
        np.full(len(sources), 1.0 / len(sources))
        if job.weights is None
        else _norm_weights(job.weights, len(sources))
    )

    align_set: list[CheckpointHandle] = sources + ([job.base] if method.needs_base else [])
    if len(align_set) >= 2:
        report = validate_aligned(align_set)
        if job.strict and not report.is_aligned:
            problems = sorted(report.missing) + sorted(report.shape_conflicts)
            raise AlignmentError(
                "checkpoints are not aligned; offending tensors: " + ", ".join(problems)
            )
        mergeable = list(report.mergeable)
    else:
        mergeable = sources[0].names()

    union_names: set[str] = set()
    for h in sources:
        union_names.update(h.names())
    skipped = sorted(union_names.difference(mergeable))
    for name in skipped:
        logger.warning("tensor %r is not mergeable; copying from the first source", name)

    merger = _make_tensor_merger(method, weights)

    def merge_one(name: str) -> tuple[TensorRecord, TensorStats]:
        records = [h.load_tensor(name, job.precision, strict=True) for h in sources]
        flats = [rec.flat() for rec in records]
        base_flat = (
            job.base.load_tensor(name, job.precision, strict=True).flat()
            if method.needs_base
            else None
        )
        merged, stats = merger(name, flats, base_flat)
        shape = records[0].shape
        out = TensorRecord(name=name, data=merged.reshape(shape), dtype=job.out_dtype)
        norm_in = [float(np.linalg.norm(_as_f64(f))) for f in flats]
        tensor_stats = TensorStats(
            name=name,
            iterations=stats.iterations if stats else None,
            residual=stats.residual if stats else None,
            converged=stats.converged if stats else None,
            norm_in=norm_in,
            norm_out=float(np.linalg.norm(merged)),
        )
        if stats and not stats.converged:
            logger.warning(
                "tensor %r: barycenter solver hit max_iter (residual %.3e)",
                name,
                stats.residual,
            )
        logger.debug(
            "merged tensor %r (%s) norm %.6g", name, "x".join(map(str, shape)) or "scalar",
            tensor_stats.norm_out,
        )
        return out, tensor_stats

    def copy_fallback(name: str, prefer_base: bool) -> TensorRecord:
        # numeric failures fall back to the base tensor; non-mergeable names
        # (shape mismatch / missing) come from the first source holding them
        donors: list[CheckpointHandle | None] = list(sources)
        if prefer_base:
            donors.insert(0, job.base)
        for h in donors:
            if h is not None and name in h:
                rec = h.load_tensor(name, job.precision, strict=False)
                return TensorRecord(name=name, data=rec.data, dtype=job.out_dtype)
        raise AlignmentError(f"tensor {name!r} not found in any input")

    results: dict[str, tuple[TensorRecord, TensorStats]] = {}
    failed_names: list[str] = []
    max_workers = job.threads or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = {name: pool.submit(merge_one, name) for name in mergeable}
        for name in mergeable:
            try:
                results[name] = futures[name].result()
            except Exception as exc:
                if job.strict:
                    for pending in futures.values():
                        pending.cancel()
                    raise type(exc)(f"tensor {name!r}: {exc}") from exc
                logger.warning("tensor %r failed (%s); copying fallback", name, exc)
                failed_names.append(name)

    out_records = [results[name][0] for name in sorted(results)]
    out_records += [copy_fallback(name, prefer_base=False) for name in sorted(skipped)]
    out_records += [copy_fallback(name, prefer_base=True) for name in sorted(failed_names)]
    skipped_names = skipped + failed_names
    write_checkpoint(
        job.out_path,
        out_records,
        output_dtype=job.out_dtype,
        metadata=job.metadata,
        clamp_overflow=job.clamp_overflow,
    )

    per_tensor = [results[name][1] for name in sorted(results)]
    return MergeSummary(
        method=method.kind,
        parameters=_effective_params(method),
        tensors_merged=len(results),
        tensors_skipped=sorted(skipped_names),
        per_tensor=per_tensor,
        wall_ms=(time.perf_counter() - start) * 1000.0,
    )
