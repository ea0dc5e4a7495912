"""Merge recipe parsing: YAML in, fully validated job description out.

A recipe names the method, the source models (with optional weights), an
optional base model, method parameters, and the output file.  Unknown keys
are rejected everywhere so typos fail loudly, and method/source-count
constraints are enforced at parse time with actionable messages.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .merge_methods import DEFAULT_PARAMS, MERGE_KINDS, MergeMethod

_TOP_KEYS = {"method", "models", "base_model", "parameters", "output"}
_MODEL_KEYS = {"path", "weight"}
_OUTPUT_KEYS = {"path", "dtype"}
_PARAM_KEYS = set(DEFAULT_PARAMS) | {"precision", "strict"}
_DTYPES = {"f64", "f32", "f16", "bf16"}
_PRECISIONS = {"f32", "f64"}


@dataclass
class ModelEntry:
    path: Path
    weight: float = 1.0


@dataclass
class MergeRecipe:
    """Validated description of one merge job."""

    method: MergeMethod
    models: list[ModelEntry]
    output_path: Path
    output_dtype: str = "f32"
    base_model: Path | None = None
    precision: str = "f32"
    strict: bool = True
    source: str = "<recipe>"

    @property
    def weights(self) -> list[float]:
        return [m.weight for m in self.models]


def load_recipe(path: str | Path, overrides: list[str] | None = None) -> MergeRecipe:
    """Read, override, and validate a recipe file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise FileNotFoundError(f"recipe file not found: {path}") from None
    return parse_recipe(text, source=str(path), overrides=overrides)


def parse_recipe(
    text: str, source: str = "<recipe>", overrides: list[str] | None = None
) -> MergeRecipe:
    """Parse a recipe document, applying ``key.path=value`` overrides first."""
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: invalid YAML ({exc})") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: recipe must be a mapping")
    for item in overrides or []:
        _apply_override(raw, item, source)
    return _validate(raw, source)


def _apply_override(raw: dict[str, Any], item: str, source: str) -> None:
    if "=" not in item:
        raise ConfigError(f"{source}: override {item!r} must look like key.path=value")
    dotted, value_text = item.split("=", 1)
    segments = dotted.strip().split(".")
    if not all(segments):
        raise ConfigError(f"{source}: override {item!r} has an empty path segment")
    try:
        value = yaml.safe_load(value_text)
    except yaml.YAMLError:
        value = value_text
    node: Any = raw
    for seg in segments[:-1]:
        if isinstance(node, list):
            node = _index_into(node, seg, item, source)
        elif isinstance(node, dict):
            node = node.setdefault(seg, {})
        else:
            raise ConfigError(f"{source}: override {item!r} descends into a scalar")
    leaf = segments[-1]
    if isinstance(node, list):
        idx = _list_index(node, leaf, item, source)
        node[idx] = value
    elif isinstance(node, dict):
        node[leaf] = value
    else:
        raise ConfigError(f"{source}: override {item!r} descends into a scalar")


def _index_into(node: list, seg: str, item: str, source: str) -> Any:
    return node[_list_index(node, seg, item, source)]


def _list_index(node: list, seg: str, item: str, source: str) -> int:
    try:
        idx = int(seg)
    except ValueError:
        raise ConfigError(f"{source}: override {item!r} indexes a list with {seg!r}") from None
    if not 0 <= idx < len(node):
        raise ConfigError(f"{source}: override {item!r} index {idx} out of range")
    return idx


def _validate(raw: dict[str, Any], source: str) -> MergeRecipe:
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"{source}: unknown key {sorted(unknown)[0]!r} (typo?)")
    for key in ("method", "models", "output"):
        if key not in raw:
            raise ConfigError(f"{source}: missing required key {key!r}")

    kind = raw["method"]
    if not isinstance(kind, str) or kind not in MERGE_KINDS:
        raise ConfigError(
            f"{source}: method must be one of {', '.join(MERGE_KINDS)}, got {kind!r}"
        )

    models = _validate_models(raw["models"], source)
    base_model = raw.get("base_model")
    if base_model is not None and not isinstance(base_model, str):
        raise ConfigError(f"{source}: base_model must be a path string")

    params = _validate_params(raw.get("parameters") or {}, source)
    precision = params.pop("precision", "f32")
    strict = params.pop("strict", True)

    out_path, out_dtype = _validate_output(raw["output"], source)

    method = MergeMethod(kind=kind, params=params)
    try:
        method.validate_sources(len(models), base_model is not None)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None

    return MergeRecipe(
        method=method,
        models=models,
        output_path=out_path,
        output_dtype=out_dtype,
        base_model=Path(base_model) if base_model else None,
        precision=precision,
        strict=strict,
        source=source,
    )


def _validate_models(node: Any, source: str) -> list[ModelEntry]:
    if not isinstance(node, list) or not node:
        raise ConfigError(f"{source}: models must be a non-empty list")
    entries = []
    for i, entry in enumerate(node):
        if isinstance(entry, str):
            entry = {"path": entry}
        if not isinstance(entry, dict):
            raise ConfigError(f"{source}: models[{i}] must be a mapping or path string")
        unknown = set(entry) - _MODEL_KEYS
        if unknown:
            raise ConfigError(f"{source}: models[{i}]: unknown key {sorted(unknown)[0]!r} (typo?)")
        if "path" not in entry or not isinstance(entry["path"], str):
            raise ConfigError(f"{source}: models[{i}] needs a 'path' string")
        weight = entry.get("weight", 1.0)
        if not isinstance(weight, (int, float)) or isinstance(weight, bool) or weight < 0:
            raise ConfigError(f"{source}: models[{i}]: weight must be a non-negative number")
        entries.append(ModelEntry(path=Path(entry["path"]), weight=float(weight)))
    if sum(e.weight for e in entries) <= 0:
        raise ConfigError(f"{source}: model weights must not all be zero")
    return entries


def _validate_params(node: Any, source: str) -> dict[str, Any]:
    if not isinstance(node, dict):
        raise ConfigError(f"{source}: parameters must be a mapping")
    unknown = set(node) - _PARAM_KEYS
    if unknown:
        raise ConfigError(f"{source}: parameters: unknown key {sorted(unknown)[0]!r} (typo?)")
    params = dict(node)

    def number(key: str, lo: float | None = None, hi: float | None = None,
               lo_open: bool = False, hi_open: bool = False) -> None:
        if key not in params:
            return
        v = params[key]
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise ConfigError(f"{source}: parameters.{key} must be a number, got {v!r}")
        v = float(v)
        if lo is not None and (v < lo or (lo_open and v == lo)):
            raise ConfigError(f"{source}: parameters.{key}={v} out of range")
        if hi is not None and (v > hi or (hi_open and v == hi)):
            raise ConfigError(f"{source}: parameters.{key}={v} out of range")
        params[key] = v

    number("t", lo=0.0, hi=1.0)
    number("density", lo=0.0, hi=1.0, lo_open=True)
    number("drop_rate", lo=0.0, hi=1.0, hi_open=True)
    number("window", lo=0.0, hi=1.0, hi_open=True)
    number("lambda")
    number("eta", lo=0.0, hi=1.0, lo_open=True)
    number("tol", lo=0.0, lo_open=True)

    if "window" in params or "drop_rate" in params:
        drop = float(params.get("drop_rate", DEFAULT_PARAMS["drop_rate"]))
        window = float(params.get("window", DEFAULT_PARAMS["window"]))
        if drop - window < 0 or drop + window >= 1:
            raise ConfigError(
                f"{source}: parameters: need 0 <= drop_rate - window and "
                f"drop_rate + window < 1 (got drop_rate={drop}, window={window})"
            )

    if "max_iter" in params:
        v = params["max_iter"]
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            raise ConfigError(f"{source}: parameters.max_iter must be a positive integer")
    if "seed" in params:
        v = params["seed"]
        if not isinstance(v, int) or isinstance(v, bool) or not 0 <= v < 2**64:
            raise ConfigError(f"{source}: parameters.seed must be an unsigned 64-bit integer")
    if "precision" in params and params["precision"] not in _PRECISIONS:
        raise ConfigError(
            f"{source}: parameters.precision must be one of {sorted(_PRECISIONS)}"
        )
    if "strict" in params and not isinstance(params["strict"], bool):
        raise ConfigError(f"{source}: parameters.strict must be a boolean")
    return params


def _validate_output(node: Any, source: str) -> tuple[Path, str]:
    if not isinstance(node, dict):
        raise ConfigError(f"{source}: output must be a mapping")
    unknown = set(node) - _OUTPUT_KEYS
    if unknown:
        raise ConfigError(f"{source}: output: unknown key {sorted(unknown)[0]!r} (typo?)")
    if "path" not in node or not isinstance(node["path"], str):
        raise ConfigError(f"{source}: output needs a 'path' string")
    dtype = node.get("dtype", "f32")
    if dtype not in _DTYPES:
        raise ConfigError(f"{source}: output.dtype must be one of {sorted(_DTYPES)}")
    return Path(node["path"]), dtype
