"""Numeric dtype codes and raw-buffer codecs for the tensor container.

Supported element types are ``f64``, ``f32``, ``f16`` and ``bf16``.  Buffers
are little-endian, row-major.  numpy has no bfloat16, so bf16 is handled at
the bit level: widening to f32 appends sixteen zero mantissa bits (exact),
narrowing from f32 rounds to nearest-even.
"""

from __future__ import annotations

import numpy as np

from .errors import DTypeOverflowError, UnsupportedDTypeError

# code -> (container tag, bytes per element)
DTYPES: dict[str, tuple[str, int]] = {
    "f64": ("F64", 8),
    "f32": ("F32", 4),
    "f16": ("F16", 2),
    "bf16": ("BF16", 2),
}

_TAG_TO_CODE = {tag: code for code, (tag, _) in DTYPES.items()}

# Largest finite magnitude representable in each target (clamp saturation).
_MAX_FINITE = {
    "f64": float(np.finfo(np.float64).max),
    "f32": float(np.finfo(np.float32).max),
    "f16": float(np.finfo(np.float16).max),
    "bf16": 3.3895313892515355e38,  # 0x7F7F widened
}


def code_from_tag(tag: str) -> str:
    if tag not in _TAG_TO_CODE:
        raise UnsupportedDTypeError(f"unsupported dtype tag {tag!r}")
    return _TAG_TO_CODE[tag]


def itemsize(code: str) -> int:
    _check_code(code)
    return DTYPES[code][1]


def container_tag(code: str) -> str:
    _check_code(code)
    return DTYPES[code][0]


def _check_code(code: str) -> None:
    if code not in DTYPES:
        raise UnsupportedDTypeError(f"unsupported dtype {code!r}")


def bf16_to_f32(bits: np.ndarray) -> np.ndarray:
    """Widen uint16 bf16 bit patterns to float32 (exact)."""
    widened = bits.astype(np.uint32) << 16
    return widened.view(np.float32)


def f32_to_bf16(values: np.ndarray) -> np.ndarray:
    """Narrow float32 to uint16 bf16 bit patterns, rounding to nearest-even."""
    u = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32)
    nan_mask = np.isnan(values)
    bias = np.uint32(0x7FFF) + ((u >> 16) & np.uint32(1))
    bits = ((u + bias) >> 16).astype(np.uint16)
    if nan_mask.any():
        # force a quiet-NaN payload instead of letting rounding flush to Inf
        bits = np.where(nan_mask, (u >> 16).astype(np.uint16) | np.uint16(0x0040), bits)
    return bits


def decode_buffer(raw: bytes, code: str, count: int) -> np.ndarray:
    """Decode ``count`` elements from a little-endian buffer.

    f16/bf16 are widened to float32 (value-exact); f32/f64 keep their width.
    """
    _check_code(code)
    if code == "bf16":
        bits = np.frombuffer(raw, dtype="<u2", count=count)
        return bf16_to_f32(bits)
    np_dtype = {"f64": "<f8", "f32": "<f4", "f16": "<f2"}[code]
    arr = np.frombuffer(raw, dtype=np_dtype, count=count)
    if code == "f16":
        return arr.astype(np.float32)
    return arr.astype(arr.dtype.newbyteorder("="))


def encode_array(values: np.ndarray, code: str, clamp: bool = False) -> bytes:
    """Encode a float array to the container representation of ``code``.

    Overflow means a finite input that is no longer finite after rounding to
    the target type.  It raises :class:`DTypeOverflowError` by default;
    with ``clamp`` the value saturates at the largest finite magnitude.
    """
    _check_code(code)
    flat = np.ascontiguousarray(values).reshape(-1)
    if code == "f64":
        return flat.astype("<f8").tobytes()

    finite_in = np.isfinite(flat)
    with np.errstate(over="ignore"):
        if code == "bf16":
            narrowed = flat.astype(np.float32)
            bits = f32_to_bf16(narrowed)
            out_values = bf16_to_f32(bits)
        else:
            np_dtype = {"f32": "<f4", "f16": "<f2"}[code]
            out_values = flat.astype(np_dtype)

    overflowed = finite_in & ~np.isfinite(out_values)
    if overflowed.any():
        if not clamp:
            culprits = flat[overflowed]
            worst = float(culprits[np.argmax(np.abs(culprits))])
            raise DTypeOverflowError(f"value {worst!r} not representable as {code}")
        saturated = np.sign(flat) * _MAX_FINITE[code]
        if code == "bf16":
            bits = np.where(overflowed, f32_to_bf16(saturated.astype(np.float32)), bits)
        else:
            out_values = np.where(overflowed, saturated, out_values).astype(out_values.dtype)

    if code == "bf16":
        return bits.astype("<u2").tobytes()
    return out_values.tobytes()
