"""Helpers for deterministic JSON text and seed derivation."""
from __future__ import annotations

import hashlib
import json
import math
from typing import Any

import numpy as np


def fmt_float(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"non-finite value {x!r} cannot be serialized")
    return format(x, ".17g")


def dumps(obj: Any) -> str:
    """Compact JSON where every float is written with 17 significant digits.

    The standard encoder uses shortest-repr floats; this keeps the on-disk
    layout fixed so identical inputs always give identical bytes.
    """
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if obj is None or isinstance(obj, (bool, np.bool_)):
        return json.dumps(None if obj is None else bool(obj))
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, dict):
        items = (f"{json.dumps(str(k), ensure_ascii=False)}:{dumps(v)}" for k, v in obj.items())
        return "{" + ",".join(items) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def derive_seed(seed: int, *labels: object) -> int:
    """Derive a 64-bit sub-seed from a master seed and a label path."""
    key = ":".join([str(int(seed))] + [str(lab) for lab in labels]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def rng_for(seed: int, *labels: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *labels))
