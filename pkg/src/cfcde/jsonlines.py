"""Line-oriented JSON emission with fixed 17-significant-digit floats.

The standard json module serializes floats with shortest-repr formatting;
dataset and checkpoint files instead pin every float to 17 significant
digits so the byte layout is stable across Python versions and round-trips
float64 exactly.
"""
from __future__ import annotations

import json
import math

import numpy as np


class FormatError(ValueError):
    """Malformed or wrong-versioned line in a text artifact file."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


def format_float(x) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"cannot serialize non-finite value {x}")
    return format(x, ".17g")


def _emit(value, out: list[str]) -> None:
    if isinstance(value, str):
        out.append(json.dumps(value))
    elif isinstance(value, bool):
        out.append("true" if value else "false")
    elif isinstance(value, (int, np.integer)):
        out.append(str(int(value)))
    elif isinstance(value, (float, np.floating)):
        out.append(format_float(value))
    elif value is None:
        out.append("null")
    elif isinstance(value, dict):
        out.append("{")
        for i, (k, v) in enumerate(value.items()):
            if i:
                out.append(",")
            out.append(json.dumps(str(k)))
            out.append(":")
            _emit(v, out)
        out.append("}")
    elif isinstance(value, np.ndarray):
        _emit(value.tolist(), out)
    elif isinstance(value, (list, tuple)):
        out.append("[")
        for i, v in enumerate(value):
            if i:
                out.append(",")
            _emit(v, out)
        out.append("]")
    else:
        raise TypeError(f"cannot serialize {type(value).__name__}")


def dumps(value) -> str:
    """One JSON document on one line, floats at 17 significant digits."""
    out: list[str] = []
    _emit(value, out)
    return "".join(out)


def loads(line: str, line_number=None):
    try:
        return json.loads(line)
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON ({exc.msg})", line_number) from exc
