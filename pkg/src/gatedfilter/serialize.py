"""Deterministic JSON emission with floats at 17 significant digits.

The stdlib encoder prints shortest-roundtrip floats; artifacts here pin the
textual form so reruns are byte-identical and floats survive exactly.
Reading back uses plain json.load.
"""
from __future__ import annotations

import json


def format_float(v: float) -> str:
    if v != v or v in (float("inf"), float("-inf")):
        raise ValueError(f"non-finite float {v!r} cannot be serialized")
    return format(float(v), ".17g")


def dumps(obj, indent: int = 0) -> str:
    pad = " " * indent
    child = indent + 2
    if obj is None:
        return "null"
    if obj is True:
        return "true"
    if obj is False:
        return "false"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return format_float(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        rows = [f'{pad}  {json.dumps(str(k))}: {dumps(v, child)}'
                for k, v in obj.items()]
        return "{\n" + ",\n".join(rows) + f"\n{pad}}}"
    if isinstance(obj, (list, tuple)):
        if not len(obj):
            return "[]"
        rows = [f"{pad}  {dumps(v, child)}" for v in obj]
        return "[\n" + ",\n".join(rows) + f"\n{pad}]"
    # numpy scalars and arrays
    if hasattr(obj, "tolist"):
        return dumps(obj.tolist(), indent)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dump(obj, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(obj) + "\n")


def load(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
