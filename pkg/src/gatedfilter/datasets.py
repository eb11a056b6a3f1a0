"""Trajectory containers and lossless CSV exchange.

CSV layout: header ``traj_id,k,x1..x{d_x},z1..z{d_z}``, rows sorted by
(traj_id, k), floats printed with 17 significant digits (exact float64
round-trip), UTF-8 with LF line endings. Row k=0 carries the initial state
and its (unused by the filters) measurement.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPLIT_NAMES = ("train", "val", "test")


class DataFormatError(ValueError):
    """Malformed trajectory CSV content."""


@dataclass
class Trajectory:
    """States and measurements for k = 0..K; row 0 is the initial state."""

    x: np.ndarray  # (K+1, d_x)
    z: np.ndarray  # (K+1, d_z)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.z = np.asarray(self.z, dtype=float)
        if self.x.ndim != 2 or self.z.ndim != 2:
            raise ValueError("trajectory arrays must be 2-D")
        if self.x.shape[0] != self.z.shape[0]:
            raise ValueError(f"state rows {self.x.shape[0]} != measurement rows "
                             f"{self.z.shape[0]}")
        if self.x.shape[0] < 1:
            raise ValueError("trajectory needs at least the initial row")
        if not (np.isfinite(self.x).all() and np.isfinite(self.z).all()):
            raise ValueError("trajectory contains non-finite values")

    @property
    def K(self) -> int:
        return self.x.shape[0] - 1

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def d_z(self) -> int:
        return self.z.shape[1]


@dataclass
class TrajectoryDataset:
    """Trajectories with parallel train/val/test tags."""

    items: list[Trajectory]
    tags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.tags:
            self.tags = ["train"] * len(self.items)
        if len(self.tags) != len(self.items):
            raise ValueError("one tag per item required")
        bad = set(self.tags) - set(SPLIT_NAMES)
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")
        ks = {t.K for t in self.items}
        dims = {(t.d_x, t.d_z) for t in self.items}
        if len(ks) > 1 or len(dims) > 1:
            raise ValueError("all trajectories must share K and dimensions")

    def split(self, tag: str) -> list[Trajectory]:
        return [t for t, s in zip(self.items, self.tags) if s == tag]

    def counts(self) -> dict[str, int]:
        return {name: self.tags.count(name) for name in SPLIT_NAMES}


def split_tags(n: int, fractions) -> list[str]:
    """Tags for n items honoring (train, val, test) fractions within rounding."""
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("need three nonnegative split fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions sum to {sum(fractions)!r}, expected 1")
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    n_test = n - n_train - n_val
    return ["train"] * n_train + ["val"] * n_val + ["test"] * n_test


def _header(d_x: int, d_z: int) -> str:
    cols = ["traj_id", "k"]
    cols += [f"x{i + 1}" for i in range(d_x)]
    cols += [f"z{i + 1}" for i in range(d_z)]
    return ",".join(cols)


def save_csv(path, trajectories: list[Trajectory]) -> None:
    """Write trajectories (ids 0..n-1) losslessly; see module docstring."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if not trajectories:
            return
        d_x, d_z = trajectories[0].d_x, trajectories[0].d_z
        fh.write(_header(d_x, d_z) + "\n")
        for tid, traj in enumerate(trajectories):
            if traj.d_x != d_x or traj.d_z != d_z:
                raise ValueError("trajectories with mixed dimensions")
            for k in range(traj.K + 1):
                vals = [format(v, ".17g") for v in traj.x[k]]
                vals += [format(v, ".17g") for v in traj.z[k]]
                fh.write(f"{tid},{k}," + ",".join(vals) + "\n")


def _parse_header(line: str):
    cols = line.strip().split(",")
    if cols[:2] != ["traj_id", "k"]:
        raise DataFormatError("line 1: header must start with 'traj_id,k'")
    d_x = 0
    i = 2
    while i < len(cols) and cols[i] == f"x{d_x + 1}":
        d_x += 1
        i += 1
    d_z = 0
    while i < len(cols) and cols[i] == f"z{d_z + 1}":
        d_z += 1
        i += 1
    if i != len(cols) or d_x == 0 or d_z == 0:
        raise DataFormatError(f"line 1: malformed column names {cols[2:]}")
    return d_x, d_z


def load_csv(path) -> list[Trajectory]:
    """Load trajectories written by save_csv; bitwise float round-trip."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or (len(lines) == 1 and not lines[0].strip()):
        return []
    d_x, d_z = _parse_header(lines[0])
    width = 2 + d_x + d_z
    rows: dict[int, list[tuple[int, np.ndarray, np.ndarray]]] = {}
    order: list[int] = []
    prev_key = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != width:
            raise DataFormatError(f"line {lineno}: expected {width} columns, "
                                  f"got {len(parts)}")
        try:
            tid, k = int(parts[0]), int(parts[1])
            x = np.array([float(v) for v in parts[2:2 + d_x]])
            z = np.array([float(v) for v in parts[2 + d_x:]])
        except ValueError as exc:
            raise DataFormatError(f"line {lineno}: {exc}") from None
        key = (tid, k)
        if prev_key is not None and key <= prev_key:
            raise DataFormatError(f"line {lineno}: rows not sorted by (traj_id, k)")
        prev_key = key
        if tid not in rows:
            rows[tid] = []
            order.append(tid)
        rows[tid].append((k, x, z))
    trajectories = []
    horizon = None
    for tid in order:
        ks = [k for k, _, _ in rows[tid]]
        if ks != list(range(len(ks))):
            raise DataFormatError(f"trajectory {tid}: time indices not contiguous "
                                  f"from 0")
        if horizon is None:
            horizon = len(ks)
        elif len(ks) != horizon:
            raise DataFormatError(f"trajectory {tid}: inconsistent K "
                                  f"({len(ks) - 1} vs {horizon - 1})")
        trajectories.append(Trajectory(np.stack([x for _, x, _ in rows[tid]]),
                                       np.stack([z for _, _, z in rows[tid]])))
    return trajectories
