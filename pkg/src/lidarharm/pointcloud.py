"""Point/scan data model, exact k-nearest-neighbor spatial index, and scan file I/O.

Scans hold their points in numpy arrays (float64 coordinates, float32
normalized intensities). The spatial index is an immutable kd-tree whose
queries return exactly the k nearest points by Euclidean distance with ties
broken by lower point index, matching a brute-force linear scan bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

EMBEDDING_DICT_SIZE = 45

SCAN_MAGIC = b"LHS1"
SCAN_VERSION = 1
_HEADER = struct.Struct("<4sHHQ")
_POINT_DTYPE = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("i", "<f4")])


class FormatError(ValueError):
    """Raised when a scan or dataset file does not conform to its format."""


class Point(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float


@dataclass(frozen=True)
class Scan:
    """Point collection from one flight, carrying one sensor identity."""

    scan_id: int
    xyz: np.ndarray        # (n, 3) float64
    intensity: np.ndarray  # (n,) float32

    def __post_init__(self):
        xyz = np.ascontiguousarray(self.xyz, dtype=np.float64)
        inten = np.ascontiguousarray(self.intensity, dtype=np.float32)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValueError(f"xyz must be (n, 3), got {xyz.shape}")
        if inten.shape != (xyz.shape[0],):
            raise ValueError("intensity length does not match point count")
        if not (0 <= self.scan_id < EMBEDDING_DICT_SIZE):
            raise ValueError(
                f"scan_id {self.scan_id} outside embedding dictionary [0, {EMBEDDING_DICT_SIZE})"
            )
        if xyz.size and not np.isfinite(xyz).all():
            raise ValueError("coordinates must be finite")
        if inten.size and (inten.min() < 0.0 or inten.max() > 1.0):
            raise ValueError("intensity values must lie in [0, 1]")
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "intensity", inten)

    @property
    def n(self) -> int:
        return self.xyz.shape[0]

    def point(self, i: int) -> Point:
        x, y, z = self.xyz[i]
        return Point(float(x), float(y), float(z), float(self.intensity[i]))

    def points(self):
        for i in range(self.n):
            yield self.point(i)

    @classmethod
    def from_points(cls, scan_id: int, pts) -> "Scan":
        pts = list(pts)
        xyz = np.array([[p.x, p.y, p.z] for p in pts], dtype=np.float64).reshape(-1, 3)
        inten = np.array([p.intensity for p in pts], dtype=np.float32)
        return cls(scan_id, xyz, inten)

    def with_intensity(self, intensity: np.ndarray) -> "Scan":
        return Scan(self.scan_id, self.xyz, intensity)

    def take(self, idx: np.ndarray) -> "Scan":
        return Scan(self.scan_id, self.xyz[idx], self.intensity[idx])


_LEAF_SIZE = 32


@dataclass
class _Node:
    axis: int
    split: float
    left: object
    right: object


@dataclass
class _Leaf:
    lo: int
    hi: int


class SpatialIndex:
    """Immutable balanced kd-tree over a scan's points.

    Queries return the k nearest points within an inclusive radius, sorted
    ascending by (squared distance, point index). Squared distances are
    computed with the same vectorized expression a linear scan would use, so
    results (including ties) match exhaustive search exactly.
    """

    def __init__(self, xyz: np.ndarray, intensity: np.ndarray | None = None):
        xyz = np.ascontiguousarray(xyz, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise ValueError(f"xyz must be (n, 3), got {xyz.shape}")
        if xyz.shape[0] == 0:
            raise ValueError("empty scan")
        self._xyz = xyz
        self.intensity = None if intensity is None else np.asarray(intensity, dtype=np.float32)
        self._perm = np.arange(xyz.shape[0], dtype=np.int64)
        self._root = self._build(0, xyz.shape[0])
        self._perm.setflags(write=False)
        self._xyz.setflags(write=False)

    @property
    def size(self) -> int:
        return self._xyz.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self._xyz

    def _build(self, lo: int, hi: int):
        if hi - lo <= _LEAF_SIZE:
            return _Leaf(lo, hi)
        block = self._perm[lo:hi]
        pts = self._xyz[block]
        spread = pts.max(axis=0) - pts.min(axis=0)
        axis = int(np.argmax(spread))
        if spread[axis] == 0.0:
            return _Leaf(lo, hi)  # all coordinates identical
        mid = (hi - lo) // 2
        order = np.argpartition(pts[:, axis], mid)
        self._perm[lo:hi] = block[order]
        split = float(self._xyz[self._perm[lo + mid], axis])
        return _Node(
            axis,
            split,
            self._build(lo, lo + mid),
            self._build(lo + mid, hi),
        )

    def _candidate_ranges(self, loc: np.ndarray, radius: float):
        ranges = []
        stack = [self._root]
        while stack:
            node = stack.pop()
            if isinstance(node, _Leaf):
                ranges.append((node.lo, node.hi))
                continue
            c = loc[node.axis]
            if c - radius <= node.split:
                stack.append(node.left)
            if c + radius >= node.split:
                stack.append(node.right)
        return ranges

    def query(self, loc, k: int, radius: float):
        """k nearest points within radius of loc.

        Returns (indices, distances) sorted ascending by (distance, index);
        shorter than k when the ball holds fewer points.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        if not radius > 0:
            raise ValueError("radius must be > 0")
        loc = np.asarray(loc, dtype=np.float64).reshape(3)
        ranges = self._candidate_ranges(loc, radius)
        cand = np.concatenate([self._perm[lo:hi] for lo, hi in ranges])
        d2 = ((self._xyz[cand] - loc) ** 2).sum(axis=1)
        keep = d2 <= radius * radius
        cand, d2 = cand[keep], d2[keep]
        order = np.lexsort((cand, d2))[:k]
        return cand[order], np.sqrt(d2[order])

    def has_within(self, loc, radius: float) -> bool:
        """True when any indexed point lies within radius of loc."""
        loc = np.asarray(loc, dtype=np.float64).reshape(3)
        r2 = radius * radius
        stack = [self._root]
        while stack:
            node = stack.pop()
            if isinstance(node, _Leaf):
                block = self._perm[node.lo:node.hi]
                d2 = ((self._xyz[block] - loc) ** 2).sum(axis=1)
                if (d2 <= r2).any():
                    return True
                continue
            c = loc[node.axis]
            # nearer child last so it pops first
            if c <= node.split:
                if c + radius >= node.split:
                    stack.append(node.right)
                stack.append(node.left)
            else:
                if c - radius <= node.split:
                    stack.append(node.left)
                stack.append(node.right)
        return False

    def within_mask(self, locs: np.ndarray, radius: float) -> np.ndarray:
        """Boolean per row of locs: does the index hold a point within radius."""
        locs = np.asarray(locs, dtype=np.float64).reshape(-1, 3)
        out = np.empty(locs.shape[0], dtype=bool)
        for i in range(locs.shape[0]):
            out[i] = self.has_within(locs[i], radius)
        return out


def build_index(scan: Scan) -> SpatialIndex:
    if scan.n == 0:
        raise ValueError("empty scan")
    return SpatialIndex(scan.xyz, scan.intensity)


def query_knn(index: SpatialIndex, loc, k: int, radius: float):
    """k nearest (Point, distance) pairs within radius, nearest first."""
    idx, dist = index.query(loc, k, radius)
    pts = index._xyz[idx]
    vals = index.intensity[idx] if index.intensity is not None else np.zeros(len(idx), np.float32)
    return [
        (Point(float(x), float(y), float(z), float(v)), float(d))
        for (x, y, z), v, d in zip(pts, vals, dist)
    ]


def overlap_count(scan_a: Scan, index_b: SpatialIndex, radius: float) -> int:
    """Number of scan_a points having at least one index_b point within radius."""
    if not radius > 0:
        raise ValueError("radius must be > 0")
    return int(index_b.within_mask(scan_a.xyz, radius).sum())


def write_scan(scan: Scan, path, fmt: str = "binary") -> None:
    if fmt == "binary":
        payload = np.empty(scan.n, dtype=_POINT_DTYPE)
        payload["x"], payload["y"], payload["z"] = scan.xyz.T
        payload["i"] = scan.intensity
        with open(path, "wb") as f:
            f.write(_HEADER.pack(SCAN_MAGIC, SCAN_VERSION, scan.scan_id, scan.n))
            f.write(payload.tobytes())
    elif fmt == "ascii":
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"# x y z intensity scan_id={scan.scan_id}\n")
            for i in range(scan.n):
                x, y, z = scan.xyz[i]
                f.write(f"{float(x)!r} {float(y)!r} {float(z)!r} {scan.intensity[i]}\n")
    else:
        raise ValueError(f"unknown scan format {fmt!r}")


def read_scan(path, fmt: str = "binary") -> Scan:
    if fmt == "binary":
        return _read_binary(path)
    if fmt == "ascii":
        return _read_ascii(path)
    raise ValueError(f"unknown scan format {fmt!r}")


def _read_binary(path) -> Scan:
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) < _HEADER.size or head[:4] != SCAN_MAGIC:
            raise FormatError(f"{path}: bad magic at byte 0")
        magic, version, scan_id, count = _HEADER.unpack(head)
        if version != SCAN_VERSION:
            raise FormatError(f"{path}: unsupported version {version} at byte 4")
        body = f.read()
    expected = count * _POINT_DTYPE.itemsize
    if len(body) != expected:
        raise FormatError(
            f"{path}: truncated payload at byte {_HEADER.size + len(body)}"
            f" (expected {expected} payload bytes, got {len(body)})"
        )
    rec = np.frombuffer(body, dtype=_POINT_DTYPE)
    xyz = np.column_stack([rec["x"], rec["y"], rec["z"]])
    inten = rec["i"].copy()
    bad = np.flatnonzero((inten < 0) | (inten > 1) | ~np.isfinite(inten))
    if bad.size:
        off = _HEADER.size + int(bad[0]) * _POINT_DTYPE.itemsize + 24
        raise FormatError(f"{path}: intensity outside [0,1] at byte {off}")
    return Scan(scan_id, xyz, inten)


def _read_ascii(path) -> Scan:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline()
        if not header.startswith("# x y z intensity scan_id="):
            raise FormatError(f"{path}: bad magic at line 1")
        try:
            scan_id = int(header.rsplit("=", 1)[1])
        except ValueError as e:
            raise FormatError(f"{path}: unreadable scan_id at line 1") from e
        rows = []
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise FormatError(f"{path}: expected 4 fields at line {lineno}")
            try:
                x, y, z, inten = (float(p) for p in parts)
            except ValueError as e:
                raise FormatError(f"{path}: unreadable number at line {lineno}") from e
            if not (0.0 <= inten <= 1.0):
                raise FormatError(f"{path}: intensity outside [0,1] at line {lineno}")
            rows.append((x, y, z, inten))
    xyz = np.array([r[:3] for r in rows], dtype=np.float64).reshape(-1, 3)
    inten = np.array([r[3] for r in rows], dtype=np.float32)
    return Scan(scan_id, xyz, inten)
