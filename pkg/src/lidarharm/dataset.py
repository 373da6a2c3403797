"""Training/evaluation example construction from overlapping corrupted scans.

Two example flavors:

* overlap examples: a target-scan point supplies the harmonization ground
  truth Ĥ (its recorded true intensity), the neighborhood comes from the
  corrupted source scan within a radius, and the interpolation ground truth
  Î is the source's response curve applied to Ĥ (what the source sensor
  would have recorded at that spot).
* in-scan examples: a held-out point of one corrupted scan is predicted from
  its own neighbors. Mapping a scan onto itself is the identity in intensity
  space, so Î = Ĥ = the held-out point's recorded intensity and
  source_id == target_id.

Neighbor offsets are stored relative to the target location, making the
downstream model translation-invariant by construction.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .pointcloud import FormatError, Scan, SpatialIndex
from .response import ResponseFunction, apply

DATASET_MAGIC = b"LHD1"
DATASET_VERSION = 1
_DS_HEADER = struct.Struct("<4sHQ")
_REC_HEAD = struct.Struct("<HHH")
DEFAULT_MIN_NEIGHBORS = 10


@dataclass
class Example:
    """One training record: a corrupted source neighborhood around a target location."""

    neighbors: np.ndarray  # (n, 4) float32: dx, dy, dz, corrupted intensity
    source_id: int
    target_id: int
    gt_interp: float
    gt_harm: float
    x_norm: float

    def __post_init__(self):
        nb = np.ascontiguousarray(self.neighbors, dtype=np.float32)
        if nb.ndim != 2 or nb.shape[1] != 4 or nb.shape[0] < 1:
            raise ValueError(f"neighbors must be (n>=1, 4), got {nb.shape}")
        self.neighbors = nb
        self.gt_interp = float(np.float32(self.gt_interp))
        self.gt_harm = float(np.float32(self.gt_harm))
        self.x_norm = float(np.float32(self.x_norm))

    def __eq__(self, other):
        return (
            isinstance(other, Example)
            and self.source_id == other.source_id
            and self.target_id == other.target_id
            and self.neighbors.tobytes() == other.neighbors.tobytes()
            and np.float32(self.gt_interp).tobytes() == np.float32(other.gt_interp).tobytes()
            and np.float32(self.gt_harm).tobytes() == np.float32(other.gt_harm).tobytes()
            and np.float32(self.x_norm).tobytes() == np.float32(other.x_norm).tobytes()
        )


@dataclass
class DatasetManifest:
    split: str
    count: int
    k: int
    radius: float
    n_bins: int
    pair_counts: dict = field(default_factory=dict)   # "source->target" -> count
    bin_counts: list = field(default_factory=list)    # per gt_harm bin
    corruption: dict = field(default_factory=dict)    # scan_id str -> {curve, shift}
    skipped_sparse: int = 0
    warnings: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    payload_crc32: int = 0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))


def intensity_bin(value: float, n_bins: int) -> int:
    return min(int(value * n_bins), n_bins - 1)


def pair_key(source_id: int, target_id: int) -> str:
    return f"{source_id}->{target_id}"


def find_overlap_pairs(
    scans: list[Scan],
    target_id: int,
    min_overlap: int = 5000,
    radius: float = 1.0,
    indexes: dict[int, SpatialIndex] | None = None,
) -> list[tuple[int, int]]:
    """(source, target) pairs whose overlap with the designated target scan
    holds at least min_overlap source points."""
    if len(scans) < 2:
        raise ValueError("need at least 2 scans")
    if min_overlap < 1:
        raise ValueError("min_overlap must be >= 1")
    by_id = {s.scan_id: s for s in scans}
    if target_id not in by_id:
        raise ValueError(f"target scan {target_id} not among the scans")
    target = by_id[target_id]
    tgt_index = (indexes or {}).get(target_id) or SpatialIndex(target.xyz)
    pairs = []
    for s in scans:
        if s.scan_id == target_id:
            continue
        count = int(tgt_index.within_mask(s.xyz, radius).sum())
        if count >= min_overlap:
            pairs.append((s.scan_id, target_id))
    if not pairs:
        raise ValueError("insufficient overlap: no source scan qualifies against the target")
    return pairs


def build_overlap_examples(
    target: Scan,
    source_index: SpatialIndex,
    source_curve: ResponseFunction,
    source_id: int,
    k: int = 150,
    radius: float = 1.0,
    k_min: int = DEFAULT_MIN_NEIGHBORS,
    n_samples: int = 10_000,
    x_extent: tuple[float, float] = (0.0, 1.0),
    rng: np.random.Generator | None = None,
) -> tuple[list[Example], int]:
    """Examples for one (source, target) pair.

    Target points are sampled uniformly (seeded) among those having any source
    point within the radius; a sample is skipped when fewer than k_min source
    neighbors fall inside its ball. Returns (examples, skipped count), ordered
    by target point index.
    """
    rng = rng or np.random.default_rng(0)
    candidates = np.flatnonzero(source_index.within_mask(target.xyz, radius))
    if candidates.size == 0:
        return [], 0
    take = min(n_samples, candidates.size)
    chosen = np.sort(rng.choice(candidates, size=take, replace=False))
    x_min, x_max = x_extent
    examples, skipped = [], 0
    for ti in chosen:
        loc = target.xyz[ti]
        idx, _ = source_index.query(loc, k, radius)
        if idx.size < k_min:
            skipped += 1
            continue
        offsets = (source_index.xyz[idx] - loc).astype(np.float32)
        vals = source_index.intensity[idx].astype(np.float32)
        gt_harm = float(target.intensity[ti])
        gt_interp = float(apply(source_curve, gt_harm))
        examples.append(Example(
            neighbors=np.column_stack([offsets, vals]),
            source_id=source_id,
            target_id=target.scan_id,
            gt_interp=gt_interp,
            gt_harm=gt_harm,
            x_norm=(float(loc[0]) - x_min) / (x_max - x_min),
        ))
    return examples, skipped


def build_inscan_examples(
    scan: Scan,
    index: SpatialIndex,
    eligible: np.ndarray,
    k: int = 150,
    radius: float = 1.0,
    k_min: int = DEFAULT_MIN_NEIGHBORS,
    n_samples: int = 10_000,
    x_extent: tuple[float, float] = (0.0, 1.0),
    rng: np.random.Generator | None = None,
) -> tuple[list[Example], int]:
    """Same-scan examples: predict a held-out point from its own neighbors.

    `eligible` is a boolean mask of points outside the overlap with the target
    scan (and outside any reserved evaluation region). The center point is
    removed from its own neighborhood; both ground truths equal its recorded
    intensity since the scan maps onto itself.
    """
    rng = rng or np.random.default_rng(0)
    candidates = np.flatnonzero(eligible)
    if candidates.size == 0:
        return [], 0
    take = min(n_samples, candidates.size)
    chosen = np.sort(rng.choice(candidates, size=take, replace=False))
    x_min, x_max = x_extent
    examples, skipped = [], 0
    for ci in chosen:
        loc = scan.xyz[ci]
        idx, _ = index.query(loc, k + 1, radius)
        keep = idx != ci
        idx = idx[keep][:k]
        if idx.size < k_min:
            skipped += 1
            continue
        offsets = (scan.xyz[idx] - loc).astype(np.float32)
        vals = scan.intensity[idx].astype(np.float32)
        center_value = float(scan.intensity[ci])
        examples.append(Example(
            neighbors=np.column_stack([offsets, vals]),
            source_id=scan.scan_id,
            target_id=scan.scan_id,
            gt_interp=center_value,
            gt_harm=center_value,
            x_norm=(float(loc[0]) - x_min) / (x_max - x_min),
        ))
    return examples, skipped


def split_examples(
    examples: list[Example], val_fraction: float, rng: np.random.Generator
) -> tuple[list[Example], list[Example]]:
    n = len(examples)
    n_val = int(round(val_fraction * n))
    perm = rng.permutation(n)
    val_idx = np.sort(perm[:n_val])
    train_idx = np.sort(perm[n_val:])
    return [examples[i] for i in train_idx], [examples[i] for i in val_idx]


def stratified_resample(
    examples: list[Example],
    n_bins: int = 10,
    per_bin_target: int = 400,
    rng: np.random.Generator | None = None,
) -> tuple[list[Example], list[str]]:
    """Balance examples per (source, target) pair and per Ĥ intensity bin.

    Every non-empty (pair, bin) cell ends up with exactly per_bin_target
    examples, oversampling with replacement where a cell is short. Empty
    cells produce a warning, not an error.
    """
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    rng = rng or np.random.default_rng(0)
    cells: dict[tuple[int, int, int], list[int]] = {}
    for i, ex in enumerate(examples):
        key = (ex.source_id, ex.target_id, intensity_bin(ex.gt_harm, n_bins))
        cells.setdefault(key, []).append(i)
    pairs = sorted({(s, t) for s, t, _ in cells})
    warnings = []
    out: list[Example] = []
    for s, t in pairs:
        for b in range(n_bins):
            members = cells.get((s, t, b))
            if not members:
                warnings.append(f"empty cell pair={pair_key(s, t)} bin={b}")
                continue
            members = np.array(members)
            if members.size >= per_bin_target:
                pick = rng.choice(members, size=per_bin_target, replace=False)
            else:
                extra = rng.choice(members, size=per_bin_target - members.size, replace=True)
                pick = np.concatenate([members, extra])
            for i in np.sort(pick):
                out.append(examples[i])
    return out, warnings


def make_manifest(
    examples: list[Example],
    split: str,
    k: int,
    radius: float,
    n_bins: int,
    corruption: dict | None = None,
    skipped_sparse: int = 0,
    warnings: list[str] | None = None,
    extra: dict | None = None,
) -> DatasetManifest:
    pair_counts: dict[str, int] = {}
    bin_counts = [0] * n_bins
    for ex in examples:
        key = pair_key(ex.source_id, ex.target_id)
        pair_counts[key] = pair_counts.get(key, 0) + 1
        bin_counts[intensity_bin(ex.gt_harm, n_bins)] += 1
    return DatasetManifest(
        split=split,
        count=len(examples),
        k=k,
        radius=radius,
        n_bins=n_bins,
        pair_counts=pair_counts,
        bin_counts=bin_counts,
        corruption=corruption or {},
        skipped_sparse=skipped_sparse,
        warnings=warnings or [],
        extra=extra or {},
    )


def _pack_examples(examples: list[Example]) -> bytes:
    chunks = []
    for ex in examples:
        n = ex.neighbors.shape[0]
        chunks.append(_REC_HEAD.pack(ex.source_id, ex.target_id, n))
        chunks.append(ex.neighbors.tobytes())
        chunks.append(np.array([ex.gt_interp, ex.gt_harm, ex.x_norm], np.float32).tobytes())
    return b"".join(chunks)


def save_dataset(path, examples: list[Example], manifest: DatasetManifest) -> None:
    if manifest.count != len(examples):
        raise ValueError("manifest count does not match example list")
    payload = _pack_examples(examples)
    manifest.payload_crc32 = zlib.crc32(payload)
    mbytes = manifest.to_json().encode("utf-8")
    with open(path, "wb") as f:
        f.write(_DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(examples)))
        f.write(struct.pack("<I", len(mbytes)))
        f.write(mbytes)
        f.write(payload)


def load_dataset(path) -> tuple[DatasetManifest, list[Example]]:
    with open(path, "rb") as f:
        head = f.read(_DS_HEADER.size)
        if len(head) < _DS_HEADER.size or head[:4] != DATASET_MAGIC:
            raise FormatError(f"{path}: bad magic at byte 0")
        _, version, count = _DS_HEADER.unpack(head)
        if version != DATASET_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        (mlen,) = struct.unpack("<I", f.read(4))
        mbytes = f.read(mlen)
        if len(mbytes) != mlen:
            raise FormatError(f"{path}: truncated manifest at byte {_DS_HEADER.size + 4 + len(mbytes)}")
        manifest = DatasetManifest.from_json(mbytes.decode("utf-8"))
        payload = f.read()
    if zlib.crc32(payload) != manifest.payload_crc32:
        raise FormatError(f"{path}: payload checksum mismatch, file corrupted")
    base = _DS_HEADER.size + 4 + mlen
    examples: list[Example] = []
    off = 0
    for _ in range(count):
        if off + _REC_HEAD.size > len(payload):
            raise FormatError(f"{path}: truncated example header at byte {base + off}")
        sid, tid, n = _REC_HEAD.unpack_from(payload, off)
        off += _REC_HEAD.size
        need = 16 * n + 12
        if off + need > len(payload):
            raise FormatError(f"{path}: truncated example payload at byte {base + off}")
        nb = np.frombuffer(payload, dtype=np.float32, count=4 * n, offset=off).reshape(n, 4)
        off += 16 * n
        gi, gh, xn = np.frombuffer(payload, dtype=np.float32, count=3, offset=off)
        off += 12
        examples.append(Example(nb.copy(), sid, tid, float(gi), float(gh), float(xn)))
    if off != len(payload):
        raise FormatError(f"{path}: {len(payload) - off} trailing bytes at byte {base + off}")
    if manifest.count != count or manifest.count != len(examples):
        raise FormatError(f"{path}: count mismatch between header, manifest, and payload")
    check = make_manifest(examples, manifest.split, manifest.k, manifest.radius, manifest.n_bins)
    if check.pair_counts != manifest.pair_counts or check.bin_counts != manifest.bin_counts:
        raise FormatError(f"{path}: manifest counts do not match recomputed counts")
    return manifest, examples
