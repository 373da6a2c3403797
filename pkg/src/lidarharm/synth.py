"""Deterministic synthetic urban scene and flight-strip generator.

Stands in for a real multi-flight LiDAR collection at desk scale: a world
cloud with ground-truth harmonized intensities (multi-modal, class-dependent
reflectance plus a smooth spatial field), cut into overlapping strips that
model separate flights. Geometry realism is out of scope; only intensity
statistics and 3D neighborhood structure matter downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud import EMBEDDING_DICT_SIZE, Scan


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    x_size: float = 100.0
    y_size: float = 100.0
    density: float = 10.0          # points per square meter
    n_strips: int = 4
    strip_overlap: float = 0.5     # fraction of strip width shared with the next strip
    mix_ground: float = 0.5
    mix_building: float = 0.3
    mix_vegetation: float = 0.2
    jitter_sigma: float = 0.02     # cross-strip positional noise in overlap zones, meters
    field_amplitude: float = 0.15  # smooth intensity field amplitude
    field_wavelength: float = 5.0  # meters

    def __post_init__(self):
        if not (self.x_size > 0 and self.y_size > 0):
            raise ValueError("extent must have positive area")
        if not self.density > 0:
            raise ValueError("density must be > 0")
        if not (2 <= self.n_strips <= EMBEDDING_DICT_SIZE):
            raise ValueError(f"n_strips must lie in [2, {EMBEDDING_DICT_SIZE}]")
        if not (0.0 < self.strip_overlap < 1.0):
            raise ValueError("strip_overlap must lie in (0, 1)")
        mix = (self.mix_ground, self.mix_building, self.mix_vegetation)
        if any(m < 0 for m in mix) or abs(sum(mix) - 1.0) > 1e-9:
            raise ValueError("feature mix must be non-negative and sum to 1")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")


# reflectance stand-ins per class: Beta(a, b) scaled to [lo, hi]
_GROUND = (2.0, 2.0, 0.2, 0.6)
_BUILDING = (5.0, 2.0, 0.4, 0.95)
_VEGETATION = (2.0, 5.0, 0.05, 0.5)


def _smooth_field(xy: np.ndarray, amplitude: float, wavelength: float, rng) -> np.ndarray:
    """Slowly varying intensity modulation, a fixed random mixture of plane waves."""
    if amplitude == 0.0:
        return np.zeros(xy.shape[0])
    out = np.zeros(xy.shape[0])
    k = 2.0 * np.pi / wavelength
    for scale in (1.0, 0.47, 2.3):
        theta = rng.uniform(0, 2 * np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        proj = xy[:, 0] * np.cos(theta) + xy[:, 1] * np.sin(theta)
        out += np.sin(k * scale * proj + phase)
    return amplitude * out / 3.0


def generate_world(spec: SceneSpec) -> Scan:
    """World cloud with ground-truth harmonized intensities; pure in the seed."""
    rng = np.random.default_rng(spec.seed)
    area = spec.x_size * spec.y_size
    n = int(rng.poisson(spec.density * area))
    xy = rng.uniform((0.0, 0.0), (spec.x_size, spec.y_size), size=(n, 2))

    cls = np.zeros(n, dtype=np.int8)  # 0 ground, 1 building, 2 vegetation
    heights = np.zeros(n)

    # axis-aligned building boxes until the requested footprint fraction is covered
    covered = 0.0
    while covered < spec.mix_building * area:
        w, d = rng.uniform(8.0, 20.0, size=2)
        x0 = rng.uniform(0, max(spec.x_size - w, 1e-9))
        y0 = rng.uniform(0, max(spec.y_size - d, 1e-9))
        h = rng.uniform(3.0, 15.0)
        inside = (
            (xy[:, 0] >= x0) & (xy[:, 0] <= x0 + w)
            & (xy[:, 1] >= y0) & (xy[:, 1] <= y0 + d)
        )
        cls[inside] = 1
        heights[inside] = h
        covered += w * d

    # vegetation disks over what is still ground
    covered = 0.0
    while covered < spec.mix_vegetation * area:
        r = rng.uniform(2.0, 5.0)
        cx = rng.uniform(0, spec.x_size)
        cy = rng.uniform(0, spec.y_size)
        inside = ((xy[:, 0] - cx) ** 2 + (xy[:, 1] - cy) ** 2 <= r * r) & (cls == 0)
        cls[inside] = 2
        heights[inside] = rng.uniform(4.0, 10.0)
        covered += np.pi * r * r

    terrain = 0.8 * np.sin(xy[:, 0] / 23.0) + 0.6 * np.cos(xy[:, 1] / 31.0)
    z = terrain + rng.normal(0.0, 0.03, size=n)
    z = np.where(cls == 1, terrain + heights + rng.normal(0.0, 0.05, size=n), z)
    veg = cls == 2
    z[veg] = terrain[veg] + rng.uniform(0.5, 1.0, size=int(veg.sum())) * heights[veg]

    inten = np.empty(n)
    for code, (a, b, lo, hi) in ((0, _GROUND), (1, _BUILDING), (2, _VEGETATION)):
        m = cls == code
        inten[m] = lo + (hi - lo) * rng.beta(a, b, size=int(m.sum()))
    inten += _smooth_field(xy, spec.field_amplitude, spec.field_wavelength, rng)
    inten = np.clip(inten, 0.02, 0.98)

    xyz = np.column_stack([xy, z])
    return Scan(0, xyz, inten.astype(np.float32))


def strip_bands(spec: SceneSpec) -> list[tuple[float, float]]:
    """x intervals of the flight strips; consecutive bands share
    strip_overlap of their width and together cover the full extent."""
    n, ov = spec.n_strips, spec.strip_overlap
    width = spec.x_size / (1.0 + (n - 1) * (1.0 - ov))
    stride = (1.0 - ov) * width
    return [(i * stride, i * stride + width) for i in range(n)]


def cut_strips(world: Scan, spec: SceneSpec) -> list[Scan]:
    """Split the world into overlapping strips, one scan id per strip.

    Points falling in a zone covered by more than one strip are re-jittered
    independently per strip (positional noise only, reflectance inherited),
    so the same surface spot never has identical coordinates in two scans.
    """
    if spec.n_strips < 2:
        raise ValueError("need at least 2 strips")
    bands = strip_bands(spec)
    if bands[0][1] - bands[0][0] >= spec.x_size and spec.n_strips > 1:
        raise ValueError("strip overlap so large that strips exceed the extent")
    x = world.xyz[:, 0]
    in_band = [(x >= lo) & (x <= hi) for lo, hi in bands]
    strips = []
    for i, mask in enumerate(in_band):
        rng = np.random.default_rng([spec.seed, 7, i])
        xyz = world.xyz[mask].copy()
        shared = np.zeros(int(mask.sum()), dtype=bool)
        for j, other in enumerate(in_band):
            if j != i:
                shared |= other[mask]
        if spec.jitter_sigma > 0 and shared.any():
            xyz[shared] += rng.normal(0.0, spec.jitter_sigma, size=(int(shared.sum()), 3))
        strips.append(Scan(i, xyz, world.intensity[mask]))
    return strips
