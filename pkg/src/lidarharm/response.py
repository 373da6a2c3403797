"""Monotone sensor response curves, their inverses, and the global brightness shift.

A response function maps true (harmonized) intensity to recorded intensity on
[0, 1] and is non-decreasing, hence invertible up to flat segments (which
invert to the lowest preimage). Three variants: analytic gamma, normalized
logistic s-curve, and tabulated curves of 1024 uniformly spaced samples.

The global shift is a spatial multiplier on true brightness along the x axis.
The printed closed form in the source material diverges for x < h at l=100,
so the default form is the logistic multiplier m(x) = 1 - s/(1 + e^{l(x-h)}),
which darkens the left side and returns to 1 on the right; an alternative
`floor` form m(x) = v + s/(1 + e^{-l(x-h)}) is selectable.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .pointcloud import Scan

TABULATED_SAMPLES = 1024
_BISECT_ITERS = 64


class CurveFormatError(ValueError):
    """Raised for malformed curve files."""


class ResponseDomainError(ValueError):
    """Input intensity outside the function's domain or range."""


@dataclass(frozen=True)
class ResponseFunction:
    """Monotone map from true intensity H to recorded intensity I = f(H)."""

    kind: str  # "gamma" | "scurve" | "tabulated"
    name: str = ""
    gamma: float = 1.0
    steepness: float = 8.0
    midpoint: float = 0.5
    samples: Optional[np.ndarray] = None  # (1024,) non-decreasing in [0,1]

    def __post_init__(self):
        if self.kind == "gamma":
            if not self.gamma > 0:
                raise ValueError("gamma must be > 0")
        elif self.kind == "scurve":
            if not self.steepness > 0:
                raise ValueError("s-curve steepness must be > 0")
        elif self.kind == "tabulated":
            s = np.asarray(self.samples, dtype=np.float64)
            if s.shape != (TABULATED_SAMPLES,):
                raise ValueError(f"tabulated curve needs {TABULATED_SAMPLES} samples, got {s.shape}")
            if np.any(np.diff(s) < 0):
                raise ValueError("curve not monotone")
            if s[0] < 0 or s[-1] > 1:
                raise ValueError("tabulated samples must lie in [0, 1]")
            object.__setattr__(self, "samples", s)
        else:
            raise ValueError(f"unknown response kind {self.kind!r}")

    @property
    def lo(self) -> float:
        """f(0), the bottom of the recorded range."""
        return float(apply(self, 0.0))

    @property
    def hi(self) -> float:
        """f(1), the top of the recorded range."""
        return float(apply(self, 1.0))


def identity_response() -> ResponseFunction:
    return ResponseFunction(kind="gamma", name="identity", gamma=1.0)


def _logistic(t):
    return 1.0 / (1.0 + np.exp(-np.clip(t, -700.0, 700.0)))


def _scurve_raw(f: ResponseFunction, u):
    return _logistic(f.steepness * (np.asarray(u, dtype=np.float64) - f.midpoint))


def _scurve(f: ResponseFunction, u):
    # normalized so the curve spans exactly [0, 1]
    r0 = _scurve_raw(f, 0.0)
    r1 = _scurve_raw(f, 1.0)
    return (_scurve_raw(f, u) - r0) / (r1 - r0)


def apply(f: ResponseFunction, h_intensity):
    """Recorded intensity f(H); accepts scalars or arrays in [0, 1]."""
    h = np.asarray(h_intensity, dtype=np.float64)
    if h.size and (h.min() < 0.0 or h.max() > 1.0):
        raise ResponseDomainError("input intensity outside [0, 1]")
    if f.kind == "gamma":
        out = h ** f.gamma
    elif f.kind == "scurve":
        out = _scurve(f, h)
    else:
        grid = np.linspace(0.0, 1.0, TABULATED_SAMPLES)
        out = np.interp(h, grid, f.samples)
    if np.isscalar(h_intensity) or np.asarray(h_intensity).ndim == 0:
        return float(out)
    return out


def invert(f: ResponseFunction, i_intensity):
    """Lowest preimage H with f(H) = I; analytic for gamma, bisection otherwise."""
    i = np.asarray(i_intensity, dtype=np.float64)
    scalar = np.isscalar(i_intensity) or np.asarray(i_intensity).ndim == 0
    if i.size and (i.min() < f.lo - 1e-12 or i.max() > f.hi + 1e-12):
        raise ResponseDomainError(
            f"input intensity outside the range [{f.lo:.6g}, {f.hi:.6g}] of {f.name or f.kind}"
        )
    i = np.clip(i, f.lo, f.hi)
    if f.kind == "gamma":
        out = i ** (1.0 / f.gamma)
    else:
        # leftmost u in [0,1] with f(u) >= i; flats resolve to the lowest preimage
        lo = np.zeros_like(i, dtype=np.float64)
        hi = np.ones_like(i, dtype=np.float64)
        for _ in range(_BISECT_ITERS):
            mid = 0.5 * (lo + hi)
            ge = apply(f, mid) >= i
            hi = np.where(ge, mid, hi)
            lo = np.where(ge, lo, mid)
        out = hi
    return float(out) if scalar else out


@dataclass(frozen=True)
class ShiftParams:
    """Logistic brightness-shift profile along the normalized x axis."""

    h: float = 0.5    # midpoint of the transition, in normalized x
    v: float = 0.3    # floor multiplier (used by the `floor` form)
    l: float = 100.0  # transition steepness
    s: float = 0.5    # shift depth
    form: str = "one-minus"  # "one-minus" | "floor"

    def __post_init__(self):
        if not self.l > 0:
            raise ValueError("l must be > 0")
        if not (0.0 <= self.s <= 1.0):
            raise ValueError("s must lie in [0, 1]")
        if self.form not in ("one-minus", "floor"):
            raise ValueError(f"unknown shift form {self.form!r}")
        if self.form == "floor" and not (0.0 < self.v and self.v + self.s <= 1.0):
            raise ValueError("floor form needs 0 < v and v + s <= 1")


def shift_multiplier(p: ShiftParams, x_norm):
    """Brightness multiplier m(x) in (0, 1], non-decreasing in x."""
    x = np.asarray(x_norm, dtype=np.float64)
    sig = _logistic(p.l * (x - p.h))
    if p.form == "one-minus":
        out = 1.0 - p.s * (1.0 - sig)
    else:
        out = p.v + p.s * sig
    if np.isscalar(x_norm) or np.asarray(x_norm).ndim == 0:
        return float(out)
    return out


def corrupt_scan(
    scan: Scan,
    f: ResponseFunction,
    shift: Optional[ShiftParams],
    x_extent: tuple[float, float],
) -> Scan:
    """Record a scan through a sensor: intensity H becomes f(m(x_norm) * H).

    The shift models physical scene brightness, so it is applied before the
    response function. Coordinates and scan_id are unchanged. With the
    identity curve and no shift the intensities pass through bit-exactly.
    """
    x_min, x_max = x_extent
    if not x_max > x_min:
        raise ValueError("x_extent max must exceed min")
    h = scan.intensity.astype(np.float64)
    if shift is not None:
        x_norm = (scan.xyz[:, 0] - x_min) / (x_max - x_min)
        h = h * shift_multiplier(shift, x_norm)
    out = apply(f, np.clip(h, 0.0, 1.0))
    return scan.with_intensity(np.clip(out, 0.0, 1.0).astype(np.float32))


_NAME_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")


def load_curves(path) -> list[ResponseFunction]:
    """Load tabulated curves: records of `name <id>`, `samples 1024`, 1024 reals."""
    with open(path, "r", encoding="utf-8") as fh:
        tokens = fh.read().split()
    curves: list[ResponseFunction] = []
    pos = 0
    while pos < len(tokens):
        if tokens[pos] != "name" or pos + 1 >= len(tokens):
            raise CurveFormatError(f"{path}: expected `name <identifier>` at token {pos}")
        name = tokens[pos + 1]
        if not _NAME_RE.match(name):
            raise CurveFormatError(f"{path}: bad curve name {name!r}")
        pos += 2
        if pos + 1 >= len(tokens) or tokens[pos] != "samples":
            raise CurveFormatError(f"{path}: curve {name!r}: expected `samples <count>`")
        try:
            count = int(tokens[pos + 1])
        except ValueError as e:
            raise CurveFormatError(f"{path}: curve {name!r}: unreadable sample count") from e
        if count != TABULATED_SAMPLES:
            raise CurveFormatError(
                f"{path}: curve {name!r}: expected {TABULATED_SAMPLES} samples, got {count}"
            )
        pos += 2
        if pos + count > len(tokens):
            raise CurveFormatError(f"{path}: curve {name!r}: truncated sample block")
        try:
            vals = np.array([float(t) for t in tokens[pos:pos + count]], dtype=np.float64)
        except ValueError as e:
            raise CurveFormatError(f"{path}: curve {name!r}: unreadable sample") from e
        pos += count
        if vals.min() < 0.0 or vals.max() > 1.0:
            raise CurveFormatError(f"{path}: curve {name!r}: samples outside [0, 1]")
        if np.any(np.diff(vals) < 0):
            raise CurveFormatError(f"{path}: curve {name!r}: curve not monotone")
        curves.append(ResponseFunction(kind="tabulated", name=name, samples=vals))
    if not curves:
        raise CurveFormatError(f"{path}: no curves found")
    return curves


def parse_response_spec(spec: str, curves: Optional[dict[str, ResponseFunction]] = None) -> ResponseFunction:
    """Parse a curve spec string: identity | gamma:<g> | scurve:<steep>,<mid> | curve:<name>."""
    spec = spec.strip()
    if spec == "identity":
        return identity_response()
    if spec.startswith("gamma:"):
        return ResponseFunction(kind="gamma", name=spec, gamma=float(spec[6:]))
    if spec.startswith("scurve:"):
        steep, mid = (float(p) for p in spec[7:].split(","))
        return ResponseFunction(kind="scurve", name=spec, steepness=steep, midpoint=mid)
    if spec.startswith("curve:"):
        name = spec[6:]
        if not curves or name not in curves:
            raise ValueError(f"tabulated curve {name!r} not found (is corrupt.curves_file set?)")
        return curves[name]
    raise ValueError(f"unknown response spec {spec!r}")
