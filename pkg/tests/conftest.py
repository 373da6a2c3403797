import numpy as np
import pytest

from lidarharm.pointcloud import Scan


@pytest.fixture
def rng():
    return np.random.default_rng(20260809)


def random_scan(rng, n, scan_id=0, extent=10.0):
    xyz = rng.uniform(0.0, extent, size=(n, 3))
    inten = rng.uniform(0.0, 1.0, size=n).astype(np.float32)
    return Scan(scan_id, xyz, inten)


def brute_force_knn(xyz, loc, k, radius):
    """Independent linear-scan oracle: (indices, distances) by (d2, index)."""
    loc = np.asarray(loc, dtype=np.float64).reshape(3)
    d2 = ((xyz - loc) ** 2).sum(axis=1)
    keep = np.flatnonzero(d2 <= radius * radius)
    order = np.lexsort((keep, d2[keep]))[:k]
    sel = keep[order]
    return sel, np.sqrt(d2[sel])
