import numpy as np
import pytest

from lidarharm.dataset import (
    Example,
    build_inscan_examples,
    build_overlap_examples,
    find_overlap_pairs,
    intensity_bin,
    load_dataset,
    make_manifest,
    pair_key,
    save_dataset,
    split_examples,
    stratified_resample,
)
from lidarharm.pointcloud import FormatError, Scan, SpatialIndex, build_index
from lidarharm.response import ResponseFunction, apply, identity_response

from conftest import random_scan


def dense_scan(rng, n, scan_id=0, extent=10.0):
    xyz = rng.uniform(0.0, extent, size=(n, 3))
    xyz[:, 2] *= 0.1  # keep the cloud surface-like so 1 m balls are well filled
    return Scan(scan_id, xyz, rng.uniform(0.05, 0.95, n).astype(np.float32))


class TestFindOverlapPairs:
    def test_disjoint_scans_error(self, rng):
        a = dense_scan(rng, 500, 0)
        b = Scan(1, a.xyz + 100.0, a.intensity)
        with pytest.raises(ValueError, match="insufficient overlap"):
            find_overlap_pairs([a, b], target_id=1, min_overlap=10)

    def test_self_excluded_and_pair_found(self, rng):
        a = dense_scan(rng, 800, 0)
        b = Scan(1, a.xyz + np.array([5.0, 0.0, 0.0]), a.intensity)
        pairs = find_overlap_pairs([a, b], target_id=1, min_overlap=50)
        assert pairs == [(0, 1)]

    def test_against_overlap_count_oracle(self, rng):
        a = dense_scan(rng, 600, 0)
        b = Scan(1, a.xyz + np.array([5.0, 0.0, 0.0]), a.intensity)
        d2 = ((a.xyz[:, None, :] - b.xyz[None, :, :]) ** 2).sum(axis=2)
        true_count = int((d2.min(axis=1) <= 1.0).sum())
        assert true_count >= 50  # sanity for the fixture
        pairs = find_overlap_pairs([a, b], target_id=1, min_overlap=true_count)
        assert pairs == [(0, 1)]
        with pytest.raises(ValueError):
            find_overlap_pairs([a, b], target_id=1, min_overlap=true_count + 1)


class TestBuildOverlapExamples:
    def _pair(self, rng, curve):
        target = dense_scan(rng, 2500, scan_id=1, extent=8.0)
        src_xyz = target.xyz + rng.normal(0, 0.08, target.xyz.shape)
        h = target.intensity.astype(np.float64)
        corrupted = np.asarray(apply(curve, h), dtype=np.float32)
        source = Scan(0, src_xyz, corrupted)
        return target, build_index(source)

    def test_identity_corruption_interp_equals_harm(self, rng):
        curve = identity_response()
        target, src_index = self._pair(rng, curve)
        examples, _ = build_overlap_examples(
            target, src_index, curve, source_id=0, k=20, radius=1.0,
            k_min=3, n_samples=200, x_extent=(0.0, 8.0), rng=rng,
        )
        assert len(examples) > 100
        for ex in examples:
            assert ex.gt_interp == ex.gt_harm
            assert ex.source_id == 0 and ex.target_id == 1

    def test_gamma_two_interp(self, rng):
        curve = ResponseFunction(kind="gamma", gamma=2.0)
        target = Scan(1, np.array([[1.0, 1.0, 0.0]]), np.array([0.5], np.float32))
        src = Scan(0, np.array([[1.05, 1.0, 0.0], [1.0, 1.1, 0.0], [0.9, 1.0, 0.0]]),
                   np.array([0.2, 0.3, 0.4], np.float32))
        examples, _ = build_overlap_examples(
            target, build_index(src), curve, source_id=0, k=5, radius=1.0,
            k_min=1, n_samples=10, x_extent=(0.0, 2.0), rng=rng,
        )
        assert len(examples) == 1
        assert abs(examples[0].gt_interp - 0.25) <= 1e-6
        assert examples[0].gt_harm == 0.5

    def test_offsets_within_radius_and_invariant(self, rng):
        curve = ResponseFunction(kind="gamma", gamma=1.7)
        target, src_index = self._pair(rng, curve)
        examples, skipped = build_overlap_examples(
            target, src_index, curve, source_id=0, k=15, radius=1.0,
            k_min=3, n_samples=300, x_extent=(0.0, 8.0), rng=rng,
        )
        for ex in examples:
            d = np.linalg.norm(ex.neighbors[:, :3].astype(np.float64), axis=1)
            assert (d <= 1.0 + 1e-6).all()
            assert abs(ex.gt_interp - apply(curve, ex.gt_harm)) <= 1e-6

    def test_sparse_neighborhoods_skipped(self, rng):
        curve = identity_response()
        target = Scan(1, np.array([[0.0, 0.0, 0.0]]), np.array([0.5], np.float32))
        src = Scan(0, np.array([[0.1, 0.0, 0.0]]), np.array([0.4], np.float32))
        examples, skipped = build_overlap_examples(
            target, build_index(src), curve, source_id=0, k=5, radius=1.0,
            k_min=3, n_samples=5, x_extent=(0.0, 1.0), rng=rng,
        )
        assert examples == [] and skipped == 1


class TestBuildInscanExamples:
    def test_ids_equal_and_center_absent(self, rng):
        scan = dense_scan(rng, 1500, scan_id=2, extent=6.0)
        index = build_index(scan)
        eligible = np.ones(scan.n, dtype=bool)
        examples, _ = build_inscan_examples(
            scan, index, eligible, k=10, radius=1.0, k_min=3,
            n_samples=150, x_extent=(0.0, 6.0), rng=rng,
        )
        assert len(examples) > 100
        for ex in examples:
            assert ex.source_id == ex.target_id == 2
            assert ex.gt_interp == ex.gt_harm
            # center removed: no neighbor sits at exactly zero offset with the center value
            d = np.linalg.norm(ex.neighbors[:, :3], axis=1)
            assert (d > 0).all()

    def test_identity_target_is_held_out_intensity(self, rng):
        scan = dense_scan(rng, 800, scan_id=0, extent=5.0)
        index = build_index(scan)
        examples, _ = build_inscan_examples(
            scan, index, np.ones(scan.n, bool), k=8, radius=1.5, k_min=2,
            n_samples=50, x_extent=(0.0, 5.0), rng=np.random.default_rng(7),
        )
        values = set(np.float32(v) for v in scan.intensity.tolist())
        for ex in examples:
            assert np.float32(ex.gt_harm) in values


class TestStratifiedResample:
    def _examples(self, rng, count, sid=0, tid=1, harm=None):
        out = []
        for i in range(count):
            h = harm if harm is not None else float(rng.uniform(0, 1))
            out.append(Example(
                neighbors=rng.uniform(-1, 1, (3, 4)).astype(np.float32),
                source_id=sid, target_id=tid, gt_interp=h, gt_harm=h, x_norm=0.5,
            ))
        return out

    def test_balanced_input_unchanged_multiset(self, rng):
        examples = []
        for b in range(10):
            h = (b + 0.5) / 10
            examples += self._examples(rng, 4, harm=h)
        out, warnings = stratified_resample(examples, n_bins=10, per_bin_target=4, rng=rng)
        assert len(out) == len(examples)
        assert warnings == []
        key = lambda e: (e.gt_harm, e.neighbors.tobytes())
        assert sorted(map(key, out)) == sorted(map(key, examples))

    def test_single_example_repeated(self, rng):
        examples = self._examples(rng, 1, harm=0.55)
        out, warnings = stratified_resample(examples, n_bins=10, per_bin_target=10, rng=rng)
        assert len(out) == 10
        assert all(e == examples[0] for e in out)
        assert len(warnings) == 9  # the other bins of the pair are empty

    def test_output_counts_match_target(self, rng):
        examples = []
        for sid in (0, 1):
            examples += self._examples(rng, 300, sid=sid, tid=2)
        out, _ = stratified_resample(examples, n_bins=10, per_bin_target=25, rng=rng)
        counts = {}
        for ex in out:
            key = (ex.source_id, intensity_bin(ex.gt_harm, 10))
            counts[key] = counts.get(key, 0) + 1
        assert all(c == 25 for c in counts.values())


class TestSplit:
    def test_split_sizes_and_disjoint(self, rng):
        examples = TestStratifiedResample()._examples(rng, 200)
        train, val = split_examples(examples, 0.1, rng)
        assert len(val) == 20 and len(train) == 180
        ids = lambda xs: {id(e) for e in xs}
        assert not ids(train) & ids(val)


class TestDatasetIO:
    def _dataset(self, rng, count=300):
        examples = []
        for i in range(count):
            n = int(rng.integers(1, 12))
            examples.append(Example(
                neighbors=rng.uniform(-1, 1, (n, 4)).astype(np.float32),
                source_id=int(rng.integers(0, 4)),
                target_id=3,
                gt_interp=float(rng.uniform(0, 1)),
                gt_harm=float(rng.uniform(0, 1)),
                x_norm=float(rng.uniform(0, 1)),
            ))
        manifest = make_manifest(examples, "train", k=12, radius=1.0, n_bins=10)
        return examples, manifest

    def test_round_trip_bit_identical(self, rng, tmp_path):
        examples, manifest = self._dataset(rng)
        p = tmp_path / "d.lhd"
        save_dataset(p, examples, manifest)
        m2, back = load_dataset(p)
        assert m2.count == len(examples)
        assert back == examples
        assert m2.pair_counts == manifest.pair_counts

    def test_truncated_file_reports_offset(self, rng, tmp_path):
        examples, manifest = self._dataset(rng, count=20)
        p = tmp_path / "d.lhd"
        save_dataset(p, examples, manifest)
        raw = p.read_bytes()
        p.write_bytes(raw[:-7])
        with pytest.raises(FormatError):
            load_dataset(p)

    def test_manifest_bin_counts_recounted(self, rng, tmp_path):
        examples, manifest = self._dataset(rng, count=50)
        manifest.bin_counts[0] += 1
        manifest.bin_counts[1] -= 1
        p = tmp_path / "d.lhd"
        with pytest.raises(ValueError):
            save_dataset(p, examples[:-1], manifest)  # count mismatch rejected at save
        manifest.count = 50
        save_dataset(p, examples, manifest)
        with pytest.raises(FormatError, match="recomputed"):
            load_dataset(p)

    def test_corrupted_payload_crc(self, rng, tmp_path):
        examples, manifest = self._dataset(rng, count=30)
        p = tmp_path / "d.lhd"
        save_dataset(p, examples, manifest)
        raw = bytearray(p.read_bytes())
        raw[-3] ^= 0xFF
        p.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="checksum"):
            load_dataset(p)
