import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lidarharm.pointcloud import Scan
from lidarharm.response import (
    CurveFormatError,
    ResponseDomainError,
    ResponseFunction,
    ShiftParams,
    apply,
    corrupt_scan,
    identity_response,
    invert,
    load_curves,
    parse_response_spec,
    shift_multiplier,
    TABULATED_SAMPLES,
)


def make_tabulated(values, name="t"):
    return ResponseFunction(kind="tabulated", name=name, samples=np.asarray(values, float))


@pytest.fixture
def variants():
    ramp = np.linspace(0.0, 1.0, TABULATED_SAMPLES)
    return [
        ResponseFunction(kind="gamma", gamma=2.2),
        ResponseFunction(kind="gamma", gamma=0.45),
        ResponseFunction(kind="scurve", steepness=8.0, midpoint=0.4),
        make_tabulated(ramp**1.7),
    ]


class TestApply:
    def test_gamma_identity(self):
        assert apply(ResponseFunction(kind="gamma", gamma=1.0), 0.37) == 0.37

    def test_gamma_two(self):
        assert apply(ResponseFunction(kind="gamma", gamma=2.0), 0.5) == 0.25

    def test_tabulated_endpoint(self):
        samples = np.linspace(0.1, 0.9, TABULATED_SAMPLES)
        f = make_tabulated(samples)
        assert apply(f, 0.0) == samples[0]

    def test_domain_error(self):
        with pytest.raises(ResponseDomainError):
            apply(identity_response(), 1.5)

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_monotone(self, seed):
        r = np.random.default_rng(seed)
        ramp = np.linspace(0.0, 1.0, TABULATED_SAMPLES)
        fs = [
            ResponseFunction(kind="gamma", gamma=float(r.uniform(0.3, 3.0))),
            ResponseFunction(kind="scurve", steepness=float(r.uniform(1, 20)), midpoint=float(r.uniform(0.2, 0.8))),
            make_tabulated(np.sort(r.uniform(0, 1, TABULATED_SAMPLES))),
            make_tabulated(ramp ** float(r.uniform(0.5, 2.5))),
        ]
        pairs = np.sort(r.uniform(0, 1, size=(400, 2)), axis=1)
        for f in fs:
            lo = apply(f, pairs[:, 0])
            hi = apply(f, pairs[:, 1])
            assert (lo <= hi).all()

    def test_monotone_10k_pairs(self, variants):
        r = np.random.default_rng(5)
        pairs = np.sort(r.uniform(0, 1, size=(10_000, 2)), axis=1)
        for f in variants:
            assert (apply(f, pairs[:, 0]) <= apply(f, pairs[:, 1])).all()


class TestInvert:
    def test_gamma_analytic(self):
        assert invert(ResponseFunction(kind="gamma", gamma=2.0), 0.25) == 0.5

    def test_round_trip_all_variants(self, variants):
        r = np.random.default_rng(11)
        for f in variants:
            h = r.uniform(0, 1, 1000)
            i = apply(f, h)
            back = apply(f, invert(f, i))
            assert np.abs(back - i).max() <= 1e-6

    def test_flat_segment_lowest_preimage(self):
        samples = np.concatenate([
            np.linspace(0.0, 0.5, 300),
            np.full(400, 0.5),
            np.linspace(0.5, 1.0, TABULATED_SAMPLES - 700),
        ])
        f = make_tabulated(samples)
        u = invert(f, 0.5)
        grid = np.linspace(0, 1, TABULATED_SAMPLES)
        lowest = grid[299]  # first grid point reaching 0.5
        assert abs(u - lowest) <= 1e-6

    def test_range_error(self):
        samples = np.linspace(0.2, 0.8, TABULATED_SAMPLES)
        f = make_tabulated(samples)
        with pytest.raises(ResponseDomainError):
            invert(f, 0.1)


class TestShift:
    def test_midpoint_value(self):
        p = ShiftParams()
        assert shift_multiplier(p, 0.5) == 0.75

    def test_left_limit(self):
        p = ShiftParams()
        assert abs(shift_multiplier(p, 0.0) - (1.0 - p.s)) <= 1e-20

    def test_no_shift_limit(self):
        p = ShiftParams(s=0.0)
        x = np.linspace(0, 1, 101)
        assert (shift_multiplier(p, x) == 1.0).all()

    def test_bounds_and_monotone(self):
        r = np.random.default_rng(3)
        for form in ("one-minus", "floor"):
            p = ShiftParams(form=form)
            x = np.sort(r.uniform(0, 1, 2000))
            m = shift_multiplier(p, x)
            assert (np.diff(m) >= 0).all()
            assert m.min() > 0 and m.max() <= 1.0
            if form == "one-minus":
                assert m.min() >= 1.0 - p.s

    def test_floor_form_limits(self):
        p = ShiftParams(form="floor")
        assert abs(shift_multiplier(p, 0.0) - p.v) < 1e-12
        assert abs(shift_multiplier(p, 1.0) - (p.v + p.s)) < 1e-12

    def test_validation(self):
        with pytest.raises(ValueError):
            ShiftParams(l=0.0)
        with pytest.raises(ValueError):
            ShiftParams(s=1.5)
        with pytest.raises(ValueError):
            ShiftParams(form="floor", v=0.8, s=0.5)


class TestCorruptScan:
    def _scan(self, xs, intens):
        xyz = np.column_stack([xs, np.zeros_like(xs), np.zeros_like(xs)])
        return Scan(0, xyz, np.asarray(intens, np.float32))

    def test_identity_no_shift_bit_exact(self, rng):
        s = self._scan(rng.uniform(0, 10, 50), rng.uniform(0, 1, 50))
        out = corrupt_scan(s, identity_response(), None, (0.0, 10.0))
        assert out.intensity.tobytes() == s.intensity.tobytes()
        assert out.xyz is s.xyz

    def test_identity_s_zero_bit_exact(self, rng):
        s = self._scan(rng.uniform(0, 10, 50), rng.uniform(0, 1, 50))
        out = corrupt_scan(s, identity_response(), ShiftParams(s=0.0), (0.0, 10.0))
        assert out.intensity.tobytes() == s.intensity.tobytes()

    def test_default_shift_left_edge(self):
        s = self._scan(np.array([0.0]), np.array([0.8]))
        out = corrupt_scan(s, identity_response(), ShiftParams(), (0.0, 10.0))
        assert abs(float(out.intensity[0]) - 0.4) <= 1e-6

    def test_gamma_two(self):
        s = self._scan(np.array([5.0]), np.array([0.5]))
        out = corrupt_scan(s, ResponseFunction(kind="gamma", gamma=2.0), None, (0.0, 10.0))
        assert abs(float(out.intensity[0]) - 0.25) <= 1e-7

    def test_bad_extent(self):
        s = self._scan(np.array([0.0]), np.array([0.5]))
        with pytest.raises(ValueError):
            corrupt_scan(s, identity_response(), None, (1.0, 1.0))


class TestCurveFile:
    def write_curve_file(self, path, curves):
        with open(path, "w") as f:
            for name, vals in curves:
                f.write(f"name {name}\nsamples {len(vals)}\n")
                f.write(" ".join(f"{v:.9g}" for v in vals))
                f.write("\n\n")

    def test_linear_ramp_is_identity(self, tmp_path):
        p = tmp_path / "c.txt"
        self.write_curve_file(p, [("ramp", np.linspace(0, 1, TABULATED_SAMPLES))])
        (f,) = load_curves(p)
        h = np.linspace(0, 1, 257)
        assert np.abs(apply(f, h) - h).max() <= 1e-6

    def test_non_monotone_rejected(self, tmp_path):
        vals = np.linspace(0, 1, TABULATED_SAMPLES)
        vals[500] = 0.1
        p = tmp_path / "c.txt"
        self.write_curve_file(p, [("bad", vals)])
        with pytest.raises(CurveFormatError, match="curve not monotone"):
            load_curves(p)

    def test_two_curves_preserve_order(self, tmp_path):
        ramp = np.linspace(0, 1, TABULATED_SAMPLES)
        p = tmp_path / "c.txt"
        self.write_curve_file(p, [("first", ramp), ("second", ramp**2)])
        curves = load_curves(p)
        assert [c.name for c in curves] == ["first", "second"]

    def test_wrong_count_names_curve(self, tmp_path):
        p = tmp_path / "c.txt"
        vals = np.linspace(0, 1, 100)
        p.write_text("name short\nsamples 100\n" + " ".join(str(v) for v in vals) + "\n")
        with pytest.raises(CurveFormatError, match="short"):
            load_curves(p)


class TestSpecStrings:
    def test_parse_variants(self):
        assert parse_response_spec("identity").gamma == 1.0
        assert parse_response_spec("gamma:2.2").gamma == 2.2
        f = parse_response_spec("scurve:8,0.4")
        assert f.steepness == 8.0 and f.midpoint == 0.4
        with pytest.raises(ValueError):
            parse_response_spec("curve:missing")
        with pytest.raises(ValueError):
            parse_response_spec("nonsense")
