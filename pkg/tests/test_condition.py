import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from precipdiff.condition import (
    CHANNEL_GROUPS,
    IR_TRANSFORM,
    MISSING,
    TOPO_TRANSFORM,
    ExpTransform,
    GridSpec,
    TimeEmbedSpec,
    assemble_condition,
    augment,
    cond_dropout,
    drop_groups,
    exp_forward,
    exp_inverse,
    gsmap_mask_from_flags,
    latlon_channels,
    logistic_forward,
    mask_apply,
    time_embedding,
)


class TestMaskApply:
    def test_all_observed(self, rng):
        x = rng.random((3, 4, 4))
        np.testing.assert_array_equal(mask_apply(x, np.ones_like(x)), x)

    def test_all_masked(self, rng):
        x = rng.random((3, 4, 4))
        np.testing.assert_array_equal(mask_apply(x, np.zeros_like(x)), -1.0)

    def test_checkerboard_matches_formula(self, rng):
        x = rng.random((2, 4, 6))
        m = (np.indices(x.shape).sum(axis=0) % 2).astype(float)
        np.testing.assert_array_equal(mask_apply(x, m), m * x + (-1.0) * (1 - m))


class TestGsmapMask:
    @pytest.mark.parametrize(
        "flag,rate,valid",
        [(2, 0.5, 1.0), (1, 0.5, 0.0), (2, -999.0, 0.0), (0, -1.0, 0.0), (5, 0.0, 1.0)],
    )
    def test_rules(self, flag, rate, valid):
        assert gsmap_mask_from_flags(np.array([flag]), np.array([rate]))[0] == valid

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            gsmap_mask_from_flags(np.zeros(3), np.zeros(4))


class TestExpTransform:
    def test_zero(self):
        assert exp_forward(0.0) == 0.0

    def test_reference_point(self):
        tf = ExpTransform(5.0, 0.99)
        assert abs(exp_forward(5.0, tf) - 0.99) < 1e-10
        assert math.isclose(tf.k, 5.0 / math.log(100), rel_tol=1e-15)
        assert abs(tf.k - 1.08574) < 1e-5

    def test_roundtrip_well_conditioned_range(self):
        # error grows like k * eps * exp(x / k); stays below 1e-10 up to ~14.5 mm/h
        x = np.linspace(0, 14, 2001)
        np.testing.assert_allclose(exp_inverse(exp_forward(x)), x, atol=1e-10, rtol=0)

    def test_roundtrip_from_unit_interval(self):
        y = np.linspace(0, 1 - 1e-9, 2001)
        np.testing.assert_allclose(exp_forward(exp_inverse(y)), y, atol=1e-12, rtol=0)

    def test_saturates_in_float64(self):
        assert exp_forward(45.0) == 1.0

    def test_inverse_rejects_one(self):
        with pytest.raises(ValueError):
            exp_inverse(1.0)


class TestLogistic:
    def test_ir_thresholds(self):
        assert abs(logistic_forward(230.0, IR_TRANSFORM) - 0.8) < 1e-10
        assert abs(logistic_forward(270.0, IR_TRANSFORM) - 0.2) < 1e-10
        assert abs(logistic_forward(250.0, IR_TRANSFORM) - 0.5) < 1e-10

    def test_topo_thresholds(self):
        assert abs(logistic_forward(2000.0, TOPO_TRANSFORM) - 0.8) < 1e-10
        assert abs(logistic_forward(200.0, TOPO_TRANSFORM) - 0.2) < 1e-10

    def test_missing(self):
        out = logistic_forward(np.array([np.nan, 250.0, 240.0]), IR_TRANSFORM, valid=np.array([1, 1, 0]))
        np.testing.assert_array_equal(out[[0, 2]], MISSING)
        assert abs(out[1] - 0.5) < 1e-12

    def test_ir_decreasing_in_temperature(self):
        y = logistic_forward(np.linspace(230, 270, 101), IR_TRANSFORM)
        assert np.all(np.diff(y) < 0)

    def test_topo_increasing(self):
        y = logistic_forward(np.linspace(200, 2000, 101), TOPO_TRANSFORM)
        assert np.all(np.diff(y) > 0)


class TestTimeEmbedding:
    grid = GridSpec(L=2, H=16, W=8)

    def test_reference_epoch(self):
        ch = time_embedding([0.0, 0.0], TimeEmbedSpec(), self.grid)
        assert ch.shape == (1, 2, 16, 8)
        sines = ch[0, 0, 0:10:2, 0]
        coses = ch[0, 0, 1:10:2, 0]
        np.testing.assert_allclose(sines, 0.5, atol=1e-15)
        np.testing.assert_allclose(coses, 1.0)

    def test_weekly_quarter(self):
        tau0 = 1.0e9
        ch = time_embedding([tau0 + 1.75 * 86400, tau0], TimeEmbedSpec(tau0=tau0), self.grid)
        assert math.isclose(ch[0, 0, 0, 0], 1.0, rel_tol=1e-12)

    def test_tiling_and_bounds(self, rng):
        taus = rng.uniform(-1e9, 1e9, size=2)
        ch = time_embedding(taus, TimeEmbedSpec(), self.grid)
        assert ch.min() >= 0 and ch.max() <= 1
        np.testing.assert_array_equal(ch[0, :, 10:16], ch[0, :, 0:6])
        assert np.all(ch == ch[..., :1])


class TestLatLon:
    def test_values(self):
        grid = GridSpec(L=2, H=5, W=5)
        ll = latlon_channels(grid)
        assert ll.shape == (4, 2, 5, 5)
        assert math.isclose(ll[0, 0, 2, 0], 1.0) and math.isclose(ll[1, 0, 2, 0], 0.5)
        assert math.isclose(ll[0, 0, 0, 0], 0.5, abs_tol=1e-15)
        assert math.isclose(ll[0, 0, 4, 0], 0.5, abs_tol=1e-15)
        assert math.isclose(ll[2, 1, 3, 2], 0.5, abs_tol=1e-15)
        assert math.isclose(ll[3, 1, 3, 2], 1.0)


class TestAssemble:
    grid = GridSpec(L=3, H=8, W=8)

    def _parts(self, rng, m):
        x0 = np.zeros(self.grid.shape)
        ir = rng.random(self.grid.shape)
        t = time_embedding([0, 3600, 7200], TimeEmbedSpec(), self.grid)
        topo = rng.random((8, 8))
        return mask_apply(x0, m), m, ir, ir[::-1].copy(), t, topo

    def test_all_observed_zero_field(self, rng):
        c = assemble_condition(*self._parts(rng, np.ones(self.grid.shape)), self.grid)
        assert c.shape == (10, 3, 8, 8)
        np.testing.assert_array_equal(c[0], 0.0)
        np.testing.assert_array_equal(c[1], 0.0)

    def test_masked_frame(self, rng):
        m = np.ones(self.grid.shape)
        m[1] = 0
        c = assemble_condition(*self._parts(rng, m), self.grid)
        np.testing.assert_array_equal(c[0, 1], -1.0)
        np.testing.assert_array_equal(c[1, 1], 1.0)
        assert np.array_equal(c[1] == 1, c[0] == -1)

    def test_channel_roundtrip_and_range(self, rng):
        parts = self._parts(rng, (rng.random(self.grid.shape) > 0.5).astype(float))
        c = assemble_condition(*parts, self.grid)
        np.testing.assert_array_equal(c[2], parts[2])
        np.testing.assert_array_equal(c[3], parts[3])
        np.testing.assert_array_equal(c[4], parts[4][0])
        np.testing.assert_array_equal(c[5, 2], parts[5])
        ok = ((c >= 0) & (c <= 1)) | (c == -1)
        assert ok.all()

    def test_shape_mismatch(self, rng):
        parts = list(self._parts(rng, np.ones(self.grid.shape)))
        parts[2] = parts[2][:, :4]
        with pytest.raises(ValueError, match="ir1"):
            assemble_condition(*parts, self.grid)


class _FixedRng:
    def __init__(self, draws):
        self.draws = np.array(draws, dtype=float)

    def random(self, n=None):
        return self.draws[:n] if n is not None else self.draws[0]


class TestAugment:
    def test_double_lon_flip_identity(self, rng):
        x, c = rng.random((3, 4, 8)), rng.random((10, 3, 4, 8))
        flip = _FixedRng([0.1, 0.9, 0.9])
        x1, c1 = augment(*augment(x, c, flip), flip)
        np.testing.assert_array_equal(x1, x)
        np.testing.assert_array_equal(c1, c)

    def test_rotation_is_both_flips(self, rng):
        x, c = rng.random((3, 4, 8)), rng.random((10, 3, 4, 8))
        xr, cr = augment(x, c, _FixedRng([0.9, 0.9, 0.1]))
        xf, cf = augment(x, c, _FixedRng([0.1, 0.1, 0.9]))
        np.testing.assert_array_equal(xr, xf)
        np.testing.assert_array_equal(cr, cf)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_preserves_multiset(self, seed):
        r = np.random.default_rng(seed)
        x, c = r.random((2, 4, 6)), r.random((3, 2, 4, 6))
        xa, ca = augment(x, c, r)
        np.testing.assert_array_equal(np.sort(xa.ravel()), np.sort(x.ravel()))
        for k in range(3):
            np.testing.assert_array_equal(np.sort(ca[k].ravel()), np.sort(c[k].ravel()))


class TestDropout:
    def test_always_drop_one_group(self, rng):
        cond = rng.random((16, 10, 2, 4, 4))
        out = cond_dropout(cond, 1.0, rng)
        for b in range(16):
            dropped = [g for g, idx in CHANNEL_GROUPS.items() if np.all(out[b, list(idx)] == -1)]
            assert len(dropped) == 1
            keep = [i for i in range(10) if i not in CHANNEL_GROUPS[dropped[0]]]
            np.testing.assert_array_equal(out[b, keep], cond[b, keep])

    def test_never_drop(self, rng):
        cond = rng.random((4, 10, 2, 4, 4))
        np.testing.assert_array_equal(cond_dropout(cond, 0.0, rng), cond)

    def test_bad_probability(self, rng):
        with pytest.raises(ValueError):
            cond_dropout(np.zeros((10, 1, 2, 2)), 1.5, rng)

    def test_drop_groups(self, rng):
        cond = rng.random((10, 2, 4, 4))
        out = drop_groups(cond, ["ir", "lon"])
        np.testing.assert_array_equal(out[[2, 3, 8, 9]], -1)
        np.testing.assert_array_equal(out[[0, 1, 4, 5, 6, 7]], cond[[0, 1, 4, 5, 6, 7]])
