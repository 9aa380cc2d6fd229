import numpy as np
import pytest

from mtnas.costmodel import (
    CostTable,
    IrbSpec,
    arch_cost,
    average_flops,
    cost_reg,
    cost_reg_grad,
    irb_flops,
    relative_cost,
    resize_dims,
)

# (bb, rpn, roi, total, avg) per row; ref sizes 213x320 (first three) and 320x481
DET_FLOPS = [
    (399, 152, 182, 733, 713),
    (601, 152, 182, 935, 908),
    (1054, 158, 186, 1398, 1354),
    (912, 347, 182, 1441, 1367),
    (1372, 347, 182, 1901, 1800),
]


class TestArchCost:
    def test_hand_sum(self):
        assert arch_cost([1, 0, 1, 0], CostTable([1, 2, 3, 4])) == 4

    def test_extremes(self):
        t = CostTable([1.5, 2.0, 0.5])
        assert arch_cost([0, 0, 0], t) == 0
        assert arch_cost([1, 1, 1], t) == t.total

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            arch_cost([1, 0], CostTable([1, 2, 3]))

    def test_additive_over_disjoint_supports(self):
        rng = np.random.default_rng(0)
        t = CostTable(rng.uniform(0, 5, 10))
        for _ in range(100):
            a = rng.integers(0, 2, 10)
            b = rng.integers(0, 2, 10) * (1 - a)
            union, inter = a | b, a & b
            assert np.isclose(arch_cost(union, t) + arch_cost(inter, t), arch_cost(a, t) + arch_cost(b, t))


class TestCostReg:
    def test_all_ones(self):
        assert cost_reg([1, 1, 1, 1], CostTable([1, 1, 1, 1]), 3.0, 0.5) == pytest.approx(1.5)

    def test_boundary(self):
        assert cost_reg([1, 1, 0, 0], CostTable([1, 1, 1, 1]), 3.0, 0.5) == 0.0

    def test_hand_value(self):
        assert cost_reg([1, 1, 1, 0], CostTable([1, 1, 1, 1]), 2.0, 0.5) == pytest.approx(0.5)

    def test_nonnegative_and_monotone(self):
        rng = np.random.default_rng(1)
        t = CostTable(rng.uniform(0.1, 3, 8))
        for _ in range(200):
            a = rng.integers(0, 2, 8)
            base = cost_reg(a, t, 1.7, 0.4)
            assert base >= 0
            if relative_cost(a, t) <= 0.4:
                assert base == 0
            for b in np.flatnonzero(a == 0):
                up = a.copy()
                up[b] = 1
                assert cost_reg(up, t, 1.7, 0.4) >= base

    def test_grad_matches_finite_difference_off_the_hinge(self):
        t = CostTable([1.0, 2.0, 3.0, 4.0])
        a = np.array([1.0, 0.3, 1.0, 0.8])
        h = 1e-6
        fd = [(cost_reg(a + h * e, t, 2.0, 0.5) - cost_reg(a - h * e, t, 2.0, 0.5)) / (2 * h) for e in np.eye(4)]
        np.testing.assert_allclose(cost_reg_grad(a, t, 2.0, 0.5), fd, rtol=1e-6)

    def test_target_range(self):
        with pytest.raises(ValueError):
            cost_reg([1], CostTable([1]), 1.0, 1.5)


class TestIrbFlops:
    def test_unit_expansion_pointwise(self):
        C, H, W = 12, 5, 7
        assert irb_flops(IrbSpec(1, 1, C, C, 1, H, W)) == H * W * (C * C + C + C * C)

    def test_hand_arithmetic(self):
        assert irb_flops(IrbSpec(3, 4, 16, 24, 2, 8, 8)) == 65536 + 9216 + 24576 == 99328

    def test_spatial_scaling(self):
        s = IrbSpec(5, 3, 40, 40, 1, 14, 14)
        s2 = IrbSpec(5, 3, 40, 40, 1, 28, 28)
        assert irb_flops(s2) == 4 * irb_flops(s)

    def test_stride_divisibility(self):
        with pytest.raises(ValueError):
            irb_flops(IrbSpec(3, 4, 16, 24, 2, 7, 8))
        with pytest.raises(ValueError):
            IrbSpec(3, 4, 16, 24, 3, 9, 9)


class TestResize:
    def test_within_max(self):
        assert resize_dims(480, 640, 224, 320) == (224, 299)

    def test_long_side_capped(self):
        assert resize_dims(400, 800, 224, 320) == (160, 320)

    def test_square_unchanged(self):
        assert resize_dims(224, 224, 224, 320) == (224, 224)

    def test_reference_sizes_from_one_image(self):
        # a 426x640 image lands on both detection reference sizes
        assert resize_dims(426, 640, 224, 320) == (213, 320)
        assert resize_dims(426, 640, 320, 640) == (320, 481)

    def test_portrait(self):
        assert resize_dims(800, 400, 224, 320) == (320, 160)

    def test_property(self):
        rng = np.random.default_rng(2)
        for _ in range(500):
            h, w = rng.integers(16, 4000, 2)
            lo = int(rng.integers(64, 800))
            hi = int(lo + rng.integers(0, 800))
            h2, w2 = resize_dims(int(h), int(w), lo, hi)
            short, long = min(h2, w2), max(h2, w2)
            assert long <= hi
            assert abs(short - lo) <= 1 or abs(long - hi) <= 1


class TestAverageFlops:
    @pytest.mark.parametrize("row", DET_FLOPS)
    def test_total_at_unit_ratio(self, row):
        bb, rpn, roi, total, _ = row
        assert average_flops(bb, rpn, roi, 1.0) == total

    def test_inverted_ratio(self):
        assert round(average_flops(399, 152, 182, 531 / 551)) == 713

    def test_one_ratio_per_reference_size(self):
        # ratio inverted from the first row of each reference size reproduces the others
        for rows in (DET_FLOPS[:3], DET_FLOPS[3:]):
            bb, rpn, roi, _, avg = rows[0]
            ratio = (avg - roi) / (bb + rpn)
            for bb, rpn, roi, _, avg in rows:
                assert abs(average_flops(bb, rpn, roi, ratio) - avg) <= 1

    def test_roi_not_scaled(self):
        assert average_flops(100, 50, 0, 2.0) == 300
        assert average_flops(0, 0, 182, 7.0) == 182

    def test_ratio_positive(self):
        with pytest.raises(ValueError):
            average_flops(1, 1, 1, 0.0)
