import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevsplat.losses import (
    LossWeights,
    bce_loss,
    combo_loss,
    dice_loss,
    finite_diff_check,
    iou,
)

LN2 = float(np.log(2.0))


def bce_longdouble(x, y):
    x = np.asarray(x, dtype=np.longdouble)
    y = np.asarray(y, dtype=np.longdouble)
    p = 1.0 / (1.0 + np.exp(-x))
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log1p(-p))))


class TestBCELoss:
    def test_saturated_logits_vanish(self):
        y = np.array([[1.0, 0.0], [0.0, 1.0]])
        x = np.where(y == 1, 40.0, -40.0)
        loss, _ = bce_loss(x, y)
        assert loss < 1e-15

    def test_zero_logits_give_ln2(self):
        loss, _ = bce_loss(np.zeros((5, 5)), np.eye(5))
        assert loss == pytest.approx(LN2, abs=1e-12)

    def test_matches_extended_precision_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-6, 6, (8, 8))
        y = (rng.random((8, 8)) > 0.5).astype(float)
        loss, _ = bce_loss(x, y)
        assert loss == pytest.approx(bce_longdouble(x, y), abs=1e-9)

    def test_gradient_formula_and_bound(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-4, 4, (6, 7))
        y = (rng.random((6, 7)) > 0.4).astype(float)
        loss, grad = bce_loss(x, y)
        assert loss >= 0.0
        assert np.max(np.abs(grad)) <= 1.0 / x.size
        def wrapped(p):
            l, g = bce_loss(p["x"], y)
            return l, {"x": g}

        err = finite_diff_check(wrapped, {"x": x}, h=1e-5, sample=10)
        assert err < 1e-5

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            bce_loss(np.zeros((2, 2)), np.zeros((3, 3)))
        with pytest.raises(ValueError):
            bce_loss(np.zeros((2, 2)), np.full((2, 2), 0.5))


class TestDiceLoss:
    def test_perfect_overlap(self):
        y = np.zeros((10, 10))
        y[2:6, 3:8] = 1.0
        loss, _ = dice_loss(y, y)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_disjoint_tends_to_one(self):
        y = np.zeros((200, 200))
        y[:100] = 1.0
        loss, _ = dice_loss(1.0 - y, y)
        assert loss > 0.999

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        p = rng.uniform(0.05, 0.95, (6, 6))
        y = (rng.random((6, 6)) > 0.5).astype(float)
        def wrapped(q):
            l, g = dice_loss(np.clip(q["p"], 0, 1), y)
            return l, {"p": g}

        err = finite_diff_check(wrapped, {"p": p}, h=1e-6)
        assert err < 1e-5

    def test_non_negative(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            p = rng.uniform(0, 1, (5, 5))
            y = (rng.random((5, 5)) > 0.5).astype(float)
            loss, _ = dice_loss(p, y)
            assert loss >= 0.0


class TestComboLoss:
    def test_aux_equals_main_doubles(self):
        rng = np.random.default_rng(4)
        x = rng.uniform(-2, 2, (4, 4))
        y = (rng.random((4, 4)) > 0.5).astype(float)
        both, _, _ = combo_loss(x, x, y)
        single, _ = bce_loss(x, y)
        from bevsplat.camera import _sigmoid

        d, _ = dice_loss(_sigmoid(x), y)
        assert both == pytest.approx(2 * (single + d), abs=1e-12)

    def test_dice_weight_zero_reduces_to_bce(self):
        rng = np.random.default_rng(5)
        x1 = rng.uniform(-2, 2, (4, 4))
        x2 = rng.uniform(-2, 2, (4, 4))
        y = (rng.random((4, 4)) > 0.5).astype(float)
        total, g1, g2 = combo_loss(x1, x2, y, LossWeights(bce=1.0, dice=0.0))
        b1, gb1 = bce_loss(x1, y)
        b2, gb2 = bce_loss(x2, y)
        assert total == pytest.approx(b1 + b2, abs=1e-12)
        np.testing.assert_allclose(g1, gb1)
        np.testing.assert_allclose(g2, gb2)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_compositional_identity(self, seed):
        rng = np.random.default_rng(seed)
        lb, ld = rng.uniform(0.1, 3, 2)
        x1 = rng.uniform(-3, 3, (5, 5))
        x2 = rng.uniform(-3, 3, (5, 5))
        y = (rng.random((5, 5)) > 0.5).astype(float)
        total, g1, g2 = combo_loss(x1, x2, y, LossWeights(bce=lb, dice=ld))
        from bevsplat.camera import _sigmoid

        expected = 0.0
        for x in (x1, x2):
            bl, _ = bce_loss(x, y)
            dl, _ = dice_loss(_sigmoid(x), y)
            expected += lb * bl + ld * dl
        assert total == pytest.approx(expected, abs=1e-12)

    def test_gradient_linearity(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(-2, 2, (4, 4))
        y = (rng.random((4, 4)) > 0.5).astype(float)
        _, g_both, _ = combo_loss(x, x, y, LossWeights(1.0, 1.0))
        _, g_bce, _ = combo_loss(x, x, y, LossWeights(1.0, 0.0))
        _, g_dice, _ = combo_loss(x, x, y, LossWeights(0.0, 1.0))
        np.testing.assert_allclose(g_both, g_bce + g_dice, atol=1e-12)

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            LossWeights(0.0, 0.0)
        with pytest.raises(ValueError):
            LossWeights(-1.0, 1.0)


class TestIoU:
    def test_perfect(self):
        y = np.zeros((8, 8))
        y[:4] = 1.0
        logits = np.where(y == 1, 5.0, -5.0)
        assert iou(logits, y) == 1.0

    def test_disjoint(self):
        y = np.zeros((8, 8))
        y[:4] = 1.0
        logits = np.where(y == 1, -5.0, 5.0)
        assert iou(logits, y) == 0.0

    def test_half_cover_no_false_positives(self):
        y = np.zeros(20)
        y[:10] = 1.0
        logits = np.full(20, -5.0)
        logits[:5] = 5.0  # half the target, nothing else
        assert iou(logits, y) == pytest.approx(0.5)

    def test_empty_union_convention(self):
        assert iou(np.full((4, 4), -10.0), np.zeros((4, 4))) == 1.0

    def test_symmetry_on_binary_maps(self):
        rng = np.random.default_rng(7)
        a = (rng.random((6, 6)) > 0.5).astype(float)
        b = (rng.random((6, 6)) > 0.5).astype(float)
        to_logits = lambda m: np.where(m == 1, 9.0, -9.0)
        assert iou(to_logits(a), b) == pytest.approx(iou(to_logits(b), a))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            iou(np.zeros((2, 2)), np.zeros((3, 3)))


class TestFiniteDiffCheck:
    def test_quadratic_is_exact(self):
        A = np.diag([1.0, 2.0, 3.0])

        def fn(p):
            x = p["x"]
            return float(0.5 * x @ A @ x), {"x": A @ x}

        err = finite_diff_check(fn, {"x": np.array([0.3, -1.2, 2.0])}, h=1e-4)
        assert err < 1e-10

    def test_linear_is_exact(self):
        c = np.array([2.0, -3.0, 0.5])

        def fn(p):
            return float(c @ p["x"]), {"x": c}

        err = finite_diff_check(fn, {"x": np.array([1.0, 1.0, 1.0])}, h=1e-4)
        assert err < 1e-12

    def test_detects_wrong_gradient(self):
        def fn(p):
            return float(np.sum(p["x"] ** 2)), {"x": 3.0 * p["x"]}  # wrong

        err = finite_diff_check(fn, {"x": np.array([1.0, 2.0])}, h=1e-4)
        assert err > 0.1
