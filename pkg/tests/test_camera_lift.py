import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevsplat.camera import (
    ArrayFeatureProvider,
    CameraHeadGrid,
    CameraHeadOutput,
    CameraView,
    DepthDistribution,
    LiftConfig,
    expected_depth,
    depth_variance,
    lift_image,
    lift_pixel,
    softmax_depth,
)
from bevsplat.geometry import DepthBinSpec, PinholeIntrinsics, SE3Pose, sym_eigen
from oracles import softmax_longdouble

INTR = PinholeIntrinsics(fx=100.0, fy=100.0, cx=64.0, cy=32.0, width=128, height=64)
BINS = DepthBinSpec(n_bins=8, d_min=1.0, d_max=17.0)  # centers 2, 4, ..., 16


class TestSoftmaxDepth:
    def test_uniform(self):
        np.testing.assert_allclose(softmax_depth(np.zeros(4)), 0.25)

    def test_saturation(self):
        p = softmax_depth(np.array([0.0, 1000.0, 0.0, 0.0]))
        np.testing.assert_allclose(p, [0, 1, 0, 0], atol=1e-6)

    def test_matches_extended_precision_oracle(self):
        logits = np.array([0.0, 1.0, 2.0])
        np.testing.assert_allclose(
            softmax_depth(logits), softmax_longdouble(logits), atol=1e-12
        )

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_normalized_and_shift_invariant(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.uniform(-50, 50, 16)
        p = softmax_depth(logits)
        assert abs(p.sum() - 1.0) < 1e-6
        assert np.all((p >= 0) & (p <= 1))
        np.testing.assert_allclose(p, softmax_depth(logits + 17.3), atol=1e-12)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            softmax_depth(np.array([0.0, np.inf]))


class TestExpectedDepth:
    def test_one_hot(self):
        p = np.zeros(8)
        p[3] = 1.0
        assert expected_depth(p, BINS) == BINS.centers[3]

    def test_uniform_is_midpoint(self):
        p = np.full(8, 1 / 8)
        np.testing.assert_allclose(expected_depth(p, BINS), (1.0 + 17.0) / 2)

    def test_hand_dot_product(self):
        bins = DepthBinSpec(n_bins=3, d_min=0.5, d_max=3.5)  # centers 1, 2, 3
        np.testing.assert_allclose(
            expected_depth(np.array([0.2, 0.3, 0.5]), bins), 2.3
        )

    def test_gradient_is_bin_centers(self):
        # d(expected)/d(probs[b]) = centers[b], checked by central differences
        rng = np.random.default_rng(0)
        p = rng.dirichlet(np.ones(8))
        h = 1e-6
        for b in range(8):
            pp, pm = p.copy(), p.copy()
            pp[b] += h
            pm[b] -= h
            fd = (pp @ BINS.centers - pm @ BINS.centers) / (2 * h)
            assert abs(fd - BINS.centers[b]) / BINS.centers[b] < 1e-6

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            expected_depth(np.full(8, 0.2), BINS)


class TestDepthVariance:
    def test_one_hot_is_zero(self):
        p = np.zeros(8)
        p[5] = 1.0
        assert depth_variance(p, BINS, expected_depth(p, BINS)) == 0.0

    def test_two_point(self):
        p = np.zeros(8)
        p[1] = p[6] = 0.5
        d1, d2 = BINS.centers[1], BINS.centers[6]
        var = depth_variance(p, BINS, expected_depth(p, BINS))
        np.testing.assert_allclose(var, ((d2 - d1) / 2) ** 2)

    def test_hand_case(self):
        bins = DepthBinSpec(n_bins=3, d_min=0.5, d_max=3.5)
        p = np.array([0.2, 0.3, 0.5])
        np.testing.assert_allclose(depth_variance(p, bins, 2.3), 0.61)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_non_negative_zero_iff_one_hot(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.full(8, 0.3))
        var = depth_variance(p, BINS, expected_depth(p, BINS))
        assert var >= 0.0
        if var < 1e-24:
            assert np.max(p) > 1.0 - 1e-12


def one_hot_head(bin_index, offset=(0.0, 0.0, 0.0), opacity_logit=2.0, feat_dim=4):
    logits = np.full(BINS.n_bins, -1000.0)
    logits[bin_index] = 0.0
    return CameraHeadOutput(
        depth=DepthDistribution(logits=logits),
        offset=np.asarray(offset, dtype=np.float64),
        opacity_logit=opacity_logit,
        feature=np.arange(feat_dim, dtype=np.float64),
    )


class TestLiftPixel:
    def test_one_hot_principal_point(self):
        g = lift_pixel(
            np.array([INTR.cx, INTR.cy]), one_hot_head(3), INTR, SE3Pose.identity(), BINS
        )
        np.testing.assert_allclose(g.mean, [0.0, 0.0, BINS.centers[3]], atol=1e-12)
        # one-hot depth: along-ray variance clamps to the floor
        lam, _ = sym_eigen(g.cov)
        assert lam[0] >= 0.5 * 1e-6 * (1 - 1e-9)

    def test_offset_additivity(self):
        base = lift_pixel(
            np.array([INTR.cx, INTR.cy]), one_hot_head(3), INTR, SE3Pose.identity(), BINS
        )
        shifted = lift_pixel(
            np.array([INTR.cx, INTR.cy]),
            one_hot_head(3, offset=(0.5, -1.0, 0.25)),
            INTR,
            SE3Pose.identity(),
            BINS,
        )
        np.testing.assert_allclose(shifted.mean - base.mean, [0.5, -1.0, 0.25])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_cov_eigenstructure(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.uniform(-2, 2, BINS.n_bins)
        head = CameraHeadOutput(
            depth=DepthDistribution(logits=logits),
            offset=rng.uniform(-1, 1, 3),
            opacity_logit=rng.uniform(-2, 2),
            feature=rng.standard_normal(4),
        )
        u = rng.uniform([0, 0], [INTR.width, INTR.height])
        k = 0.5
        g = lift_pixel(u, head, INTR, SE3Pose.identity(), BINS, k=k)

        probs = softmax_depth(logits)
        d_hat = expected_depth(probs, BINS)
        sigma_d2 = max(depth_variance(probs, BINS, d_hat), 1e-6)
        sigma_lat2 = max((8 * d_hat / (2 * INTR.fx)) ** 2, 1e-6)
        lam, V = sym_eigen(g.cov)
        expect = np.sort(np.array([k * sigma_lat2, k * sigma_lat2, k * sigma_d2]))
        np.testing.assert_allclose(lam, expect, atol=1e-7, rtol=1e-7)

        # the sigma_d axis is parallel to the ray direction
        if sigma_d2 > 4 * sigma_lat2:
            ray = np.array([(u[0] - INTR.cx) / INTR.fx, (u[1] - INTR.cy) / INTR.fy, 1.0])
            ray /= np.linalg.norm(ray)
            axis = V[:, 2]
            assert abs(abs(axis @ ray) - 1.0) < 1e-7

    def test_cov_is_psd(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            head = CameraHeadOutput(
                depth=DepthDistribution(logits=rng.uniform(-5, 5, BINS.n_bins)),
                offset=rng.uniform(-2, 2, 3),
                opacity_logit=rng.uniform(-5, 5),
                feature=rng.standard_normal(4),
            )
            u = rng.uniform([0, 0], [INTR.width, INTR.height])
            g = lift_pixel(u, head, INTR, SE3Pose.identity(), BINS)
            lam, _ = sym_eigen(g.cov)
            assert lam[0] >= 0.0


def constant_provider(h_low, w_low, n_views, opacity_logit, feat_dim=4, bin_index=2):
    grids = []
    for _ in range(n_views):
        logits = np.zeros((h_low, w_low, BINS.n_bins))
        logits[..., bin_index] = 8.0
        grids.append(
            CameraHeadGrid(
                depth_logits=logits,
                offsets=np.zeros((h_low, w_low, 3)),
                opacity_logits=np.full((h_low, w_low), float(opacity_logit)),
                features=np.ones((h_low, w_low, feat_dim)),
            )
        )
    return ArrayFeatureProvider(grids)


def small_rig(n_views):
    intr = PinholeIntrinsics(fx=100.0, fy=100.0, cx=16.0, cy=16.0, width=32, height=32)
    return [CameraView(intr, SE3Pose.identity()) for _ in range(n_views)]


class TestLiftImage:
    def test_total_pruning(self):
        batch, _ = lift_image(
            constant_provider(4, 4, 2, opacity_logit=-1000.0), small_rig(2), BINS
        )
        assert len(batch) == 0

    def test_count_formula_without_pruning(self):
        batch, _ = lift_image(
            constant_provider(4, 4, 2, opacity_logit=5.0), small_rig(2), BINS
        )
        assert len(batch) == 2 * 4 * 4

    def test_pruning_monotone_in_alpha_min(self):
        rng = np.random.default_rng(4)
        grids = [
            CameraHeadGrid(
                depth_logits=rng.uniform(-1, 1, (4, 4, BINS.n_bins)),
                offsets=np.zeros((4, 4, 3)),
                opacity_logits=rng.uniform(-6, 6, (4, 4)),
                features=np.ones((4, 4, 4)),
            )
        ]
        provider = ArrayFeatureProvider(grids)
        sizes = []
        for alpha_min in (0.001, 0.01, 0.1, 0.5, 0.9):
            batch, _ = lift_image(
                provider, small_rig(1), BINS, LiftConfig(alpha_min=alpha_min)
            )
            sizes.append(len(batch))
            assert np.all(batch.opacities >= alpha_min)
        assert sizes == sorted(sizes, reverse=True)

    def test_pixel_centers_use_stride(self):
        # a single cell at (r, c) = (1, 2) must lift the pixel ((2+.5)*8, (1+.5)*8)
        intr = PinholeIntrinsics(fx=50.0, fy=50.0, cx=16.0, cy=12.0, width=32, height=24)
        rig = [CameraView(intr, SE3Pose.identity())]
        logits = np.full((3, 4, BINS.n_bins), -1000.0)
        logits[..., 2] = 0.0
        opac = np.full((3, 4), -1000.0)
        opac[1, 2] = 5.0
        provider = ArrayFeatureProvider(
            [
                CameraHeadGrid(
                    depth_logits=logits,
                    offsets=np.zeros((3, 4, 3)),
                    opacity_logits=opac,
                    features=np.ones((3, 4, 2)),
                )
            ]
        )
        batch, _ = lift_image(provider, rig, BINS)
        assert len(batch) == 1
        d = BINS.centers[2]
        expected = d * np.array([(20.0 - 16.0) / 50.0, (12.0 - 12.0) / 50.0, 1.0])
        np.testing.assert_allclose(batch.means[0], expected, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            lift_image(constant_provider(4, 4, 1, 0.0), small_rig(2), BINS)
        with pytest.raises(ValueError):
            # grid resolution inconsistent with intrinsics at stride 8
            lift_image(constant_provider(3, 4, 1, 0.0), small_rig(1), BINS)

    def test_deterministic_ordering(self):
        provider = constant_provider(4, 4, 2, opacity_logit=5.0)
        b1, _ = lift_image(provider, small_rig(2), BINS)
        b2, _ = lift_image(provider, small_rig(2), BINS)
        np.testing.assert_array_equal(b1.means, b2.means)
