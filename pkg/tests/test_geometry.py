import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevsplat.geometry import (
    BEVGridSpec,
    DepthBinSpec,
    PinholeIntrinsics,
    SE3Pose,
    back_project,
    cov_from_eigen,
    pixel_rays,
    project_to_image,
    ray_basis,
    sym_eigen,
    world_to_bev,
)
from oracles import backproject_homogeneous, charpoly_eigvals_bisect


def random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


INTR = PinholeIntrinsics(fx=500.0, fy=480.0, cx=400.0, cy=224.0, width=800, height=448)


class TestBackProject:
    def test_principal_point_is_optical_axis(self):
        p = back_project(INTR, SE3Pose.identity(), np.array([INTR.cx, INTR.cy]), 5.0)
        np.testing.assert_allclose(p, [0.0, 0.0, 5.0], atol=1e-12)

    def test_unit_normalized_x(self):
        p = back_project(
            INTR, SE3Pose.identity(), np.array([INTR.cx + INTR.fx, INTR.cy]), 2.0
        )
        np.testing.assert_allclose(p, [2.0, 0.0, 2.0], atol=1e-12)

    def test_matches_homogeneous_matrix_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            pose = SE3Pose(random_rotation(rng), rng.uniform(-5, 5, 3))
            u = rng.uniform([0, 0], [INTR.width, INTR.height])
            d = rng.uniform(0.5, 40.0)
            expected = backproject_homogeneous(
                INTR.matrix, pose.rotation, pose.translation, u, d
            )
            np.testing.assert_allclose(back_project(INTR, pose, u, d), expected, atol=1e-9)

    def test_projection_round_trip_bulk(self):
        rng = np.random.default_rng(3)
        pose = SE3Pose(random_rotation(rng), rng.uniform(-2, 2, 3))
        u = rng.uniform([0, 0], [INTR.width, INTR.height], size=(100_000, 2))
        d = rng.uniform(0.5, 60.0, size=100_000)
        p = back_project(INTR, pose, u, d)
        u2, d2 = project_to_image(INTR, pose, p)
        np.testing.assert_allclose(u2, u, atol=1e-9)
        np.testing.assert_allclose(d2, d, atol=1e-9)

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            back_project(INTR, SE3Pose.identity(), np.array([np.nan, 0.0]), 1.0)
        with pytest.raises(ValueError):
            back_project(INTR, SE3Pose.identity(), np.array([1.0, 1.0]), -1.0)


class TestSE3Pose:
    def test_rejects_improper_rotation(self):
        with pytest.raises(ValueError):
            SE3Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
        with pytest.raises(ValueError):
            SE3Pose(np.eye(3) * 1.001, np.zeros(3))

    def test_inverse_compose(self):
        rng = np.random.default_rng(11)
        pose = SE3Pose(random_rotation(rng), rng.uniform(-3, 3, 3))
        both = pose.compose(pose.inverse())
        np.testing.assert_allclose(both.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(both.translation, 0.0, atol=1e-12)


class TestSymEigen:
    def test_diagonal(self):
        lam, V = sym_eigen(np.diag([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(lam, [1.0, 2.0, 3.0], atol=1e-12)
        np.testing.assert_allclose(np.abs(V), np.eye(3), atol=1e-9)

    def test_identity(self):
        lam, V = sym_eigen(np.eye(3))
        np.testing.assert_allclose(lam, 1.0, atol=1e-12)
        np.testing.assert_allclose(V @ V.T, np.eye(3), atol=1e-12)

    def test_random_psd_against_bisection_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            M = rng.standard_normal((3, 3)) * rng.uniform(0.1, 10)
            A = M.T @ M
            lam, V = sym_eigen(A)
            oracle = charpoly_eigvals_bisect(A)
            scale = max(1.0, np.max(np.abs(A)))
            np.testing.assert_allclose(lam, oracle, atol=1e-6 * scale)
            recon = V @ np.diag(lam) @ V.T
            assert np.max(np.abs(recon - A)) < 1e-7 * scale
            np.testing.assert_allclose(V.T @ V, np.eye(3), atol=1e-7)

    @settings(max_examples=150, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_reconstruction_property(self, seed):
        rng = np.random.default_rng(seed)
        kind = rng.integers(0, 3)
        if kind == 0:
            M = rng.standard_normal((3, 3))
            A = M.T @ M * rng.uniform(1e-4, 1e4)
        elif kind == 1:
            # nearly-degenerate spectrum
            lam = np.array([1.0, 1.0 + rng.uniform(0, 1e-9), 2.0])
            R = random_rotation(rng)
            A = R @ np.diag(lam) @ R.T
        else:
            A = np.diag(rng.uniform(0, 5, 3))
        A = 0.5 * (A + A.T)
        lam, V = sym_eigen(A)
        scale = max(1.0, np.max(np.abs(A)))
        assert np.max(np.abs(V @ np.diag(lam) @ V.T - A)) < 1e-7 * scale
        np.testing.assert_allclose(V.T @ V, np.eye(3), atol=1e-7)
        assert lam[0] <= lam[1] <= lam[2]

    def test_rejects_asymmetric(self):
        A = np.array([[1.0, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        with pytest.raises(ValueError):
            sym_eigen(A)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(9)
        Ms = rng.standard_normal((40, 3, 3))
        As = np.einsum("nij,nkj->nik", Ms, Ms)
        lam_b, V_b = sym_eigen(As)
        for i in range(40):
            recon = V_b[i] @ np.diag(lam_b[i]) @ V_b[i].T
            np.testing.assert_allclose(recon, As[i], atol=1e-7 * np.max(np.abs(As[i])))


class TestCovFromEigen:
    def test_identity(self):
        np.testing.assert_allclose(
            cov_from_eigen(np.ones(3), np.eye(3)), np.eye(3), atol=1e-15
        )

    def test_zero(self):
        rng = np.random.default_rng(1)
        V = random_rotation(rng)
        np.testing.assert_allclose(cov_from_eigen(np.zeros(3), V), 0.0, atol=1e-15)

    def test_round_trip(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            lam = np.sort(rng.uniform(0.1, 5.0, 3))
            V = random_rotation(rng)
            lam2, _ = sym_eigen(cov_from_eigen(lam, V))
            np.testing.assert_allclose(lam2, lam, atol=1e-7)

    def test_rejects_negative_eigenvalue(self):
        with pytest.raises(ValueError):
            cov_from_eigen(np.array([-0.1, 1.0, 2.0]), np.eye(3))


class TestWorldToBEV:
    GRID = BEVGridSpec()

    def test_corner_and_center(self):
        np.testing.assert_allclose(
            world_to_bev(np.array([-50.0, -50.0, 1.3]), self.GRID), [0.0, 0.0]
        )
        np.testing.assert_allclose(
            world_to_bev(np.array([0.0, 0.0, -2.0]), self.GRID), [100.0, 100.0]
        )

    def test_hand_case(self):
        np.testing.assert_allclose(
            world_to_bev(np.array([12.3, -7.7, 1.0]), self.GRID), [124.6, 84.6]
        )

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_affine(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.uniform(-80, 80, (2, 3))
        zero = world_to_bev(np.zeros(3), self.GRID)
        lhs = world_to_bev(a, self.GRID) + world_to_bev(b, self.GRID) - zero
        np.testing.assert_allclose(lhs, world_to_bev(a + b, self.GRID), atol=1e-9)


class TestRayBasis:
    def test_z_axis_is_identity(self):
        np.testing.assert_allclose(ray_basis(np.array([0.0, 0.0, 1.0])), np.eye(3))

    def test_antipodal_branch(self):
        R = ray_basis(np.array([0.0, 0.0, -1.0]))
        np.testing.assert_allclose(R, np.diag([1.0, -1.0, -1.0]))
        np.testing.assert_allclose(np.linalg.det(R), 1.0)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_orthonormal_with_dir_as_third_column(self, seed):
        rng = np.random.default_rng(seed)
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        R = ray_basis(d)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(R[:, 2], d, atol=1e-12)
        np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-12)

    def test_rejects_zero(self):
        with pytest.raises(ValueError):
            ray_basis(np.zeros(3))

    def test_deterministic(self):
        d = np.array([0.3, -0.4, 0.866025])
        d /= np.linalg.norm(d)
        np.testing.assert_array_equal(ray_basis(d), ray_basis(d))


class TestSpecs:
    def test_default_grid_is_200_by_200(self):
        g = BEVGridSpec()
        assert (g.h_bev, g.w_bev) == (200, 200)

    def test_grid_rejects_inexact_extent(self):
        with pytest.raises(ValueError):
            BEVGridSpec(x_min=0.0, x_max=1.3, y_min=0.0, y_max=1.0, resolution=0.5)

    def test_bin_centers(self):
        bins = DepthBinSpec(n_bins=4, d_min=0.0, d_max=8.0)
        np.testing.assert_allclose(bins.centers, [1.0, 3.0, 5.0, 7.0])
        assert np.all(np.diff(bins.centers) > 0)

    def test_intrinsics_validation(self):
        with pytest.raises(ValueError):
            PinholeIntrinsics(fx=-1, fy=1, cx=1, cy=1, width=2, height=2)
        with pytest.raises(ValueError):
            PinholeIntrinsics(fx=1, fy=1, cx=5, cy=1, width=2, height=2)

    def test_pixel_rays_shape(self):
        u = np.zeros((4, 7, 2))
        assert pixel_rays(INTR, u).shape == (4, 7, 3)
