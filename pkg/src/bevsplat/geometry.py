"""Shared geometric primitives: pinhole cameras, rigid poses, BEV grids,
depth bins, and a closed-form symmetric 3x3 eigensolver.

Conventions used throughout the package:

* ego frame: x right, y forward, z up (metric, metres)
* camera frame: x right, y down, z along the optical axis; "depth" is the
  camera-frame z coordinate, not the distance along the ray
* BEV grid: column index follows ego x, row index follows ego y
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

_ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class PinholeIntrinsics:
    """Rectified pinhole camera intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform mapping sensor coordinates into the ego/world frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("pose entries must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-8:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-8:
            raise ValueError("rotation must be proper (det = +1)")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "SE3Pose":
        return SE3Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        """Returns self o other (apply other first, then self)."""
        return SE3Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


@dataclass(frozen=True)
class Gaussian3D:
    """One anisotropic primitive: mean (m), 3x3 covariance (m^2), opacity,
    and a feature vector carried through rasterization."""

    mean: np.ndarray
    cov: np.ndarray
    opacity: float
    feature: np.ndarray

    def validate(self, tol: float = 1e-9) -> None:
        cov = np.asarray(self.cov)
        if np.max(np.abs(cov - cov.T)) > tol:
            raise ValueError("covariance is not symmetric")
        lam, _ = sym_eigen(cov)
        if lam[0] < -tol * max(1.0, abs(lam[2])):
            raise ValueError("covariance has a negative eigenvalue")
        if not (0.0 <= self.opacity <= 1.0):
            raise ValueError("opacity outside [0, 1]")


class GaussianBatch:
    """Struct-of-arrays batch of :class:`Gaussian3D`."""

    __slots__ = ("means", "covs", "opacities", "features")

    def __init__(self, means, covs, opacities, features):
        self.means = np.ascontiguousarray(means, dtype=np.float64)
        self.covs = np.ascontiguousarray(covs, dtype=np.float64)
        self.opacities = np.ascontiguousarray(opacities, dtype=np.float64)
        self.features = np.ascontiguousarray(features, dtype=np.float64)
        n = self.means.shape[0]
        if self.means.shape != (n, 3) or self.covs.shape != (n, 3, 3):
            raise ValueError("inconsistent batch shapes")
        if self.opacities.shape != (n,) or self.features.shape[0] != n:
            raise ValueError("inconsistent batch shapes")

    def __len__(self) -> int:
        return self.means.shape[0]

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            self.means[i], self.covs[i], float(self.opacities[i]), self.features[i]
        )

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @classmethod
    def empty(cls, feature_dim: int) -> "GaussianBatch":
        return cls(
            np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros(0), np.zeros((0, feature_dim))
        )

    @classmethod
    def concatenate(cls, batches) -> "GaussianBatch":
        return cls(
            np.concatenate([b.means for b in batches], axis=0),
            np.concatenate([b.covs for b in batches], axis=0),
            np.concatenate([b.opacities for b in batches], axis=0),
            np.concatenate([b.features for b in batches], axis=0),
        )


@dataclass(frozen=True)
class BEVGridSpec:
    """Metric extent and resolution of the bird's-eye-view grid.

    Cell counts are derived and must divide the extent exactly; the default
    covers -50..50 m at 0.5 m, i.e. a 200x200 grid.
    """

    x_min: float = -50.0
    x_max: float = 50.0
    y_min: float = -50.0
    y_max: float = 50.0
    resolution: float = 0.5

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        for lo, hi in ((self.x_min, self.x_max), (self.y_min, self.y_max)):
            n = (hi - lo) / self.resolution
            if abs(n - round(n)) > 1e-9 or n <= 0:
                raise ValueError("extent must be an exact multiple of resolution")

    @property
    def w_bev(self) -> int:
        return int(round((self.x_max - self.x_min) / self.resolution))

    @property
    def h_bev(self) -> int:
        return int(round((self.y_max - self.y_min) / self.resolution))

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """World (x, y) coordinates of every cell center, shapes (H, W)."""
        xs = self.x_min + (np.arange(self.w_bev) + 0.5) * self.resolution
        ys = self.y_min + (np.arange(self.h_bev) + 0.5) * self.resolution
        return np.broadcast_to(xs, (self.h_bev, self.w_bev)), np.broadcast_to(
            ys[:, None], (self.h_bev, self.w_bev)
        )


@dataclass(frozen=True)
class DepthBinSpec:
    """Uniform discretization of camera depth into B bins over [d_min, d_max]."""

    n_bins: int = 64
    d_min: float = 0.5
    d_max: float = 60.0

    def __post_init__(self):
        if self.n_bins < 1:
            raise ValueError("need at least one depth bin")
        if not (0 <= self.d_min < self.d_max):
            raise ValueError("require 0 <= d_min < d_max")

    @property
    def bin_width(self) -> float:
        return (self.d_max - self.d_min) / self.n_bins

    @property
    def centers(self) -> np.ndarray:
        return self.d_min + (np.arange(self.n_bins) + 0.5) * self.bin_width


# ---------------------------------------------------------------------------
# camera geometry
# ---------------------------------------------------------------------------


def pixel_rays(intr: PinholeIntrinsics, u: np.ndarray) -> np.ndarray:
    """Camera-frame ray directions [(u-cx)/fx, (v-cy)/fy, 1] for pixels (..., 2)."""
    u = np.asarray(u, dtype=np.float64)
    d = np.empty(u.shape[:-1] + (3,))
    d[..., 0] = (u[..., 0] - intr.cx) / intr.fx
    d[..., 1] = (u[..., 1] - intr.cy) / intr.fy
    d[..., 2] = 1.0
    return d


def back_project(
    intr: PinholeIntrinsics, pose: SE3Pose, u: np.ndarray, depth: np.ndarray
) -> np.ndarray:
    """Lift pixels (..., 2) at camera depth (...) into the ego frame.

    Inverts the pinhole projection: the returned point re-projects to (u, depth).
    """
    u = np.asarray(u, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(depth))):
        raise ValueError("non-finite pixel or depth")
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    return pose.apply(depth[..., None] * pixel_rays(intr, u))


def project_to_image(
    intr: PinholeIntrinsics, pose: SE3Pose, points: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Forward pinhole projection of ego-frame points (..., 3) -> (pixels, depths)."""
    p_cam = np.asarray(points, dtype=np.float64) - pose.translation
    p_cam = p_cam @ pose.rotation
    depth = p_cam[..., 2]
    u = np.empty(p_cam.shape[:-1] + (2,))
    with np.errstate(divide="ignore", invalid="ignore"):
        u[..., 0] = intr.fx * p_cam[..., 0] / depth + intr.cx
        u[..., 1] = intr.fy * p_cam[..., 1] / depth + intr.cy
    return u, depth


def world_to_bev(p: np.ndarray, grid: BEVGridSpec) -> np.ndarray:
    """Map ego points (..., 3) to continuous (col, row) cell coordinates.

    Affine: col = (x - x_min)/resolution, row = (y - y_min)/resolution.
    Out-of-range points map to out-of-range cell coordinates.
    """
    p = np.asarray(p, dtype=np.float64)
    out = np.empty(p.shape[:-1] + (2,))
    out[..., 0] = (p[..., 0] - grid.x_min) / grid.resolution
    out[..., 1] = (p[..., 1] - grid.y_min) / grid.resolution
    return out


def ray_basis(direction: np.ndarray) -> np.ndarray:
    """Deterministic rotation whose third column equals the given unit vector.

    Rotates +z onto ``direction`` about the axis z x direction.  The antipodal
    case (direction ~ -z) has no unique axis; it is resolved by a fixed 180
    degree rotation about x.
    """
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    n = np.linalg.norm(d)
    if n < 1e-12:
        raise ValueError("zero direction vector")
    if abs(n - 1.0) > _ORTHO_TOL * 10:
        raise ValueError("direction must be a unit vector")
    c = d[2]  # cos(angle to +z)
    if c < -1.0 + 1e-12:
        return np.diag([1.0, -1.0, -1.0])
    # Rodrigues with axis k = z x d (unnormalized), using the half-angle form
    # R = I + [k]_x + [k]_x^2 / (1 + c), stable away from c = -1.
    kx, ky = -d[1], d[0]
    s = 1.0 / (1.0 + c)
    return np.array(
        [
            [1.0 - ky * ky * s, kx * ky * s, d[0]],
            [kx * ky * s, 1.0 - kx * kx * s, d[1]],
            [-d[0], -d[1], c],
        ]
    )


# ---------------------------------------------------------------------------
# symmetric 3x3 eigendecomposition
# ---------------------------------------------------------------------------
#
# Closed-form trigonometric eigenvalues (Cardano) with cross-product
# eigenvectors; batches with near-degenerate spectra fall back to cyclic
# Jacobi sweeps.  Keeps the hot path free of LAPACK calls and vectorizes
# over large batches.

_DEGENERATE_GAP = 1e-8


def _jacobi_eigh3(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi for a single symmetric 3x3 matrix."""
    a = A.copy()
    V = np.eye(3)
    for _ in range(32):
        off = abs(a[0, 1]) + abs(a[0, 2]) + abs(a[1, 2])
        if off < 1e-15 * max(1.0, np.max(np.abs(np.diag(a)))):
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            if abs(a[p, q]) < 1e-300:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
            t = math.copysign(1.0, theta) / (
                abs(theta) + math.sqrt(theta * theta + 1.0)
            )
            c = 1.0 / math.sqrt(t * t + 1.0)
            s = t * c
            J = np.eye(3)
            J[p, p] = J[q, q] = c
            J[p, q] = s
            J[q, p] = -s
            a = J.T @ a @ J
            V = V @ J
    lam = np.diag(a).copy()
    order = np.argsort(lam, kind="stable")
    return lam[order], V[:, order]


def _eigvals3_closed_form(A: np.ndarray) -> np.ndarray:
    """Ascending eigenvalues of symmetric matrices (..., 3, 3), trigonometric form."""
    a00, a11, a22 = A[..., 0, 0], A[..., 1, 1], A[..., 2, 2]
    a01, a02, a12 = A[..., 0, 1], A[..., 0, 2], A[..., 1, 2]
    p1 = a01**2 + a02**2 + a12**2
    q = (a00 + a11 + a22) / 3.0
    p2 = (a00 - q) ** 2 + (a11 - q) ** 2 + (a22 - q) ** 2 + 2.0 * p1
    p = np.sqrt(np.maximum(p2, 0.0) / 6.0)
    safe_p = np.where(p > 0, p, 1.0)
    b00, b11, b22 = (a00 - q) / safe_p, (a11 - q) / safe_p, (a22 - q) / safe_p
    b01, b02, b12 = a01 / safe_p, a02 / safe_p, a12 / safe_p
    detb = (
        b00 * (b11 * b22 - b12**2)
        - b01 * (b01 * b22 - b12 * b02)
        + b02 * (b01 * b12 - b11 * b02)
    )
    r = np.clip(detb / 2.0, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    hi = q + 2.0 * p * np.cos(phi)
    lo = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
    mid = 3.0 * q - hi - lo
    return np.stack([lo, mid, hi], axis=-1)


def _eigvec_cross(A: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Eigenvector for eigenvalue lam (...,) via the largest row cross product."""
    C = A - lam[..., None, None] * np.eye(3)
    c01 = np.cross(C[..., 0, :], C[..., 1, :])
    c02 = np.cross(C[..., 0, :], C[..., 2, :])
    c12 = np.cross(C[..., 1, :], C[..., 2, :])
    cands = np.stack([c01, c02, c12], axis=-2)
    norms = np.linalg.norm(cands, axis=-1)
    best = np.argmax(norms, axis=-1)
    v = np.take_along_axis(cands, best[..., None, None], axis=-2)[..., 0, :]
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def sym_eigen(cov: np.ndarray, *, sym_tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of symmetric 3x3 matrices, batched over (..., 3, 3).

    Returns (eigenvalues ascending (..., 3), eigenvectors as orthonormal
    columns (..., 3, 3)) with ``V @ diag(lam) @ V.T`` reconstructing the input.
    Asymmetric input is rejected.  For repeated eigenvalues any orthonormal
    basis of the eigenspace may be returned.
    """
    A = np.asarray(cov, dtype=np.float64)
    if A.shape[-2:] != (3, 3):
        raise ValueError("expected (..., 3, 3) input")
    if A.size == 0:
        return np.zeros(A.shape[:-2] + (3,)), A.copy()
    if not np.all(np.isfinite(A)):
        raise ValueError("non-finite covariance entries")
    scale = np.maximum(np.max(np.abs(A), axis=(-2, -1)), 1.0)
    if np.max(np.abs(A - np.swapaxes(A, -1, -2)) / scale[..., None, None]) > sym_tol:
        raise ValueError("input matrix is not symmetric")
    A = 0.5 * (A + np.swapaxes(A, -1, -2))  # kill roundoff asymmetry

    single = A.ndim == 2
    batch = A.reshape((-1, 3, 3))
    lam = _eigvals3_closed_form(batch)

    # eigenvectors: most isolated extremal first, other extremal orthogonalized,
    # middle column completes the right-handed frame
    gap_lo = lam[:, 1] - lam[:, 0]
    gap_hi = lam[:, 2] - lam[:, 1]
    lo_first = gap_lo >= gap_hi
    first_lam = np.where(lo_first, lam[:, 0], lam[:, 2])
    second_lam = np.where(lo_first, lam[:, 2], lam[:, 0])
    v_first = _eigvec_cross(batch, first_lam)
    v_second = _eigvec_cross(batch, second_lam)
    v_second = v_second - np.sum(v_second * v_first, axis=-1, keepdims=True) * v_first
    n2 = np.linalg.norm(v_second, axis=-1, keepdims=True)
    v_second = v_second / np.where(n2 > 1e-12, n2, 1.0)
    v_mid = np.cross(v_first, v_second)

    V = np.empty_like(batch)
    V[:, :, 1] = v_mid
    V[lo_first, :, 0] = v_first[lo_first]
    V[lo_first, :, 2] = v_second[lo_first]
    V[~lo_first, :, 2] = v_first[~lo_first]
    V[~lo_first, :, 0] = v_second[~lo_first]

    # fall back to Jacobi where the spectrum is (nearly) degenerate or the
    # cross-product vectors lost accuracy
    mscale = np.max(np.abs(batch), axis=(-2, -1))
    tol = _DEGENERATE_GAP * np.maximum(mscale, 1.0)
    recon = V @ (lam[..., None] * np.swapaxes(V, -1, -2))
    resid = np.max(np.abs(recon - batch), axis=(-2, -1))
    bad = (
        (np.minimum(gap_lo, gap_hi) < tol)
        | (resid > 1e-9 * np.maximum(mscale, 1.0))
        | (n2[:, 0] <= 1e-12)
    )
    for i in np.nonzero(bad)[0]:
        lam[i], V[i] = _jacobi_eigh3(batch[i])

    if single:
        return lam[0], V[0]
    return lam.reshape(cov.shape[:-2] + (3,)), V.reshape(cov.shape)


def cov_from_eigen(eigenvalues: np.ndarray, eigenvectors: np.ndarray) -> np.ndarray:
    """Assemble V diag(lam) V^T from eigenvalues (..., 3) >= 0 and orthonormal V."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    V = np.asarray(eigenvectors, dtype=np.float64)
    if np.any(lam < 0):
        raise ValueError("covariance eigenvalues must be non-negative")
    VtV = np.swapaxes(V, -1, -2) @ V
    if np.max(np.abs(VtV - np.eye(3))) > 1e-7:
        raise ValueError("eigenvectors are not orthonormal")
    out = V @ (lam[..., None] * np.swapaxes(V, -1, -2))
    return 0.5 * (out + np.swapaxes(out, -1, -2))
