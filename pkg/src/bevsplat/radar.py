"""Points-to-Gaussians: sweep accumulation into the current ego frame and
per-point heads (metric offset, compact covariance, opacity, feature).

The covariance head emits the six unique entries of a symmetric matrix;
positivity is enforced by eigendecomposing that matrix and passing the
eigenvalues through a softplus, which preserves the predicted orientation
and guarantees a PSD result.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np

from .camera import _sigmoid
from .geometry import Gaussian3D, GaussianBatch, SE3Pose, sym_eigen

# below this eigenvalue gap the divided difference in the backward pass is
# replaced by its limit (the derivative), avoiding catastrophic cancellation
EIG_GAP_TOL = 1e-6

# softplus output floor; eigenvalues this small would be swamped by float64
# roundoff when the matrix is materialized, making it measurably indefinite
EIG_FLOOR = 1e-9


@dataclass(frozen=True)
class RadarPoint:
    """One radar return in its sweep frame."""

    position: np.ndarray  # (3,) m
    rcs: float  # dB
    velocity: np.ndarray  # (2,) m/s, ego-motion compensated
    dt: float  # age relative to the current frame, s

    def __post_init__(self):
        if self.dt < 0 or not np.isfinite(self.dt):
            raise ValueError("dt must be finite and non-negative")


class RadarCloud:
    """Struct-of-arrays radar point cloud."""

    __slots__ = ("positions", "rcs", "velocities", "dts")

    def __init__(self, positions, rcs, velocities, dts):
        self.positions = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
        self.rcs = np.ascontiguousarray(rcs, dtype=np.float64).reshape(-1)
        self.velocities = np.ascontiguousarray(velocities, dtype=np.float64).reshape(-1, 2)
        self.dts = np.ascontiguousarray(dts, dtype=np.float64).reshape(-1)
        n = self.positions.shape[0]
        if not (self.rcs.shape[0] == self.velocities.shape[0] == self.dts.shape[0] == n):
            raise ValueError("inconsistent cloud field lengths")
        if not all(
            np.all(np.isfinite(a))
            for a in (self.positions, self.rcs, self.velocities, self.dts)
        ):
            raise ValueError("non-finite cloud entries")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __getitem__(self, i: int) -> RadarPoint:
        return RadarPoint(
            self.positions[i], float(self.rcs[i]), self.velocities[i], float(self.dts[i])
        )

    @classmethod
    def empty(cls) -> "RadarCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), np.zeros((0, 2)), np.zeros(0))


@dataclass(frozen=True)
class RadarHeadOutput:
    """Raw per-point head outputs."""

    offset: np.ndarray  # (3,) m
    cov6: np.ndarray  # (6,) [xx xy xz yy yz zz], unconstrained
    opacity_logit: float
    feature: np.ndarray


@dataclass
class RadarHeadGrid:
    """Dense head outputs for a whole cloud: offsets (N, 3), cov6 (N, 6),
    opacity_logits (N,), features (N, D)."""

    offsets: np.ndarray
    cov6: np.ndarray
    opacity_logits: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        n = self.opacity_logits.shape[0]
        if self.offsets.shape != (n, 3) or self.cov6.shape != (n, 6):
            raise ValueError("inconsistent head shapes")
        if self.features.shape[0] != n:
            raise ValueError("inconsistent head shapes")

    def __len__(self) -> int:
        return self.opacity_logits.shape[0]


class PointFeatureProvider(Protocol):
    """Stand-in for the point backbone: one head output per input point."""

    def heads(self, cloud: RadarCloud) -> RadarHeadGrid: ...


@dataclass
class ArrayPointProvider:
    grid: RadarHeadGrid

    def heads(self, cloud: RadarCloud) -> RadarHeadGrid:
        if len(self.grid) != len(cloud):
            raise ValueError("head count does not match cloud size")
        return self.grid


def accumulate_sweeps(
    sweeps: Sequence[tuple[RadarCloud, SE3Pose, float]],
    current_pose: SE3Pose,
    current_time: float = 0.0,
) -> RadarCloud:
    """Merge (cloud, ego pose, timestamp) sweeps into the current ego frame.

    Every point is mapped through current_pose^-1 o sweep_pose; velocities are
    rotated by the planar part of the relative rotation; dt is the sweep age.
    """
    if len(sweeps) == 0:
        raise ValueError("need at least one sweep")
    inv = current_pose.inverse()
    positions, rcs, velocities, dts = [], [], [], []
    for cloud, pose, stamp in sweeps:
        rel = inv.compose(pose)
        positions.append(rel.apply(cloud.positions))
        rcs.append(cloud.rcs)
        velocities.append(cloud.velocities @ rel.rotation[:2, :2].T)
        dts.append(np.full(len(cloud), current_time - stamp))
    return RadarCloud(
        np.concatenate(positions, axis=0),
        np.concatenate(rcs, axis=0),
        np.concatenate(velocities, axis=0),
        np.concatenate(dts, axis=0),
    )


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sym_from_6vec(cov6: np.ndarray) -> np.ndarray:
    c = np.asarray(cov6, dtype=np.float64)
    S = np.empty(c.shape[:-1] + (3, 3))
    S[..., 0, 0] = c[..., 0]
    S[..., 0, 1] = S[..., 1, 0] = c[..., 1]
    S[..., 0, 2] = S[..., 2, 0] = c[..., 2]
    S[..., 1, 1] = c[..., 3]
    S[..., 1, 2] = S[..., 2, 1] = c[..., 4]
    S[..., 2, 2] = c[..., 5]
    return S


def cov_from_6vec(cov6: np.ndarray) -> np.ndarray:
    """Symmetric PSD 3x3 from an unconstrained 6-vector [xx xy xz yy yz zz].

    The assembled symmetric matrix is eigendecomposed and its eigenvalues are
    made positive with a softplus; eigenvectors are kept, so the output is
    V diag(softplus(lambda)) V^T.
    """
    cov, _ = _cov_from_6vec_cached(cov6)
    return cov


@dataclass
class CovCache:
    eigenvalues: np.ndarray  # raw, ascending
    eigenvectors: np.ndarray


def _cov_from_6vec_cached(cov6: np.ndarray) -> tuple[np.ndarray, CovCache]:
    c = np.asarray(cov6, dtype=np.float64)
    if not np.all(np.isfinite(c)):
        raise ValueError("non-finite covariance head output")
    S = _sym_from_6vec(c)
    lam, V = sym_eigen(S)
    pos = np.maximum(_softplus(lam), EIG_FLOOR)
    out = V @ (pos[..., None] * np.swapaxes(V, -1, -2))
    out = 0.5 * (out + np.swapaxes(out, -1, -2))
    return out, CovCache(eigenvalues=lam, eigenvectors=V)


def cov_from_6vec_backward(cache: CovCache, d_cov: np.ndarray) -> np.ndarray:
    """Gradient of the PSD construction wrt the 6-vector.

    Uses the spectral-function derivative: in the eigenbasis the Jacobian is
    the Loewner matrix of softplus divided differences; entries with an
    eigenvalue gap below EIG_GAP_TOL use the sigmoid limit instead, which is
    the continuous extension and numerically stable.
    """
    lam = cache.eigenvalues
    V = cache.eigenvectors
    G = np.asarray(d_cov, dtype=np.float64)

    diff = lam[..., :, None] - lam[..., None, :]
    sp = _softplus(lam)
    num = sp[..., :, None] - sp[..., None, :]
    small = np.abs(diff) < EIG_GAP_TOL
    mid = 0.5 * (lam[..., :, None] + lam[..., None, :])
    K = np.where(small, _sigmoid(mid), num / np.where(small, 1.0, diff))

    H = np.swapaxes(V, -1, -2) @ G @ V
    dS = V @ (K * H) @ np.swapaxes(V, -1, -2)
    dS = 0.5 * (dS + np.swapaxes(dS, -1, -2))

    out = np.empty(lam.shape[:-1] + (6,))
    out[..., 0] = dS[..., 0, 0]
    out[..., 1] = 2.0 * dS[..., 0, 1]
    out[..., 2] = 2.0 * dS[..., 0, 2]
    out[..., 3] = dS[..., 1, 1]
    out[..., 4] = 2.0 * dS[..., 1, 2]
    out[..., 5] = dS[..., 2, 2]
    return out


def lift_point(
    pt: RadarPoint, head: RadarHeadOutput, alpha_min: float = 0.01
) -> Optional[Gaussian3D]:
    """Lift a single radar point; returns None when pruned by opacity."""
    opacity = float(_sigmoid(np.asarray(head.opacity_logit)))
    if opacity < alpha_min:
        return None
    return Gaussian3D(
        mean=np.asarray(pt.position, dtype=np.float64) + np.asarray(head.offset),
        cov=cov_from_6vec(head.cov6),
        opacity=opacity,
        feature=np.asarray(head.feature, dtype=np.float64),
    )


@dataclass
class RadarLiftCache:
    kept: np.ndarray  # indices into the input cloud
    n_points: int
    cov_cache: CovCache
    opacities: np.ndarray


def lift_cloud(
    cloud: RadarCloud,
    provider: PointFeatureProvider,
    alpha_min: float = 0.01,
) -> tuple[GaussianBatch, RadarLiftCache]:
    """Lift a whole cloud; Gaussians ordered by input point index."""
    heads = provider.heads(cloud)
    if len(heads) != len(cloud):
        raise ValueError("provider output count does not match cloud size")

    opac = _sigmoid(heads.opacity_logits)
    kept = np.nonzero(opac >= alpha_min)[0]
    covs, cov_cache = _cov_from_6vec_cached(heads.cov6[kept])
    batch = GaussianBatch(
        cloud.positions[kept] + heads.offsets[kept],
        covs,
        opac[kept],
        heads.features[kept],
    )
    cache = RadarLiftCache(
        kept=kept, n_points=len(cloud), cov_cache=cov_cache, opacities=opac[kept]
    )
    return batch, cache


@dataclass
class RadarParamGrads:
    offsets: np.ndarray
    cov6: np.ndarray
    opacity_logits: np.ndarray
    features: np.ndarray


def lift_cloud_backward(
    cache: RadarLiftCache,
    d_mean: np.ndarray,
    d_cov: np.ndarray,
    d_opacity: np.ndarray,
    d_feature: np.ndarray,
) -> RadarParamGrads:
    """Scatter Gaussian gradients back onto full per-point head arrays."""
    n = cache.n_points
    feat_dim = np.asarray(d_feature).shape[1]
    grads = RadarParamGrads(
        offsets=np.zeros((n, 3)),
        cov6=np.zeros((n, 6)),
        opacity_logits=np.zeros(n),
        features=np.zeros((n, feat_dim)),
    )
    kept = cache.kept
    grads.offsets[kept] = np.asarray(d_mean, dtype=np.float64)
    grads.cov6[kept] = cov_from_6vec_backward(cache.cov_cache, d_cov)
    o = cache.opacities
    grads.opacity_logits[kept] = np.asarray(d_opacity) * o * (1.0 - o)
    grads.features[kept] = np.asarray(d_feature)
    return grads
