"""Pixels-to-Gaussians: turn per-pixel head outputs (depth logits, metric
offset, opacity logit, feature) into 3D Gaussians.

The position is coarse-to-fine: a probability-weighted depth expectation
back-projected along the pixel ray, refined by the metric offset.  The
covariance is ray-aligned, with the along-ray variance taken from the depth
distribution and the lateral variance from the metric footprint of one
feature cell, both scaled by a tolerance coefficient ``k``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .geometry import (
    DepthBinSpec,
    Gaussian3D,
    GaussianBatch,
    PinholeIntrinsics,
    SE3Pose,
    pixel_rays,
    ray_basis,
)

VAR_FLOOR = 1e-6  # m^2, floor for degenerate variances


@dataclass(frozen=True)
class CameraView:
    intrinsics: PinholeIntrinsics
    pose: SE3Pose


@dataclass(frozen=True)
class DepthDistribution:
    """Per-Gaussian depth classification logits over the bins of a DepthBinSpec."""

    logits: np.ndarray

    def probabilities(self) -> np.ndarray:
        return softmax_depth(self.logits)


@dataclass(frozen=True)
class CameraHeadOutput:
    """Raw head outputs for one feature cell."""

    depth: DepthDistribution
    offset: np.ndarray
    opacity_logit: float
    feature: np.ndarray


@dataclass
class CameraHeadGrid:
    """Dense head outputs for one view at stride-s resolution.

    Shapes: depth_logits (H_low, W_low, B), offsets (H_low, W_low, 3),
    opacity_logits (H_low, W_low), features (H_low, W_low, D).
    """

    depth_logits: np.ndarray
    offsets: np.ndarray
    opacity_logits: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        h, w = self.opacity_logits.shape
        if (
            self.depth_logits.shape[:2] != (h, w)
            or self.offsets.shape != (h, w, 3)
            or self.features.shape[:2] != (h, w)
        ):
            raise ValueError("inconsistent head grid shapes")


class FeatureProvider(Protocol):
    """Stand-in for the image backbone: head outputs per camera view."""

    def num_views(self) -> int: ...

    def head_grid(self, view: int) -> CameraHeadGrid: ...


@dataclass
class ArrayFeatureProvider:
    """Feature provider backed by in-memory arrays (used by the fitter)."""

    grids: Sequence[CameraHeadGrid]

    def num_views(self) -> int:
        return len(self.grids)

    def head_grid(self, view: int) -> CameraHeadGrid:
        return self.grids[view]


@dataclass(frozen=True)
class LiftConfig:
    """Knobs of the pixel lift.

    ``k`` multiplies the covariance matrix (the variances); set
    ``k_mode="stddev"`` to scale standard deviations instead (covariance by
    k^2).  ``depth_mode="argmax"`` snaps the depth to the highest-probability
    bin center instead of the expectation.
    """

    k: float = 0.5
    alpha_min: float = 0.01
    stride: int = 8
    offset_clamp: float = 2.0
    depth_mode: str = "expected"  # "expected" | "argmax"
    k_mode: str = "variance"  # "variance" | "stddev"

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("k must be positive")
        if self.depth_mode not in ("expected", "argmax"):
            raise ValueError("depth_mode must be 'expected' or 'argmax'")
        if self.k_mode not in ("variance", "stddev"):
            raise ValueError("k_mode must be 'variance' or 'stddev'")

    @property
    def cov_scale(self) -> float:
        return self.k if self.k_mode == "variance" else self.k * self.k


def softmax_depth(logits: np.ndarray) -> np.ndarray:
    """Shift-invariant softmax over the last axis."""
    x = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite depth logits")
    e = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def expected_depth(probs: np.ndarray, bins: DepthBinSpec) -> np.ndarray:
    """Probability-weighted mean of the bin centers."""
    p = np.asarray(probs, dtype=np.float64)
    if np.any(np.abs(np.sum(p, axis=-1) - 1.0) > 1e-6):
        raise ValueError("depth probabilities must sum to 1")
    return p @ bins.centers


def depth_variance(probs: np.ndarray, bins: DepthBinSpec, d_hat: np.ndarray) -> np.ndarray:
    """Variance of the bin centers around d_hat under probs; always >= 0."""
    p = np.asarray(probs, dtype=np.float64)
    dev = bins.centers - np.asarray(d_hat, dtype=np.float64)[..., None]
    return np.einsum("...b,...b->...", p, dev * dev)


@dataclass
class CameraLiftCache:
    """Everything the backward pass needs, for the emitted Gaussians only.

    ``view_slices`` gives, per view, the slice of the emitted batch; ``kept``
    holds the flat (row * W_low + col) indices kept after opacity pruning.
    """

    config: LiftConfig
    bins: DepthBinSpec
    view_slices: list[slice]
    kept: list[np.ndarray]
    grid_shapes: list[tuple[int, int]]
    # per emitted Gaussian, concatenated across views:
    probs: np.ndarray
    d_hat: np.ndarray
    sigma_d2: np.ndarray
    sigma_lat2: np.ndarray
    ray_dirs_ego: np.ndarray  # unnormalized R_cam @ pixel ray
    ray_frames: np.ndarray  # (N, 3, 3) ray-aligned rotation
    opacities: np.ndarray
    offset_clamped: np.ndarray  # bool (N, 3)
    fx: np.ndarray  # per emitted Gaussian


def _lift_arrays(
    view: CameraView,
    grid: CameraHeadGrid,
    bins: DepthBinSpec,
    cfg: LiftConfig,
):
    """Vectorized lift of one view; returns batch arrays plus backward data."""
    h_low, w_low = grid.opacity_logits.shape
    intr = view.intrinsics
    if h_low * cfg.stride != intr.height or w_low * cfg.stride != intr.width:
        raise ValueError("head grid does not match intrinsics at this stride")

    rows, cols = np.meshgrid(np.arange(h_low), np.arange(w_low), indexing="ij")
    u = np.stack(
        [(cols + 0.5) * cfg.stride, (rows + 0.5) * cfg.stride], axis=-1
    ).reshape(-1, 2)

    logits = grid.depth_logits.reshape(-1, bins.n_bins)
    probs = softmax_depth(logits)
    if cfg.depth_mode == "expected":
        d_hat = expected_depth(probs, bins)
    else:
        d_hat = bins.centers[np.argmax(probs, axis=-1)]
    sigma_d2 = depth_variance(probs, bins, d_hat)

    opac = _sigmoid(grid.opacity_logits.reshape(-1))
    keep = opac >= cfg.alpha_min
    kept = np.nonzero(keep)[0]

    u = u[kept]
    probs = probs[kept]
    d_hat = d_hat[kept]
    sigma_d2 = sigma_d2[kept]
    opac = opac[kept]
    offsets = grid.offsets.reshape(-1, 3)[kept]
    feats = grid.features.reshape(h_low * w_low, -1)[kept]

    clamped = np.abs(offsets) > cfg.offset_clamp
    offsets = np.clip(offsets, -cfg.offset_clamp, cfg.offset_clamp)

    dirs_cam = pixel_rays(intr, u)
    dirs_ego = dirs_cam @ view.pose.rotation.T
    means = d_hat[:, None] * dirs_ego + view.pose.translation + offsets

    norms = np.linalg.norm(dirs_ego, axis=-1, keepdims=True)
    unit = dirs_ego / norms
    frames = _ray_basis_batch(unit)

    sigma_lat2 = (cfg.stride * d_hat / (2.0 * intr.fx)) ** 2
    sigma_lat2 = np.maximum(sigma_lat2, VAR_FLOOR)
    sigma_ray2 = np.maximum(sigma_d2, VAR_FLOOR)
    diag = np.zeros((kept.size, 3))
    diag[:, 0] = sigma_lat2
    diag[:, 1] = sigma_lat2
    diag[:, 2] = sigma_ray2
    covs = cfg.cov_scale * np.einsum("nij,nj,nkj->nik", frames, diag, frames)

    back = dict(
        probs=probs,
        d_hat=d_hat,
        sigma_d2=sigma_d2,
        sigma_lat2=sigma_lat2,
        ray_dirs_ego=dirs_ego,
        ray_frames=frames,
        opacities=opac,
        offset_clamped=clamped,
        fx=np.full(kept.size, intr.fx),
    )
    return means, covs, opac, feats, kept, back


def lift_pixel(
    u: np.ndarray,
    head: CameraHeadOutput,
    intr: PinholeIntrinsics,
    pose: SE3Pose,
    bins: DepthBinSpec,
    k: float = 0.5,
    stride: int = 8,
) -> Gaussian3D:
    """Lift a single pixel's head output into one 3D Gaussian (no pruning)."""
    cfg = LiftConfig(k=k, stride=stride, offset_clamp=np.inf)
    probs = softmax_depth(head.depth.logits)
    if cfg.depth_mode == "expected":
        d_hat = float(expected_depth(probs, bins))
    else:  # pragma: no cover - single-pixel path keeps the default mode
        d_hat = float(bins.centers[np.argmax(probs)])
    sigma_d2 = float(depth_variance(probs, bins, d_hat))

    dir_cam = pixel_rays(intr, np.asarray(u, dtype=np.float64))
    dir_ego = pose.rotation @ dir_cam
    mean = d_hat * dir_ego + pose.translation + np.asarray(head.offset, dtype=np.float64)

    frame = ray_basis(dir_ego / np.linalg.norm(dir_ego))
    sigma_lat2 = max((stride * d_hat / (2.0 * intr.fx)) ** 2, VAR_FLOOR)
    diag = np.array([sigma_lat2, sigma_lat2, max(sigma_d2, VAR_FLOOR)])
    cov = cfg.cov_scale * frame @ np.diag(diag) @ frame.T
    return Gaussian3D(
        mean=mean,
        cov=0.5 * (cov + cov.T),
        opacity=float(_sigmoid(np.asarray(head.opacity_logit))),
        feature=np.asarray(head.feature, dtype=np.float64),
    )


def lift_image(
    provider: FeatureProvider,
    rig: Sequence[CameraView],
    bins: DepthBinSpec,
    config: LiftConfig = LiftConfig(),
) -> tuple[GaussianBatch, CameraLiftCache]:
    """Lift all views of a rig; Gaussians ordered by (view, row, col).

    Cells whose opacity falls below ``config.alpha_min`` are pruned.
    """
    if provider.num_views() != len(rig):
        raise ValueError("provider/rig view count mismatch")

    means, covs, opacs, feats = [], [], [], []
    slices, kept_all, shapes = [], [], []
    backs = []
    start = 0
    for v, view in enumerate(rig):
        grid = provider.head_grid(v)
        m, c, o, f, kept, back = _lift_arrays(view, grid, bins, config)
        means.append(m)
        covs.append(c)
        opacs.append(o)
        feats.append(f)
        kept_all.append(kept)
        shapes.append(grid.opacity_logits.shape)
        slices.append(slice(start, start + kept.size))
        start += kept.size
        backs.append(back)

    def cat(key):
        return np.concatenate([b[key] for b in backs], axis=0)

    cache = CameraLiftCache(
        config=config,
        bins=bins,
        view_slices=slices,
        kept=kept_all,
        grid_shapes=shapes,
        probs=cat("probs"),
        d_hat=cat("d_hat"),
        sigma_d2=cat("sigma_d2"),
        sigma_lat2=cat("sigma_lat2"),
        ray_dirs_ego=cat("ray_dirs_ego"),
        ray_frames=cat("ray_frames"),
        opacities=cat("opacities"),
        offset_clamped=cat("offset_clamped"),
        fx=cat("fx"),
    )
    batch = GaussianBatch(
        np.concatenate(means, axis=0),
        np.concatenate(covs, axis=0),
        np.concatenate(opacs, axis=0),
        np.concatenate(feats, axis=0),
    )
    return batch, cache


@dataclass
class CameraParamGrads:
    """Gradients scattered back onto the full head grids (zeros where pruned)."""

    depth_logits: list[np.ndarray]
    offsets: list[np.ndarray]
    opacity_logits: list[np.ndarray]
    features: list[np.ndarray]


def lift_image_backward(
    cache: CameraLiftCache,
    d_mean: np.ndarray,
    d_cov: np.ndarray,
    d_opacity: np.ndarray,
    d_feature: np.ndarray,
) -> CameraParamGrads:
    """Chain loss gradients on the emitted Gaussians back to head outputs.

    ``d_cov`` follows the full-matrix convention (all nine entries treated as
    independent); pruned cells receive zero gradient, as do clamped offset
    components and variances held at the floor.
    """
    cfg = cache.config
    centers = cache.bins.centers
    frames = cache.ray_frames
    scale = cfg.cov_scale

    # covariance path: cov = scale * R diag(l, l, r) R^T with l = sigma_lat2,
    # r = sigma_d2.  <dCov, R e_i e_i^T R^T> picks out the diagonal of R^T G R.
    G = np.asarray(d_cov, dtype=np.float64)
    RtGR_diag = np.einsum("nij,njk,nki->ni", frames.transpose(0, 2, 1), G, frames)
    d_sigma_lat2 = scale * (RtGR_diag[:, 0] + RtGR_diag[:, 1])
    d_sigma_d2 = scale * RtGR_diag[:, 2]
    d_sigma_lat2[cache.sigma_lat2 <= VAR_FLOOR] = 0.0
    d_sigma_d2[cache.sigma_d2 <= VAR_FLOOR] = 0.0

    # d_hat reaches the mean along the ray and sigma_lat2 through the focal scaling
    lat_coeff = (cfg.stride / (2.0 * cache.fx)) ** 2
    d_d_hat = (
        np.einsum("ni,ni->n", np.asarray(d_mean), cache.ray_dirs_ego)
        + d_sigma_lat2 * 2.0 * lat_coeff * cache.d_hat
    )

    if cfg.depth_mode == "expected":
        dev = centers[None, :] - cache.d_hat[:, None]
        d_probs = d_d_hat[:, None] * centers[None, :] + d_sigma_d2[:, None] * dev * dev
    else:
        # argmax depth is piecewise constant in the logits
        d_probs = d_sigma_d2[:, None] * (centers[None, :] - cache.d_hat[:, None]) ** 2

    # softmax backward
    p = cache.probs
    inner = np.sum(p * d_probs, axis=-1, keepdims=True)
    d_logits = p * (d_probs - inner)

    d_offsets = np.asarray(d_mean, dtype=np.float64).copy()
    d_offsets[cache.offset_clamped] = 0.0

    o = cache.opacities
    d_opacity_logits = np.asarray(d_opacity, dtype=np.float64) * o * (1.0 - o)

    grads = CameraParamGrads([], [], [], [])
    for sl, kept, (h, w) in zip(cache.view_slices, cache.kept, cache.grid_shapes):
        b = centers.shape[0]
        dl = np.zeros((h * w, b))
        dl[kept] = d_logits[sl]
        grads.depth_logits.append(dl.reshape(h, w, b))

        do = np.zeros((h * w, 3))
        do[kept] = d_offsets[sl]
        grads.offsets.append(do.reshape(h, w, 3))

        dop = np.zeros(h * w)
        dop[kept] = d_opacity_logits[sl]
        grads.opacity_logits.append(dop.reshape(h, w))

        d_feat = np.asarray(d_feature)
        df = np.zeros((h * w, d_feat.shape[1]))
        df[kept] = d_feat[sl]
        grads.features.append(df.reshape(h, w, -1))
    return grads


def _sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def _ray_basis_batch(unit_dirs: np.ndarray) -> np.ndarray:
    """Vectorized :func:`bevsplat.geometry.ray_basis` over (N, 3) unit vectors."""
    d = np.asarray(unit_dirs, dtype=np.float64)
    n = d.shape[0]
    c = d[:, 2]
    kx, ky = -d[:, 1], d[:, 0]
    flip = c < -1.0 + 1e-12
    s = 1.0 / np.where(flip, 1.0, 1.0 + c)
    R = np.empty((n, 3, 3))
    R[:, 0, 0] = 1.0 - ky * ky * s
    R[:, 0, 1] = kx * ky * s
    R[:, 0, 2] = d[:, 0]
    R[:, 1, 0] = kx * ky * s
    R[:, 1, 1] = 1.0 - kx * kx * s
    R[:, 1, 2] = d[:, 1]
    R[:, 2, 0] = -d[:, 0]
    R[:, 2, 1] = -d[:, 1]
    R[:, 2, 2] = c
    R[flip] = np.diag([1.0, -1.0, -1.0])
    return R
