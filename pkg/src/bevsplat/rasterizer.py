"""Differentiable orthographic splatting of 3D Gaussians onto the BEV grid.

Projection drops the vertical axis (top-down orthographic view marginalizes
z away exactly), splats are depth-sorted and binned into tiles, and each
pixel alpha-composites its covering splats front to back:

    F = sum_i f_i a_i prod_{j<i} (1 - a_j),   a_i = opacity_i * exp(-power_i)

The backward pass is analytic and matches central finite differences; the
sort key and tile assignment are treated as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .geometry import BEVGridSpec, Gaussian3D, GaussianBatch, world_to_bev

ALPHA_CAP = 0.999
CELL_VAR_FLOOR_M2 = 1e-6  # m^2; floor on projected eigenvalues before inversion

set_threads = _kernels.set_threads
max_threads = _kernels.max_threads


@dataclass(frozen=True)
class Splat2D:
    """A Gaussian after orthographic projection, in cell coordinates."""

    mean2: np.ndarray  # (2,) (col, row)
    cov2: np.ndarray  # (2, 2), cell^2
    inv_cov2: np.ndarray
    opacity: float
    feature: np.ndarray
    sort_key: float  # ego z, m
    source_index: int


class SplatBatch:
    """Struct-of-arrays batch of :class:`Splat2D`."""

    __slots__ = ("mean2", "cov2", "inv_cov2", "opacities", "features", "sort_keys", "source_index")

    def __init__(self, mean2, cov2, inv_cov2, opacities, features, sort_keys, source_index):
        self.mean2 = np.ascontiguousarray(mean2, dtype=np.float64)
        self.cov2 = np.ascontiguousarray(cov2, dtype=np.float64)
        self.inv_cov2 = np.ascontiguousarray(inv_cov2, dtype=np.float64)
        self.opacities = np.ascontiguousarray(opacities, dtype=np.float64)
        self.features = np.ascontiguousarray(features, dtype=np.float64)
        self.sort_keys = np.ascontiguousarray(sort_keys, dtype=np.float64)
        self.source_index = np.ascontiguousarray(source_index, dtype=np.int64)

    def __len__(self) -> int:
        return self.mean2.shape[0]

    def __getitem__(self, i: int) -> Splat2D:
        return Splat2D(
            self.mean2[i],
            self.cov2[i],
            self.inv_cov2[i],
            float(self.opacities[i]),
            self.features[i],
            float(self.sort_keys[i]),
            int(self.source_index[i]),
        )

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def permuted(self, order: np.ndarray) -> "SplatBatch":
        return SplatBatch(
            self.mean2[order],
            self.cov2[order],
            self.inv_cov2[order],
            self.opacities[order],
            self.features[order],
            self.sort_keys[order],
            self.source_index[order],
        )


@dataclass
class BEVFeatureMap:
    """Dense C x H x W grid of blended scalars over a BEV grid."""

    data: np.ndarray
    grid: BEVGridSpec

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("expected (C, H, W) data")
        if self.data.shape[1:] != (self.grid.h_bev, self.grid.w_bev):
            raise ValueError("data shape does not match grid")

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class RasterizeOptions:
    """Culling/termination knobs.

    ``footprint_sigma=None`` disables footprint culling (every splat is
    evaluated at every pixel) and ``early_termination=None`` disables the
    transmittance cutoff; together these give the exact compositing used for
    oracle comparisons.
    """

    tile_size: int = 16
    footprint_sigma: float | None = 3.0
    early_termination: float | None = 1e-4
    sort_order: str = "z-desc"  # "z-desc" | "z-asc" | "opacity-desc"

    @property
    def power_max(self) -> float:
        if self.footprint_sigma is None:
            return np.inf
        return 0.5 * self.footprint_sigma**2

    @property
    def term_threshold(self) -> float:
        return 0.0 if self.early_termination is None else self.early_termination

    def exact(self) -> "RasterizeOptions":
        return replace(self, footprint_sigma=None, early_termination=None)


@dataclass
class TileIndex:
    """CSR tile lists: splats appear in every tile their bounding box touches,
    preserving the global sorted order within each list."""

    tiles_x: int
    tiles_y: int
    tile_size: int
    offsets: np.ndarray  # (tiles_x * tiles_y + 1,)
    splat_ids: np.ndarray  # (total_listings,)


@dataclass
class RasterAux:
    """Forward byproducts consumed by the backward pass."""

    transmittance: np.ndarray  # (H, W) final per-pixel transmittance
    n_contrib: np.ndarray  # (H, W) composited splat count
    tiles: TileIndex
    options: RasterizeOptions
    n_splats: int


@dataclass
class SplatGrads:
    feature: np.ndarray  # (N, D)
    opacity: np.ndarray  # (N,)
    mean2: np.ndarray  # (N, 2)
    cov2: np.ndarray  # (N, 2, 2), full-matrix convention


@dataclass
class Gaussian3DGrads:
    mean: np.ndarray  # (N, 3)
    cov: np.ndarray  # (N, 3, 3), full-matrix convention
    opacity: np.ndarray
    feature: np.ndarray


def project_orthographic(g: Gaussian3D | GaussianBatch, grid: BEVGridSpec):
    """Project Gaussians top-down: keep the x/y marginal, drop z.

    The z marginal of a Gaussian is its top-left 2x2 covariance block, so the
    projection is exact and linear; units change from metres to cells.  The
    ego z coordinate is kept as the blend sort key.  Returns a
    :class:`Splat2D` for a single input and a :class:`SplatBatch` otherwise.
    """
    if isinstance(g, Gaussian3D):
        batch = GaussianBatch(
            g.mean[None], g.cov[None], np.array([g.opacity]), g.feature[None]
        )
        return _project_batch(batch, grid)[0]
    return _project_batch(g, grid)


def _project_batch(batch: GaussianBatch, grid: BEVGridSpec) -> SplatBatch:
    res2 = grid.resolution**2
    mean2 = world_to_bev(batch.means, grid)
    cov2 = batch.covs[:, :2, :2] / res2
    cov2 = 0.5 * (cov2 + np.swapaxes(cov2, -1, -2))
    cov2 = _floor_eigenvalues_2x2(cov2, CELL_VAR_FLOOR_M2 / res2)
    inv = _invert_2x2(cov2)
    return SplatBatch(
        mean2=mean2,
        cov2=cov2,
        inv_cov2=inv,
        opacities=batch.opacities,
        features=batch.features,
        sort_keys=batch.means[:, 2].copy(),
        source_index=np.arange(len(batch)),
    )


def _floor_eigenvalues_2x2(cov2: np.ndarray, floor: float) -> np.ndarray:
    """Clamp both eigenvalues of symmetric 2x2 matrices to at least ``floor``."""
    a = cov2[:, 0, 0]
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1]
    half_tr = 0.5 * (a + c)
    rad = np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    lo = half_tr - rad
    hi = half_tr + rad
    lo_c = np.maximum(lo, floor)
    hi_c = np.maximum(hi, floor)
    needs = (lo_c != lo) | (hi_c != hi)
    if not np.any(needs):
        return cov2
    out = cov2.copy()
    idx = np.nonzero(needs)[0]
    for i in idx:
        if rad[i] < 1e-300:  # isotropic: any basis works
            out[i] = np.diag([lo_c[i], lo_c[i]])
            continue
        # eigenvector for hi: (b, hi - a) or (hi - c, b), whichever is larger
        v = np.array([b[i], hi[i] - a[i]])
        w = np.array([hi[i] - c[i], b[i]])
        v = v if v @ v >= w @ w else w
        v /= np.linalg.norm(v)
        u = np.array([-v[1], v[0]])
        out[i] = hi_c[i] * np.outer(v, v) + lo_c[i] * np.outer(u, u)
    return out


def _invert_2x2(cov2: np.ndarray) -> np.ndarray:
    a = cov2[:, 0, 0]
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1]
    det = a * c - b * b
    inv = np.empty_like(cov2)
    inv[:, 0, 0] = c / det
    inv[:, 0, 1] = -b / det
    inv[:, 1, 0] = -b / det
    inv[:, 1, 1] = a / det
    return inv


def sort_splats(splats: SplatBatch, order: str = "z-desc") -> SplatBatch:
    """Stable sort into compositing order."""
    if order == "z-desc":
        key = -splats.sort_keys
    elif order == "z-asc":
        key = splats.sort_keys
    elif order == "opacity-desc":
        key = -splats.opacities
    else:
        raise ValueError(f"unknown sort order {order!r}")
    return splats.permuted(np.argsort(key, kind="stable"))


def _check_sorted(splats: SplatBatch, order: str) -> None:
    if order == "z-desc":
        ok = np.all(np.diff(splats.sort_keys) <= 0)
    elif order == "z-asc":
        ok = np.all(np.diff(splats.sort_keys) >= 0)
    elif order == "opacity-desc":
        ok = np.all(np.diff(splats.opacities) <= 0)
    else:
        raise ValueError(f"unknown sort order {order!r}")
    if not ok:
        raise ValueError("splats are not sorted for compositing")


def alpha_at(s: Splat2D, q: np.ndarray) -> float:
    """Per-pixel blend weight of one splat at pixel center q."""
    d = np.asarray(q, dtype=np.float64) - s.mean2
    power = 0.5 * d @ s.inv_cov2 @ d
    return float(min(ALPHA_CAP, s.opacity * np.exp(-power)))


def bin_to_tiles(
    splats: SplatBatch,
    grid: BEVGridSpec,
    tile_size: int = 16,
    footprint_sigma: float | None = 3.0,
) -> TileIndex:
    """List each splat in every tile its axis-aligned footprint box touches.

    The box spans ``footprint_sigma`` standard deviations per principal axis
    of cov2, which is exactly ``sigma * sqrt(diag(cov2))`` per grid axis.
    ``None`` lists every splat in every tile.
    """
    h, w = grid.h_bev, grid.w_bev
    tiles_x = (w + tile_size - 1) // tile_size
    tiles_y = (h + tile_size - 1) // tile_size
    n_tiles = tiles_x * tiles_y
    n = len(splats)

    if footprint_sigma is None:
        ids = np.tile(np.arange(n, dtype=np.int64), n_tiles)
        offsets = np.arange(n_tiles + 1, dtype=np.int64) * n
        return TileIndex(tiles_x, tiles_y, tile_size, offsets, ids)

    rx = footprint_sigma * np.sqrt(splats.cov2[:, 0, 0])
    ry = footprint_sigma * np.sqrt(splats.cov2[:, 1, 1])
    tx0 = np.clip(np.floor((splats.mean2[:, 0] - rx) / tile_size), 0, tiles_x - 1).astype(np.int64)
    tx1 = np.clip(np.floor((splats.mean2[:, 0] + rx) / tile_size), 0, tiles_x - 1).astype(np.int64)
    ty0 = np.clip(np.floor((splats.mean2[:, 1] - ry) / tile_size), 0, tiles_y - 1).astype(np.int64)
    ty1 = np.clip(np.floor((splats.mean2[:, 1] + ry) / tile_size), 0, tiles_y - 1).astype(np.int64)

    # drop splats entirely outside the grid
    inside = (
        (splats.mean2[:, 0] + rx >= 0)
        & (splats.mean2[:, 0] - rx <= w)
        & (splats.mean2[:, 1] + ry >= 0)
        & (splats.mean2[:, 1] - ry <= h)
    )
    nx = np.where(inside, tx1 - tx0 + 1, 0)
    ny = np.where(inside, ty1 - ty0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())

    splat_ids = np.repeat(np.arange(n, dtype=np.int64), counts)
    tile_ids = np.empty(total, dtype=np.int64)
    # per listing: tile = (ty0 + q // nx) * tiles_x + tx0 + q % nx
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    q = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    nx_rep = np.repeat(np.maximum(nx, 1), counts)
    tile_ids = (
        (np.repeat(ty0, counts) + q // nx_rep) * tiles_x
        + np.repeat(tx0, counts)
        + q % nx_rep
    )

    order = np.argsort(tile_ids, kind="stable")  # stable keeps splat order per tile
    splat_ids = splat_ids[order]
    offsets = np.zeros(n_tiles + 1, dtype=np.int64)
    np.add.at(offsets, tile_ids[order] + 1, 1)
    offsets = np.cumsum(offsets)
    return TileIndex(tiles_x, tiles_y, tile_size, offsets, splat_ids)


def rasterize_forward(
    splats: SplatBatch,
    grid: BEVGridSpec,
    options: RasterizeOptions = RasterizeOptions(),
    tiles: TileIndex | None = None,
) -> tuple[BEVFeatureMap, RasterAux]:
    """Alpha-composite sorted splats onto the grid.

    Requires splats sorted per ``options.sort_order``; output is bitwise
    independent of the worker thread count because each pixel belongs to a
    single tile and composites in the global order.
    """
    _check_sorted(splats, options.sort_order)
    if tiles is None:
        tiles = bin_to_tiles(splats, grid, options.tile_size, options.footprint_sigma)

    h, w = grid.h_bev, grid.w_bev
    out = np.zeros((splats.feature_dim, h, w))
    aux_t = np.ones((h, w))
    aux_n = np.zeros((h, w), dtype=np.int64)
    _kernels.forward_kernel(
        tiles.offsets,
        tiles.splat_ids,
        splats.mean2[:, 0].copy(),
        splats.mean2[:, 1].copy(),
        splats.inv_cov2[:, 0, 0].copy(),
        splats.inv_cov2[:, 0, 1].copy(),
        splats.inv_cov2[:, 1, 1].copy(),
        splats.opacities,
        splats.features,
        h,
        w,
        tiles.tiles_x,
        tiles.tile_size,
        options.power_max,
        options.term_threshold,
        out,
        aux_t,
        aux_n,
    )
    aux = RasterAux(aux_t, aux_n, tiles, options, len(splats))
    return BEVFeatureMap(out, grid), aux


def rasterize_backward(
    splats: SplatBatch,
    grid: BEVGridSpec,
    aux: RasterAux,
    d_map: BEVFeatureMap | np.ndarray,
) -> SplatGrads:
    """Analytic gradients of the compositing wrt every splat parameter.

    ``aux`` must come from the forward call on the same splats.  The
    covariance gradient uses the full-matrix convention: dL = sum_ab
    (dL/dCov)_ab dCov_ab with all four entries independent.
    """
    if aux.n_splats != len(splats):
        raise ValueError("aux does not match this splat batch")
    d_out = d_map.data if isinstance(d_map, BEVFeatureMap) else np.asarray(d_map, dtype=np.float64)
    if d_out.shape != (splats.feature_dim, grid.h_bev, grid.w_bev):
        raise ValueError("upstream gradient shape mismatch")

    tiles = aux.tiles
    n_entries = tiles.splat_ids.shape[0]
    buf_feature = np.zeros((n_entries, splats.feature_dim))
    buf_opacity = np.zeros(n_entries)
    buf_mean = np.zeros((n_entries, 2))
    buf_cov = np.zeros((n_entries, 3))
    _kernels.backward_kernel(
        tiles.offsets,
        tiles.splat_ids,
        splats.mean2[:, 0].copy(),
        splats.mean2[:, 1].copy(),
        splats.inv_cov2[:, 0, 0].copy(),
        splats.inv_cov2[:, 0, 1].copy(),
        splats.inv_cov2[:, 1, 1].copy(),
        splats.opacities,
        splats.features,
        grid.h_bev,
        grid.w_bev,
        tiles.tiles_x,
        tiles.tile_size,
        aux.options.power_max,
        np.ascontiguousarray(d_out),
        aux.transmittance,
        aux.n_contrib,
        buf_feature,
        buf_opacity,
        buf_mean,
        buf_cov,
    )

    n = len(splats)
    grads = SplatGrads(
        feature=np.zeros((n, splats.feature_dim)),
        opacity=np.zeros(n),
        mean2=np.zeros((n, 2)),
        cov2=np.zeros((n, 2, 2)),
    )
    # fixed-order reduction over tile entries keyed by splat id
    ids = tiles.splat_ids
    np.add.at(grads.feature, ids, buf_feature)
    np.add.at(grads.opacity, ids, buf_opacity)
    np.add.at(grads.mean2, ids, buf_mean)
    cov_full = np.zeros((n, 3))
    np.add.at(cov_full, ids, buf_cov)
    grads.cov2[:, 0, 0] = cov_full[:, 0]
    grads.cov2[:, 0, 1] = cov_full[:, 1]
    grads.cov2[:, 1, 0] = cov_full[:, 1]
    grads.cov2[:, 1, 1] = cov_full[:, 2]
    return grads


def chain_to_3d(splat_grads: SplatGrads, grid: BEVGridSpec) -> Gaussian3DGrads:
    """Pull splat gradients back through the orthographic projection.

    The projection is linear (divide by resolution, take the 2x2 block), so
    the chain rule is exact and independent of the Gaussian itself: the z row
    and column receive zero gradient.
    """
    res = grid.resolution
    n = splat_grads.opacity.shape[0]
    mean = np.zeros((n, 3))
    mean[:, :2] = splat_grads.mean2 / res
    cov = np.zeros((n, 3, 3))
    cov[:, :2, :2] = splat_grads.cov2 / res**2
    return Gaussian3DGrads(
        mean=mean,
        cov=cov,
        opacity=splat_grads.opacity.copy(),
        feature=splat_grads.feature.copy(),
    )
