"""End-to-end fitting: treat every head output as a free parameter, render
through lift -> orthographic projection -> alpha compositing, score with the
combo loss against ground-truth masks, and descend with Adam.

This is the differentiability proof of the pipeline: all gradients are the
package's own analytic chain, no autodiff anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import (
    ArrayFeatureProvider,
    CameraHeadGrid,
    LiftConfig,
    lift_image,
    lift_image_backward,
)
from .geometry import BEVGridSpec, DepthBinSpec, SE3Pose
from .losses import LossWeights, combo_loss, iou
from .radar import (
    ArrayPointProvider,
    RadarCloud,
    RadarHeadGrid,
    accumulate_sweeps,
    lift_cloud,
    lift_cloud_backward,
)
from .rasterizer import (
    RasterizeOptions,
    chain_to_3d,
    project_orthographic,
    rasterize_backward,
    rasterize_forward,
    sort_splats,
)
from .scene import (
    BEV_CLASSES,
    Scene,
    oracle_camera_provider,
    oracle_radar_provider,
    render_gt_bev,
    sample_radar,
)


class DivergenceError(RuntimeError):
    """Loss became non-finite; carries the trajectory up to the failure."""

    def __init__(self, message, trajectory):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass(frozen=True)
class FitConfig:
    """First-order optimizer settings for the demo fit."""

    learning_rate: float = 0.05
    iterations: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    offset_clamp: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.iterations < 1:
            raise ValueError("need at least one iteration")


@dataclass
class FitRecord:
    iteration: int
    loss: float
    ious: dict[str, float]


class Adam:
    """Per-array Adam with bias correction."""

    def __init__(self, cfg: FitConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for key, g in grads.items():
            if key not in self.m:
                self.m[key] = np.zeros_like(params[key])
                self.v[key] = np.zeros_like(params[key])
            self.m[key] = c.beta1 * self.m[key] + (1 - c.beta1) * g
            self.v[key] = c.beta2 * self.v[key] + (1 - c.beta2) * g * g
            m_hat = self.m[key] / bc1
            v_hat = self.v[key] / bc2
            params[key] -= c.learning_rate * m_hat / (np.sqrt(v_hat) + c.eps)


class FitProblem:
    """Scene-backed differentiable closure over a parameter dict.

    Parameter keys: ``cam/*`` arrays are stacked over views; ``head/*`` are
    the per-cell linear fusion heads (main + auxiliary early-supervision).
    """

    def __init__(
        self,
        scene: Scene,
        grid: BEVGridSpec,
        bins: DepthBinSpec,
        lift: LiftConfig = LiftConfig(),
        modality: str = "both",
        feature_dim: int = 8,
        weights: LossWeights = LossWeights(),
        raster: RasterizeOptions = RasterizeOptions(),
        camera_noise: float = 0.5,
        camera_depth_error: float = 0.03,
        camera_miss_fraction: float = 0.3,
        seed: int = 0,
        classes=BEV_CLASSES,
    ):
        if modality not in ("camera", "radar", "both"):
            raise ValueError("modality must be camera, radar or both")
        self.scene = scene
        self.grid = grid
        self.bins = bins
        self.lift = lift
        self.modality = modality
        self.feature_dim = feature_dim
        self.weights = weights
        self.raster = raster
        self.classes = tuple(classes)
        self.target = render_gt_bev(scene, grid, self.classes)

        rng = np.random.default_rng([seed, 71])
        self.params: dict[str, np.ndarray] = {}

        self.use_camera = modality in ("camera", "both")
        self.use_radar = modality in ("radar", "both")

        if self.use_camera:
            # degradation defaults mirror monocular failure modes: mild logit
            # noise, range-proportional depth error, and camera-missed
            # vehicles that only radar can recover
            provider = oracle_camera_provider(
                scene,
                bins,
                noise_sigma=camera_noise,
                feature_dim=feature_dim,
                seed=seed,
                depth_error_frac=camera_depth_error,
                miss_fraction=camera_miss_fraction,
            )
            grids = [provider.head_grid(v) for v in range(len(scene.rig))]
            self.params["cam/depth_logits"] = np.stack([g.depth_logits for g in grids])
            self.params["cam/offsets"] = np.stack([g.offsets for g in grids])
            self.params["cam/opacity_logits"] = np.stack([g.opacity_logits for g in grids])
            self.params["cam/features"] = np.stack([g.features for g in grids])

        if self.use_radar:
            sweeps = sample_radar(scene)
            self.cloud = accumulate_sweeps(sweeps.sweeps, SE3Pose.identity())
            heads = oracle_radar_provider(scene, feature_dim=feature_dim, seed=seed).heads(
                self.cloud
            )
            self.params["radar/offsets"] = heads.offsets.copy()
            self.params["radar/cov6"] = heads.cov6.copy()
            self.params["radar/opacity_logits"] = heads.opacity_logits.astype(np.float64).copy()
            self.params["radar/features"] = heads.features.copy()
        else:
            self.cloud = RadarCloud.empty()

        in_dim = feature_dim * (int(self.use_camera) + int(self.use_radar))
        n_classes = len(self.classes)
        self.params["head/w_main"] = rng.normal(0.0, 0.1, (n_classes, in_dim))
        self.params["head/b_main"] = np.zeros(n_classes)
        self.params["head/w_aux"] = rng.normal(0.0, 0.1, (n_classes, in_dim))
        self.params["head/b_aux"] = np.zeros(n_classes)

    # -- forward/backward ---------------------------------------------------

    def _camera_maps(self, params, want_grads):
        grids = [
            CameraHeadGrid(
                depth_logits=params["cam/depth_logits"][v],
                offsets=params["cam/offsets"][v],
                opacity_logits=params["cam/opacity_logits"][v],
                features=params["cam/features"][v],
            )
            for v in range(len(self.scene.rig))
        ]
        batch, cache = lift_image(
            ArrayFeatureProvider(grids), self.scene.rig, self.bins, self.lift
        )
        splats = sort_splats(project_orthographic(batch, self.grid), self.raster.sort_order)
        fmap, aux = rasterize_forward(splats, self.grid, self.raster)
        state = (splats, aux, cache) if want_grads else None
        return fmap.data, state

    def _radar_maps(self, params, want_grads):
        heads = RadarHeadGrid(
            offsets=params["radar/offsets"],
            cov6=params["radar/cov6"],
            opacity_logits=params["radar/opacity_logits"],
            features=params["radar/features"],
        )
        batch, cache = lift_cloud(
            self.cloud, ArrayPointProvider(heads), self.lift.alpha_min
        )
        splats = sort_splats(project_orthographic(batch, self.grid), self.raster.sort_order)
        fmap, aux = rasterize_forward(splats, self.grid, self.raster)
        state = (splats, aux, cache) if want_grads else None
        return fmap.data, state

    def _splat_chain_backward(self, splats, aux, d_map):
        sgrads = rasterize_backward(splats, self.grid, aux, d_map)
        g3 = chain_to_3d(sgrads, self.grid)
        # undo the compositing sort: row i of the sorted grads belongs to
        # original Gaussian splats.source_index[i]
        inv = splats.source_index
        mean = np.zeros_like(g3.mean)
        cov = np.zeros_like(g3.cov)
        opacity = np.zeros_like(g3.opacity)
        feature = np.zeros_like(g3.feature)
        mean[inv] = g3.mean
        cov[inv] = g3.cov
        opacity[inv] = g3.opacity
        feature[inv] = g3.feature
        return mean, cov, opacity, feature

    def evaluate(self, params, want_grads: bool = True):
        """Returns (loss, grads-or-None, per-class IoUs, main logits)."""
        maps = []
        cam_state = radar_state = None
        if self.use_camera:
            cam_map, cam_state = self._camera_maps(params, want_grads)
            maps.append(cam_map)
        if self.use_radar:
            radar_map, radar_state = self._radar_maps(params, want_grads)
            maps.append(radar_map)
        feats = np.concatenate(maps, axis=0)  # (in_dim, H, W)

        def head(w, b):
            return np.einsum("cd,dhw->chw", params[w], feats) + params[b][:, None, None]

        logits_main = head("head/w_main", "head/b_main")
        logits_aux = head("head/w_aux", "head/b_aux")

        loss = 0.0
        g_main = np.zeros_like(logits_main)
        g_aux = np.zeros_like(logits_aux)
        for ci in range(len(self.classes)):
            l, gm, ga = combo_loss(
                logits_main[ci], logits_aux[ci], self.target[ci], self.weights
            )
            loss += l
            g_main[ci] = gm
            g_aux[ci] = ga

        ious = {
            name: iou(logits_main[ci], self.target[ci])
            for ci, name in enumerate(self.classes)
        }
        if not want_grads:
            return loss, None, ious, logits_main

        grads: dict[str, np.ndarray] = {}
        grads["head/w_main"] = np.einsum("chw,dhw->cd", g_main, feats)
        grads["head/b_main"] = g_main.sum(axis=(1, 2))
        grads["head/w_aux"] = np.einsum("chw,dhw->cd", g_aux, feats)
        grads["head/b_aux"] = g_aux.sum(axis=(1, 2))
        d_feats = np.einsum("cd,chw->dhw", params["head/w_main"], g_main)
        d_feats += np.einsum("cd,chw->dhw", params["head/w_aux"], g_aux)

        offset = 0
        if self.use_camera:
            d_cam = d_feats[: self.feature_dim]
            offset = self.feature_dim
            splats, aux, cache = cam_state
            mean, cov, opacity, feature = self._splat_chain_backward(splats, aux, d_cam)
            cg = lift_image_backward(cache, mean, cov, opacity, feature)
            grads["cam/depth_logits"] = np.stack(cg.depth_logits)
            grads["cam/offsets"] = np.stack(cg.offsets)
            grads["cam/opacity_logits"] = np.stack(cg.opacity_logits)
            grads["cam/features"] = np.stack(cg.features)
        if self.use_radar:
            d_rad = d_feats[offset : offset + self.feature_dim]
            splats, aux, cache = radar_state
            mean, cov, opacity, feature = self._splat_chain_backward(splats, aux, d_rad)
            rg = lift_cloud_backward(cache, mean, cov, opacity, feature)
            grads["radar/offsets"] = rg.offsets
            grads["radar/cov6"] = rg.cov6
            grads["radar/opacity_logits"] = rg.opacity_logits
            grads["radar/features"] = rg.features
        return loss, grads, ious, logits_main


def fit(problem: FitProblem, cfg: FitConfig) -> list[FitRecord]:
    """Run Adam over the problem parameters; deterministic given the seed.

    Raises :class:`DivergenceError` (with the partial trajectory) when the
    loss stops being finite.
    """
    params = problem.params
    opt = Adam(cfg)
    trajectory: list[FitRecord] = []
    for it in range(cfg.iterations):
        loss, grads, ious, _ = problem.evaluate(params, want_grads=True)
        if not np.isfinite(loss):
            raise DivergenceError(f"loss diverged at iteration {it}", trajectory)
        trajectory.append(FitRecord(iteration=it, loss=float(loss), ious=ious))
        opt.step(params, grads)
    return trajectory
