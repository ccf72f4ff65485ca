"""Deterministic synthetic scenes with exact ground truth.

Scenes are built backwards from the camera: pixels and depths are drawn
inside the frustum, lifted to camera space, and mapped into the cloud frame
by the inverse ground-truth pose. Every correspondence is therefore exact
before noise and outliers are injected, which makes these scenes usable as
oracles for solvers and metrics.

All randomness flows from the single ``seed`` through named sub-streams, so
adding draws to one stage never shifts another stage's values.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import BadDims
from .geometry import (
    CameraIntrinsics,
    ImageGrid,
    PointCloud,
    Pose,
    inverse,
    rotation_from_axis_angle,
    transform,
    unproject,
)
from .matching import CorrespondenceSet

__all__ = [
    "SceneSpec",
    "SyntheticScene",
    "substream",
    "generate_scene",
    "perturb_pose",
]


def substream(seed: int, name: str) -> np.random.Generator:
    """Named RNG sub-stream derived from a root seed (stable across platforms)."""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _unit(rng: np.random.Generator, n: int = 3) -> np.ndarray:
    v = rng.normal(size=n)
    return v / np.linalg.norm(v)


@dataclass(frozen=True)
class SceneSpec:
    """Everything that determines a synthetic scene."""

    n_points: int = 100
    seed: int = 0
    feature_dim: int = 16
    width: int = 128
    height: int = 96
    focal: float = 120.0
    depth_range: tuple = (1.5, 4.0)
    margin: float = 4.0            # pixels kept clear of the frame border
    max_angle_deg: float = 30.0    # ground-truth rotation magnitude bound
    max_translation: float = 0.5   # meters
    pixel_noise: float = 0.0       # sigma, pixels
    point_noise: float = 0.0       # sigma, meters
    feature_noise: float = 0.0     # sigma added to matched descriptors
    outlier_fraction: float = 0.0  # exactly floor(fraction * n) pairs corrupted
    surface: bool = False          # smooth depth surface instead of scatter

    def __post_init__(self):
        if self.n_points < 1:
            raise BadDims("n_points must be >= 1")
        if not 0.0 <= self.outlier_fraction <= 1.0:
            raise BadDims("outlier_fraction must be in [0, 1]")
        lo, hi = self.depth_range
        if not (0 < lo < hi):
            raise BadDims("depth_range must satisfy 0 < near < far")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            fx=self.focal,
            fy=self.focal,
            cx=(self.width - 1) / 2.0,
            cy=(self.height - 1) / 2.0,
            width=self.width,
            height=self.height,
        )


@dataclass(frozen=True)
class SyntheticScene:
    spec: SceneSpec
    intrinsics: CameraIntrinsics
    gt_pose: Pose
    cloud: PointCloud
    image: ImageGrid
    correspondences: CorrespondenceSet
    inlier_mask: np.ndarray = field(repr=False)


def _surface_depths(spec: SceneSpec, pix: np.ndarray, rng) -> np.ndarray:
    """Smooth random depth field evaluated at pixel locations."""
    lo, hi = spec.depth_range
    mid, amp = (lo + hi) / 2.0, (hi - lo) / 2.0
    u = pix[:, 0] / max(spec.width - 1, 1)
    v = pix[:, 1] / max(spec.height - 1, 1)
    z = np.zeros(len(pix))
    # a few low-frequency plane waves; coefficients fixed by the rng
    for _ in range(4):
        fu, fv = rng.uniform(-2.0, 2.0, size=2)
        phase = rng.uniform(0.0, 2 * np.pi)
        weight = rng.uniform(0.3, 1.0)
        z += weight * np.sin(2 * np.pi * (fu * u + fv * v) + phase)
    z = z / 4.0
    return mid + 0.8 * amp * np.clip(z, -1.0, 1.0)


def generate_scene(spec: SceneSpec) -> SyntheticScene:
    """Build a scene with exact ground-truth pose and correspondences.

    Outliers: exactly ``floor(outlier_fraction * n)`` pairs get an unrelated
    random pixel, depth, and pixel descriptor, chosen without replacement.
    Noise is applied after correspondence construction, so the stored pixel
    depths remain the exact pre-noise values.
    """
    K = spec.intrinsics
    rng_pose = substream(spec.seed, "pose")
    rng_points = substream(spec.seed, "points")
    rng_feat = substream(spec.seed, "features")
    rng_out = substream(spec.seed, "outliers")
    rng_noise = substream(spec.seed, "noise")
    rng_img = substream(spec.seed, "image")

    angle = np.radians(spec.max_angle_deg) * rng_pose.uniform(0.0, 1.0)
    gt_pose = Pose(
        rotation_from_axis_angle(_unit(rng_pose) * angle),
        _unit(rng_pose) * spec.max_translation * rng_pose.uniform(0.0, 1.0),
    )

    n = spec.n_points
    m = spec.margin
    if spec.surface:
        # jittered grid keeps the surface sampled evenly
        cols = int(np.ceil(np.sqrt(n * spec.width / spec.height)))
        rows = int(np.ceil(n / cols))
        gu = np.linspace(m, spec.width - 1 - m, cols)
        gv = np.linspace(m, spec.height - 1 - m, rows)
        uu, vv = np.meshgrid(gu, gv)
        pix = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)[:n]
        pix = pix + rng_points.uniform(-0.4, 0.4, size=pix.shape)
        depths = _surface_depths(spec, pix, rng_points)
    else:
        pix = np.stack(
            [
                rng_points.uniform(m, spec.width - 1 - m, n),
                rng_points.uniform(m, spec.height - 1 - m, n),
            ],
            axis=1,
        )
        depths = rng_points.uniform(*spec.depth_range, size=n)
    cam_points = unproject(pix, depths, K)
    points = transform(inverse(gt_pose), cam_points)

    base = rng_feat.normal(size=(n, spec.feature_dim))
    base /= np.linalg.norm(base, axis=1, keepdims=True)
    def perturb(f, rng):
        if spec.feature_noise <= 0:
            return f.copy()
        g = f + spec.feature_noise * rng.normal(size=f.shape)
        return g / np.linalg.norm(g, axis=1, keepdims=True)
    point_features = perturb(base, rng_feat)
    pixel_features = perturb(base, rng_feat)

    inlier_mask = np.ones(n, dtype=bool)
    n_out = int(np.floor(spec.outlier_fraction * n))
    if n_out > 0:
        idx = rng_out.choice(n, size=n_out, replace=False)
        inlier_mask[idx] = False
        pix = pix.copy()
        depths = depths.copy()
        pix[idx, 0] = rng_out.uniform(0, spec.width - 1, n_out)
        pix[idx, 1] = rng_out.uniform(0, spec.height - 1, n_out)
        depths[idx] = rng_out.uniform(*spec.depth_range, size=n_out)
        fresh = rng_out.normal(size=(n_out, spec.feature_dim))
        pixel_features[idx] = fresh / np.linalg.norm(fresh, axis=1, keepdims=True)

    noisy_pix = pix + (
        rng_noise.normal(size=pix.shape) * spec.pixel_noise if spec.pixel_noise > 0 else 0.0
    )
    noisy_points = points + (
        rng_noise.normal(size=points.shape) * spec.point_noise if spec.point_noise > 0 else 0.0
    )

    cloud = PointCloud(points=noisy_points, features=point_features)
    corr = CorrespondenceSet(
        points=noisy_points,
        pixels=noisy_pix,
        scores=np.ones(n),
        point_features=point_features,
        pixel_features=pixel_features,
        pixel_depths=depths,
        provenance=np.full(n, -1, dtype=np.int64),
    )

    # procedural image: faint background descriptors, pair descriptors planted
    # at their (rounded) pixels; grayscale = normalized inverse depth dots
    H, W, F = spec.height, spec.width, spec.feature_dim
    # scale keeps an 8x8 patch mean signal-dominated: one planted unit
    # descriptor contributes 1/64, the pooled noise only 0.01/sqrt(64) per dim
    feats = 0.01 * rng_img.normal(size=(H, W, F))
    gray = np.zeros((H, W))
    lo, hi = spec.depth_range
    for i in range(n):
        c = int(round(float(pix[i, 0])))
        r = int(round(float(pix[i, 1])))
        if 0 <= r < H and 0 <= c < W:
            feats[r, c] = pixel_features[i]
            gray[r, c] = np.clip((hi - depths[i]) / (hi - lo), 0.0, 1.0)
    # background stays faint on purpose: patch pooling must be dominated by
    # the planted unit descriptors, not by renormalized noise
    image = ImageGrid(pixels=gray, features=feats)

    return SyntheticScene(
        spec=spec,
        intrinsics=K,
        gt_pose=gt_pose,
        cloud=cloud,
        image=image,
        correspondences=corr,
        inlier_mask=inlier_mask,
    )


def perturb_pose(pose: Pose, angle_deg: float, dist: float, seed: int = 0) -> Pose:
    """Rotate by exactly ``angle_deg`` about a random axis and translate by
    exactly ``dist`` in a random direction."""
    rng = substream(seed, "perturb")
    delta = rotation_from_axis_angle(_unit(rng) * np.radians(angle_deg))
    return Pose(pose.rotation @ delta, pose.translation + _unit(rng) * dist)
