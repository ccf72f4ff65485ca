"""Registration evaluation metrics.

Two threshold presets exist because published evaluations disagree on the
inlier distance / recall cutoff pairing; ``maintext`` (5 cm / 10%) is the
default and ``appendix`` (10 cm / 5%) is selectable everywhere thresholds are
accepted.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadDims,
    EmptyCorrespondences,
    EmptyInput,
    EmptyPatchSet,
    MissingDepth,
)
from .geometry import CameraIntrinsics, Pose, project, transform, unproject
from .matching import CorrespondenceSet

__all__ = [
    "MetricThresholds",
    "THRESHOLD_PRESETS",
    "PatchCorrespondence",
    "EvalReport",
    "inlier_ratio",
    "feature_matching_recall",
    "patch_overlaps",
    "patch_inlier_ratio",
    "registration_rmse",
    "registration_recall",
    "relative_pose_errors",
]


@dataclass(frozen=True)
class MetricThresholds:
    inlier_3d: float = 0.05      # meters, correspondence inlier distance
    recall_ir: float = 0.10      # IR level a pair must exceed to count for FMR
    patch_3d: float = 0.0375     # meters, patch overlap distance
    patch_2d: float = 8.0        # pixels, patch overlap distance
    patch_overlap: float = 0.30  # overlap level a patch pair must exceed
    rmse: float = 0.10           # meters, registration recall cutoff


THRESHOLD_PRESETS = {
    "maintext": MetricThresholds(),
    "appendix": MetricThresholds(inlier_3d=0.10, recall_ir=0.05),
}


def inlier_ratio(
    corr: CorrespondenceSet,
    gt_pose: Pose,
    K: CameraIntrinsics,
    tau: float = MetricThresholds().inlier_3d,
) -> float:
    """Fraction of pairs whose camera-frame 3D distance is strictly below tau.

    The pixel is lifted with its stored depth; the point is mapped by the
    ground-truth pose. Both then live in camera coordinates, where the
    distance is rigid-invariant.
    """
    if len(corr) == 0:
        raise EmptyCorrespondences("inlier_ratio needs at least one pair")
    if corr.pixel_depths is None:
        raise MissingDepth("inlier_ratio needs pixel depths for unprojection")
    cam = transform(gt_pose, corr.points)
    lifted = unproject(corr.pixels, corr.pixel_depths, K)
    d = np.linalg.norm(cam - lifted, axis=1)
    return float(np.mean(d < tau))


def feature_matching_recall(inlier_ratios, tau: float = MetricThresholds().recall_ir) -> float:
    """Fraction of scene pairs whose IR strictly exceeds tau."""
    irs = np.atleast_1d(np.asarray(inlier_ratios, dtype=np.float64))
    if irs.size == 0:
        raise EmptyInput("feature_matching_recall needs at least one IR value")
    return float(np.mean(irs > tau))


@dataclass(frozen=True)
class PatchCorrespondence:
    """Fine-level members of one matched (point patch, image patch) pair."""

    points: np.ndarray        # (n, 3) cloud frame
    pixels: np.ndarray        # (m, 2)
    pixel_depths: np.ndarray  # (m,)

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        x = np.asarray(self.pixels, dtype=np.float64)
        d = np.asarray(self.pixel_depths, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3:
            raise BadDims("points must be (n, 3)")
        if x.ndim != 2 or x.shape[1] != 2 or d.shape != (x.shape[0],):
            raise BadDims("pixels must be (m, 2) with matching depths")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "pixels", x)
        object.__setattr__(self, "pixel_depths", d)


def patch_overlaps(
    patch: PatchCorrespondence,
    gt_pose: Pose,
    K: CameraIntrinsics,
    thresholds: MetricThresholds = MetricThresholds(),
):
    """(overlap_3d, overlap_2d) for one patch pair under the ground truth.

    overlap_3d: fraction of patch points whose nearest lifted patch pixel is
    within ``patch_3d`` meters. overlap_2d: fraction of patch pixels whose
    nearest projected patch point is within ``patch_2d`` pixels. Points behind
    the camera never match in 2D.
    """
    if patch.points.shape[0] == 0 or patch.pixels.shape[0] == 0:
        return 0.0, 0.0
    cam = transform(gt_pose, patch.points)
    lifted = unproject(patch.pixels, patch.pixel_depths, K)
    d3 = np.linalg.norm(cam[:, None, :] - lifted[None, :, :], axis=2)
    overlap_3d = float(np.mean(d3.min(axis=1) < thresholds.patch_3d))
    front = cam[:, 2] > 1e-9
    if not np.any(front):
        return overlap_3d, 0.0
    proj, _ = project(cam[front], K)
    d2 = np.linalg.norm(proj[:, None, :] - patch.pixels[None, :, :], axis=2)
    overlap_2d = float(np.mean(d2.min(axis=0) < thresholds.patch_2d))
    return overlap_3d, overlap_2d


def patch_inlier_ratio(
    patches,
    gt_pose: Pose,
    K: CameraIntrinsics,
    thresholds: MetricThresholds = MetricThresholds(),
) -> float:
    """Fraction of patch pairs whose smaller overlap strictly exceeds the bar."""
    patches = list(patches)
    if not patches:
        raise EmptyPatchSet("patch_inlier_ratio needs at least one patch pair")
    hits = 0
    for patch in patches:
        o3, o2 = patch_overlaps(patch, gt_pose, K, thresholds)
        if min(o3, o2) > thresholds.patch_overlap:
            hits += 1
    return hits / len(patches)


def registration_rmse(points, gt_pose: Pose, est_pose: Pose) -> float:
    """Root mean square distance between the two transformed clouds."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 3 or p.shape[0] == 0:
        raise BadDims("points must be a non-empty (N, 3) array")
    d = transform(gt_pose, p) - transform(est_pose, p)
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def registration_recall(rmses, tau: float = MetricThresholds().rmse) -> float:
    """Fraction of scene pairs with RMSE strictly below tau."""
    r = np.atleast_1d(np.asarray(rmses, dtype=np.float64))
    if r.size == 0:
        raise EmptyInput("registration_recall needs at least one RMSE value")
    return float(np.mean(r < tau))


def relative_pose_errors(gt_pose: Pose, est_pose: Pose):
    """(RRE degrees, RTE meters) between an estimate and the ground truth."""
    cos = (np.trace(gt_pose.rotation.T @ est_pose.rotation) - 1.0) / 2.0
    rre = float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))
    rte = float(np.linalg.norm(gt_pose.translation - est_pose.translation))
    return rre, rte


@dataclass(frozen=True)
class EvalReport:
    """One evaluation row. Fields not computed stay None."""

    inlier_ratio: float | None = None
    feature_matching_recall: float | None = None
    patch_inlier_ratio: float | None = None
    rmse: float | None = None
    registration_recall: float | None = None
    rre_deg: float | None = None
    rte_m: float | None = None
    pair_count: int | None = None
    preset: str | None = None

    CSV_FIELDS = (
        "inlier_ratio",
        "feature_matching_recall",
        "patch_inlier_ratio",
        "rmse",
        "registration_recall",
        "rre_deg",
        "rte_m",
        "pair_count",
        "preset",
    )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    def csv_header(self) -> str:
        return ",".join(self.CSV_FIELDS)

    def to_csv_row(self) -> str:
        vals = []
        for f in self.CSV_FIELDS:
            v = getattr(self, f)
            if v is None:
                vals.append("")
            elif isinstance(v, float):
                vals.append(f"{v:.17g}")
            else:
                vals.append(str(v))
        return ",".join(vals)

    def save(self, path, fmt: str = "json") -> None:
        if fmt == "json":
            Path(path).write_text(self.to_json())
        elif fmt == "csv":
            Path(path).write_text(self.csv_header() + "\n" + self.to_csv_row() + "\n")
        else:
            raise BadDims(f"unknown report format {fmt!r}")
