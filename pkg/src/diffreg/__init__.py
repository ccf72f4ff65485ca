"""diffreg: differentiable image-to-point-cloud registration toolkit."""

from . import csd, dct, depth, errors, matching, metrics, pnp, synth
from .csd import (
    CSDConfig,
    DepthTargetProvider,
    ScoreProvider,
    ScoreRequest,
    WireScoreProvider,
    csd_gradient,
    csd_optimize,
    mock_score_provider,
    surrogate_csd_loss,
)
from .depth import (
    DensifyConfig,
    DepthChain,
    DepthMap,
    densify,
    depth_backward,
    project_to_latent,
    render_sparse_depth,
    resize_to_latent,
)
from .dct import (
    OffsetNetwork,
    apply_offsets,
    init_offset_network,
    offset_loss,
    predict_offsets,
    tune_offsets,
)
from .geometry import (
    CameraIntrinsics,
    ImageGrid,
    PointCloud,
    Pose,
    compose,
    inverse,
    pose_from_tangent,
    pose_to_tangent,
    project,
    transform,
    unproject,
)
from .matching import CorrespondenceSet, coarse_match, fine_match
from .metrics import (
    inlier_ratio,
    registration_recall,
    relative_pose_errors,
)
from .pnp import (
    PnPGradients,
    PnPResult,
    bpnp_backward,
    epnp_solve,
    ransac_pnp,
    refine_pose,
    rigid_align,
)
from .synth import SceneSpec, generate_scene, perturb_pose

__version__ = "0.1.0"

__all__ = [
    "csd",
    "dct",
    "depth",
    "errors",
    "matching",
    "metrics",
    "pnp",
    "synth",
    "CSDConfig",
    "DepthTargetProvider",
    "ScoreProvider",
    "ScoreRequest",
    "WireScoreProvider",
    "csd_gradient",
    "csd_optimize",
    "mock_score_provider",
    "surrogate_csd_loss",
    "DensifyConfig",
    "DepthChain",
    "DepthMap",
    "densify",
    "depth_backward",
    "project_to_latent",
    "render_sparse_depth",
    "resize_to_latent",
    "OffsetNetwork",
    "apply_offsets",
    "init_offset_network",
    "offset_loss",
    "predict_offsets",
    "tune_offsets",
    "CameraIntrinsics",
    "ImageGrid",
    "PointCloud",
    "Pose",
    "compose",
    "inverse",
    "pose_from_tangent",
    "pose_to_tangent",
    "project",
    "transform",
    "unproject",
    "CorrespondenceSet",
    "coarse_match",
    "fine_match",
    "inlier_ratio",
    "registration_recall",
    "relative_pose_errors",
    "PnPGradients",
    "PnPResult",
    "bpnp_backward",
    "epnp_solve",
    "ransac_pnp",
    "refine_pose",
    "rigid_align",
    "SceneSpec",
    "generate_scene",
    "perturb_pose",
    "__version__",
]
