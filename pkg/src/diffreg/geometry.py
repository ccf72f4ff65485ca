"""Rigid transforms and the pinhole camera model.

Conventions used throughout the package:

- A pose maps point-cloud coordinates into camera coordinates: ``q = R p + t``.
- Pixel coordinates are continuous ``(u, v)`` with ``u`` along image width
  (columns) and ``v`` along height (rows); integer coordinates are pixel
  centers, so the top-left pixel center is ``(0, 0)``.
- The 6-vector tangent of a pose is ``[axis-angle | translation]`` with the
  rotation block first, axis-angle in radians.
- All computation is float64. 32-bit floats appear only inside file formats.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadDims,
    DegenerateConfiguration,
    FormatError,
    NonFiniteInput,
    NonPositiveDepth,
)

DEPTH_EPS = 1e-9

__all__ = [
    "DEPTH_EPS",
    "CameraIntrinsics",
    "Pose",
    "PointCloud",
    "ImageGrid",
    "so3_hat",
    "rotation_from_axis_angle",
    "axis_angle_from_rotation",
    "so3_right_jacobian",
    "pose_from_tangent",
    "pose_to_tangent",
    "compose",
    "inverse",
    "transform",
    "project",
    "unproject",
    "load_point_cloud",
    "save_point_cloud",
    "load_pose",
    "save_pose",
]


def _finite(x, name: str, shape=None) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if shape is not None and a.shape != shape:
        raise BadDims(f"{name}: expected shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteInput(f"{name} contains non-finite values")
    return a


# --- rotation parameterization ------------------------------------------------


def so3_hat(v) -> np.ndarray:
    """Skew-symmetric matrix [v]x such that [v]x @ u == cross(v, u)."""
    v = _finite(v, "v", (3,))
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def rotation_from_axis_angle(w) -> np.ndarray:
    """Rodrigues exponential map: axis-angle 3-vector -> rotation matrix.

    Uses the series expansion below 1e-8 radians so the map stays smooth
    through zero.
    """
    w = _finite(w, "w", (3,))
    theta = float(np.linalg.norm(w))
    W = so3_hat(w)
    if theta < 1e-8:
        # sin(t)/t ~ 1 - t^2/6, (1-cos t)/t^2 ~ 1/2 - t^2/24
        a = 1.0 - theta**2 / 6.0
        b = 0.5 - theta**2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * W + b * (W @ W)


def axis_angle_from_rotation(R) -> np.ndarray:
    """Logarithm map: rotation matrix -> axis-angle with angle in [0, pi].

    The returned vector is the canonical representative: angle never exceeds
    pi, and at exactly pi the axis sign is fixed deterministically (first
    nonzero component made positive).
    """
    R = _finite(R, "R", (3, 3))
    cos_theta = float(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0))
    theta = float(np.arccos(cos_theta))
    vee = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return vee  # first-order: log(R) ~ (R - R^T)/2
    if np.pi - theta > 1e-6:
        return (theta / np.sin(theta)) * vee
    # Near pi the sine route loses precision; recover the axis from the
    # symmetric part R ~ 2 a a^T - I.
    A = (R + np.eye(3)) / 2.0
    axis = np.sqrt(np.maximum(np.diag(A), 0.0))
    k = int(np.argmax(axis))
    if axis[k] <= 0.0:
        raise DegenerateConfiguration("rotation log: could not recover axis")
    # fix relative signs from the off-diagonal products a_i a_j
    for i in range(3):
        if i != k and A[i, k] < 0.0:
            axis[i] = -axis[i]
    axis = axis / np.linalg.norm(axis)
    if np.sin(theta) != 0.0:
        # align with the antisymmetric part while it still carries sign
        if np.dot(axis, vee) < 0.0:
            axis = -axis
    else:
        nz = np.nonzero(np.abs(axis) > 1e-12)[0]
        if axis[nz[0]] < 0.0:
            axis = -axis
    return theta * axis


def so3_right_jacobian(w) -> np.ndarray:
    """Right Jacobian J_r of SO(3): exp(w + d) ~ exp(w) exp(J_r(w) d).

    Needed for analytic derivatives of rotated points with respect to the
    axis-angle parameters: d(R(w) p)/dw = -R(w) [p]x J_r(w).
    """
    w = _finite(w, "w", (3,))
    theta = float(np.linalg.norm(w))
    W = so3_hat(w)
    if theta < 1e-8:
        a = 0.5 - theta**2 / 24.0
        b = 1.0 / 6.0 - theta**2 / 120.0
    else:
        a = (1.0 - np.cos(theta)) / theta**2
        b = (theta - np.sin(theta)) / theta**3
    return np.eye(3) - a * W + b * (W @ W)


# --- core types ----------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole parameters. Focal lengths and centers in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise NonFiniteInput(f"intrinsics.{name} is not finite")
            object.__setattr__(self, name, v)
        if self.fx <= 0 or self.fy <= 0:
            raise BadDims("focal lengths must be positive")
        if int(self.width) < 1 or int(self.height) < 1:
            raise BadDims("image dimensions must be at least 1x1")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        try:
            return cls(
                fx=float(d["fx"]),
                fy=float(d["fy"]),
                cx=float(d["cx"]),
                cy=float(d["cy"]),
                width=int(d["width"]),
                height=int(d["height"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"bad intrinsics dict: {e}") from e

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "CameraIntrinsics":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise FormatError(f"cannot read intrinsics json: {e}") from e
        return cls.from_dict(d)


@dataclass(frozen=True)
class Pose:
    """Rigid transform q = R p + t with a cached 6-vector tangent.

    The tangent is kept in sync with the matrix form at construction; it is
    the canonical axis-angle (angle < pi) plus translation.
    ``tangent_wrapped`` records whether a caller-supplied tangent had to be
    wrapped to reach the canonical representative.
    """

    rotation: np.ndarray
    translation: np.ndarray
    tangent: np.ndarray = None
    tangent_wrapped: bool = field(default=False, compare=False)

    def __post_init__(self):
        R = _finite(self.rotation, "rotation", (3, 3))
        t = _finite(self.translation, "translation", (3,))
        err = np.linalg.norm(R.T @ R - np.eye(3))
        if err > 1e-9:
            raise DegenerateConfiguration(
                f"rotation is not orthonormal (|R^T R - I|_F = {err:.3e})"
            )
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise DegenerateConfiguration("rotation must have determinant +1")
        if self.tangent is None:
            tangent = np.concatenate([axis_angle_from_rotation(R), t])
        else:
            tangent = _finite(self.tangent, "tangent", (6,))
        for a in (R, t, tangent):
            a.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "tangent", tangent)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rt(cls, R, t) -> "Pose":
        return cls(np.asarray(R, dtype=np.float64), np.asarray(t, dtype=np.float64))

    @classmethod
    def from_matrix(cls, M) -> "Pose":
        M = _finite(M, "matrix", (4, 4))
        if not np.allclose(M[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise BadDims("bottom row of a rigid transform must be [0 0 0 1]")
        return cls(M[:3, :3].copy(), M[:3, 3].copy())

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points) -> np.ndarray:
        return transform(self, points)

    def save(self, path) -> None:
        save_pose(path, self)

    @classmethod
    def load(cls, path) -> "Pose":
        return load_pose(path)


@dataclass(frozen=True)
class PointCloud:
    """N points with optional per-point descriptors."""

    points: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3:
            raise BadDims(f"points must be (N, 3), got {p.shape}")
        if not np.all(np.isfinite(p)):
            raise NonFiniteInput("points contain non-finite values")
        p.setflags(write=False)
        object.__setattr__(self, "points", p)
        if self.features is not None:
            f = np.asarray(self.features, dtype=np.float64)
            if f.ndim != 2 or f.shape[0] != p.shape[0]:
                raise BadDims(f"features must be (N, F) with N={p.shape[0]}")
            if not np.all(np.isfinite(f)):
                raise NonFiniteInput("features contain non-finite values")
            f.setflags(write=False)
            object.__setattr__(self, "features", f)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class ImageGrid:
    """Image pixels (grayscale H x W or color H x W x 3) plus optional
    per-pixel descriptors (H x W x F)."""

    pixels: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim not in (2, 3) or (px.ndim == 3 and px.shape[2] != 3):
            raise BadDims(f"pixels must be (H, W) or (H, W, 3), got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise NonFiniteInput("pixels contain non-finite values")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        if self.features is not None:
            f = np.asarray(self.features, dtype=np.float64)
            if f.ndim != 3 or f.shape[:2] != px.shape[:2]:
                raise BadDims("features must be (H, W, F) matching pixels")
            if not np.all(np.isfinite(f)):
                raise NonFiniteInput("features contain non-finite values")
            f.setflags(write=False)
            object.__setattr__(self, "features", f)

    @property
    def shape(self) -> tuple:
        return self.pixels.shape[:2]


# --- tangent encoding -----------------------------------------------------------


def pose_from_tangent(v) -> Pose:
    """Build a pose from ``[axis-angle | translation]``.

    Angles at or above pi are wrapped to the canonical representative
    (angle in [0, pi]); the result carries ``tangent_wrapped=True`` when that
    happened.
    """
    v = _finite(v, "tangent", (6,))
    w, t = v[:3], v[3:]
    theta = float(np.linalg.norm(w))
    wrapped = False
    if theta >= np.pi:
        R = rotation_from_axis_angle(w)
        w = axis_angle_from_rotation(R)
        wrapped = True
    return Pose(
        rotation=rotation_from_axis_angle(w),
        translation=t.copy(),
        tangent=np.concatenate([w, t]),
        tangent_wrapped=wrapped,
    )


def pose_to_tangent(pose: Pose) -> np.ndarray:
    return np.array(pose.tangent, copy=True)


def compose(a: Pose, b: Pose) -> Pose:
    """Pose applying b first, then a: compose(a, b).apply(p) == a(b(p))."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(a: Pose) -> Pose:
    return Pose(a.rotation.T, -(a.rotation.T @ a.translation))


def transform(pose: Pose, points) -> np.ndarray:
    """Apply a rigid transform to one point (3,) or a batch (N, 3)."""
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    if single:
        p = p[None, :]
    if p.ndim != 2 or p.shape[1] != 3:
        raise BadDims(f"points must be (N, 3) or (3,), got {np.shape(points)}")
    if not np.all(np.isfinite(p)):
        raise NonFiniteInput("points contain non-finite values")
    out = p @ pose.rotation.T + pose.translation
    return out[0] if single else out


# --- pinhole projection ----------------------------------------------------------


def project(points, K: CameraIntrinsics):
    """Project camera-frame points to pixels.

    Args:
      points: (3,) or (N, 3) camera-frame coordinates.
      K: pinhole intrinsics.

    Returns:
      (pixels, depths): (2,)/(N, 2) continuous pixel coords and the camera
      depths z. Pixels may fall outside the image bounds; callers filter.

    Raises:
      NonPositiveDepth: any z <= 1e-9.
    """
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    if single:
        p = p[None, :]
    if p.ndim != 2 or p.shape[1] != 3:
        raise BadDims(f"points must be (N, 3) or (3,), got {np.shape(points)}")
    if not np.all(np.isfinite(p)):
        raise NonFiniteInput("points contain non-finite values")
    z = p[:, 2]
    if np.any(z <= DEPTH_EPS):
        raise NonPositiveDepth(
            f"{int(np.sum(z <= DEPTH_EPS))} point(s) at or behind the camera plane"
        )
    u = K.fx * p[:, 0] / z + K.cx
    v = K.fy * p[:, 1] / z + K.cy
    pix = np.stack([u, v], axis=1)
    if single:
        return pix[0], float(z[0])
    return pix, z.copy()


def unproject(pixels, depths, K: CameraIntrinsics) -> np.ndarray:
    """Lift pixels with known depth back to camera-frame 3D points."""
    y = np.asarray(pixels, dtype=np.float64)
    single = y.ndim == 1
    if single:
        y = y[None, :]
    if y.ndim != 2 or y.shape[1] != 2:
        raise BadDims(f"pixels must be (N, 2) or (2,), got {np.shape(pixels)}")
    d = np.atleast_1d(np.asarray(depths, dtype=np.float64))
    if d.shape != (y.shape[0],):
        raise BadDims(f"depths must be ({y.shape[0]},), got {d.shape}")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(d))):
        raise NonFiniteInput("pixels or depths contain non-finite values")
    if np.any(d <= DEPTH_EPS):
        raise NonPositiveDepth("depths must be positive")
    x = (y[:, 0] - K.cx) / K.fx * d
    yy = (y[:, 1] - K.cy) / K.fy * d
    out = np.stack([x, yy, d], axis=1)
    return out[0] if single else out


# --- file formats -----------------------------------------------------------------


def save_point_cloud(path, points, features=None) -> None:
    """Write an ASCII cloud: one point per line, ``x y z [f1 ... fF]``."""
    cloud = PointCloud(points, features)  # validates
    if cloud.features is not None:
        data = np.hstack([cloud.points, cloud.features])
    else:
        data = cloud.points
    np.savetxt(path, data, fmt="%.17g")


def load_point_cloud(path):
    """Read an ASCII cloud; returns (points (N,3), features (N,F) or None)."""
    try:
        data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as e:
        raise FormatError(f"cannot parse point cloud file: {e}") from e
    if data.size == 0:
        return np.zeros((0, 3)), None
    if data.shape[1] < 3:
        raise FormatError(
            f"point cloud rows need at least 3 columns, got {data.shape[1]}"
        )
    points = data[:, :3]
    features = data[:, 3:] if data.shape[1] > 3 else None
    return points, features


def save_pose(path, pose: Pose) -> None:
    """Write a pose as JSON ``{"matrix": [16 row-major floats]}``."""
    Path(path).write_text(
        json.dumps({"matrix": [float(x) for x in pose.matrix.reshape(-1)]}, indent=2)
        + "\n"
    )


def load_pose(path) -> Pose:
    try:
        d = json.loads(Path(path).read_text())
        m = np.asarray(d["matrix"], dtype=np.float64).reshape(4, 4)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"cannot read pose json: {e}") from e
    return Pose.from_matrix(m)
