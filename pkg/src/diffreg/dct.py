"""Correspondence offset tuning.

Each pair gets a feature vector [Fx ; Fy ; x ; K^-1(y)] feeding a small
dense network that predicts a 3D offset for the point side of the pair.
Forward and backward passes are written out by hand so gradients can be
pushed from downstream pose losses into the features without any
autodiff dependency.  The offset loss measures, under a reference pose,
the 3D distance between the shifted point and the unprojected pixel,
plus an L2-norm regularizer on the offsets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadDims,
    DimMismatch,
    FormatError,
    LengthMismatch,
    MissingDepth,
    MissingFeature,
    NonFiniteInput,
)
from .geometry import CameraIntrinsics, Pose, unproject
from .matching import CorrespondenceSet

__all__ = [
    "OffsetNetwork",
    "OffsetLossWeights",
    "init_offset_network",
    "assemble_pair_features",
    "predict_offsets",
    "predict_offsets_vjp",
    "apply_offsets",
    "offset_loss",
    "tune_offsets",
    "save_offset_network",
    "load_offset_network",
]


@dataclass(frozen=True)
class OffsetLossWeights:
    """Regularization strength for the offset loss."""

    mu: float = 0.1

    def __post_init__(self):
        if not (np.isfinite(self.mu) and self.mu >= 0.0):
            raise NonFiniteInput("mu must be finite and non-negative")


@dataclass(frozen=True)
class OffsetNetwork:
    """Dense layers (weight, bias) with tanh between them, linear output.

    Weight shapes are (out, in); the last layer must emit exactly 3
    values (an offset per pair).
    """

    layers: tuple

    def __post_init__(self):
        if len(self.layers) == 0:
            raise BadDims("network needs at least one layer")
        clean = []
        prev_out = None
        for i, (W, b) in enumerate(self.layers):
            W = np.asarray(W, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise BadDims(f"layer {i}: weight must be (out, in) with matching bias")
            if prev_out is not None and W.shape[1] != prev_out:
                raise DimMismatch(
                    f"layer {i} expects input dim {W.shape[1]}, previous layer emits {prev_out}"
                )
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise NonFiniteInput(f"layer {i} contains non-finite values")
            prev_out = W.shape[0]
            W.setflags(write=False)
            b.setflags(write=False)
            clean.append((W, b))
        if prev_out != 3:
            raise BadDims(f"final layer must emit 3 values, emits {prev_out}")
        object.__setattr__(self, "layers", tuple(clean))

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]


def init_offset_network(input_dim: int, hidden=(128, 128), seed: int = 0) -> OffsetNetwork:
    """Scaled-normal hidden layers; final layer all zero so the initial
    prediction is the identity tuning (offsets exactly 0)."""
    if input_dim < 1:
        raise BadDims("input_dim must be positive")
    rng = np.random.default_rng(seed)
    dims = [int(input_dim)] + [int(h) for h in hidden] + [3]
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        if i == len(dims) - 2:
            W = np.zeros((fan_out, fan_in))
            b = np.zeros(fan_out)
        else:
            W = rng.normal(scale=1.0 / np.sqrt(fan_in), size=(fan_out, fan_in))
            b = np.zeros(fan_out)
        layers.append((W, b))
    return OffsetNetwork(tuple(layers))


def assemble_pair_features(corr: CorrespondenceSet, K: CameraIntrinsics) -> np.ndarray:
    """Per-pair network inputs [Fx ; Fy ; x ; K^-1(y)], shape (N, 2F+6)."""
    if corr.point_features is None or corr.pixel_features is None:
        raise MissingFeature("correspondences carry no descriptors")
    if corr.pixel_depths is None:
        raise MissingDepth("correspondences carry no pixel depths for unprojection")
    lifted = unproject(corr.pixels, corr.pixel_depths, K)
    return np.hstack([corr.point_features, corr.pixel_features, corr.points, lifted])


def _forward(net: OffsetNetwork, x: np.ndarray):
    """All pre-activations and activations, cheap enough to recompute."""
    acts = [x]
    pre = []
    a = x
    last = len(net.layers) - 1
    for i, (W, b) in enumerate(net.layers):
        z = a @ W.T + b
        pre.append(z)
        a = z if i == last else np.tanh(z)
        acts.append(a)
    return pre, acts


def predict_offsets(net: OffsetNetwork, features: np.ndarray) -> np.ndarray:
    """Forward pass: (N, 2F+6) features to (N, 3) offsets."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise BadDims(f"features must be 2D, got {features.shape}")
    if features.shape[1] != net.input_dim:
        raise DimMismatch(
            f"features have dim {features.shape[1]}, network expects {net.input_dim}"
        )
    return _forward(net, features)[1][-1]


def predict_offsets_vjp(net: OffsetNetwork, features: np.ndarray, grad_offsets: np.ndarray):
    """Backward pass: pull (N, 3) offset gradients to the inputs and weights.

    Returns (grad_features, [(grad_W, grad_b) per layer]).
    """
    features = np.asarray(features, dtype=np.float64)
    grad_offsets = np.asarray(grad_offsets, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != net.input_dim:
        raise DimMismatch(f"features must be (N, {net.input_dim}), got {features.shape}")
    if grad_offsets.shape != (features.shape[0], 3):
        raise DimMismatch(
            f"grad_offsets must be ({features.shape[0]}, 3), got {grad_offsets.shape}"
        )
    pre, acts = _forward(net, features)
    n_layers = len(net.layers)
    grads = [None] * n_layers
    g = grad_offsets  # gradient w.r.t. layer output
    for i in range(n_layers - 1, -1, -1):
        W, _ = net.layers[i]
        gz = g if i == n_layers - 1 else g * (1.0 - np.tanh(pre[i]) ** 2)
        grads[i] = (gz.T @ acts[i], gz.sum(axis=0))
        g = gz @ W
    return g, grads


def apply_offsets(corr: CorrespondenceSet, offsets: np.ndarray) -> CorrespondenceSet:
    """Shift the point side of each pair; everything else is untouched."""
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != corr.points.shape:
        raise LengthMismatch(
            f"offsets must be {corr.points.shape}, got {offsets.shape}"
        )
    return corr.with_points(corr.points + offsets)


def offset_loss(
    corr: CorrespondenceSet,
    offsets: np.ndarray,
    gt_pose: Pose,
    K: CameraIntrinsics,
    mu: float = 0.1,
):
    """Mean 3D alignment error of shifted points plus L2 offset penalty.

    loss = (1/N) sum_i ||R (x_i + dp_i) + t - K^-1(y_i)||^2 + mu ||dp_i||_2
    Returns (loss, grad w.r.t. offsets); the norm's subgradient at 0 is 0.
    """
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.shape != corr.points.shape:
        raise LengthMismatch(f"offsets must be {corr.points.shape}, got {offsets.shape}")
    if corr.pixel_depths is None:
        raise MissingDepth("offset loss needs pixel depths for unprojection")
    if not (np.isfinite(mu) and mu >= 0.0):
        raise NonFiniteInput("mu must be finite and non-negative")
    n = len(corr)
    target = unproject(corr.pixels, corr.pixel_depths, K)
    R = gt_pose.rotation
    resid = (corr.points + offsets) @ R.T + gt_pose.translation - target
    norms = np.linalg.norm(offsets, axis=1)
    loss = float(np.mean(np.einsum("nd,nd->n", resid, resid) + mu * norms))
    grad = (2.0 / n) * (resid @ R)
    if mu > 0.0:
        nz = norms > 0.0
        grad[nz] += (mu / n) * offsets[nz] / norms[nz, None]
    return loss, grad


def tune_offsets(
    corr: CorrespondenceSet,
    gt_pose: Pose,
    K: CameraIntrinsics,
    mu: float = 0.1,
    steps: int = 100,
    lr: float | None = None,
) -> np.ndarray:
    """Plain gradient descent on the offset loss with backtracking halving.

    The alignment term is quadratic with per-pair curvature 2/N, so the
    default step size N/2 solves the mu=0 problem in one step; halving
    keeps the loss non-increasing when the regularizer bends the surface.
    """
    if steps < 1:
        raise BadDims("steps must be at least 1")
    n = len(corr)
    if lr is None:
        lr = n / 2.0
    dp = np.zeros_like(corr.points)
    loss, grad = offset_loss(corr, dp, gt_pose, K, mu)
    for _ in range(steps):
        step = lr
        accepted = False
        while step > 1e-20:
            cand = dp - step * grad
            cand_loss, cand_grad = offset_loss(corr, cand, gt_pose, K, mu)
            if cand_loss <= loss:
                dp, loss, grad = cand, cand_loss, cand_grad
                accepted = True
                break
            step /= 2.0
        if not accepted or np.max(np.abs(grad)) < 1e-15:
            break
    return dp


# ---------------------------------------------------------------------------
# weights file: JSON manifest next to one raw f32 little-endian blob per array


def save_offset_network(net: OffsetNetwork, path) -> None:
    path = Path(path)
    manifest = {"activation": "tanh", "dtype": "<f4", "layers": []}
    for i, (W, b) in enumerate(net.layers):
        wname = f"{path.stem}.layer{i}.w.bin"
        bname = f"{path.stem}.layer{i}.b.bin"
        (path.parent / wname).write_bytes(W.astype("<f4").tobytes(order="C"))
        (path.parent / bname).write_bytes(b.astype("<f4").tobytes())
        manifest["layers"].append(
            {"out": int(W.shape[0]), "in": int(W.shape[1]), "weight": wname, "bias": bname}
        )
    path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")


def load_offset_network(path) -> OffsetNetwork:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
        layers = []
        for entry in manifest["layers"]:
            rows, cols = int(entry["out"]), int(entry["in"])
            wraw = (path.parent / entry["weight"]).read_bytes()
            braw = (path.parent / entry["bias"]).read_bytes()
            if len(wraw) != 4 * rows * cols or len(braw) != 4 * rows:
                raise FormatError("weight blob size does not match manifest dims")
            W = np.frombuffer(wraw, dtype="<f4").reshape(rows, cols).astype(np.float64)
            b = np.frombuffer(braw, dtype="<f4").astype(np.float64)
            layers.append((W, b))
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read network weights: {exc}") from exc
    return OffsetNetwork(tuple(layers))
