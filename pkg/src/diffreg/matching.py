"""Coarse-to-fine pixel-point matching and the circle-loss family.

Feature extraction lives outside this package: every operation here works on
caller-supplied descriptor arrays. Matching is exhaustive cosine similarity
(candidate counts at this scale never justify an index), with deterministic
tie-breaking so results are reproducible bit-for-bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    BadDims,
    EmptyInput,
    EmptyPatch,
    FormatError,
    LengthMismatch,
    MissingDepth,
    NonFiniteInput,
)
from .geometry import CameraIntrinsics, Pose, project, transform, unproject

__all__ = [
    "CorrespondenceSet",
    "PatchMatch",
    "PatchPair",
    "CircleLossParams",
    "CircleLossResult",
    "CoarseAnchor",
    "PairLabelThresholds",
    "pool_patch_grid",
    "coarse_match",
    "fine_match",
    "label_pairs",
    "label_patch_pair",
    "circle_loss",
    "scaled_circle_loss_coarse",
    "save_feature_blob",
    "load_feature_blob",
    "save_correspondences_csv",
    "load_correspondences_csv",
]


def _unit_rows(x: np.ndarray) -> np.ndarray:
    """L2-normalize rows; zero rows stay zero."""
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


@dataclass(frozen=True)
class CorrespondenceSet:
    """Pixel-point pairs with optional descriptors and pixel depths.

    ``provenance`` records the coarse patch index each pair came from
    (-1 when the pair did not come from patch matching).
    """

    points: np.ndarray
    pixels: np.ndarray
    scores: np.ndarray
    point_features: np.ndarray | None = None
    pixel_features: np.ndarray | None = None
    pixel_depths: np.ndarray | None = None
    provenance: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        pix = np.asarray(self.pixels, dtype=np.float64)
        sc = np.asarray(self.scores, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise BadDims(f"points must be (N, 3), got {pts.shape}")
        n = pts.shape[0]
        if pix.shape != (n, 2):
            raise LengthMismatch(f"pixels must be ({n}, 2), got {pix.shape}")
        if sc.shape != (n,):
            raise LengthMismatch(f"scores must be ({n},), got {sc.shape}")
        arrays = {"points": pts, "pixels": pix, "scores": sc}
        pf, xf = self.point_features, self.pixel_features
        if (pf is None) != (xf is None):
            raise LengthMismatch("point and pixel features must both be set or both absent")
        if pf is not None:
            pf = np.asarray(pf, dtype=np.float64)
            xf = np.asarray(xf, dtype=np.float64)
            if pf.ndim != 2 or pf.shape[0] != n:
                raise LengthMismatch(f"point_features must be ({n}, F)")
            if xf.shape != pf.shape:
                raise LengthMismatch("pixel_features must match point_features shape")
            arrays["point_features"] = pf
            arrays["pixel_features"] = xf
        if self.pixel_depths is not None:
            d = np.asarray(self.pixel_depths, dtype=np.float64)
            if d.shape != (n,):
                raise LengthMismatch(f"pixel_depths must be ({n},)")
            arrays["pixel_depths"] = d
        if self.provenance is not None:
            pr = np.asarray(self.provenance, dtype=np.int64)
            if pr.shape != (n,):
                raise LengthMismatch(f"provenance must be ({n},)")
            pr.setflags(write=False)
            object.__setattr__(self, "provenance", pr)
        for name, a in arrays.items():
            if not np.all(np.isfinite(a)):
                raise NonFiniteInput(f"{name} contains non-finite values")
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __len__(self) -> int:
        return self.points.shape[0]

    def take(self, idx) -> "CorrespondenceSet":
        idx = np.asarray(idx)
        pick = lambda a: None if a is None else a[idx]
        return CorrespondenceSet(
            points=self.points[idx],
            pixels=self.pixels[idx],
            scores=self.scores[idx],
            point_features=pick(self.point_features),
            pixel_features=pick(self.pixel_features),
            pixel_depths=pick(self.pixel_depths),
            provenance=pick(self.provenance),
        )

    def with_points(self, points) -> "CorrespondenceSet":
        return replace(self, points=np.asarray(points, dtype=np.float64))

    @staticmethod
    def concatenate(sets: "list[CorrespondenceSet]") -> "CorrespondenceSet":
        if not sets:
            raise EmptyInput("cannot concatenate zero correspondence sets")
        cat = lambda key: (
            None
            if getattr(sets[0], key) is None
            else np.concatenate([getattr(s, key) for s in sets])
        )
        return CorrespondenceSet(
            points=cat("points"),
            pixels=cat("pixels"),
            scores=cat("scores"),
            point_features=cat("point_features"),
            pixel_features=cat("pixel_features"),
            pixel_depths=cat("pixel_depths"),
            provenance=cat("provenance"),
        )


# --- coarse level -----------------------------------------------------------


@dataclass(frozen=True)
class PatchMatch:
    """One coarse match: a superpoint paired with an image patch."""

    superpoint: int
    scale: int         # pooling footprint multiplier (1, 2, 4, ...)
    cell: tuple        # (row, col) in the pooled grid at this scale
    patch_index: int   # global index across the scale pyramid, scale-major
    score: float


def pool_patch_grid(pixel_features: np.ndarray, patch: int) -> np.ndarray:
    """Average per-pixel features into a (H//patch, W//patch, F) base grid.

    Trailing rows/columns that do not fill a whole patch are dropped.
    """
    f = np.asarray(pixel_features, dtype=np.float64)
    if f.ndim != 3:
        raise BadDims(f"pixel features must be (H, W, F), got {f.shape}")
    if patch < 1:
        raise BadDims("patch size must be >= 1")
    gh, gw = f.shape[0] // patch, f.shape[1] // patch
    if gh < 1 or gw < 1:
        raise EmptyInput("image smaller than one patch")
    trimmed = f[: gh * patch, : gw * patch]
    blocks = trimmed.reshape(gh, patch, gw, patch, f.shape[2])
    return blocks.mean(axis=(1, 3))


def _scale_pyramid(grid: np.ndarray, scales) -> list:
    """Pooled grids [(scale, features (gh, gw, F)), ...]; unusable scales skipped."""
    out = []
    gh, gw = grid.shape[:2]
    for s in scales:
        hs, ws = gh // s, gw // s
        if hs < 1 or ws < 1:
            continue
        trimmed = grid[: hs * s, : ws * s]
        pooled = trimmed.reshape(hs, s, ws, s, grid.shape[2]).mean(axis=(1, 3))
        out.append((int(s), pooled))
    return out


def coarse_match(
    image_patches: np.ndarray,
    superpoints: np.ndarray,
    k: int,
    scales=(1, 2, 4),
    normalize: bool = True,
) -> list:
    """Match each superpoint to its top-k image patches across a scale pyramid.

    Args:
      image_patches: (Gh, Gw, F) base patch-feature grid (see pool_patch_grid).
      superpoints: (S, F) pooled point descriptors.
      k: matches to keep per superpoint.
      scales: pooling footprints applied on top of the base grid.
      normalize: L2-normalize features here; pass False if already unit length.

    Returns:
      A list of length S; element i is the list of PatchMatch for superpoint
      i, ordered by (similarity desc, patch index asc).
    """
    grid = np.asarray(image_patches, dtype=np.float64)
    sp = np.asarray(superpoints, dtype=np.float64)
    if grid.ndim != 3:
        raise BadDims(f"image_patches must be (Gh, Gw, F), got {grid.shape}")
    if sp.ndim != 2 or sp.shape[1] != grid.shape[2]:
        raise BadDims("superpoints must be (S, F) with F matching the grid")
    if k < 1:
        raise BadDims("k must be >= 1")
    if sp.shape[0] == 0 or grid.shape[0] == 0 or grid.shape[1] == 0:
        raise EmptyInput("no superpoints or no patches to match")

    pyramid = _scale_pyramid(grid, scales)
    if not pyramid:
        raise EmptyInput("no usable scale in the pyramid")
    feats, tags = [], []
    index_base = 0
    for s, pooled in pyramid:
        hs, ws = pooled.shape[:2]
        feats.append(pooled.reshape(hs * ws, -1))
        for r in range(hs):
            for c in range(ws):
                tags.append((s, r, c, index_base + r * ws + c))
        index_base += hs * ws
    cand = np.concatenate(feats, axis=0)
    if normalize:
        cand = _unit_rows(cand)
        sp = _unit_rows(sp)
    sim = sp @ cand.T  # (S, C) cosine similarities
    kk = min(k, cand.shape[0])
    out = []
    idx_arr = np.arange(cand.shape[0])
    for i in range(sp.shape[0]):
        order = np.lexsort((idx_arr, -sim[i]))[:kk]
        out.append(
            [
                PatchMatch(
                    superpoint=i,
                    scale=tags[j][0],
                    cell=(tags[j][1], tags[j][2]),
                    patch_index=tags[j][3],
                    score=float(sim[i, j]),
                )
                for j in order
            ]
        )
    return out


# --- fine level --------------------------------------------------------------


@dataclass(frozen=True)
class PatchPair:
    """Members of one matched (superpoint, image patch) pair at fine level."""

    points: np.ndarray          # (n, 3)
    point_features: np.ndarray  # (n, F)
    pixels: np.ndarray          # (m, 2)
    pixel_features: np.ndarray  # (m, F)
    pixel_depths: np.ndarray | None = None  # (m,)
    patch_index: int = -1


def fine_match(pair: PatchPair, topk: int, normalize: bool = True) -> CorrespondenceSet:
    """Top-k pixels per point by cosine similarity within one patch pair.

    Output rows are ordered by (point index asc, similarity desc, pixel index
    asc), which also resolves exact score ties deterministically.
    """
    pts = np.asarray(pair.points, dtype=np.float64)
    pix = np.asarray(pair.pixels, dtype=np.float64)
    pf = np.asarray(pair.point_features, dtype=np.float64)
    xf = np.asarray(pair.pixel_features, dtype=np.float64)
    if topk < 1:
        raise BadDims("topk must be >= 1")
    if pts.shape[0] == 0 or pix.shape[0] == 0:
        raise EmptyPatch("patch pair has no points or no pixels")
    if pf.shape != (pts.shape[0], pf.shape[1]) or xf.shape[1] != pf.shape[1]:
        raise BadDims("feature arrays must be (n, F) / (m, F) with equal F")
    if normalize:
        pf, xf = _unit_rows(pf), _unit_rows(xf)
    sim = pf @ xf.T  # (n, m)
    kk = min(topk, pix.shape[0])
    pixel_idx = np.arange(pix.shape[0])
    rows_p, rows_x, rows_s = [], [], []
    for i in range(pts.shape[0]):
        order = np.lexsort((pixel_idx, -sim[i]))[:kk]
        rows_p.extend([i] * len(order))
        rows_x.extend(order.tolist())
        rows_s.extend(sim[i, order].tolist())
    rows_p = np.array(rows_p, dtype=np.int64)
    rows_x = np.array(rows_x, dtype=np.int64)
    return CorrespondenceSet(
        points=pts[rows_p],
        pixels=pix[rows_x],
        scores=np.array(rows_s, dtype=np.float64),
        point_features=pf[rows_p],
        pixel_features=xf[rows_x],
        pixel_depths=None if pair.pixel_depths is None else np.asarray(pair.pixel_depths, dtype=np.float64)[rows_x],
        provenance=np.full(rows_p.shape[0], pair.patch_index, dtype=np.int64),
    )


# --- ground-truth labeling ----------------------------------------------------


@dataclass(frozen=True)
class PairLabelThresholds:
    """Distance bands separating positive, ignored, and negative pairs."""

    fine_pos_3d: float = 0.0375  # meters
    fine_pos_2d: float = 8.0     # pixels
    fine_neg_3d: float = 0.10
    fine_neg_2d: float = 12.0
    coarse_pos_overlap: float = 0.30
    coarse_neg_overlap: float = 0.20

    def __post_init__(self):
        if not (self.fine_neg_3d > self.fine_pos_3d and self.fine_neg_2d > self.fine_pos_2d):
            raise BadDims("negative thresholds must strictly exceed positive ones")
        if not self.coarse_neg_overlap < self.coarse_pos_overlap:
            raise BadDims("coarse negative overlap must be below the positive one")


def label_pairs(
    corr: CorrespondenceSet,
    gt_pose: Pose,
    K: CameraIntrinsics,
    thresholds: PairLabelThresholds = PairLabelThresholds(),
) -> np.ndarray:
    """Label each pair +1 (positive), -1 (negative), or 0 (ignored).

    A pair is positive when, under the ground-truth pose, the camera-frame 3D
    distance between the transformed point and the unprojected pixel is below
    ``fine_pos_3d`` AND the reprojection distance is below ``fine_pos_2d``.
    It is negative when either distance exceeds the corresponding negative
    threshold. Everything in between is ignored. Points that transform to or
    behind the camera plane count as infinitely far in 2D.
    """
    if corr.pixel_depths is None:
        raise MissingDepth("label_pairs needs pixel depths for unprojection")
    cam_pts = transform(gt_pose, corr.points)
    lifted = unproject(corr.pixels, corr.pixel_depths, K)
    d3 = np.linalg.norm(cam_pts - lifted, axis=1)
    d2 = np.full(len(corr), np.inf)
    front = cam_pts[:, 2] > 1e-9
    if np.any(front):
        proj, _ = project(cam_pts[front], K)
        d2[front] = np.linalg.norm(proj - corr.pixels[front], axis=1)
    labels = np.zeros(len(corr), dtype=np.int8)
    labels[(d3 < thresholds.fine_pos_3d) & (d2 < thresholds.fine_pos_2d)] = 1
    labels[(d3 > thresholds.fine_neg_3d) | (d2 > thresholds.fine_neg_2d)] = -1
    return labels


def label_patch_pair(
    overlap_2d: float,
    overlap_3d: float,
    thresholds: PairLabelThresholds = PairLabelThresholds(),
) -> int:
    """Coarse patch-pair label from its two overlap ratios (+1/-1/0)."""
    if overlap_2d > thresholds.coarse_pos_overlap and overlap_3d > thresholds.coarse_pos_overlap:
        return 1
    if overlap_2d < thresholds.coarse_neg_overlap and overlap_3d < thresholds.coarse_neg_overlap:
        return -1
    return 0


# --- circle loss ---------------------------------------------------------------


@dataclass(frozen=True)
class CircleLossParams:
    """Margins, log-scale, and per-pair weight scalings.

    ``lambda_pos``/``lambda_neg`` may be scalars or arrays broadcastable to the
    positive/negative distance lists.
    """

    pos_margin: float = 0.1
    neg_margin: float = 1.4
    scale: float = 1.0
    lambda_pos: object = 1.0
    lambda_neg: object = 1.0

    def __post_init__(self):
        if not self.neg_margin > self.pos_margin:
            raise BadDims("neg_margin must exceed pos_margin")
        if not self.scale > 0:
            raise BadDims("scale must be positive")


@dataclass(frozen=True)
class CircleLossResult:
    loss: float
    grad_pos: np.ndarray
    grad_neg: np.ndarray


def _softplus(x: float) -> float:
    if x > 0:
        return x + np.log1p(np.exp(-x))
    return float(np.log1p(np.exp(x)))


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return float(e / (1.0 + e))


def circle_loss(
    pos_distances,
    neg_distances,
    params: CircleLossParams = CircleLossParams(),
) -> CircleLossResult:
    """Self-paced circle loss for one anchor, with analytic distance gradients.

    loss = (1/delta) * log(1 + sum_j exp(b_p_j (d_j - m_p))
                             * sum_k exp(b_n_k (m_n - d_k)))
    with b_p_j = delta * lambda_p_j * max(0, d_j - m_p) and
    b_n_k = delta * lambda_n_k * max(0, m_n - d_k).

    The self-paced weights b are clamped at zero: pairs already inside their
    margin contribute the neutral weight e^0 = 1 and receive zero gradient,
    which keeps the loss monotone in every distance. Evaluation goes through
    log-sum-exp so finite inputs can never overflow.

    Either side empty makes the product vanish and the loss exactly 0.
    """
    dp = np.atleast_1d(np.asarray(pos_distances, dtype=np.float64))
    dn = np.atleast_1d(np.asarray(neg_distances, dtype=np.float64))
    if np.any(dp < 0) or np.any(dn < 0):
        raise BadDims("distances must be non-negative")
    delta = params.scale
    lam_p = np.broadcast_to(np.asarray(params.lambda_pos, dtype=np.float64), dp.shape)
    lam_n = np.broadcast_to(np.asarray(params.lambda_neg, dtype=np.float64), dn.shape)
    if dp.size == 0 or dn.size == 0:
        return CircleLossResult(0.0, np.zeros_like(dp), np.zeros_like(dn))

    u = np.maximum(dp - params.pos_margin, 0.0)
    v = np.maximum(params.neg_margin - dn, 0.0)
    e = delta * lam_p * u * u  # exponents of the positive sum
    g = delta * lam_n * v * v
    lp = float(np.logaddexp.reduce(e))
    ln = float(np.logaddexp.reduce(g))
    t = lp + ln
    loss = _softplus(t) / delta
    # dL/de_j = (1/delta) sigmoid(t) softmax(e)_j ; chain through e_j(d_j)
    sig = _sigmoid(t)
    grad_pos = sig * np.exp(e - lp) * 2.0 * lam_p * u
    grad_neg = sig * np.exp(g - ln) * (-2.0) * lam_n * v
    return CircleLossResult(float(loss), grad_pos, grad_neg)


@dataclass(frozen=True)
class CoarseAnchor:
    """Distances seen from one coarse anchor plus its positive-pair overlaps."""

    pos_distances: np.ndarray
    neg_distances: np.ndarray
    pos_overlaps: np.ndarray  # in [0, 1], aligned with pos_distances

    def __post_init__(self):
        ov = np.atleast_1d(np.asarray(self.pos_overlaps, dtype=np.float64))
        if np.any(ov < 0) or np.any(ov > 1):
            raise BadDims("overlaps must lie in [0, 1]")


def scaled_circle_loss_coarse(
    anchors,
    params: CircleLossParams = CircleLossParams(),
):
    """Overlap-scaled circle loss, averaged over anchors.

    Positive pairs are weighted by their patch overlap (lambda_p = overlap,
    lambda_n = 1). A zero-overlap positive keeps the neutral weight e^0 = 1
    and a zero gradient scale. The same function serves any feature level the
    caller designates; only the supplied distances change.

    Returns:
      (loss, results): mean loss and the per-anchor CircleLossResult list
      (gradients already divided by the anchor count).
    """
    anchors = list(anchors)
    if not anchors:
        raise EmptyInput("need at least one anchor")
    total = 0.0
    results = []
    for a in anchors:
        p = replace(params, lambda_pos=np.asarray(a.pos_overlaps, dtype=np.float64), lambda_neg=1.0)
        r = circle_loss(a.pos_distances, a.neg_distances, p)
        total += r.loss
        results.append(r)
    n = len(anchors)
    results = [
        CircleLossResult(r.loss / n, r.grad_pos / n, r.grad_neg / n) for r in results
    ]
    return total / n, results


# --- file formats ----------------------------------------------------------------

_BLOB_MAGIC = b"DFI1"


def save_feature_blob(path, array, meta: dict | None = None) -> None:
    """Write a feature array as the DFI1 binary blob plus a JSON sidecar.

    Layout: magic ``DFI1``, u32 rank, u32 per-axis dims (little-endian),
    then the row-major float32 data. The sidecar ``<path>.json`` names the
    grid geometry so readers do not have to guess what the axes mean.
    """
    a = np.ascontiguousarray(np.asarray(array, dtype=np.float64), dtype="<f4")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_BLOB_MAGIC)
        fh.write(struct.pack("<I", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
        fh.write(a.tobytes(order="C"))
    sidecar = {"dims": list(a.shape), "dtype": "float32-le"}
    if meta:
        sidecar.update(meta)
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_feature_blob(path):
    """Read a DFI1 blob; returns (float64 array, sidecar dict or {})."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8 or raw[:4] != _BLOB_MAGIC:
        raise FormatError("not a DFI1 feature blob")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if rank == 0 or rank > 8:
        raise FormatError(f"implausible rank {rank}")
    header_end = 8 + 4 * rank
    if len(raw) < header_end:
        raise FormatError("truncated blob header")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    count = int(np.prod(dims))
    expected = header_end + 4 * count
    if len(raw) != expected:
        raise FormatError(f"blob payload size mismatch: {len(raw)} != {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=header_end, count=count)
    meta = {}
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        try:
            meta = json.loads(sidecar.read_text())
        except json.JSONDecodeError as e:
            raise FormatError(f"bad sidecar json: {e}") from e
    return data.astype(np.float64).reshape(dims), meta


def save_correspondences_csv(path, corr: CorrespondenceSet) -> None:
    """Write pairs as CSV with header ``px,py,X,Y,Z,score``."""
    lines = ["px,py,X,Y,Z,score"]
    for i in range(len(corr)):
        px, py = corr.pixels[i]
        x, y, z = corr.points[i]
        lines.append(
            f"{px:.17g},{py:.17g},{x:.17g},{y:.17g},{z:.17g},{corr.scores[i]:.17g}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_correspondences_csv(path) -> CorrespondenceSet:
    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != "px,py,X,Y,Z,score":
        raise FormatError("correspondence CSV must start with 'px,py,X,Y,Z,score'")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 6:
            raise FormatError(f"expected 6 columns, got {len(parts)}: {ln!r}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as e:
            raise FormatError(f"non-numeric field in row {ln!r}") from e
    data = np.array(rows, dtype=np.float64).reshape(-1, 6)
    return CorrespondenceSet(
        points=data[:, 2:5],
        pixels=data[:, 0:2],
        scores=data[:, 5],
    )
