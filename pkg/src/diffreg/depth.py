"""Point cloud to depth map rendering, densification, and exact VJPs.

Forward chain: rigid transform -> pinhole projection -> rasterization
(hard nearest-pixel z-min, or bilinear splatting with inverse-depth
blending inside an occlusion band) -> morphological densification ->
area-average resize to a small grid plus an occupancy mask.

Every non-smooth stage records which input produced each output (argmax
/ argmin / median-selection provenance, splat contributor lists), so the
backward pass is the exact vector-Jacobian product of the computation
that actually ran, not of an idealized smooth surrogate.  Gradients
land on the pose tangent and the 3D point coordinates.

Densification follows the classic sparse-lidar completion recipe: depths
are inverted against a reference maximum so dilation favors near
surfaces, then diamond 7x7 dilation, 3x3 erosion + 5x5 dilation hole
closing, 5x5 median, separable binomial 5x5 blur, re-inversion, and a
clamp to the input's occupied depth range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadDims,
    FormatError,
    NonFiniteInput,
    ProvenanceMissing,
    UnknownKind,
)
from .geometry import DEPTH_EPS, CameraIntrinsics, Pose, so3_right_jacobian, transform

__all__ = [
    "DepthMap",
    "DensifyConfig",
    "DepthChain",
    "DepthJacobian",
    "render_sparse_depth",
    "densify",
    "resize_to_latent",
    "project_to_latent",
    "depth_backward",
    "build_depth_jacobian",
    "encode_pfm",
    "decode_pfm",
    "save_pfm",
    "load_pfm",
    "save_mask_pgm",
    "load_mask_pgm",
]

_BLUR_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass(frozen=True)
class DepthMap:
    """Dense or sparse depth image; 0 marks empty, mask marks occupied."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        m = np.asarray(self.mask, dtype=bool)
        if v.ndim != 2 or m.shape != v.shape:
            raise BadDims(f"values and mask must be matching 2D arrays, got {v.shape} / {m.shape}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteInput("depth values contain non-finite entries")
        if np.any(v[~m] != 0.0):
            raise NonFiniteInput("empty pixels must hold value 0")
        if np.any(v[m] <= 0.0):
            raise NonFiniteInput("occupied pixels must hold positive depths")
        v.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", m)

    @property
    def shape(self):
        return self.values.shape

    @classmethod
    def empty(cls, height: int, width: int) -> "DepthMap":
        return cls(np.zeros((height, width)), np.zeros((height, width), dtype=bool))

    @classmethod
    def from_values(cls, values) -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, values > 0.0)


@dataclass(frozen=True)
class DensifyConfig:
    """Inversion constants for the densification pipeline."""

    invert_threshold: float = 0.1  # depths at or below this count as empty
    reference_max: float = 15.0    # inversion pivot; depths beyond it saturate

    def __post_init__(self):
        if not (np.isfinite(self.invert_threshold) and self.invert_threshold >= 0.0):
            raise NonFiniteInput("invert_threshold must be finite and non-negative")
        if not (np.isfinite(self.reference_max) and self.reference_max > self.invert_threshold):
            raise NonFiniteInput("reference_max must exceed invert_threshold")


# ---------------------------------------------------------------------------
# rasterization


def _camera_pixels(points, pose, K):
    q = transform(pose, points)
    z = q[:, 2]
    vis = z > DEPTH_EPS
    u = np.where(vis, K.fx * q[:, 0] / np.where(vis, z, 1.0) + K.cx, 0.0)
    v = np.where(vis, K.fy * q[:, 1] / np.where(vis, z, 1.0) + K.cy, 0.0)
    return q, u, v, vis


def render_sparse_depth(
    points,
    pose: Pose,
    K: CameraIntrinsics,
    mode: str = "splat",
    occlusion_band: float = 0.5,
):
    """Rasterize transformed points into a sparse DepthMap.

    hard: each point claims the nearest integer pixel, smallest depth
    wins (ties to the lowest point index).  splat: each point spreads a
    bilinear 2x2 footprint; per pixel, contributors within
    ``occlusion_band`` meters of the nearest one blend as
    sum(w) / sum(w / z), so a lone contributor yields its own depth and
    anything beyond the band is occluded outright.

    Points behind the camera simply do not land; no error.  Returns
    (DepthMap, provenance) where the provenance feeds depth_backward.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise BadDims(f"points must be (N, 3), got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise NonFiniteInput("points contain non-finite values")
    if mode not in ("hard", "splat"):
        raise UnknownKind(f"render mode must be 'hard' or 'splat', got {mode!r}")
    if not (np.isfinite(occlusion_band) and occlusion_band >= 0.0):
        raise NonFiniteInput("occlusion_band must be finite and non-negative")
    H, W = K.height, K.width
    q, u, v, vis = _camera_pixels(points, pose, K)
    z = q[:, 2]
    prov = {
        "mode": mode,
        "points": points,
        "pose": pose,
        "intrinsics": K,
        "q": q,
        "u": u,
        "v": v,
    }
    if not np.any(vis):
        dm = DepthMap.empty(H, W)
        prov["records"] = None
        prov["winner"] = None
        return dm, prov

    if mode == "hard":
        pid = np.flatnonzero(vis)
        cols = np.floor(u[pid] + 0.5).astype(np.int64)
        rows = np.floor(v[pid] + 0.5).astype(np.int64)
        ok = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
        pid, rows, cols = pid[ok], rows[ok], cols[ok]
        values = np.zeros((H, W))
        winner = np.full((H, W), -1, dtype=np.int64)
        # write in decreasing (z, pid) order so the smallest lands last
        order = np.lexsort((pid, z[pid]))[::-1]
        values[rows[order], cols[order]] = z[pid[order]]
        winner[rows[order], cols[order]] = pid[order]
        prov["winner"] = winner
        prov["records"] = None
        return DepthMap(values, winner >= 0), prov

    pid0 = np.flatnonzero(vis)
    j0 = np.floor(u[pid0]).astype(np.int64)
    i0 = np.floor(v[pid0]).astype(np.int64)
    fu = u[pid0] - j0
    fv = v[pid0] - i0
    rec_r, rec_c, rec_p, rec_w, rec_du, rec_dv = [], [], [], [], [], []
    for di in (0, 1):
        hv = fv if di == 1 else 1.0 - fv
        sv = 1.0 if di == 1 else -1.0
        for dj in (0, 1):
            hu = fu if dj == 1 else 1.0 - fu
            su = 1.0 if dj == 1 else -1.0
            w = hu * hv
            rr = i0 + di
            cc = j0 + dj
            keep = (w > 0.0) & (rr >= 0) & (rr < H) & (cc >= 0) & (cc < W)
            rec_r.append(rr[keep])
            rec_c.append(cc[keep])
            rec_p.append(pid0[keep])
            rec_w.append(w[keep])
            rec_du.append(su * hv[keep])
            rec_dv.append(sv * hu[keep])
    rr = np.concatenate(rec_r)
    cc = np.concatenate(rec_c)
    pp = np.concatenate(rec_p)
    ww = np.concatenate(rec_w)
    wdu = np.concatenate(rec_du)
    wdv = np.concatenate(rec_dv)
    lin = rr * W + cc
    zz = z[pp]
    zbuf = np.full(H * W, np.inf)
    np.minimum.at(zbuf, lin, zz)
    keep = zz <= zbuf[lin] + occlusion_band
    rr, cc, pp, ww, wdu, wdv, lin, zz = (
        a[keep] for a in (rr, cc, pp, ww, wdu, wdv, lin, zz)
    )
    sw = np.zeros(H * W)
    sinv = np.zeros(H * W)
    np.add.at(sw, lin, ww)
    np.add.at(sinv, lin, ww / zz)
    occupied = sinv > 0.0
    values = np.zeros(H * W)
    values[occupied] = sw[occupied] / sinv[occupied]
    values = values.reshape(H, W)
    prov["records"] = {
        "rows": rr, "cols": cc, "pid": pp, "w": ww,
        "dwdu": wdu, "dwdv": wdv, "sw": sw, "sinv": sinv,
    }
    prov["winner"] = None
    return DepthMap(values, occupied.reshape(H, W)), prov


# ---------------------------------------------------------------------------
# morphology with provenance


def _diamond_offsets(radius):
    out = []
    for di in range(-radius, radius + 1):
        for dj in range(-radius, radius + 1):
            if abs(di) + abs(dj) <= radius:
                out.append((di, dj))
    return out


def _square_offsets(radius):
    return [(di, dj) for di in range(-radius, radius + 1) for dj in range(-radius, radius + 1)]

_DIAMOND7 = _diamond_offsets(3)
_SQUARE3 = _square_offsets(1)
_SQUARE5 = _square_offsets(2)


def _morph(field, offsets, find_max):
    """Dilation (find_max) or erosion over clipped windows.

    Ties resolve to the earliest offset in raster order (strict
    improvement only), so provenance is deterministic.  Returns
    (result, source linear index per output pixel).
    """
    H, W = field.shape
    best = np.full((H, W), -np.inf if find_max else np.inf)
    src = np.full((H, W), -1, dtype=np.int64)
    lin = np.arange(H * W, dtype=np.int64).reshape(H, W)
    for di, dj in offsets:
        rs = slice(max(0, -di), min(H, H - di))
        cs = slice(max(0, -dj), min(W, W - dj))
        rs_in = slice(max(0, di), min(H, H + di))
        cs_in = slice(max(0, dj), min(W, W + dj))
        cand = field[rs_in, cs_in]
        cur = best[rs, cs]
        better = cand > cur if find_max else cand < cur
        cur[better] = cand[better]
        best[rs, cs] = cur
        s = src[rs, cs]
        s[better] = lin[rs_in, cs_in][better]
        src[rs, cs] = s
    return best, src


def _median5(field):
    """5x5 lower-median over clipped windows; zeros participate.

    Returns (result, source linear index of the selected element).
    """
    H, W = field.shape
    stack = np.full((25, H, W), np.inf)
    srcs = np.full((25, H, W), -1, dtype=np.int64)
    lin = np.arange(H * W, dtype=np.int64).reshape(H, W)
    for k, (di, dj) in enumerate(_SQUARE5):
        rs = slice(max(0, -di), min(H, H - di))
        cs = slice(max(0, -dj), min(W, W - dj))
        rs_in = slice(max(0, di), min(H, H + di))
        cs_in = slice(max(0, dj), min(W, W + dj))
        stack[k][rs, cs] = field[rs_in, cs_in]
        srcs[k][rs, cs] = lin[rs_in, cs_in]
    counts = np.sum(np.isfinite(stack), axis=0)
    order = np.argsort(stack, axis=0, kind="stable")
    sel = ((counts - 1) // 2).astype(np.int64)[None]
    pick = np.take_along_axis(order, sel, axis=0)
    med = np.take_along_axis(stack, pick, axis=0)[0]
    src = np.take_along_axis(srcs, pick, axis=0)[0]
    return med, src


def _blur1d(a, axis):
    n = a.shape[axis]
    if n < 3:  # reflect padding undefined; pass through
        return a.copy()
    ap = np.pad(a, [(2, 2) if ax == axis else (0, 0) for ax in range(2)], mode="reflect")
    out = np.zeros_like(a)
    sl = [slice(None), slice(None)]
    for i in range(5):
        sl[axis] = slice(i, i + n)
        out += _BLUR_KERNEL[i] * ap[tuple(sl)]
    return out


def _blur1d_adjoint(g, axis):
    n = g.shape[axis]
    if n < 3:
        return g.copy()
    shape = list(g.shape)
    shape[axis] = n + 4
    zp = np.zeros(shape)
    sl = [slice(None), slice(None)]
    for i in range(5):
        sl[axis] = slice(i, i + n)
        zp[tuple(sl)] += _BLUR_KERNEL[i] * g
    def take(idx):
        s = [slice(None), slice(None)]
        s[axis] = idx
        return zp[tuple(s)]
    core = take(slice(2, 2 + n)).copy()
    def fold(core_idx, pad_idx):
        s = [slice(None), slice(None)]
        s[axis] = core_idx
        core[tuple(s)] += take(pad_idx)
    fold(1, 1)
    fold(2, 0)
    fold(n - 2, n + 2)
    fold(n - 3, n + 3)
    return core


def _blur2d(a):
    return _blur1d(_blur1d(a, 0), 1)


def _blur2d_adjoint(g):
    return _blur1d_adjoint(_blur1d_adjoint(g, 1), 0)


def _densify_stages(sparse: DepthMap, config: DensifyConfig):
    H, W = sparse.shape
    valid = sparse.values > config.invert_threshold
    if not np.any(valid):
        return DepthMap.empty(H, W), None
    # inversion pivot: near surfaces become large so max-morphology favors them;
    # depths at/beyond reference_max saturate to a small positive floor
    inv = np.zeros((H, W))
    raw_inv = config.reference_max - sparse.values[valid]
    floor_active = raw_inv < 0.01
    inv[valid] = np.maximum(raw_inv, 0.01)
    d1, src1 = _morph(inv, _DIAMOND7, find_max=True)
    er, src2 = _morph(d1, _SQUARE3, find_max=False)
    d2, src3 = _morph(er, _SQUARE5, find_max=True)
    med, src4 = _median5(d2)
    occ = med > 0.0
    blurred = np.where(occ, _blur2d(med), 0.0)
    lo = float(np.min(sparse.values[valid]))
    hi = float(np.max(sparse.values[valid]))
    vlin = np.flatnonzero(valid.ravel())
    lo_src = int(vlin[np.argmin(sparse.values.ravel()[vlin])])
    hi_src = int(vlin[np.argmax(sparse.values.ravel()[vlin])])
    raw_depth = np.where(occ, config.reference_max - blurred, 0.0)
    out = np.where(occ, np.clip(raw_depth, lo, hi), 0.0)
    stages = {
        "valid": valid,
        "floor_active": floor_active,
        "src1": src1, "src2": src2, "src3": src3, "src4": src4,
        "occ": occ,
        "clip_lo": (raw_depth < lo) & occ,
        "clip_hi": (raw_depth > hi) & occ,
        "lo_src": lo_src,
        "hi_src": hi_src,
    }
    return DepthMap(out, occ), stages


def densify(sparse: DepthMap, config: DensifyConfig | None = None) -> DepthMap:
    """Morphological completion of a sparse depth map (see module docs)."""
    return _densify_stages(sparse, config or DensifyConfig())[0]


def _densify_backward(upstream, stages, config: DensifyConfig):
    """Exact VJP of the densification pipeline onto the sparse input."""
    g = np.where(stages["occ"], upstream, 0.0)
    # clamp: interior passes through; clamped cells depend on the extreme
    # input pixel that defined the bound
    g_lo = float(np.sum(g[stages["clip_lo"]]))
    g_hi = float(np.sum(g[stages["clip_hi"]]))
    g = np.where(stages["clip_lo"] | stages["clip_hi"], 0.0, g)
    g_blur = np.where(stages["occ"], -g, 0.0)  # depth = ref - blurred
    g_med = _blur2d_adjoint(g_blur)
    size = g.size

    def scatter(grads, src):
        out = np.zeros(size)
        live = src.ravel() >= 0
        np.add.at(out, src.ravel()[live], grads.ravel()[live])
        return out.reshape(grads.shape)

    g_d2 = scatter(g_med, stages["src4"])
    g_er = scatter(g_d2, stages["src3"])
    g_d1 = scatter(g_er, stages["src2"])
    g_inv = scatter(g_d1, stages["src1"])
    g_sparse = np.zeros_like(g_inv)
    valid = stages["valid"]
    g_sparse[valid] = -g_inv[valid]
    g_sparse[valid] = np.where(stages["floor_active"], 0.0, g_sparse[valid])
    g_sparse.ravel()[stages["lo_src"]] += g_lo
    g_sparse.ravel()[stages["hi_src"]] += g_hi
    return g_sparse


# ---------------------------------------------------------------------------
# latent resize


def resize_to_latent(dense: DepthMap, h: int, w: int):
    """Block-average the occupied pixels into an h x w grid.

    Each output cell covers an (H/h) x (W/w) block; its value is the
    mean of occupied depths inside, its mask flag is whether any source
    pixel in the block is occupied.  Requires exact divisibility.
    """
    H, W = dense.shape
    if h < 1 or w < 1 or h > H or w > W:
        raise BadDims(f"latent dims {h}x{w} must be within 1..{H} x 1..{W}")
    if H % h != 0 or W % w != 0:
        raise BadDims(f"latent dims {h}x{w} must divide map dims {H}x{W}")
    bh, bw = H // h, W // w
    blocks_v = dense.values.reshape(h, bh, w, bw)
    blocks_m = dense.mask.reshape(h, bh, w, bw)
    counts = blocks_m.sum(axis=(1, 3))
    sums = blocks_v.sum(axis=(1, 3))
    mask = counts > 0
    values = np.zeros((h, w))
    values[mask] = sums[mask] / counts[mask]
    return values, mask


def _resize_backward(upstream, dense_mask, h, w):
    H, W = dense_mask.shape
    bh, bw = H // h, W // w
    counts = dense_mask.reshape(h, bh, w, bw).sum(axis=(1, 3))
    scale = np.zeros((h, w))
    occ = counts > 0
    scale[occ] = upstream[occ] / counts[occ]
    spread = np.broadcast_to(scale[:, None, :, None], (h, bh, w, bw)).reshape(H, W)
    return np.where(dense_mask, spread, 0.0)


# ---------------------------------------------------------------------------
# full chain


@dataclass
class DepthChain:
    """Forward results plus everything the backward pass needs."""

    mode: str
    sparse: DepthMap
    dense: DepthMap
    latent: np.ndarray
    latent_mask: np.ndarray
    provenance: dict | None = field(repr=False, default=None)


def project_to_latent(
    points,
    pose: Pose,
    K: CameraIntrinsics,
    latent_h: int | None = None,
    latent_w: int | None = None,
    mode: str = "splat",
    occlusion_band: float = 0.5,
    config: DensifyConfig | None = None,
) -> DepthChain:
    """Run render -> densify -> resize and keep provenance for backward."""
    config = config or DensifyConfig()
    if latent_h is None:
        latent_h = max(1, K.height // 8)
    if latent_w is None:
        latent_w = max(1, K.width // 8)
    sparse, raster_prov = render_sparse_depth(points, pose, K, mode, occlusion_band)
    dense, stages = _densify_stages(sparse, config)
    latent, latent_mask = resize_to_latent(dense, latent_h, latent_w)
    prov = {
        "raster": raster_prov,
        "stages": stages,
        "config": config,
        "dense_mask": dense.mask,
        "latent_shape": (latent_h, latent_w),
    }
    return DepthChain(
        mode=mode, sparse=sparse, dense=dense,
        latent=latent, latent_mask=latent_mask, provenance=prov,
    )


def _raster_backward(g_sparse, raster_prov):
    points = raster_prov["points"]
    pose = raster_prov["pose"]
    K = raster_prov["intrinsics"]
    q = raster_prov["q"]
    n = points.shape[0]
    grad_q = np.zeros((n, 3))
    if raster_prov["mode"] == "hard":
        winner = raster_prov["winner"]
        if winner is not None:
            occ = winner >= 0
            np.add.at(grad_q[:, 2], winner[occ], g_sparse[occ])
    else:
        rec = raster_prov["records"]
        if rec is not None:
            rr, cc, pp, ww = rec["rows"], rec["cols"], rec["pid"], rec["w"]
            lin = rr * K.width + cc
            sw, sinv = rec["sw"][lin], rec["sinv"][lin]
            zz = q[pp, 2]
            val = sw / sinv
            gpix = g_sparse[rr, cc]
            gw = gpix * (1.0 - val / zz) / sinv
            gz = gpix * val * ww / (sinv * zz * zz)
            gu = gw * rec["dwdu"]
            gv = gw * rec["dwdv"]
            # pixel coords back to camera coords
            zi = 1.0 / zz
            gq = np.zeros((len(pp), 3))
            gq[:, 0] = gu * K.fx * zi
            gq[:, 1] = gv * K.fy * zi
            gq[:, 2] = (
                gz - gu * K.fx * q[pp, 0] * zi * zi - gv * K.fy * q[pp, 1] * zi * zi
            )
            np.add.at(grad_q, pp, gq)
    R = pose.rotation
    grad_points = grad_q @ R
    # d(R(w) x + t)/dw = -R [x]_x J_r(w), d/dt = I
    Jr = so3_right_jacobian(pose.tangent[:3])
    hats = np.zeros((n, 3, 3))
    p = points
    hats[:, 0, 1] = -p[:, 2]
    hats[:, 0, 2] = p[:, 1]
    hats[:, 1, 0] = p[:, 2]
    hats[:, 1, 2] = -p[:, 0]
    hats[:, 2, 0] = -p[:, 1]
    hats[:, 2, 1] = p[:, 0]
    dq_dw = -np.einsum("ab,nbc,cd->nad", R, hats, Jr)
    grad_tangent = np.zeros(6)
    grad_tangent[:3] = np.einsum("nab,na->b", dq_dw, grad_q)
    grad_tangent[3:] = grad_q.sum(axis=0)
    return grad_tangent, grad_points


def depth_backward(upstream, chain: DepthChain):
    """Pull latent-grid gradients back to (pose tangent, point coords)."""
    if chain.provenance is None:
        raise ProvenanceMissing("chain carries no provenance; re-run project_to_latent")
    upstream = np.asarray(upstream, dtype=np.float64)
    prov = chain.provenance
    h, w = prov["latent_shape"]
    if upstream.shape != (h, w):
        raise BadDims(f"upstream must be ({h}, {w}), got {upstream.shape}")
    if not np.all(np.isfinite(upstream)):
        raise NonFiniteInput("upstream gradient contains non-finite values")
    raster_prov = prov["raster"]
    n = raster_prov["points"].shape[0]
    if prov["stages"] is None:  # nothing rendered: constant-zero forward
        return np.zeros(6), np.zeros((n, 3))
    g_dense = _resize_backward(upstream, prov["dense_mask"], h, w)
    g_sparse = _densify_backward(g_dense, prov["stages"], prov["config"])
    return _raster_backward(g_sparse, raster_prov)


@dataclass(frozen=True)
class DepthJacobian:
    """Per-latent-pixel sparse Jacobian rows w.r.t. point coordinates.

    entries maps (i, j) of an occupied latent pixel to a list of
    (point index, 3-vector d latent[i,j] / d point) pairs.
    """

    shape: tuple
    entries: dict

    def __post_init__(self):
        for (i, j) in self.entries:
            if not (0 <= i < self.shape[0] and 0 <= j < self.shape[1]):
                raise BadDims(f"entry ({i}, {j}) outside latent shape {self.shape}")


def build_depth_jacobian(chain: DepthChain, tol: float = 0.0) -> DepthJacobian:
    """Assemble the sparse latent-to-points Jacobian row by row.

    Runs one backward pass per occupied latent pixel; meant for
    diagnostics and tests, not inner loops.
    """
    h, w = chain.latent.shape
    entries = {}
    for i, j in zip(*np.nonzero(chain.latent_mask)):
        basis = np.zeros((h, w))
        basis[i, j] = 1.0
        _, grad_points = depth_backward(basis, chain)
        rows = np.flatnonzero(np.abs(grad_points).sum(axis=1) > tol)
        if rows.size:
            entries[(int(i), int(j))] = [(int(r), grad_points[r].copy()) for r in rows]
    return DepthJacobian(shape=(h, w), entries=entries)


# ---------------------------------------------------------------------------
# file formats


def encode_pfm(values) -> bytes:
    """Grayscale PFM bytes, little-endian (negative scale), rows bottom-up."""
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2:
        raise BadDims(f"PFM payload must be 2D, got {a.shape}")
    header = f"Pf\n{a.shape[1]} {a.shape[0]}\n-1.0\n".encode("ascii")
    return header + a[::-1].astype("<f4").tobytes(order="C")


def decode_pfm(blob: bytes) -> np.ndarray:
    try:
        magic, dims, scale_rest = blob.split(b"\n", 2)
        if magic != b"Pf":
            raise FormatError(f"not a grayscale PFM: magic {magic!r}")
        width, height = (int(t) for t in dims.split())
        scale_txt, payload = scale_rest.split(b"\n", 1)
        scale = float(scale_txt)
    except (ValueError, FormatError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed PFM header: {exc}") from exc
    dtype = "<f4" if scale < 0 else ">f4"
    expect = width * height * 4
    if len(payload) != expect:
        raise FormatError(f"PFM payload is {len(payload)} bytes, expected {expect}")
    rows = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return rows[::-1].astype(np.float64)


def save_pfm(path, values) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pfm(values))


def load_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pfm(fh.read())


def save_mask_pgm(path, mask) -> None:
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2:
        raise BadDims(f"mask must be 2D, got {m.shape}")
    with open(path, "wb") as fh:
        fh.write(b"P5\n")
        fh.write(f"{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii"))
        fh.write((m.astype(np.uint8) * 255).tobytes(order="C"))


def load_mask_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        magic, dims, rest = blob.split(b"\n", 2)
        if magic != b"P5":
            raise FormatError(f"not a binary PGM: magic {magic!r}")
        width, height = (int(t) for t in dims.split())
        maxval_txt, payload = rest.split(b"\n", 1)
        if int(maxval_txt) != 255:
            raise FormatError("mask PGM must use maxval 255")
    except (ValueError, FormatError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed PGM header: {exc}") from exc
    if len(payload) != width * height:
        raise FormatError(f"PGM payload is {len(payload)} bytes, expected {width * height}")
    return (np.frombuffer(payload, dtype=np.uint8).reshape(height, width) > 0)
