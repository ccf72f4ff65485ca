"""Pose solving from 2D-3D correspondences, and its backward pass.

Forward path: ``epnp_solve`` gives a closed-form-ish initial pose,
``refine_pose`` polishes it by damped Gauss-Newton on the reprojection
cost, ``ransac_pnp`` wraps both behind a consensus loop for outlier
contaminated input.

Backward path: ``bpnp_backward`` differentiates the argmin pose with
respect to the input points and pixels through the stationarity
condition of the reprojection cost (implicit function theorem).  The
first-order optimality vector f(theta) = d cost / d theta is computed
analytically; its second derivatives are taken by central finite
differences of f.

Cost convention: cost(theta) = sum_i ||project(R x_i + t) - y_i||^2 in
pixels, with theta the 6-vector [axis-angle | translation].  Reported
``reprojection_rmse`` is the RMS over the 2N scalar residual entries,
so an isotropic pixel noise sigma shows up as rmse ~= sigma.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BadDims,
    DegenerateConfiguration,
    NoConsensus,
    NonFiniteInput,
    NonPositiveDepth,
    NotStationary,
    NumericalFailure,
    SingularHessian,
    TooFewCorrespondences,
)
from .geometry import (
    DEPTH_EPS,
    CameraIntrinsics,
    Pose,
    pose_from_tangent,
    pose_to_tangent,
    rotation_from_axis_angle,
    so3_right_jacobian,
)
from .matching import CorrespondenceSet

_DAMPING_INIT = 1e-3
_DAMPING_MAX = 1e12
_STATIONARITY_TOL = 1e-6
_HESSIAN_COND_MAX = 1e12

__all__ = [
    "PnPResult",
    "PnPGradients",
    "epnp_solve",
    "refine_pose",
    "ransac_pnp",
    "bpnp_backward",
    "rigid_align",
    "reprojection_residuals",
    "reprojection_rmse",
    "reprojection_gradient",
]


@dataclass(frozen=True)
class PnPResult:
    """Solved pose plus diagnostics.

    ``iterations`` counts accepted Gauss-Newton steps (0 for the
    algebraic EPnP solution, which also reports ``converged=False``
    because no stationarity test was run).
    """

    pose: Pose
    reprojection_rmse: float
    iterations: int
    converged: bool

    def __post_init__(self):
        if not (np.isfinite(self.reprojection_rmse) and self.reprojection_rmse >= 0.0):
            raise NonFiniteInput("reprojection_rmse must be finite and non-negative")
        if self.iterations < 0:
            raise BadDims("iterations must be non-negative")


@dataclass(frozen=True)
class PnPGradients:
    """Gradients of a scalar loss w.r.t. solver inputs.

    grad_points: (N, 3) w.r.t. the 3D points, grad_pixels: (N, 2)
    w.r.t. the observed pixels.
    """

    grad_points: np.ndarray
    grad_pixels: np.ndarray

    def __post_init__(self):
        gx = np.asarray(self.grad_points, dtype=np.float64)
        gy = np.asarray(self.grad_pixels, dtype=np.float64)
        if gx.ndim != 2 or gx.shape[1] != 3:
            raise BadDims(f"grad_points must be (N, 3), got {gx.shape}")
        if gy.shape != (gx.shape[0], 2):
            raise BadDims(f"grad_pixels must be ({gx.shape[0]}, 2), got {gy.shape}")
        if not (np.all(np.isfinite(gx)) and np.all(np.isfinite(gy))):
            raise NonFiniteInput("gradients contain non-finite values")
        gx.setflags(write=False)
        gy.setflags(write=False)
        object.__setattr__(self, "grad_points", gx)
        object.__setattr__(self, "grad_pixels", gy)


# ---------------------------------------------------------------------------
# residuals and analytic first derivatives


def _hat_batch(p: np.ndarray) -> np.ndarray:
    """Skew matrices for each row of p: out[i] @ v == cross(p[i], v)."""
    n = p.shape[0]
    out = np.zeros((n, 3, 3))
    out[:, 0, 1] = -p[:, 2]
    out[:, 0, 2] = p[:, 1]
    out[:, 1, 0] = p[:, 2]
    out[:, 1, 2] = -p[:, 0]
    out[:, 2, 0] = -p[:, 1]
    out[:, 2, 1] = p[:, 0]
    return out


def _residuals_jacobian(theta, points, pixels, K, with_jacobian=True):
    """Flattened residual vector (2N,) and its Jacobian (2N, 6).

    Raises NonPositiveDepth when any transformed point is at or behind
    the camera plane; callers that probe candidate steps catch it.
    """
    w = theta[:3]
    t = theta[3:]
    R = rotation_from_axis_angle(w)
    q = points @ R.T + t
    z = q[:, 2]
    if np.any(z <= DEPTH_EPS):
        raise NonPositiveDepth("correspondence behind camera during PnP evaluation")
    inv_z = 1.0 / z
    u = K.fx * q[:, 0] * inv_z + K.cx
    v = K.fy * q[:, 1] * inv_z + K.cy
    r = np.column_stack([u, v]) - pixels
    if not with_jacobian:
        return r.ravel(), None
    n = points.shape[0]
    A = np.zeros((n, 2, 3))  # d project / d camera-point
    A[:, 0, 0] = K.fx * inv_z
    A[:, 0, 2] = -K.fx * q[:, 0] * inv_z * inv_z
    A[:, 1, 1] = K.fy * inv_z
    A[:, 1, 2] = -K.fy * q[:, 1] * inv_z * inv_z
    # d(R(w) x)/dw = -R [x]_x J_r(w); d q / d t = I
    Jr = so3_right_jacobian(w)
    dq_dw = -np.einsum("ab,nbc,cd->nad", R, _hat_batch(points), Jr)
    Jw = np.einsum("nab,nbc->nac", A, dq_dw)
    J = np.concatenate([Jw, A], axis=2).reshape(2 * n, 6)
    return r.ravel(), J


def _gradient(theta, points, pixels, K) -> np.ndarray:
    r, J = _residuals_jacobian(theta, points, pixels, K)
    return 2.0 * (J.T @ r)


def reprojection_residuals(pose: Pose, corr: CorrespondenceSet, K: CameraIntrinsics) -> np.ndarray:
    """Signed residuals project(pose(x)) - y, shape (N, 2)."""
    r, _ = _residuals_jacobian(
        pose_to_tangent(pose), corr.points, corr.pixels, K, with_jacobian=False
    )
    return r.reshape(-1, 2)


def reprojection_rmse(pose: Pose, corr: CorrespondenceSet, K: CameraIntrinsics) -> float:
    r = reprojection_residuals(pose, corr, K).ravel()
    return float(np.sqrt(np.mean(r * r)))


def reprojection_gradient(pose: Pose, corr: CorrespondenceSet, K: CameraIntrinsics) -> np.ndarray:
    """Gradient of the summed squared reprojection cost w.r.t. the pose tangent.

    This is the first-order optimality vector: it vanishes exactly at a
    local minimum of the cost, which is what ``bpnp_backward`` requires.
    """
    return _gradient(pose_to_tangent(pose), corr.points, corr.pixels, K)


def _point_errors(R, t, points, pixels, K) -> np.ndarray:
    """Per-point reprojection error norms; inf for points at/behind the camera."""
    q = points @ R.T + t
    z = q[:, 2]
    err = np.full(points.shape[0], np.inf)
    ok = z > DEPTH_EPS
    if np.any(ok):
        u = K.fx * q[ok, 0] / z[ok] + K.cx
        v = K.fy * q[ok, 1] / z[ok] + K.cy
        err[ok] = np.hypot(u - pixels[ok, 0], v - pixels[ok, 1])
    return err


def _rmse_from_norms(err: np.ndarray) -> float:
    # per-coordinate RMS: each err entry is a 2-vector norm
    return float(np.sqrt(np.mean(err * err) / 2.0))


# ---------------------------------------------------------------------------
# rigid alignment (used by EPnP and exposed for tests / tooling)


def rigid_align(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rigid transform with R @ src + t ~= dst (Horn / SVD).

    Needs the centered source-destination cross-covariance to have rank
    at least 2; below that the rotation is not unique and
    DegenerateConfiguration is raised.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.ndim != 2 or src.shape[1] != 3 or src.shape != dst.shape:
        raise BadDims(f"rigid_align needs matching (N, 3) arrays, got {src.shape} / {dst.shape}")
    if src.shape[0] < 3:
        raise TooFewCorrespondences("rigid_align needs at least 3 points")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise NonFiniteInput("rigid_align inputs contain non-finite values")
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, sig, Vt = np.linalg.svd(H)
    if sig[1] <= sig[0] * 1e-12:
        raise DegenerateConfiguration("point sets do not determine a unique rotation")
    D = np.eye(3)
    if np.linalg.det(Vt.T @ U.T) < 0.0:
        D[2, 2] = -1.0
    R = Vt.T @ D @ U.T
    return Pose.from_rt(R, cd - R @ cs)


# ---------------------------------------------------------------------------
# EPnP

_CTRL_PAIRS = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
# quadratic monomial order: B11 B12 B22 B13 B23 B33 B14 B24 B34 B44
_BETA_MONOMIALS = ((0, 0), (0, 1), (1, 1), (0, 2), (1, 2), (2, 2), (0, 3), (1, 3), (2, 3), (3, 3))


def _control_points(points: np.ndarray) -> np.ndarray:
    """Centroid plus principal axes scaled by sqrt of covariance eigenvalues."""
    c = points.mean(axis=0)
    centered = points - c
    cov = centered.T @ centered / points.shape[0]
    evals, evecs = np.linalg.eigh(cov)  # ascending
    ctrl = [c]
    for k in (2, 1, 0):
        ctrl.append(c + np.sqrt(max(float(evals[k]), 0.0)) * evecs[:, k])
    return np.asarray(ctrl)


def _barycentric(ctrl: np.ndarray, points: np.ndarray) -> np.ndarray:
    C = np.vstack([ctrl.T, np.ones(4)])
    if np.linalg.cond(C) > 1e10:
        raise DegenerateConfiguration("control points are (near-)coplanar")
    B = np.vstack([points.T, np.ones(points.shape[0])])
    return np.linalg.solve(C, B).T


def _epnp_system(alphas, pixels, K) -> np.ndarray:
    n = pixels.shape[0]
    u = pixels[:, 0]
    v = pixels[:, 1]
    M = np.zeros((2 * n, 12))
    for j in range(4):
        a = alphas[:, j]
        M[0::2, 3 * j + 0] = a * K.fx
        M[0::2, 3 * j + 2] = a * (K.cx - u)
        M[1::2, 3 * j + 1] = a * K.fy
        M[1::2, 3 * j + 2] = a * (K.cy - v)
    return M


def _betas_approx(L: np.ndarray, rho: np.ndarray, case: int) -> np.ndarray:
    """Linearized seeds for the beta refinement, one per assumed sparsity."""
    betas = np.zeros(4)
    if case == 1:
        x = np.linalg.lstsq(L[:, [0, 1, 3, 6]], rho, rcond=None)[0]
        if x[0] < 0.0:
            b1 = np.sqrt(-x[0])
            rest = -x[1:] / b1 if b1 > 0.0 else np.zeros(3)
        else:
            b1 = np.sqrt(x[0])
            rest = x[1:] / b1 if b1 > 0.0 else np.zeros(3)
        betas[0] = b1
        betas[1:] = rest
    elif case == 2:
        x = np.linalg.lstsq(L[:, [0, 1, 2]], rho, rcond=None)[0]
        if x[0] < 0.0:
            betas[0] = np.sqrt(-x[0])
            betas[1] = np.sqrt(-x[2]) if x[2] < 0.0 else 0.0
        else:
            betas[0] = np.sqrt(x[0])
            betas[1] = np.sqrt(x[2]) if x[2] > 0.0 else 0.0
        if x[1] < 0.0:
            betas[0] = -betas[0]
    else:
        x = np.linalg.lstsq(L[:, [0, 1, 2, 3, 4]], rho, rcond=None)[0]
        if x[0] < 0.0:
            betas[0] = np.sqrt(-x[0])
            betas[1] = np.sqrt(-x[2]) if x[2] < 0.0 else 0.0
        else:
            betas[0] = np.sqrt(x[0])
            betas[1] = np.sqrt(x[2]) if x[2] > 0.0 else 0.0
        if x[1] < 0.0:
            betas[0] = -betas[0]
        betas[2] = x[3] / betas[0] if betas[0] != 0.0 else 0.0
    return betas


def _refine_betas(S: np.ndarray, rho: np.ndarray, betas: np.ndarray, iters: int = 10) -> np.ndarray:
    """Gauss-Newton on ||sum_k beta_k s_k(pair)||^2 - rho(pair)."""
    for _ in range(iters):
        d = np.einsum("k,kpd->pd", betas, S)
        res = np.einsum("pd,pd->p", d, d) - rho
        Jb = 2.0 * np.einsum("pd,kpd->pk", d, S)
        try:
            step = np.linalg.lstsq(Jb, -res, rcond=None)[0]
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        betas = betas + step
    return betas


def epnp_solve(corr: CorrespondenceSet, K: CameraIntrinsics) -> PnPResult:
    """Algebraic pose estimate; no iterative refinement on the pose itself.

    The cloud is expressed in a barycentric basis of 4 control points;
    their camera coordinates live in the (approximate) null space of the
    projection constraints.  The combination weights are fixed by
    preserving control point distances, the sign by requiring positive
    depths, and the final pose by rigid alignment.  The best of the
    three classic sparsity seeds is returned (lowest reprojection RMSE).
    """
    points = corr.points
    pixels = corr.pixels
    n = points.shape[0]
    if n < 4:
        raise TooFewCorrespondences(f"EPnP needs at least 4 correspondences, got {n}")
    ctrl = _control_points(points)
    alphas = _barycentric(ctrl, points)
    M = _epnp_system(alphas, pixels, K)
    _, evecs = np.linalg.eigh(M.T @ M)
    V = evecs[:, :4]  # ascending eigenvalues: near-null space first
    S = np.empty((4, 6, 3))
    for k in range(4):
        vk = V[:, k].reshape(4, 3)
        for p, (i, j) in enumerate(_CTRL_PAIRS):
            S[k, p] = vk[i] - vk[j]
    diffs = np.asarray([ctrl[i] - ctrl[j] for i, j in _CTRL_PAIRS])
    rho = np.einsum("pd,pd->p", diffs, diffs)
    L = np.empty((6, 10))
    for col, (a, b) in enumerate(_BETA_MONOMIALS):
        dot = np.einsum("pd,pd->p", S[a], S[b])
        L[:, col] = dot if a == b else 2.0 * dot
    best_rmse = np.inf
    best_pose = None
    for case in (1, 2, 3):
        betas = _refine_betas(S, rho, _betas_approx(L, rho, case))
        cc = (V @ betas).reshape(4, 3)
        pc = alphas @ cc
        if pc[:, 2].mean() < 0.0:  # null vectors carry an arbitrary sign
            pc = -pc
        try:
            pose = rigid_align(points, pc)
        except DegenerateConfiguration:
            continue
        err = _point_errors(pose.rotation, pose.translation, points, pixels, K)
        rmse = _rmse_from_norms(err)
        if rmse < best_rmse:
            best_rmse = rmse
            best_pose = pose
    if best_pose is None or not np.isfinite(best_rmse):
        raise DegenerateConfiguration("no EPnP candidate produced a valid pose")
    return PnPResult(pose=best_pose, reprojection_rmse=best_rmse, iterations=0, converged=False)


# ---------------------------------------------------------------------------
# Gauss-Newton refinement


def refine_pose(
    init: Pose,
    corr: CorrespondenceSet,
    K: CameraIntrinsics,
    max_iters: int = 100,
    tol: float = 1e-8,
) -> PnPResult:
    """Damped Gauss-Newton on the reprojection cost from ``init``.

    Levenberg damping is multiplicative: start 1e-3, x10 on a rejected
    step, /10 on an accepted one; a step is accepted only on strict cost
    decrease.  Convergence means the optimality vector satisfies
    ||f||_inf <= tol, tested before stepping, so a stationary ``init``
    returns with 0 iterations.
    """
    points = corr.points
    pixels = corr.pixels
    n = points.shape[0]
    if n < 3:
        raise TooFewCorrespondences(f"refine_pose needs at least 3 correspondences, got {n}")
    theta = pose_to_tangent(init)
    r, J = _residuals_jacobian(theta, points, pixels, K)
    cost = float(r @ r)
    f = 2.0 * (J.T @ r)
    lam = _DAMPING_INIT
    accepted = 0
    while accepted < max_iters and np.max(np.abs(f)) > tol:
        H = J.T @ J
        g = J.T @ r
        stepped = False
        solved_any = False
        while lam <= _DAMPING_MAX:
            try:
                delta = np.linalg.solve(H + lam * np.eye(6), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            if not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            solved_any = True
            try:
                r_new, J_new = _residuals_jacobian(theta + delta, points, pixels, K)
            except NonPositiveDepth:
                lam *= 10.0
                continue
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                theta = theta + delta
                r, J, cost = r_new, J_new, cost_new
                f = 2.0 * (J.T @ r)
                lam = max(lam / 10.0, 1e-15)
                accepted += 1
                stepped = True
                break
            lam *= 10.0
        if not stepped:
            if not solved_any:
                raise NumericalFailure("normal equations unsolvable at maximum damping")
            break  # stalled: no strictly decreasing step exists at this damping range
    converged = bool(np.max(np.abs(f)) <= tol)
    return PnPResult(
        pose=pose_from_tangent(theta),
        reprojection_rmse=float(np.sqrt(cost / (2 * n))),
        iterations=accepted,
        converged=converged,
    )


# ---------------------------------------------------------------------------
# RANSAC


def ransac_pnp(
    corr: CorrespondenceSet,
    K: CameraIntrinsics,
    threshold_px: float = 8.0,
    max_iters: int = 500,
    seed: int = 0,
) -> tuple[PnPResult, np.ndarray]:
    """Consensus PnP: minimal 4-point EPnP hypotheses, refine on the winner.

    Hypotheses are pre-generated from ``seed`` and ranked by
    (support count, -inlier RMSE, -hypothesis index), so the result is
    reproducible bit-for-bit regardless of evaluation order.  Support
    counts only inliers outside the minimal sample: a 4-point fit always
    explains its own sample, so those points are no evidence of
    consensus.  The returned mask is recomputed under the refined pose
    and covers every correspondence within the threshold.
    """
    n = len(corr)
    if n < 4:
        raise TooFewCorrespondences(f"RANSAC needs at least 4 correspondences, got {n}")
    if not (np.isfinite(threshold_px) and threshold_px > 0.0):
        raise BadDims("threshold_px must be positive and finite")
    rng = np.random.default_rng(seed)
    samples = [rng.choice(n, size=4, replace=False) for _ in range(max_iters)]
    best_key = None
    best_pose = None
    for h, sel in enumerate(samples):
        try:
            cand = epnp_solve(corr.take(sel), K).pose
        except (DegenerateConfiguration, NumericalFailure):
            continue
        err = _point_errors(cand.rotation, cand.translation, corr.points, corr.pixels, K)
        mask = err < threshold_px
        support = int(mask.sum()) - int(mask[sel].sum())
        if support < 4:
            continue
        key = (support, -_rmse_from_norms(err[mask]), -h)
        if best_key is None or key > best_key:
            best_key = key
            best_pose = cand
            best_mask = mask
    if best_key is None:
        raise NoConsensus("no hypothesis gathered 4 supporting inliers beyond its sample")
    refined = refine_pose(best_pose, corr.take(np.flatnonzero(best_mask)), K)
    err = _point_errors(
        refined.pose.rotation, refined.pose.translation, corr.points, corr.pixels, K
    )
    final_mask = err < threshold_px
    if int(final_mask.sum()) < 4:
        raise NoConsensus("consensus collapsed below 4 inliers after refinement")
    return refined, final_mask


# ---------------------------------------------------------------------------
# backward pass through the argmin


def bpnp_backward(
    pose: Pose,
    corr: CorrespondenceSet,
    K: CameraIntrinsics,
    grad_pose: np.ndarray,
) -> PnPGradients:
    """Pull a gradient w.r.t. the solved pose tangent back to the inputs.

    At a stationary pose, f(theta*, x, y) = 0 implicitly defines
    theta*(x, y); then d theta*/dx = -H^-1 df/dx with H = df/dtheta, and
    the input gradients are the transposed products with ``grad_pose``.
    f is analytic; H, df/dx, df/dy use central differences of f with
    step 1e-6 * max(1, |coordinate|).
    """
    grad_pose = np.asarray(grad_pose, dtype=np.float64)
    if grad_pose.shape != (6,):
        raise BadDims(f"grad_pose must be shape (6,), got {grad_pose.shape}")
    if not np.all(np.isfinite(grad_pose)):
        raise NonFiniteInput("grad_pose contains non-finite values")
    points = corr.points
    pixels = corr.pixels
    n = points.shape[0]
    theta = pose_to_tangent(pose)
    f0 = _gradient(theta, points, pixels, K)
    if np.max(np.abs(f0)) > _STATIONARITY_TOL:
        raise NotStationary(
            f"pose is not a stationary point: ||f||_inf = {np.max(np.abs(f0)):.3e}"
        )

    def _fd_columns(eval_plus_minus, values, width):
        cols = np.empty((6, width))
        flat = values.ravel()
        for k in range(width):
            h = 1e-6 * max(1.0, abs(float(flat[k])))
            cols[:, k] = (eval_plus_minus(k, h) - eval_plus_minus(k, -h)) / (2.0 * h)
        return cols

    def _theta_eval(k, h):
        th = theta.copy()
        th[k] += h
        return _gradient(th, points, pixels, K)

    def _point_eval(k, h):
        p = points.copy()
        p.flat[k] += h
        return _gradient(theta, p, pixels, K)

    def _pixel_eval(k, h):
        y = pixels.copy()
        y.flat[k] += h
        return _gradient(theta, points, y, K)

    H = _fd_columns(_theta_eval, theta, 6)
    if np.linalg.cond(H) > _HESSIAN_COND_MAX:
        raise SingularHessian("optimality Jacobian is numerically singular")
    # grad_x = [-H^-1 df/dx]^T grad_pose = -(df/dx)^T H^-T grad_pose
    w = np.linalg.solve(H.T, grad_pose)
    dfdx = _fd_columns(_point_eval, points, 3 * n)
    dfdy = _fd_columns(_pixel_eval, pixels, 2 * n)
    return PnPGradients(
        grad_points=-(dfdx.T @ w).reshape(n, 3),
        grad_pixels=-(dfdy.T @ w).reshape(n, 2),
    )
