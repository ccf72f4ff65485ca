"""Score-guided pose refinement over rendered depth.

A score provider receives the current latent depth grid plus a timestep
and noise seed, and returns a residual grid (predicted noise minus the
injected noise, for a real diffusion backend; cheaper stand-ins for
desk-scale work).  The pose gradient is the depth VJP of the masked,
timestep-weighted residual:

    grad(theta) = depth_backward(w_t * (mask * residual))

which treats the residual itself as locally constant.  Under the
depth-target mock, residual = d - d_target, so this is exactly the
gradient of the masked depth-MSE and the optimizer can be validated
end to end.  The surrogate scalar w_t * ||mask * residual||^2 is used
for monitoring and for the line search; its true gradient is not the
one above except in that mock.

Providers are synchronous and single-threaded; remote ones speak
newline-delimited JSON (one request object per line, responses matched
by id, residual payloads base64 little-endian f32).
"""

from __future__ import annotations

import base64
import json
import os
import selectors
import socket
import subprocess
from dataclasses import dataclass, field

import numpy as np

from .depth import DensifyConfig, DepthChain, depth_backward, encode_pfm, project_to_latent
from .errors import (
    DimMismatch,
    MissingTarget,
    NonFiniteInput,
    ProviderFailure,
    StaleProvenance,
    UnknownKind,
)
from .geometry import CameraIntrinsics, Pose, pose_from_tangent, pose_to_tangent

__all__ = [
    "ScoreRequest",
    "ScoreProvider",
    "CSDConfig",
    "CSDStep",
    "CSDResult",
    "mock_score_provider",
    "DepthTargetProvider",
    "SeededNoiseProvider",
    "ZeroProvider",
    "WireScoreProvider",
    "surrogate_csd_loss",
    "csd_gradient",
    "csd_optimize",
]


@dataclass(frozen=True)
class ScoreRequest:
    """One residual query: latent depth grid plus conditioning info."""

    image_ref: str
    depth: np.ndarray  # (h, w) latent depth, 0 = empty
    t: float
    seed: int

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        if d.ndim != 2:
            raise DimMismatch(f"request depth must be 2D, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise NonFiniteInput("request depth contains non-finite values")
        if not (0.0 < self.t < 1.0):
            raise NonFiniteInput(f"timestep must lie in (0, 1), got {self.t}")
        d.setflags(write=False)
        object.__setattr__(self, "depth", d)


class ScoreProvider:
    """Synchronous residual source; subclasses implement residual()."""

    def residual(self, request: ScoreRequest) -> np.ndarray:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


class ZeroProvider(ScoreProvider):
    def residual(self, request: ScoreRequest) -> np.ndarray:
        return np.zeros_like(request.depth)


class SeededNoiseProvider(ScoreProvider):
    """Deterministic noise keyed on (seed, t); ignores the depth."""

    def residual(self, request: ScoreRequest) -> np.ndarray:
        key = [int(request.seed) & (2**63 - 1), int(np.float64(request.t).view(np.uint64))]
        rng = np.random.default_rng(key)
        return rng.standard_normal(request.depth.shape)


class DepthTargetProvider(ScoreProvider):
    """residual = d - d_target on cells occupied in both grids.

    Turns the score gradient into the exact masked depth-MSE gradient,
    making optimizer convergence checkable without a diffusion model.
    """

    def __init__(self, target: np.ndarray):
        target = np.asarray(target, dtype=np.float64)
        if target.ndim != 2:
            raise DimMismatch(f"target depth must be 2D, got {target.shape}")
        if not np.all(np.isfinite(target)):
            raise NonFiniteInput("target depth contains non-finite values")
        self.target = target

    @classmethod
    def from_scene(
        cls,
        points,
        pose: Pose,
        K: CameraIntrinsics,
        config: "CSDConfig | None" = None,
    ) -> "DepthTargetProvider":
        config = config or CSDConfig()
        chain = config.forward(points, pose, K)
        return cls(chain.latent)

    def residual(self, request: ScoreRequest) -> np.ndarray:
        if request.depth.shape != self.target.shape:
            raise DimMismatch(
                f"request depth {request.depth.shape} vs target {self.target.shape}"
            )
        both = (request.depth > 0.0) & (self.target > 0.0)
        return np.where(both, request.depth - self.target, 0.0)


def mock_score_provider(kind: str, target=None) -> ScoreProvider:
    if kind == "zero":
        return ZeroProvider()
    if kind == "random_seeded":
        return SeededNoiseProvider()
    if kind == "depth_target":
        if target is None:
            raise MissingTarget("depth_target provider needs a reference latent depth")
        return DepthTargetProvider(target)
    raise UnknownKind(f"unknown provider kind {kind!r}")


# ---------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class CSDConfig:
    """Timestep sampling, weighting, and render/latent settings."""

    weight_kind: str = "constant"  # or "sigma_sq": w(t) = t^2
    t_min: float = 0.02
    t_max: float = 0.98
    latent_h: int | None = None  # None: height // 8
    latent_w: int | None = None
    samples_per_step: int = 1
    render_mode: str = "splat"
    occlusion_band: float = 0.5
    densify: DensifyConfig = field(default_factory=DensifyConfig)

    def __post_init__(self):
        if self.weight_kind not in ("constant", "sigma_sq"):
            raise UnknownKind(f"unknown weight kind {self.weight_kind!r}")
        if not (0.0 < self.t_min < self.t_max < 1.0):
            raise NonFiniteInput(
                f"need 0 < t_min < t_max < 1, got [{self.t_min}, {self.t_max}]"
            )
        for d in (self.latent_h, self.latent_w):
            if d is not None and d < 1:
                raise DimMismatch(f"latent dims must be >= 1, got {d}")
        if self.samples_per_step < 1:
            raise DimMismatch("samples_per_step must be >= 1")

    def timestep_weight(self, t: float) -> float:
        if self.weight_kind == "sigma_sq":
            return float(t) * float(t)
        return 1.0

    def forward(self, points, pose: Pose, K: CameraIntrinsics) -> DepthChain:
        return project_to_latent(
            points,
            pose,
            K,
            self.latent_h,
            self.latent_w,
            mode=self.render_mode,
            occlusion_band=self.occlusion_band,
            config=self.densify,
        )


# ---------------------------------------------------------------------------
# gradient assembly


def surrogate_csd_loss(residual, mask, w_t: float) -> float:
    """Monitoring scalar w_t * ||mask * residual||^2 (not the true objective)."""
    residual = np.asarray(residual, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if residual.shape != mask.shape:
        raise DimMismatch(f"residual {residual.shape} vs mask {mask.shape}")
    masked = np.where(mask, residual, 0.0)
    return float(w_t) * float(np.sum(masked * masked))


def csd_gradient(residual, mask, w_t: float, chain: DepthChain):
    """Pull the masked, weighted residual back to (pose tangent, points).

    Consumes the chain's provenance: a second call on the same chain
    raises StaleProvenance, since the forward state it describes no
    longer matches an updated pose.
    """
    residual = np.asarray(residual, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if residual.shape != mask.shape or residual.shape != chain.latent.shape:
        raise DimMismatch(
            f"residual {residual.shape}, mask {mask.shape}, latent {chain.latent.shape}"
        )
    if chain.provenance is not None and chain.provenance.get("consumed"):
        raise StaleProvenance("chain already consumed; re-run the forward pass")
    upstream = float(w_t) * np.where(mask, residual, 0.0)
    grads = depth_backward(upstream, chain)
    chain.provenance["consumed"] = True
    return grads


# ---------------------------------------------------------------------------
# optimization loop


@dataclass(frozen=True)
class CSDStep:
    index: int
    t: float
    weight: float
    surrogate: float
    grad_norm: float
    step_size: float
    accepted: bool
    tangent: np.ndarray


@dataclass(frozen=True)
class CSDResult:
    pose: Pose
    points: np.ndarray
    trajectory: tuple


def _query(provider, image_ref, chain, t, seed, step_index):
    request = ScoreRequest(image_ref=image_ref, depth=chain.latent, t=t, seed=seed)
    try:
        residual = np.asarray(provider.residual(request), dtype=np.float64)
    except ProviderFailure as exc:
        raise ProviderFailure(f"step {step_index}: {exc}") from exc
    if residual.shape != chain.latent.shape:
        raise DimMismatch(
            f"provider returned {residual.shape}, expected {chain.latent.shape}"
        )
    if not np.all(np.isfinite(residual)):
        raise ProviderFailure(f"step {step_index}: provider returned non-finite residual")
    return residual


def _latent_pose_jacobian(config, points, theta, K, mask, fd_step=1e-5):
    """Occupied-cell latent Jacobian w.r.t. the pose tangent, by central FD.

    Only used to scale the step direction; correctness of the gradient
    itself rests on the exact VJP, so an FD Jacobian here cannot bias
    the optimum, only the path to it.
    """
    J = np.zeros((int(mask.sum()), 6))
    for a in range(6):
        tp = theta.copy(); tp[a] += fd_step
        tm = theta.copy(); tm[a] -= fd_step
        dp = config.forward(points, pose_from_tangent(tp), K).latent
        dm = config.forward(points, pose_from_tangent(tm), K).latent
        J[:, a] = (dp - dm)[mask] / (2.0 * fd_step)
    return J


def csd_optimize(
    initial_pose: Pose,
    points,
    K: CameraIntrinsics,
    provider: ScoreProvider,
    config: CSDConfig | None = None,
    steps: int = 100,
    lr: float = 0.5,
    seed: int = 0,
    image_ref: str = "",
    co_optimize_points: bool = False,
    max_update: float = 0.05,
    step_rule: str = "gauss_newton",
) -> CSDResult:
    """Drive the pose down the score gradient, one provider draw per step.

    Each step freezes one (timestep, noise seed) draw; candidate poses
    are scored against that same draw and a step is taken only if the
    surrogate strictly decreases, so with a draw-independent provider
    the recorded surrogate is monotone.

    step_rule "gauss_newton" (default) solves (w_t J^T J + lambda I)
    d = g for the update direction, with lambda raised on rejection:
    plain steepest descent stalls in the narrow-field translation/
    rotation ambiguity groove, where the gradient points across the
    valley instead of along it.  step_rule "gradient" takes -g with a
    halving line search; it is the only rule that can co-optimize point
    offsets.  Updates are trust-capped at max_update per component
    either way: an occupancy-masked surrogate scores a pose with no
    overlap as zero, so an unbounded search could "win" by throwing the
    camera off the scene entirely.  With a deterministic provider the
    whole trajectory is a function of (seed, inputs).
    """
    config = config or CSDConfig()
    if steps < 1:
        raise DimMismatch("steps must be >= 1")
    if step_rule not in ("gauss_newton", "gradient"):
        raise UnknownKind(f"unknown step rule {step_rule!r}")
    if co_optimize_points and step_rule != "gradient":
        raise UnknownKind("co_optimize_points requires step_rule='gradient'")
    points = np.asarray(points, dtype=np.float64).copy()
    theta = pose_to_tangent(initial_pose).copy()
    rng = np.random.default_rng(seed)
    carry = float(lr)
    damping = 1e-2
    trajectory = []
    eye6 = np.eye(6)
    for k in range(steps):
        t = float(rng.uniform(config.t_min, config.t_max))
        noise_seed = int(rng.integers(0, 2**62))
        w_t = config.timestep_weight(t)

        chain = config.forward(points, pose_from_tangent(theta), K)
        residual = _query(provider, image_ref, chain, t, noise_seed, k)
        surrogate = surrogate_csd_loss(residual, chain.latent_mask, w_t)
        grad_tangent, grad_points = csd_gradient(residual, chain.latent_mask, w_t, chain)
        gnorm = float(np.max(np.abs(grad_tangent))) if grad_tangent.size else 0.0
        if co_optimize_points and grad_points.size:
            gnorm = max(gnorm, float(np.max(np.abs(grad_points))))

        accepted = False
        taken = 0.0
        # below this scale no candidate can decrease the surrogate by more
        # than its own float evaluation noise; skip the direction work
        stall = gnorm <= 1e-12 * (1.0 + np.sqrt(max(surrogate, 0.0)))
        if not stall and step_rule == "gauss_newton":
            J = _latent_pose_jacobian(config, points, theta, K, chain.latent_mask)
            H = float(w_t) * (J.T @ J)
            for _ in range(14):
                try:
                    delta = np.linalg.solve(H + damping * eye6, grad_tangent)
                except np.linalg.LinAlgError:
                    damping *= 10.0
                    continue
                dnorm = float(np.max(np.abs(delta)))
                if dnorm > max_update:
                    damping *= 10.0
                    continue
                cand_theta = theta - delta
                cand_chain = config.forward(points, pose_from_tangent(cand_theta), K)
                cand_residual = _query(provider, image_ref, cand_chain, t, noise_seed, k)
                cand_surrogate = surrogate_csd_loss(cand_residual, cand_chain.latent_mask, w_t)
                if cand_surrogate < surrogate:
                    theta = cand_theta
                    damping = max(damping / 3.0, 1e-10)
                    accepted = True
                    taken = dnorm
                    break
                damping *= 10.0
            damping = min(damping, 1e10)
        elif not stall:
            alpha = min(carry, max_update / gnorm)
            while alpha > 1e-12:
                cand_theta = theta - alpha * grad_tangent
                cand_points = points - alpha * grad_points if co_optimize_points else points
                cand_chain = config.forward(cand_points, pose_from_tangent(cand_theta), K)
                cand_residual = _query(provider, image_ref, cand_chain, t, noise_seed, k)
                cand_surrogate = surrogate_csd_loss(cand_residual, cand_chain.latent_mask, w_t)
                if cand_surrogate < surrogate:
                    theta = cand_theta
                    if co_optimize_points:
                        points = cand_points
                    carry = min(alpha * 2.0, float(lr) * 1024.0)
                    accepted = True
                    taken = alpha
                    break
                alpha *= 0.5
        trajectory.append(CSDStep(
            index=k, t=t, weight=w_t, surrogate=surrogate, grad_norm=gnorm,
            step_size=taken, accepted=accepted,
            tangent=theta.copy(),
        ))
    return CSDResult(
        pose=pose_from_tangent(theta),
        points=points,
        trajectory=tuple(trajectory),
    )


# ---------------------------------------------------------------------------
# wire protocol client


class WireScoreProvider(ScoreProvider):
    """Newline-delimited JSON client for out-of-process providers.

    Request line: {"id", "depth_pfm_b64", "image_ref", "t", "seed",
    "latent": [h, w]}.  Response line: {"id", "residual_b64", "err"};
    responses may arrive out of order and are matched by id.  Any
    transport problem (EOF, timeout, malformed line, err field set,
    wrong payload size) surfaces as ProviderFailure.
    """

    def __init__(self, write_fh, read_fd: int, timeout: float = 30.0, owner=None):
        self._write = write_fh
        self._read_fd = read_fd
        self._timeout = timeout
        self._owner = owner  # subprocess or socket kept alive / closed with us
        self._buf = bytearray()
        self._pending = {}
        self._next_id = 0
        self._sel = selectors.DefaultSelector()
        self._sel.register(read_fd, selectors.EVENT_READ)

    @classmethod
    def from_command(cls, argv, timeout: float = 30.0) -> "WireScoreProvider":
        try:
            proc = subprocess.Popen(
                argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, bufsize=0
            )
        except OSError as exc:
            raise ProviderFailure(f"cannot launch provider {argv!r}: {exc}") from exc
        return cls(proc.stdin, proc.stdout.fileno(), timeout, owner=proc)

    @classmethod
    def from_tcp(cls, host: str, port: int, timeout: float = 30.0) -> "WireScoreProvider":
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            sock.settimeout(None)  # reads multiplexed via selector instead
        except OSError as exc:
            raise ProviderFailure(f"cannot connect to {host}:{port}: {exc}") from exc
        return cls(sock.makefile("wb"), sock.fileno(), timeout, owner=sock)

    def _read_line(self) -> bytes:
        while True:
            nl = self._buf.find(b"\n")
            if nl >= 0:
                line = bytes(self._buf[:nl])
                del self._buf[: nl + 1]
                return line
            if not self._sel.select(self._timeout):
                raise ProviderFailure(f"provider timed out after {self._timeout}s")
            chunk = os.read(self._read_fd, 65536)
            if not chunk:
                raise ProviderFailure("provider closed the stream")
            self._buf.extend(chunk)

    def residual(self, request: ScoreRequest) -> np.ndarray:
        h, w = request.depth.shape
        self._next_id += 1
        rid = self._next_id
        line = json.dumps({
            "id": rid,
            "depth_pfm_b64": base64.b64encode(encode_pfm(request.depth)).decode("ascii"),
            "image_ref": request.image_ref,
            "t": request.t,
            "seed": int(request.seed),
            "latent": [h, w],
        }, separators=(",", ":")) + "\n"
        try:
            self._write.write(line.encode("utf-8"))
            self._write.flush()
        except (OSError, ValueError) as exc:
            raise ProviderFailure(f"cannot send request: {exc}") from exc
        while rid not in self._pending:
            raw = self._read_line()
            if not raw.strip():
                continue
            try:
                msg = json.loads(raw)
                got = int(msg["id"])
            except (ValueError, KeyError, TypeError) as exc:
                raise ProviderFailure(f"malformed response line: {exc}") from exc
            self._pending[got] = msg
        msg = self._pending.pop(rid)
        if msg.get("err"):
            raise ProviderFailure(f"provider error: {msg['err']}")
        try:
            payload = base64.b64decode(msg["residual_b64"], validate=True)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderFailure(f"bad residual payload: {exc}") from exc
        if len(payload) != h * w * 4:
            raise ProviderFailure(
                f"residual payload is {len(payload)} bytes, expected {h * w * 4}"
            )
        return np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float64)

    def close(self) -> None:
        try:
            self._sel.close()
        except Exception:
            pass
        for closer in (self._write, self._owner):
            try:
                if closer is None:
                    continue
                if isinstance(closer, subprocess.Popen):
                    closer.terminate()
                    closer.wait(timeout=5)
                else:
                    closer.close()
            except Exception:
                pass
