"""Reference motion: clip storage, retargeting, feasibility, synthesis.

A MotionClip stores everything a tracking policy needs per frame: root,
joints, and per-link world state, with velocities derived from positions
by finite differences at the clip frame rate (central in the interior,
one-sided at the ends). Clips are built from joint-space trajectories by
forward kinematics, retargeted from keypoint trajectories by per-frame
gradient descent, filtered for feasibility, and serialized to a columnar
binary format with a lossless text export.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .robot import RobotModel
from .sim import PlanarSim


class MotionError(Exception):
    pass


class RetargetError(MotionError):
    """Too many frames failed to converge."""


# Split-stance reference pose: staggered feet give the planar biped a real
# support interval, and the non-zero arms keep it distinct from the zero
# configuration.
STANCE_JOINTS = {
    "l_hip": 0.60, "l_knee": -0.60,
    "r_hip": -0.25, "r_knee": -0.30,
    "l_shoulder": 0.35, "r_shoulder": 0.15,
}


def stance_q(model: RobotModel) -> np.ndarray:
    """Full configuration for the reference stance: joints from
    STANCE_JOINTS (unknown joints at 0), root placed so the lowest foot
    touches the ground exactly."""
    q = np.zeros(model.num_dof)
    for j, joint in enumerate(model.joints):
        q[3 + j] = STANCE_JOINTS.get(joint.name, 0.0)
    feet = PlanarSim(model, 1).fk_full(q[None], np.zeros((1, model.num_dof)))
    q[1] = -feet["contacts"][0, :, 1].min()
    return q


# ---------------------------------------------------------------------------
# clip and source types
# ---------------------------------------------------------------------------

@dataclass
class MotionClip:
    """Per-frame reference state at a fixed frame rate.

    body_* arrays cover every robot link in model order; body positions are
    link centers of mass. Angles are stored continuous (unwrapped) so
    interpolation and finite differences are safe; wrap only when forming
    differences against another angle.
    """
    name: str
    frame_rate: float
    root_pos: np.ndarray        # (T, 2) base x, z
    root_rot: np.ndarray        # (T,) base pitch
    root_vel: np.ndarray        # (T, 2)
    root_ang_vel: np.ndarray    # (T,)
    joint_pos: np.ndarray       # (T, J)
    joint_vel: np.ndarray       # (T, J)
    body_pos: np.ndarray        # (T, L, 2) link COM world positions
    body_rot: np.ndarray        # (T, L) link world angles
    body_vel: np.ndarray        # (T, L, 2)
    body_ang_vel: np.ndarray    # (T, L)

    @property
    def num_frames(self) -> int:
        return self.root_pos.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joint_pos.shape[1]

    @property
    def num_bodies(self) -> int:
        return self.body_pos.shape[1]

    @property
    def duration(self) -> float:
        return (self.num_frames - 1) / self.frame_rate

    def q(self, i: int) -> np.ndarray:
        """Generalized coordinates of frame i."""
        return np.concatenate([self.root_pos[i], [self.root_rot[i]],
                               self.joint_pos[i]])

    def validate(self, model: RobotModel | None = None) -> None:
        T = self.num_frames
        if T < 2:
            raise MotionError(f"clip {self.name!r} has {T} frames, need >= 2")
        shapes = {
            "root_pos": (T, 2), "root_rot": (T,), "root_vel": (T, 2),
            "root_ang_vel": (T,),
            "joint_pos": (T, self.num_joints), "joint_vel": (T, self.num_joints),
            "body_pos": (T, self.num_bodies, 2), "body_rot": (T, self.num_bodies),
            "body_vel": (T, self.num_bodies, 2), "body_ang_vel": (T, self.num_bodies),
        }
        for name, want in shapes.items():
            arr = getattr(self, name)
            if arr.shape != want:
                raise MotionError(f"clip {self.name!r}: {name} has shape "
                                  f"{arr.shape}, want {want}")
            if not np.isfinite(arr).all():
                raise MotionError(f"clip {self.name!r}: {name} has non-finite values")
        if self.frame_rate <= 0:
            raise MotionError(f"clip {self.name!r}: frame_rate must be positive")
        if model is not None:
            if self.num_joints != model.num_joints:
                raise MotionError(f"clip {self.name!r} has {self.num_joints} "
                                  f"joints, model has {model.num_joints}")
            if self.num_bodies != len(model.links):
                raise MotionError(f"clip {self.name!r} covers {self.num_bodies} "
                                  f"bodies, model has {len(model.links)} links")
        err = velocity_consistency(self)
        if err > 1e-6:
            raise MotionError(f"clip {self.name!r}: stored velocities deviate "
                              f"from finite differences by {err:.2e}")


@dataclass
class SourceMotion:
    """Keypoint-space motion on the shared keypoint schema."""
    name: str
    frame_rate: float
    keypoint_names: tuple[str, ...]
    positions: np.ndarray       # (T, K, 2) world keypoint positions
    params: dict[str, float] = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return self.positions.shape[0]

    @property
    def duration(self) -> float:
        return (self.num_frames - 1) / self.frame_rate


def finite_difference(x: np.ndarray, rate: float) -> np.ndarray:
    """Velocity of a (T, ...) position series: central differences in the
    interior, one-sided at the ends. This is the canonical operator all
    stored clip velocities are built with."""
    v = np.empty_like(x)
    v[1:-1] = (x[2:] - x[:-2]) * (rate / 2.0)
    v[0] = (x[1] - x[0]) * rate
    v[-1] = (x[-1] - x[-2]) * rate
    return v


def keypoints_from_bodies(model: RobotModel, body_pos: np.ndarray,
                          body_rot: np.ndarray) -> np.ndarray:
    """Keypoint world positions (..., K, 2) from per-link COM positions
    (..., L, 2) and world angles (..., L). Lets clip consumers recover
    keypoint targets without rerunning forward kinematics."""
    idx = np.array([model.link_index(kp.link) for kp in model.keypoints])
    arm = np.array([(kp.offset[0] - model.link(kp.link).com[0],
                     kp.offset[1] - model.link(kp.link).com[1])
                    for kp in model.keypoints])
    ang = body_rot[..., idx]
    c, s = np.cos(ang), np.sin(ang)
    dx = c * arm[:, 0] - s * arm[:, 1]
    dz = s * arm[:, 0] + c * arm[:, 1]
    return body_pos[..., idx, :] + np.stack([dx, dz], axis=-1)


def velocity_consistency(clip: MotionClip) -> float:
    """Max deviation between stored velocities and finite differences of
    the stored positions. Zero (to rounding) for clips built in-package."""
    r = clip.frame_rate
    pairs = [
        (clip.root_vel, finite_difference(clip.root_pos, r)),
        (clip.root_ang_vel, finite_difference(clip.root_rot, r)),
        (clip.joint_vel, finite_difference(clip.joint_pos, r)),
        (clip.body_vel, finite_difference(clip.body_pos, r)),
        (clip.body_ang_vel, finite_difference(clip.body_rot, r)),
    ]
    return max(float(np.abs(a - b).max()) for a, b in pairs)


def make_clip(model: RobotModel, name: str, frame_rate: float,
              q: np.ndarray) -> MotionClip:
    """Build a clip from a (T, ndof) generalized-coordinate trajectory.
    Body state comes from forward kinematics; every velocity is the finite
    difference of its position series."""
    q = np.asarray(q, dtype=np.float64)
    T = q.shape[0]
    if T < 2:
        raise MotionError("need at least 2 frames")
    if q.shape[1] != model.num_dof:
        raise MotionError(f"trajectory has {q.shape[1]} dofs, "
                          f"model has {model.num_dof}")
    fk = PlanarSim(model, T).fk_full(q, np.zeros_like(q))
    root_pos = q[:, 0:2].copy()
    root_rot = q[:, 2].copy()
    joint_pos = q[:, 3:].copy()
    body_pos = fk["link_com"]
    body_rot = fk["link_angle"]
    r = float(frame_rate)
    return MotionClip(
        name=name, frame_rate=r,
        root_pos=root_pos, root_rot=root_rot,
        root_vel=finite_difference(root_pos, r),
        root_ang_vel=finite_difference(root_rot, r),
        joint_pos=joint_pos, joint_vel=finite_difference(joint_pos, r),
        body_pos=body_pos, body_rot=body_rot,
        body_vel=finite_difference(body_pos, r),
        body_ang_vel=finite_difference(body_rot, r),
    )


# ---------------------------------------------------------------------------
# time indexing
# ---------------------------------------------------------------------------

@dataclass
class ReferenceFrame:
    """One (possibly interpolated) clip frame."""
    root_pos: np.ndarray
    root_rot: float
    root_vel: np.ndarray
    root_ang_vel: float
    joint_pos: np.ndarray
    joint_vel: np.ndarray
    body_pos: np.ndarray
    body_rot: np.ndarray
    body_vel: np.ndarray
    body_ang_vel: np.ndarray


def sample_frame(clip: MotionClip, t: float) -> ReferenceFrame:
    """Linearly interpolate the clip at time t (positions, angles, and
    velocities alike). Frame boundaries return the stored frame exactly."""
    if not 0.0 <= t <= clip.duration + 1e-12:
        raise ValueError(f"t={t} outside clip duration [0, {clip.duration}]")
    s = min(t, clip.duration) * clip.frame_rate
    i0 = min(int(s), clip.num_frames - 2)
    a = s - i0
    i1 = i0 + 1

    def lerp(arr):
        return arr[i0] * (1.0 - a) + arr[i1] * a

    return ReferenceFrame(
        root_pos=lerp(clip.root_pos), root_rot=float(lerp(clip.root_rot)),
        root_vel=lerp(clip.root_vel), root_ang_vel=float(lerp(clip.root_ang_vel)),
        joint_pos=lerp(clip.joint_pos), joint_vel=lerp(clip.joint_vel),
        body_pos=lerp(clip.body_pos), body_rot=lerp(clip.body_rot),
        body_vel=lerp(clip.body_vel), body_ang_vel=lerp(clip.body_ang_vel),
    )


# ---------------------------------------------------------------------------
# retargeting
# ---------------------------------------------------------------------------

@dataclass
class RetargetOptions:
    iterations: int = 120       # batched polish iterations over all frames
    warm_iterations: int = 8    # per-frame iterations in the sequential sweep
    step: float = 1.0           # initial step on the preconditioned gradient
    limit_weight: float = 1.0   # quadratic hinge on joint-limit violation
    flag_tol: float = 0.03      # rms keypoint error above this flags a frame
    max_flagged: float = 0.05   # flagged fraction above this rejects the clip


def _dof_bounds(model: RobotModel) -> tuple[np.ndarray, np.ndarray]:
    """Joint limits lifted to the full dof vector; base dofs are unbounded."""
    lims = np.array([j.limit for j in model.joints])
    lo = np.concatenate([np.full(3, -np.inf), lims[:, 0]])
    hi = np.concatenate([np.full(3, np.inf), lims[:, 1]])
    return lo, hi


def _descend(psim: PlanarSim, q: np.ndarray, target: np.ndarray,
             iterations: int, step0: float,
             lo: np.ndarray | None = None, hi: np.ndarray | None = None,
             w: float = 0.0, trace: list | None = None) -> np.ndarray:
    """Batched damped Gauss-Newton on sum of squared keypoint residuals,
    plus a quadratic hinge on joint-limit violation when w > 0. Each
    iteration whitens the gradient with the inverse of the current
    curvature estimate (an SPD matrix), and a per-frame Armijo backtrack
    on the true objective makes every frame monotone non-increasing.

    The hinge matters for legs: a 2-link planar leg reaches the same ankle
    point with the knee bent either way, and the objective barrier between
    the two solutions is millimetres deep, so an aggressive step can hop
    onto the branch that bends past the knee stop. With the hinge active
    that branch costs orders of magnitude more than any in-basin iterate,
    so Armijo rejects the hop and a warm-started sweep stays on the branch
    it came in on."""
    E, n = q.shape
    step = np.full(E, step0)
    penalized = w > 0.0 and lo is not None

    def hinge(qc):
        over = np.maximum(qc - hi, 0.0) + np.maximum(lo - qc, 0.0)
        return w * np.einsum("ej,ej->e", over, over)

    def objective(qc):
        pos, _ = psim.keypoint_jacobians(qc)
        r = pos - target
        f = np.einsum("eki,eki->e", r, r)
        return f + hinge(qc) if penalized else f

    eye = np.eye(n)
    for _ in range(iterations):
        pos, J = psim.keypoint_jacobians(q)
        r = pos - target
        f = np.einsum("eki,eki->e", r, r)
        g = 2.0 * np.einsum("ekij,eki->ej", J, r)
        H = 2.0 * np.einsum("ekij,ekil->ejl", J, J)
        if penalized:
            f = f + hinge(q)
            over_hi = np.maximum(q - hi, 0.0)
            over_lo = np.maximum(lo - q, 0.0)
            g = g + 2.0 * w * (over_hi - over_lo)
            active = (over_hi > 0.0) | (over_lo > 0.0)
            H = H + 2.0 * w * eye * active[:, None, :]
        if trace is not None:
            trace.append(f.copy())
        if f.max() < 1e-16:
            break
        damp = 1e-8 * np.einsum("ejj->e", H) / n + 1e-12
        H = H + damp[:, None, None] * eye
        d = np.linalg.solve(H, g[..., None])[..., 0]
        slope = np.einsum("ej,ej->e", g, d)       # > 0, H is SPD
        accepted = np.zeros(E, dtype=bool)
        q_next = q
        for _bt in range(30):
            cand = q - step[:, None] * d
            newly = ~accepted & (objective(cand) <= f - 1e-4 * step * slope)
            q_next = np.where(newly[:, None], cand, q_next)
            accepted |= newly
            if accepted.all():
                break
            step = np.where(accepted, step, step * 0.5)
        q = q_next
        step = np.where(accepted, np.minimum(step * 2.0, 1.0),
                        np.maximum(step, 1e-12))
    if trace is not None:
        trace.append(objective(q))
    return q


def _source_targets(source: SourceMotion, model: RobotModel) -> np.ndarray:
    """Reorder source keypoint columns to the model's keypoint order."""
    idx = []
    for kp in model.keypoints:
        if kp.name not in source.keypoint_names:
            raise MotionError(f"source {source.name!r} is missing keypoint "
                              f"{kp.name!r} required by model {model.name!r}")
        idx.append(source.keypoint_names.index(kp.name))
    return source.positions[:, idx, :]


def retarget_flags(source: SourceMotion, model: RobotModel,
                   opts: RetargetOptions | None = None,
                   trace: list | None = None) -> tuple[MotionClip, list[int]]:
    """Retarget and also report which frames failed to converge.

    Per frame, minimizes the squared distance between the model's forward
    kinematics keypoints and the source keypoints, warm-starting each frame
    from the previous solution (the first from the reference stance), then
    polishes all frames in parallel. Planar two-segment legs admit mirrored
    knee solutions; the stance warm start picks the natural branch and the
    joint-limit hinge keeps the descent from hopping to the other one.
    """
    opts = opts or RetargetOptions()
    targets = _source_targets(source, model)
    T = targets.shape[0]
    if T < 2:
        raise MotionError("source needs at least 2 frames")

    lo, hi = _dof_bounds(model)
    w = opts.limit_weight
    seq = PlanarSim(model, 1)
    q = np.empty((T, model.num_dof))
    prev = stance_q(model)[None]
    for i in range(T):
        prev = _descend(seq, prev, targets[i][None], opts.warm_iterations,
                        opts.step, lo, hi, w)
        q[i] = prev[0]
    batch = PlanarSim(model, T)
    q = _descend(batch, q, targets, opts.iterations, opts.step, lo, hi, w,
                 trace=trace)

    pos, _ = batch.keypoint_jacobians(q)
    rms = np.sqrt(np.mean(np.sum((pos - targets) ** 2, axis=-1), axis=-1))
    flagged = np.flatnonzero(rms > opts.flag_tol)
    if len(flagged) > opts.max_flagged * T:
        raise RetargetError(
            f"{source.name!r}: {len(flagged)}/{T} frames above rms keypoint "
            f"error {opts.flag_tol} (worst {rms.max():.3f} m)")
    return make_clip(model, source.name, source.frame_rate, q), list(flagged)


def retarget(source: SourceMotion, model: RobotModel,
             opts: RetargetOptions | None = None) -> MotionClip:
    clip, _ = retarget_flags(source, model, opts)
    return clip


# ---------------------------------------------------------------------------
# feasibility
# ---------------------------------------------------------------------------

@dataclass
class FeasibilityBounds:
    root_accel: float = 50.0        # m/s^2, linear
    root_ang_accel: float = 50.0    # rad/s^2


@dataclass
class FilterResult:
    accepted: bool
    reasons: list[str]

    def __bool__(self) -> bool:
        return self.accepted


def filter_feasible(clip: MotionClip, model: RobotModel,
                    bounds: FeasibilityBounds | None = None) -> FilterResult:
    """Accept clips whose joints stay inside angle and velocity limits and
    whose root accelerations stay inside the configured bound. All bounds
    are closed: a value exactly at the limit passes."""
    b = bounds or FeasibilityBounds()
    reasons = []
    for j, joint in enumerate(model.joints):
        qj = clip.joint_pos[:, j]
        lo, hi = joint.limit
        bad = np.flatnonzero((qj < lo) | (qj > hi))
        if bad.size:
            i = bad[0]
            reasons.append(f"{joint.name} angle {qj[i]:.3f} rad outside "
                           f"[{lo}, {hi}] at frame {i}")
        vj = np.abs(clip.joint_vel[:, j])
        bad = np.flatnonzero(vj > joint.vel_limit)
        if bad.size:
            i = bad[0]
            reasons.append(f"{joint.name} velocity {vj[i]:.3f} rad/s exceeds "
                           f"{joint.vel_limit} at frame {i}")
    lin = np.linalg.norm(finite_difference(clip.root_vel, clip.frame_rate), axis=-1)
    bad = np.flatnonzero(lin > b.root_accel)
    if bad.size:
        i = bad[0]
        reasons.append(f"root linear acceleration {lin[i]:.2f} m/s^2 exceeds "
                       f"{b.root_accel} at frame {i}")
    ang = np.abs(finite_difference(clip.root_ang_vel, clip.frame_rate))
    bad = np.flatnonzero(ang > b.root_ang_accel)
    if bad.size:
        i = bad[0]
        reasons.append(f"root angular acceleration {ang[i]:.2f} rad/s^2 exceeds "
                       f"{b.root_ang_accel} at frame {i}")
    return FilterResult(accepted=not reasons, reasons=reasons)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_MAGIC = b"MMCL"
_VERSION = 1
_ARRAYS = ("root_pos", "root_rot", "root_vel", "root_ang_vel",
           "joint_pos", "joint_vel", "body_pos", "body_rot",
           "body_vel", "body_ang_vel")


def clip_bytes(clip: MotionClip) -> bytes:
    """Columnar little-endian binary encoding with a versioned header."""
    name = clip.name.encode("utf-8")
    out = [struct.pack("<4sHH", _MAGIC, _VERSION, len(name)), name,
           struct.pack("<dIII", clip.frame_rate, clip.num_frames,
                       clip.num_joints, clip.num_bodies)]
    for key in _ARRAYS:
        out.append(np.ascontiguousarray(getattr(clip, key), dtype="<f8").tobytes())
    return b"".join(out)


def save_clip(clip: MotionClip, path: str | Path) -> None:
    Path(path).write_bytes(clip_bytes(clip))


def load_clip(path: str | Path) -> MotionClip:
    raw = Path(path).read_bytes()
    try:
        magic, version, name_len = struct.unpack_from("<4sHH", raw, 0)
        if magic != _MAGIC:
            raise MotionError(f"{path}: not a motion clip file")
        if version != _VERSION:
            raise MotionError(f"{path}: unsupported clip version {version}")
        off = struct.calcsize("<4sHH")
        name = raw[off:off + name_len].decode("utf-8")
        off += name_len
        rate, T, J, L = struct.unpack_from("<dIII", raw, off)
        off += struct.calcsize("<dIII")
        shapes = {
            "root_pos": (T, 2), "root_rot": (T,), "root_vel": (T, 2),
            "root_ang_vel": (T,), "joint_pos": (T, J), "joint_vel": (T, J),
            "body_pos": (T, L, 2), "body_rot": (T, L),
            "body_vel": (T, L, 2), "body_ang_vel": (T, L),
        }
        arrays = {}
        for key in _ARRAYS:
            shape = shapes[key]
            n = int(np.prod(shape)) * 8
            if off + n > len(raw):
                raise MotionError(f"{path}: truncated clip file")
            arrays[key] = np.frombuffer(raw[off:off + n], dtype="<f8").reshape(shape).copy()
            off += n
        if off != len(raw):
            raise MotionError(f"{path}: trailing bytes in clip file")
    except struct.error as e:
        raise MotionError(f"{path}: malformed clip file: {e}") from None
    return MotionClip(name=name, frame_rate=rate, **arrays)


def clip_text(clip: MotionClip) -> str:
    """Lossless text rendering (17 significant digits) for diffing."""
    lines = [f"multimimic-clip v{_VERSION}",
             f"name {clip.name}",
             f"frame_rate {clip.frame_rate:.17g}",
             f"frames {clip.num_frames} joints {clip.num_joints} "
             f"bodies {clip.num_bodies}"]
    for key in _ARRAYS:
        arr = getattr(clip, key)
        lines.append(f"[{key}]")
        for row in arr.reshape(arr.shape[0], -1):
            lines.append(" ".join(f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


_SRC_MAGIC = b"MMKP"


def source_bytes(source: SourceMotion) -> bytes:
    """Keypoint-motion encoding: JSON header plus raw positions. The
    header is key-sorted so the same motion always gives the same bytes."""
    head = json.dumps(
        {"frame_rate": source.frame_rate, "frames": source.num_frames,
         "keypoints": list(source.keypoint_names), "name": source.name,
         "params": {k: float(v) for k, v in sorted(source.params.items())}},
        sort_keys=True).encode("utf-8")
    body = np.ascontiguousarray(source.positions, dtype="<f8").tobytes()
    return struct.pack("<4sHI", _SRC_MAGIC, _VERSION, len(head)) + head + body


def save_source(source: SourceMotion, path: str | Path) -> None:
    Path(path).write_bytes(source_bytes(source))


def load_source(path: str | Path) -> SourceMotion:
    raw = Path(path).read_bytes()
    try:
        magic, version, head_len = struct.unpack_from("<4sHI", raw, 0)
        if magic != _SRC_MAGIC:
            raise MotionError(f"{path}: not a keypoint motion file")
        if version != _VERSION:
            raise MotionError(f"{path}: unsupported motion version {version}")
        off = struct.calcsize("<4sHI")
        head = json.loads(raw[off:off + head_len].decode("utf-8"))
        off += head_len
        T, K = head["frames"], len(head["keypoints"])
        n = T * K * 2 * 8
        if off + n != len(raw):
            raise MotionError(f"{path}: keypoint data size mismatch")
        positions = np.frombuffer(raw[off:], dtype="<f8").reshape(T, K, 2).copy()
    except (struct.error, KeyError, UnicodeDecodeError,
            json.JSONDecodeError) as e:
        raise MotionError(f"{path}: malformed motion file: {e}") from None
    return SourceMotion(name=head["name"], frame_rate=head["frame_rate"],
                        keypoint_names=tuple(head["keypoints"]),
                        positions=positions, params=head["params"])


def save_sources(sources: list[SourceMotion], out_dir: str | Path) -> dict:
    """Write one .mkp file per motion plus a sources.json index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for source in sources:
        fname = f"{source.name}.mkp"
        save_source(source, out_dir / fname)
        entries.append({"name": source.name, "file": fname,
                        "frames": source.num_frames,
                        "duration_s": round(source.duration, 6)})
    index = {"version": 1, "sources": entries}
    (out_dir / "sources.json").write_text(
        json.dumps(index, indent=2, sort_keys=True) + "\n")
    return index


def load_sources(data_dir: str | Path) -> list[SourceMotion]:
    data_dir = Path(data_dir)
    index = json.loads((data_dir / "sources.json").read_text())
    return [load_source(data_dir / e["file"]) for e in index["sources"]]


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------

def _joint_index(model: RobotModel) -> dict[str, int]:
    return {j.name: i for i, j in enumerate(model.joints)}


def _ground_z(model: RobotModel, q: np.ndarray) -> np.ndarray:
    """Root height per frame that pins the lowest contact to the ground."""
    fk = PlanarSim(model, q.shape[0]).fk_full(q, np.zeros_like(q))
    return q[:, 1] - fk["contacts"][..., 1].min(axis=-1)


def _fk_source(model: RobotModel, name: str, rate: float, q: np.ndarray,
               params: dict[str, float]) -> SourceMotion:
    fk = PlanarSim(model, q.shape[0]).fk_full(q, np.zeros_like(q))
    return SourceMotion(
        name=name, frame_rate=rate,
        keypoint_names=tuple(kp.name for kp in model.keypoints),
        positions=fk["keypoints"], params=params)


def generate_synthetic_dataset(model: RobotModel, seed: int = 0,
                               frame_rate: float = 50.0) -> list[SourceMotion]:
    """Deterministic keypoint-space clip family: stand, squat, arm reach,
    walk, and root sway, each 4-10 s. The same seed always produces the
    same bytes. Clips are generated around the reference stance so the
    retargeter's warm start stays on the natural knee branch."""
    rng = np.random.default_rng(seed)
    ji = _joint_index(model)
    base = stance_q(model)
    out = []

    def frames(seconds):
        n = int(round(seconds * frame_rate)) + 1
        return n, np.arange(n) / frame_rate

    # stand: constant pose, zero root velocity throughout
    T, _ = frames(5.0)
    q = np.tile(base, (T, 1))
    out.append(_fk_source(model, "stand", frame_rate, q, {}))

    # squat: knees flex sinusoidally, root follows so the lowest foot
    # stays on the ground
    T, t = frames(6.0)
    depth = float(rng.uniform(0.35, 0.5))
    f = 2.0 / 6.0      # two full cycles
    bend = depth * 0.5 * (1.0 - np.cos(2.0 * np.pi * f * t))
    q = np.tile(base, (T, 1))
    for name, scale in (("l_knee", -1.0), ("r_knee", -1.0),
                        ("l_hip", 0.55), ("r_hip", 0.55)):
        q[:, 3 + ji[name]] += scale * bend
    q[:, 1] = _ground_z(model, q)
    out.append(_fk_source(model, "squat", frame_rate, q,
                          {"depth": depth, "cycles": 2.0}))

    # reach: shoulder sinusoids, lower body held
    T, t = frames(6.0)
    amp_l = float(rng.uniform(0.5, 0.8))
    amp_r = float(rng.uniform(0.4, 0.7))
    q = np.tile(base, (T, 1))
    q[:, 3 + ji["l_shoulder"]] += amp_l * np.sin(2.0 * np.pi * (2.0 / 6.0) * t)
    q[:, 3 + ji["r_shoulder"]] += amp_r * np.sin(2.0 * np.pi * (3.0 / 6.0) * t + 0.7)
    out.append(_fk_source(model, "reach", frame_rate, q,
                          {"amp_l": amp_l, "amp_r": amp_r}))

    # walk: root advances at constant speed, legs oscillate in antiphase;
    # an integer number of gait periods keeps the mean speed exact
    dur = 8.0
    T, t = frames(dur)
    speed = float(rng.uniform(0.25, 0.45))
    periods = int(rng.integers(10, 13))
    fg = periods / dur
    ph = 2.0 * np.pi * fg * t
    q = np.tile(base, (T, 1))
    q[:, 0] = speed * t
    q[:, 3 + ji["l_hip"]] = 0.20 + 0.34 * np.sin(ph)
    q[:, 3 + ji["r_hip"]] = 0.20 - 0.34 * np.sin(ph)
    # knees stay clearly flexed: a near-straight swing leg sits at the
    # mirror-branch singularity and retargeting could flip it
    q[:, 3 + ji["l_knee"]] = -0.55 + 0.28 * np.sin(ph - np.pi / 2)
    q[:, 3 + ji["r_knee"]] = -0.55 - 0.28 * np.sin(ph - np.pi / 2)
    q[:, 3 + ji["l_shoulder"]] = 0.25 - 0.25 * np.sin(ph)
    q[:, 3 + ji["r_shoulder"]] = 0.25 + 0.25 * np.sin(ph)
    q[:, 1] = _ground_z(model, q) + 0.005
    out.append(_fk_source(model, "walk", frame_rate, q,
                          {"speed": speed, "gait_hz": fg}))

    # sway: root oscillates fore-aft over planted feet
    T, t = frames(5.0)
    amp = float(rng.uniform(0.04, 0.07))
    q = np.tile(base, (T, 1))
    q[:, 0] = amp * np.sin(2.0 * np.pi * (2.0 / 5.0) * t)
    out.append(_fk_source(model, "sway", frame_rate, q, {"amp": amp}))

    return out


def build_dataset(model: RobotModel, seed: int, out_dir: str | Path,
                  opts: RetargetOptions | None = None,
                  bounds: FeasibilityBounds | None = None) -> dict:
    """Generate, retarget, and filter the synthetic dataset. Accepted clips
    are written as .mclip files; the returned manifest (also written as
    manifest.json) lists every clip with its accept/reject status."""
    sources = generate_synthetic_dataset(model, seed)
    return retarget_dataset(model, sources, out_dir, opts, bounds, seed=seed)


def retarget_dataset(model: RobotModel, sources: list[SourceMotion],
                     out_dir: str | Path,
                     opts: RetargetOptions | None = None,
                     bounds: FeasibilityBounds | None = None,
                     seed: int = 0) -> dict:
    """Retarget and filter keypoint motions into an .mclip dataset. The
    seed is recorded in the manifest for provenance only; retargeting
    itself is deterministic."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for source in sources:
        entry = {"name": source.name, "frames": source.num_frames,
                 "duration_s": round(source.duration, 6)}
        try:
            clip, flagged = retarget_flags(source, model, opts)
        except RetargetError as e:
            entry.update(accepted=False, file=None,
                         reasons=[str(e)], flagged_frames=[])
            entries.append(entry)
            continue
        entry["flagged_frames"] = [int(i) for i in flagged]
        result = filter_feasible(clip, model, bounds)
        if result.accepted:
            fname = f"{source.name}.mclip"
            save_clip(clip, out_dir / fname)
            entry.update(accepted=True, file=fname, reasons=[])
        else:
            entry.update(accepted=False, file=None, reasons=result.reasons)
        entries.append(entry)
    manifest = {"version": 1, "seed": seed, "model": model.name,
                "frame_rate": 50.0, "clips": entries}
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_dataset(data_dir: str | Path) -> list[MotionClip]:
    """Load every accepted clip listed in a dataset manifest."""
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    clips = []
    for entry in manifest["clips"]:
        if entry.get("accepted"):
            clips.append(load_clip(data_dir / entry["file"]))
    if not clips:
        raise MotionError(f"no accepted clips in {data_dir}")
    return clips
