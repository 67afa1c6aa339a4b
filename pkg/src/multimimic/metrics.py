"""Tracking metric suite and specialist-vs-generalist comparison reports.

Twelve numbers per evaluation: survival plus eleven tracking errors over
keypoints (global and root-relative position, finite-difference velocity
and acceleration), joint angles per body region, and the root (velocity,
height, roll/pitch/yaw). Errors average over pre-termination frames
only; a terminated episode contributes its partial trajectory plus a
survival hit. Dataset means are clip-weighted: the summary is the plain
mean of per-clip values.

Position errors are reported in millimeters, per-frame units at the
rate the streams were sampled (the control rate here, recorded in the
report). The planar model has no heading or roll degree of freedom: the
base angle feeds the pitch column, roll and yaw are structurally zero
but keep their columns so the report shape matches the full suite.
"""

from __future__ import annotations

import csv
import io
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import commands as cmd
from .env import EnvConfig, TrackingEnv
from .motion import MotionClip, keypoints_from_bodies, sample_frame
from .nets import Mlp, PolicyNet
from .robot import UPPER, RobotModel
from .sim import PlanarSim, RandomizationRanges, SimParams

METRICS = ("survival", "g_mpjpe", "mpjpe", "acc", "vel",
           "upper_j", "lower_j",
           "root_vel", "root_h", "root_r", "root_p", "root_y")
HIGHER_BETTER = frozenset({"survival"})
UNITS = {"survival": "", "g_mpjpe": "mm", "mpjpe": "mm", "acc": "mm/f2",
         "vel": "mm/f", "upper_j": "rad", "lower_j": "rad",
         "root_vel": "m/s", "root_h": "m", "root_r": "rad",
         "root_p": "rad", "root_y": "rad"}
GROUPS = (("kinematic", ("survival", "g_mpjpe", "mpjpe", "acc", "vel")),
          ("joint", ("upper_j", "lower_j")),
          ("root", ("root_vel", "root_h", "root_r", "root_p", "root_y")))


def _check_bodies(pred: np.ndarray, ref: np.ndarray) -> None:
    if pred.shape != ref.shape:
        raise ValueError(f"body sets differ: {pred.shape} vs {ref.shape}")


def mpjpe_global(pred_bodies: np.ndarray, ref_bodies: np.ndarray) -> float:
    """Mean per-body Euclidean position error in millimeters."""
    pred = np.asarray(pred_bodies, dtype=np.float64)
    ref = np.asarray(ref_bodies, dtype=np.float64)
    _check_bodies(pred, ref)
    return float(np.linalg.norm(pred - ref, axis=-1).mean() * 1000.0)


def _root_relative(bodies: np.ndarray, root_pos: np.ndarray,
                   heading: np.ndarray | None) -> np.ndarray:
    rel = bodies - np.asarray(root_pos, dtype=np.float64)[..., None, :]
    if heading is None:
        return rel
    if bodies.shape[-1] != 3:
        raise ValueError("heading removal needs 3-D points")
    c = np.cos(heading)[..., None]
    s = np.sin(heading)[..., None]
    x, y, z = rel[..., 0], rel[..., 1], rel[..., 2]
    return np.stack([c * x + s * y, -s * x + c * y, z], axis=-1)


def mpjpe_local(pred_bodies: np.ndarray, ref_bodies: np.ndarray,
                pred_root: np.ndarray, ref_root: np.ndarray,
                pred_heading: np.ndarray | None = None,
                ref_heading: np.ndarray | None = None) -> float:
    """Root-relative mean per-body position error in millimeters.

    Each set is expressed relative to its own root: the root position is
    subtracted, and for 3-D points the root heading (rotation about the
    vertical axis) is also removed. Planar 2-D points only lose the
    translation, since the plane holds no heading degree of freedom.
    """
    pred = np.asarray(pred_bodies, dtype=np.float64)
    ref = np.asarray(ref_bodies, dtype=np.float64)
    _check_bodies(pred, ref)
    rel_p = _root_relative(pred, pred_root, pred_heading)
    rel_r = _root_relative(ref, ref_root, ref_heading)
    return float(np.linalg.norm(rel_p - rel_r, axis=-1).mean() * 1000.0)


def accel_vel_errors(pred_bodies: np.ndarray, ref_bodies: np.ndarray,
                     frame_rate: float) -> tuple[float, float]:
    """Finite-difference acceleration and velocity errors, mm per frame
    units at the sampling rate (the rate itself is only recorded)."""
    pred = np.asarray(pred_bodies, dtype=np.float64)
    ref = np.asarray(ref_bodies, dtype=np.float64)
    _check_bodies(pred, ref)
    if frame_rate <= 0.0:
        raise ValueError("frame_rate must be positive")
    if pred.shape[0] < 3:
        raise ValueError("need at least 3 frames for finite differences")
    vp, vr = np.diff(pred, axis=0), np.diff(ref, axis=0)
    ap, ar = np.diff(vp, axis=0), np.diff(vr, axis=0)
    e_vel = float(np.linalg.norm(vp - vr, axis=-1).mean() * 1000.0)
    e_acc = float(np.linalg.norm(ap - ar, axis=-1).mean() * 1000.0)
    return e_acc, e_vel


@dataclass(frozen=True)
class RootTrack:
    """Per-frame root quantities: velocity (T, 2), height (T,), and
    roll/pitch/yaw angles (T, 3)."""
    vel: np.ndarray
    height: np.ndarray
    rpy: np.ndarray


def root_errors(pred: RootTrack, ref: RootTrack
                ) -> tuple[float, float, float, float, float]:
    """Mean absolute root errors: (velocity m/s, height m, roll, pitch,
    yaw rad). Angles are compared after wrapping to (-pi, pi]."""
    if not (pred.vel.shape == ref.vel.shape
            and pred.height.shape == ref.height.shape
            and pred.rpy.shape == ref.rpy.shape):
        raise ValueError("root trajectories are not aligned")
    e_vel = float(np.linalg.norm(pred.vel - ref.vel, axis=-1).mean())
    e_h = float(np.abs(pred.height - ref.height).mean())
    ang = np.abs(cmd.wrap_angle(pred.rpy - ref.rpy)).mean(axis=0)
    return e_vel, e_h, float(ang[0]), float(ang[1]), float(ang[2])


class KinematicReplay:
    """Pseudo-policy: evaluation replays the reference state instead of
    stepping the dynamics. Every tracking error is exactly zero and
    survival is 1 on any clip whose poses stay clear of the ground."""


def active_metrics(layout: cmd.CommandLayout,
                   mask: cmd.CommandMask | None) -> tuple[str, ...]:
    """Metric columns actively tracked under a mask (all of them for the
    unmasked tracking mode). Root sub-targets map one to one: commanded
    velocity, height, and pitch flag their own columns."""
    if mask is None:
        return METRICS
    acts = cmd.slot_activation(layout, mask)
    active = {"survival"}
    root_map = {"vel_x": ("root_vel",), "height": ("root_h",),
                "pitch": ("root_p",)}
    for slot, on in zip(layout.slots, acts):
        if not on:
            continue
        if slot.family == cmd.KINEMATIC:
            active.update(("g_mpjpe", "mpjpe", "acc", "vel"))
        elif slot.family == cmd.JOINT:
            active.add("upper_j" if slot.region == UPPER else "lower_j")
        else:
            active.update(root_map[slot.element])
    return tuple(m for m in METRICS if m in active)


def _policy_fn(policy):
    if isinstance(policy, PolicyNet):
        return policy.mean
    if isinstance(policy, Mlp):
        return policy.forward
    return policy


def _episode_metrics(pred_kp, ref_kp, pred_root, ref_root,
                     pred_joints, ref_joints, upper_idx, lower_idx,
                     frame_rate: float) -> dict[str, float]:
    out = {
        "g_mpjpe": mpjpe_global(pred_kp, ref_kp),
        "mpjpe": mpjpe_local(pred_kp, ref_kp,
                             pred_root["pos"], ref_root["pos"]),
    }
    if pred_kp.shape[0] >= 3:
        out["acc"], out["vel"] = accel_vel_errors(pred_kp, ref_kp, frame_rate)
    dj = np.abs(cmd.wrap_angle(pred_joints - ref_joints))
    out["upper_j"] = float(dj[:, upper_idx].mean())
    out["lower_j"] = float(dj[:, lower_idx].mean())
    T = pred_kp.shape[0]
    zeros = np.zeros(T)
    (out["root_vel"], out["root_h"], out["root_r"], out["root_p"],
     out["root_y"]) = root_errors(
        RootTrack(pred_root["vel"], pred_root["pos"][:, 1],
                  np.stack([zeros, pred_root["rot"], zeros], axis=1)),
        RootTrack(ref_root["vel"], ref_root["pos"][:, 1],
                  np.stack([zeros, ref_root["rot"], zeros], axis=1)))
    return out


def _replay_streams(model: RobotModel, sim: PlanarSim, clip: MotionClip,
                    margin: float, ground: float):
    n = int(round(clip.duration * clip.frame_rate))
    times = np.minimum(np.arange(n + 1) / clip.frame_rate, clip.duration)
    kp, root_pos, root_rot, root_vel, joints = [], [], [], [], []
    survived = True
    for t in times:
        fr = sample_frame(clip, float(t))
        q = np.concatenate([fr.root_pos, [fr.root_rot], fr.joint_pos])
        if sim.check_points(q[None]).min() < ground + margin:
            survived = False
            break
        kp.append(keypoints_from_bodies(model, fr.body_pos, fr.body_rot))
        root_pos.append(fr.root_pos)
        root_rot.append(fr.root_rot)
        root_vel.append(fr.root_vel)
        joints.append(fr.joint_pos)
    arrays = [np.asarray(a, dtype=np.float64)
              for a in (kp, root_pos, root_rot, root_vel, joints)]
    return arrays, survived


@dataclass
class TrackingReport:
    """Per-clip rows plus the clip-weighted dataset summary."""
    clips: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    active: tuple[str, ...] = METRICS
    mask_label: str = "none"
    episodes_per_clip: int = 1
    frame_rate: float = 50.0
    seed: int = 0

    def to_records(self) -> list[dict]:
        rows = [{"kind": "clip", **c} for c in self.clips]
        rows.append({"kind": "summary", "mask": self.mask_label,
                     "episodes_per_clip": self.episodes_per_clip,
                     "frame_rate": self.frame_rate, "seed": self.seed,
                     "active": list(self.active), **self.summary})
        return rows


def save_report(report: TrackingReport, path: str | Path) -> None:
    doc = {"version": 1, "clips": report.clips, "summary": report.summary,
           "active": list(report.active), "mask": report.mask_label,
           "episodes_per_clip": report.episodes_per_clip,
           "frame_rate": report.frame_rate, "seed": report.seed}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_report(path: str | Path) -> TrackingReport:
    doc = json.loads(Path(path).read_text())
    return TrackingReport(
        clips=doc["clips"], summary=doc["summary"],
        active=tuple(doc["active"]), mask_label=doc["mask"],
        episodes_per_clip=doc["episodes_per_clip"],
        frame_rate=doc["frame_rate"], seed=doc["seed"])


def report_csv(report: TrackingReport) -> str:
    """Delimited per-clip rows plus a dataset summary row."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["clip", "episodes", "frames", *METRICS])
    for row in report.clips:
        writer.writerow([row["clip"], row["episodes"], row["frames"],
                         *(repr(row[m]) for m in METRICS)])
    total = sum(r["frames"] for r in report.clips)
    writer.writerow(["summary", report.episodes_per_clip, total,
                     *(repr(report.summary[m]) for m in METRICS)])
    return buf.getvalue()


def _mask_label(mask) -> str:
    if mask is None:
        return "none"
    if isinstance(mask, str):
        return mask
    if all(mask.mode) and all(mask.sparsity):
        return "full"
    return "custom"


def evaluate(policy, mask, clips: list[MotionClip], model: RobotModel,
             episodes_per_clip: int = 1, seed: int = 0,
             randomize: bool = True, params: SimParams | None = None,
             ranges: RandomizationRanges | None = None) -> TrackingReport:
    """Roll the policy over every clip and score the metric suite.

    Each episode draws its physics and noise from a generator keyed by
    (seed, clip name, episode index), so per-clip numbers are
    independent of clip ordering and batching. Rollouts start at the
    clip beginning,
    use the training termination rules, and average errors over frames
    collected before termination. ``mask`` picks the observation style:
    None evaluates a full-state tracking policy, a preset name or
    CommandMask evaluates a masked student. A KinematicReplay policy
    skips the dynamics entirely and replays the reference.
    """
    if not clips:
        raise ValueError("empty dataset")
    if episodes_per_clip < 1:
        raise ValueError("episodes_per_clip must be at least 1")
    params = params or SimParams()
    layout = cmd.command_layout(model)
    mask_obj = None
    if isinstance(mask, str):
        mask_obj = cmd.preset(layout, mask)
    elif mask is not None:
        mask_obj = mask
    upper_idx = np.asarray(model.joints_in_region(UPPER))
    lower_idx = np.asarray([j for j in range(model.num_joints)
                            if j not in set(upper_idx.tolist())])
    frame_rate = 1.0 / params.control_dt

    replay = isinstance(policy, KinematicReplay)
    if replay:
        sim = PlanarSim(model, 1, params)
    else:
        env = TrackingEnv(model, clips,
                          EnvConfig(num_envs=1, randomize=randomize),
                          masks=mask, seed=seed, params=params,
                          ranges=ranges)
        act = _policy_fn(policy)
        max_steps = int(max(c.duration for c in clips) / env.dt) + 2

    clip_rows: list[dict] = []
    for ci, clip in enumerate(clips):
        ep_metrics: list[dict] = []
        survivals = []
        frames = 0
        for ei in range(episodes_per_clip):
            if replay:
                (kp, rp, rr, rv, js), survived = _replay_streams(
                    model, sim, clip, params.termination_margin,
                    params.ground_height)
                pred = {"kp": kp, "pos": rp, "rot": rr, "vel": rv, "j": js}
                ref = pred
            else:
                key = zlib.crc32(clip.name.encode())
                env.rng = np.random.default_rng([seed, key, ei])
                obs = env.reset_to(ci, mask=mask_obj)
                rows = []
                survived = False
                for _ in range(max_steps):
                    obs, _, done, info = env.step(act(obs))
                    if not info["failed"][0]:
                        body = info["body"]
                        fr = info["frame"]
                        rows.append((
                            keypoints_from_bodies(
                                model, body.body_pos, body.body_rot)[0],
                            body.root_pos[0], body.root_rot[0],
                            info["root_vel"][0], info["joint_pos"][0],
                            keypoints_from_bodies(
                                model, fr.body_pos, fr.body_rot)[0],
                            fr.root_pos[0], fr.root_rot[0],
                            fr.root_vel[0], fr.joint_pos[0]))
                    if done[0]:
                        survived = bool(info["timeout"][0])
                        break
                cols = [np.asarray(c, dtype=np.float64)
                        for c in zip(*rows)] if rows else [np.zeros(0)] * 10
                pred = {"kp": cols[0], "pos": cols[1], "rot": cols[2],
                        "vel": cols[3], "j": cols[4]}
                ref = {"kp": cols[5], "pos": cols[6], "rot": cols[7],
                       "vel": cols[8], "j": cols[9]}
            survivals.append(float(survived))
            frames += pred["kp"].shape[0]
            if pred["kp"].shape[0] >= 1:
                ep_metrics.append(_episode_metrics(
                    pred["kp"], ref["kp"],
                    {"pos": pred["pos"], "rot": pred["rot"],
                     "vel": pred["vel"]},
                    {"pos": ref["pos"], "rot": ref["rot"],
                     "vel": ref["vel"]},
                    pred["j"], ref["j"], upper_idx, lower_idx, frame_rate))
        row = {"clip": clip.name, "episodes": episodes_per_clip,
               "frames": frames, "survival": float(np.mean(survivals))}
        for m in METRICS[1:]:
            vals = [em[m] for em in ep_metrics if m in em]
            row[m] = float(np.mean(vals)) if vals else 0.0
        clip_rows.append(row)

    summary = {m: float(np.mean([c[m] for c in clip_rows])) for m in METRICS}
    return TrackingReport(
        clips=clip_rows, summary=summary,
        active=active_metrics(layout, mask_obj),
        mask_label=_mask_label(mask), episodes_per_clip=episodes_per_clip,
        frame_rate=frame_rate, seed=seed)


# ---------------------------------------------------------------------------
# comparison reports
# ---------------------------------------------------------------------------


@dataclass
class Comparison:
    names: tuple[str, ...]
    values: dict                     # values[name][metric]
    winners: dict                    # winners[metric] -> name or None (tie)
    active: tuple[str, ...]
    table: str
    csv: str


def _winner(metric: str, entries: list[tuple[str, float]]) -> str | None:
    vals = [v for _, v in entries]
    best = max(vals) if metric in HIGHER_BETTER else min(vals)
    hits = [n for n, v in entries if v == best]
    return hits[0] if len(hits) == 1 else None


def compare_report(reports: list[tuple[str, TrackingReport]]) -> Comparison:
    """Methods-by-metrics matrix with the best value flagged per column.

    All reports must cover the same clips under the same mask. In the
    text table the winning value carries a ``*`` and metric columns the
    mask actively tracks carry a ``+`` in the header; ties stay
    unflagged. The CSV holds the raw matrix plus a winner row.
    """
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    names = tuple(n for n, _ in reports)
    if len(set(names)) != len(names):
        raise ValueError("report names must be unique")
    first = reports[0][1]
    base_clips = tuple(c["clip"] for c in first.clips)
    for name, rep in reports[1:]:
        if tuple(c["clip"] for c in rep.clips) != base_clips:
            raise ValueError(f"report {name!r} covers a different dataset")
        if rep.active != first.active:
            raise ValueError(f"report {name!r} uses a different mask")
    values = {name: {m: rep.summary[m] for m in METRICS}
              for name, rep in reports}
    winners = {m: _winner(m, [(n, values[n][m]) for n in names])
               for m in METRICS}
    active = first.active

    headers = [f"{m}{'+' if m in active else ''}"
               + (f" {UNITS[m]}" if UNITS[m] else "")
               for m in METRICS]
    name_w = max(len("method"), *(len(n) for n in names))
    widths = [max(len(h), 10) for h in headers]
    group_cells = []
    for gname, members in GROUPS:
        span = sum(w for m, w in zip(METRICS, widths) if m in members) \
            + 3 * (len(members) - 1)
        group_cells.append(gname.center(span))
    lines = [" " * name_w + " | " + " | ".join(group_cells)]
    lines.append("method".ljust(name_w) + " | "
                 + " | ".join(h.rjust(w) for h, w in zip(headers, widths)))
    lines.append("-" * len(lines[1]))
    for n in names:
        cells = []
        for m, w in zip(METRICS, widths):
            mark = "*" if winners[m] == n else ""
            cells.append(f"{values[n][m]:.3f}{mark}".rjust(w))
        lines.append(n.ljust(name_w) + " | " + " | ".join(cells))
    table = "\n".join(lines)

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["method", *METRICS])
    for n in names:
        writer.writerow([n, *(repr(values[n][m]) for m in METRICS)])
    writer.writerow(["winner", *(winners[m] or "tie" for m in METRICS)])
    return Comparison(names=names, values=values, winners=winners,
                      active=active, table=table, csv=buf.getvalue())
