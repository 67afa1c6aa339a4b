"""Batched clip-tracking environment.

Ties the planar simulator to the motion library: every environment
follows its own clip from a uniformly drawn start phase, physics are
re-drawn per episode, and two observation styles are assembled in
lockstep:

* tracking observation: current per-link kinematics (positions with x
  taken relative to the root, angles, velocities) plus the previous
  action and a one-frame-lookahead goal over all links
* deployment observation: a rolling history of joint readings, base
  angular velocity and the gravity direction in the base frame, the
  same number of past actions, and the masked command goal

Rewards score the post-step state against the frame the lookahead goal
pointed at, so an action that lands the robot exactly on the commanded
frame saturates the task terms. Episodes end on a fall, on losing the
reference (mean keypoint error beyond the cutoff), or when the clip runs
out; only the first two count as failures for the termination penalty.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import commands as cmd
from .motion import MotionClip, ReferenceFrame, keypoints_from_bodies, sample_frame
from .rewards import (GaitParams, GaitTracker, RewardSigmas, RewardWeights,
                      StepState, compute_reward)
from .robot import RobotModel
from .sim import (FELL, LOST_TRACKING, PlanarSim, RandomizationRanges,
                  SimParams, sample_scales)


class EnvError(ValueError):
    """Raised for malformed environment configuration."""


@dataclass(frozen=True)
class EnvConfig:
    num_envs: int = 64
    action_scale: float = 0.3   # PD target = action_scale * action, rad
    history_steps: int = 25     # deployment-observation stack depth
    randomize: bool = True      # re-draw physics scales every episode

    def __post_init__(self):
        if self.num_envs < 1:
            raise EnvError("num_envs must be at least 1")
        if self.action_scale <= 0:
            raise EnvError("action_scale must be positive")
        if self.history_steps < 1:
            raise EnvError("history_steps must be at least 1")


def _stack_frames(frames: list[ReferenceFrame]) -> ReferenceFrame:
    return ReferenceFrame(**{
        f.name: np.stack([np.asarray(getattr(fr, f.name), dtype=np.float64)
                          for fr in frames])
        for f in dataclasses.fields(ReferenceFrame)})


def _copy_frame(frame: ReferenceFrame) -> ReferenceFrame:
    return ReferenceFrame(**{
        f.name: np.array(getattr(frame, f.name))
        for f in dataclasses.fields(ReferenceFrame)})


class TrackingEnv:
    """Vectorized motion-imitation environment.

    ``masks`` selects the primary observation style: None runs in
    tracking mode (full-state observation, no command masking); the
    string "random" draws a fresh Bernoulli mask per episode; a preset
    name fixes that preset's mask; a CommandMask instance fixes an
    explicit mask. In every masked mode the tracking observation stays
    available through :meth:`oracle_observation` so a teacher policy can
    be queried alongside.
    """

    def __init__(self, model: RobotModel, clips: list[MotionClip],
                 config: EnvConfig | None = None,
                 masks: str | cmd.CommandMask | None = None,
                 weights: RewardWeights | None = None,
                 sigmas: RewardSigmas | None = None,
                 gait_params: GaitParams | None = None,
                 params: SimParams | None = None,
                 ranges: RandomizationRanges | None = None,
                 seed: int = 0, mask_seed: int | None = None):
        if not clips:
            raise EnvError("need at least one clip")
        self.model = model
        self.clips = list(clips)
        self.config = config or EnvConfig()
        self.params = params or SimParams()
        self.ranges = ranges or RandomizationRanges()
        self.weights = weights or RewardWeights()
        self.sigmas = sigmas or RewardSigmas()
        self.gait_params = gait_params or GaitParams()
        self.layout = cmd.command_layout(model)
        self.rng = np.random.default_rng(seed)
        # masks may draw from their own stream so the same physics seed
        # can be replayed under different mask schedules
        self.mask_rng = self.rng if mask_seed is None \
            else np.random.default_rng(mask_seed)

        self._mask_spec = masks
        if isinstance(masks, str) and masks != "random":
            cmd.preset(self.layout, masks)  # validate the name now

        E = self.config.num_envs
        J = model.num_joints
        self.sim = PlanarSim(model, E, self.params)
        self.dt = self.params.control_dt
        self.q = np.zeros((E, model.num_dof))
        self.qd = np.zeros_like(self.q)
        self.anchors = np.full((E, len(model.contact_points)), np.nan)
        self.t = np.zeros(E)
        self.clip_idx = np.zeros(E, dtype=np.intp)
        self.durations = np.zeros(E)
        self.prev_action = np.zeros((E, J))
        self.gait = GaitTracker(E, len(model.contact_points), self.dt)
        self.episode_count = 0
        self.episode_ids = np.zeros(E, dtype=np.intp)

        self.masks: list[cmd.CommandMask | None] = [None] * E
        self._mask_vec = np.zeros((E, self.layout.width))
        self._mask_bits = np.zeros((E, self.layout.mask_width))

        H = self.config.history_steps
        self._snap_width = 2 * J + 3  # q, qd, base angular velocity, gravity dir
        self._hist_proprio = np.zeros((E, H, self._snap_width))
        self._hist_action = np.zeros((E, H, J))

        zero = [sample_frame(self.clips[0], 0.0)] * E
        self.frame_now = _stack_frames(zero)
        self.frame_next = _stack_frames(zero)
        self.body = self._body_state(self.sim.fk_full(self.q, self.qd))
        self.reset()

    # -- widths ------------------------------------------------------------

    @property
    def student_mode(self) -> bool:
        return self._mask_spec is not None

    @property
    def oracle_obs_width(self) -> int:
        L, J = len(self.model.links), self.model.num_joints
        return 6 * L + J + cmd.oracle_goal_width(self.model)

    @property
    def student_obs_width(self) -> int:
        H, J = self.config.history_steps, self.model.num_joints
        return H * (self._snap_width + J) + self.layout.width + self.layout.mask_width

    @property
    def observation_width(self) -> int:
        return self.student_obs_width if self.student_mode else self.oracle_obs_width

    @property
    def mask_bits(self) -> np.ndarray:
        """Active mask bits per env, (num_envs, mask width)."""
        return self._mask_bits.copy()

    @property
    def mask_vectors(self) -> np.ndarray:
        """Per-column command activation per env, (num_envs, command width)."""
        return self._mask_vec.copy()

    # -- episode management --------------------------------------------------

    def _draw_mask(self) -> cmd.CommandMask:
        spec = self._mask_spec
        ep = self.episode_count
        if spec == "random":
            return cmd.sample_mask(self.layout, self.mask_rng, episode=ep)
        if isinstance(spec, str):
            return cmd.preset(self.layout, spec, episode=ep)
        return dataclasses.replace(spec, episode=ep)

    def _seed_env(self, e: int, clip_i: int, phase: float,
                  mask: cmd.CommandMask | None) -> None:
        clip = self.clips[clip_i]
        frame = sample_frame(clip, phase)
        nxt = sample_frame(clip, min(phase + self.dt, clip.duration))
        self.clip_idx[e] = clip_i
        self.durations[e] = clip.duration
        self.t[e] = phase
        self.q[e] = np.concatenate(
            [frame.root_pos, [frame.root_rot], frame.joint_pos])
        self.qd[e] = np.concatenate(
            [frame.root_vel, [frame.root_ang_vel], frame.joint_vel])
        self.anchors[e] = np.nan
        self.prev_action[e] = frame.joint_pos / self.config.action_scale
        for f in dataclasses.fields(ReferenceFrame):
            getattr(self.frame_now, f.name)[e] = getattr(frame, f.name)
            getattr(self.frame_next, f.name)[e] = getattr(nxt, f.name)
        self.episode_ids[e] = self.episode_count
        if mask is not None:
            self.masks[e] = mask
            self._mask_vec[e] = cmd.mask_vector(self.layout, mask)
            self._mask_bits[e] = cmd.mask_bits(self.layout, mask)
        self.episode_count += 1

    def _finish_reset(self, ids: np.ndarray) -> None:
        if self.config.randomize:
            draws = [sample_scales(self.ranges, self.rng) for _ in ids]
            self.sim.apply_scales(np.asarray(ids), {
                key: np.array([d[key] for d in draws])
                for key in ("mass", "kp", "kd", "friction")})
        self.gait.reset(np.asarray(ids))
        fkr = self.sim.fk_full(self.q[ids], self.qd[ids])
        fresh = self._body_state(fkr, self.q[ids])
        for f in dataclasses.fields(cmd.BodyState):
            getattr(self.body, f.name)[ids] = getattr(fresh, f.name)
        # history padding: the initial reading repeated over every slot
        snap = self._snapshot(ids)
        self._hist_proprio[ids] = snap[:, None, :]
        self._hist_action[ids] = self.prev_action[ids, None, :]

    def _reset_ids(self, ids: np.ndarray) -> None:
        for e in ids:
            clip_i = int(self.rng.integers(len(self.clips)))
            clip = self.clips[clip_i]
            phase = float(self.rng.uniform(0.0, max(clip.duration - self.dt, 0.0)))
            mask = self._draw_mask() if self.student_mode else None
            self._seed_env(e, clip_i, phase, mask)
        self._finish_reset(np.asarray(ids))

    def reset(self, env_ids: np.ndarray | None = None) -> np.ndarray:
        ids = np.arange(self.config.num_envs) if env_ids is None else env_ids
        self._reset_ids(np.asarray(ids))
        return self.observe()

    def reset_to(self, clip_idx: int, env_ids: np.ndarray | None = None,
                 phase: float = 0.0,
                 mask: str | cmd.CommandMask | None = None) -> np.ndarray:
        """Pin the given envs to one clip, phase and mask.

        Evaluation-style reset: no clip or phase randomness (physics
        randomization still re-draws when enabled). In masked modes a
        mask may be given as a preset name or CommandMask; None draws
        per the env's mask policy.
        """
        if not 0 <= clip_idx < len(self.clips):
            raise EnvError(f"clip index {clip_idx} out of range")
        clip = self.clips[clip_idx]
        if not 0.0 <= phase <= clip.duration:
            raise EnvError(f"phase {phase} outside [0, {clip.duration}]")
        ids = np.arange(self.config.num_envs) if env_ids is None \
            else np.asarray(env_ids)
        for e in ids:
            m = None
            if self.student_mode:
                if mask is None:
                    m = self._draw_mask()
                elif isinstance(mask, str):
                    m = cmd.preset(self.layout, mask,
                                   episode=self.episode_count)
                else:
                    m = dataclasses.replace(mask, episode=self.episode_count)
            self._seed_env(e, clip_idx, float(phase), m)
        self._finish_reset(ids)
        return self.observe()

    # -- state assembly --------------------------------------------------------

    def _body_state(self, fkr: dict, q: np.ndarray | None = None) -> cmd.BodyState:
        q = self.q if q is None else q
        return cmd.BodyState(
            root_pos=q[:, :2].copy(), root_rot=q[:, 2].copy(),
            body_pos=fkr["link_com"], body_rot=fkr["link_angle"],
            body_vel=fkr["link_com_vel"], body_ang_vel=fkr["link_ang_vel"])

    def _noise(self, shape) -> np.ndarray:
        if not self.config.randomize or self.ranges.obs_noise == 0.0:
            return np.zeros(shape)
        return self.rng.normal(scale=self.ranges.obs_noise, size=shape)

    def _snapshot(self, ids) -> np.ndarray:
        """One deployment proprioception reading per selected env."""
        q, qd = self.q[ids], self.qd[ids]
        pitch = q[:, 2]
        gravity = np.stack([-np.sin(pitch), -np.cos(pitch)], axis=-1)
        snap = np.concatenate(
            [q[:, 3:], qd[:, 3:], qd[:, 2:3], gravity], axis=-1)
        return snap + self._noise(snap.shape)

    def oracle_observation(self) -> np.ndarray:
        """Full-state tracking observation, available in every mode."""
        b = self.body
        E = self.config.num_envs
        rel = b.body_pos.copy()
        rel[..., 0] -= b.root_pos[:, None, 0]
        proprio = np.concatenate([
            rel.reshape(E, -1), b.body_rot,
            b.body_vel.reshape(E, -1), b.body_ang_vel], axis=-1)
        proprio += self._noise(proprio.shape)
        goal = cmd.build_oracle_goal(self.frame_next, self.frame_now, b)
        return np.concatenate([proprio, self.prev_action, goal.vector], axis=-1)

    def student_observation(self) -> np.ndarray:
        """Deployment observation. The command targets the frame one
        control step ahead, the same frame the tracking observation's
        goal block points at and the next reward scores against."""
        if not self.student_mode:
            raise EnvError("environment was built without command masks")
        E = self.config.num_envs
        command = cmd.build_command(self.layout, self.model, self.frame_next, self.body)
        goal = np.concatenate([command * self._mask_vec, self._mask_bits], axis=-1)
        return np.concatenate([
            self._hist_proprio.reshape(E, -1),
            self._hist_action.reshape(E, -1), goal], axis=-1)

    def observe(self) -> np.ndarray:
        return self.student_observation() if self.student_mode \
            else self.oracle_observation()

    # -- stepping ------------------------------------------------------------

    def step(self, actions: np.ndarray):
        """Advance one control step. Returns (obs, reward, done, info);
        done environments are reset in place and obs reflects the reset."""
        a = np.asarray(actions, dtype=np.float64)
        if a.shape != self.prev_action.shape:
            raise EnvError(f"actions shape {a.shape} != {self.prev_action.shape}")
        prev_qd = self.qd[:, 3:].copy()
        targets = self.config.action_scale * a
        self.q, self.qd, self.anchors, sinfo = self.sim.step(
            self.q, self.qd, targets, self.anchors)
        self.t += self.dt
        self.frame_now = self.frame_next
        self.frame_next = self._sample_batch(self.t + self.dt)

        fkr = self.sim.fk_full(self.q, self.qd)
        self.body = self._body_state(fkr)
        heights = fkr["contacts"][..., 1] - self.params.ground_height
        events = self.gait.update(sinfo["contact"], heights)

        kp_ref = keypoints_from_bodies(
            self.model, self.frame_now.body_pos, self.frame_now.body_rot)
        track_err = np.linalg.norm(
            fkr["keypoints"] - kp_ref, axis=-1).mean(axis=-1)
        fell = self.sim.check_points(self.q).min(axis=1) \
            < self.params.ground_height + self.params.termination_margin
        lost = track_err > self.params.tracking_cutoff
        failed = fell | lost
        timeout = self.t + self.dt > self.durations + 1e-9

        state = StepState(
            model=self.model,
            joint_pos=self.q[:, 3:], joint_vel=self.qd[:, 3:],
            joint_acc=(self.qd[:, 3:] - prev_qd) / self.dt,
            root_vel=self.qd[:, :2], body=self.body,
            torque=sinfo["torque"], torque_excess=sinfo["torque_excess"],
            contact=sinfo["contact"], contact_force=sinfo["contact_force"],
            foot_vel=fkr["contact_vel"], gait=events, terminated=failed)
        reward, breakdown = compute_reward(
            self.weights, state, a, self.prev_action, self.frame_now,
            self.sigmas, self.gait_params)

        self._hist_proprio = np.roll(self._hist_proprio, -1, axis=1)
        self._hist_action = np.roll(self._hist_action, -1, axis=1)
        self._hist_proprio[:, -1] = self._snapshot(slice(None))
        self._hist_action[:, -1] = a
        self.prev_action = a.copy()

        done = failed | timeout
        reason = np.where(fell, FELL, np.where(lost, LOST_TRACKING,
                          np.where(timeout, "timeout", "")))
        info = {
            "breakdown": breakdown,
            "failed": failed,
            "timeout": timeout,
            "reason": reason,
            "tracking_error": track_err,
            "episode_ids": self.episode_ids.copy(),
            "body": dataclasses.replace(self.body, **{
                f.name: np.array(getattr(self.body, f.name))
                for f in dataclasses.fields(cmd.BodyState)}),
            "frame": _copy_frame(self.frame_now),
            "joint_pos": self.q[:, 3:].copy(),
            "joint_vel": self.qd[:, 3:].copy(),
            "root_vel": self.qd[:, :2].copy(),
        }
        if done.any():
            self._reset_ids(np.flatnonzero(done))
        return self.observe(), reward, done, info

    def _sample_batch(self, times: np.ndarray) -> ReferenceFrame:
        frames = []
        for e in range(self.config.num_envs):
            clip = self.clips[self.clip_idx[e]]
            frames.append(sample_frame(clip, min(float(times[e]), clip.duration)))
        return _stack_frames(frames)
