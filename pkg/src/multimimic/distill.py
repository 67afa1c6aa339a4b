"""DAgger distillation of the tracking teacher into the masked student.

The student drives the environment while the teacher is queried at every
step on the simultaneously assembled full-state observation; the pairs
(student observation, teacher action) aggregate into a FIFO buffer that
spans iterations, and the student regresses the teacher's actions with a
plain mean-squared loss on its deterministic head.

Masks are drawn per episode and stay fixed until the episode ends, so
one student learns every command mode. Goal inputs are clean by default;
``DaggerConfig.goal_noise_std`` optionally perturbs the active command
entries during collection for extra robustness (off unless asked for).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import commands as cmd
from .env import EnvConfig, TrackingEnv
from .motion import MotionClip
from .nets import Adam, MlpSpec, PolicyNet, load_net, save_net
from .robot import RobotModel
from .sim import RandomizationRanges, SimParams, SimulationError


class DaggerError(RuntimeError):
    pass


@dataclass(frozen=True)
class DaggerConfig:
    iterations: int = 50
    steps_per_iteration: int = 2048     # pairs collected per iteration
    minibatch_size: int = 256
    learning_rate: float = 1e-3
    capacity: int = 1_000_000           # FIFO pair budget
    mask_seed: int | None = None        # separate stream for mask draws
    num_envs: int = 16
    updates_per_iteration: int = 64
    goal_noise_std: float = 0.0         # optional noise on active goal slots
    eval_every: int = 0                 # extra preset evals every k iterations
    eval_steps: int = 200

    def __post_init__(self):
        if min(self.iterations, self.steps_per_iteration,
               self.minibatch_size, self.num_envs,
               self.updates_per_iteration, self.eval_steps) < 1:
            raise ValueError("counts must be at least 1")
        if self.capacity < self.steps_per_iteration:
            raise ValueError("capacity must cover one iteration's pairs")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.goal_noise_std < 0.0 or self.eval_every < 0:
            raise ValueError("goal_noise_std and eval_every must be >= 0")


class AggregateBuffer:
    """FIFO store of (observation, target action) pairs.

    Rows keep arrival order; once the pair count passes the capacity the
    oldest rows are dropped, so eviction is deterministic.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self.obs: np.ndarray | None = None
        self.actions: np.ndarray | None = None

    def __len__(self) -> int:
        return 0 if self.obs is None else self.obs.shape[0]

    def add(self, obs: np.ndarray, actions: np.ndarray) -> None:
        if obs.shape[0] != actions.shape[0]:
            raise ValueError("observation and action counts differ")
        if self.obs is None:
            self.obs, self.actions = obs.copy(), actions.copy()
        else:
            self.obs = np.concatenate([self.obs, obs])
            self.actions = np.concatenate([self.actions, actions])
        if len(self) > self.capacity:
            self.obs = self.obs[-self.capacity:]
            self.actions = self.actions[-self.capacity:]

    def sample(self, rng: np.random.Generator, count: int):
        if len(self) == 0:
            raise DaggerError("buffer is empty")
        idx = rng.integers(len(self), size=count)
        return self.obs[idx], self.actions[idx]


def dagger_update(student: PolicyNet, obs: np.ndarray, targets: np.ndarray,
                  opt: Adam) -> float:
    """One supervised step on the deterministic head.

    Loss is the mean squared error over every action element (a single
    pair with one unit-error coordinate scores 1/action_dim).
    """
    if obs.shape[0] == 0:
        raise DaggerError("empty batch")
    pred, cache = student.mlp.forward_cached(obs)
    err = pred - targets
    loss = float(np.mean(err * err))
    if not np.isfinite(loss):
        raise DaggerError(
            f"non-finite distillation loss: pred range "
            f"[{pred.min():.3g}, {pred.max():.3g}], target range "
            f"[{targets.min():.3g}, {targets.max():.3g}]")
    grads, _ = student.mlp.backward(cache, (2.0 / err.size) * err)
    opt.step(student.mlp.params(), grads)
    return loss


@dataclass
class Trajectory:
    """One student-driven episode with the teacher queried alongside."""
    student_obs: np.ndarray         # (T, student width)
    oracle_obs: np.ndarray          # (T, full-state width)
    student_actions: np.ndarray     # (T, action width)
    oracle_actions: np.ndarray      # (T, action width)
    mask_bits: np.ndarray           # (T, mask width), constant per episode
    mask: cmd.CommandMask

    def __len__(self) -> int:
        return self.student_obs.shape[0]


def _mean_action(net):
    return net.mean if isinstance(net, PolicyNet) else net.forward


def rollout_student(student, oracle, env: TrackingEnv,
                    clip: MotionClip | int, mask, steps: int):
    """Roll one episode with the student in control.

    ``student=None`` drives with the teacher's own action (the teacher
    acting through its full-state view), which makes the recorded action
    gap exactly zero. Returns None when the episode hits a non-finite
    observation or the dynamics blow up; such episodes are excluded.
    """
    if env.config.num_envs != 1:
        raise DaggerError("rollout_student expects a single-env setup")
    if not env.student_mode:
        raise DaggerError("env must expose the student observation")
    clip_idx = clip if isinstance(clip, int) else env.clips.index(clip)
    obs = env.reset_to(clip_idx, mask=mask)
    episode_mask = env.masks[0]
    oracle_act = _mean_action(oracle)
    student_act = _mean_action(student) if student is not None else None
    rows = []
    for _ in range(steps):
        o_obs = env.oracle_observation()
        if not (np.isfinite(obs).all() and np.isfinite(o_obs).all()):
            return None
        a_o = oracle_act(o_obs)
        a_s = a_o.copy() if student_act is None else student_act(obs)
        rows.append((obs[0], o_obs[0], a_s[0], a_o[0], env.mask_bits[0]))
        try:
            obs, _, done, _ = env.step(a_s)
        except SimulationError:
            return None
        if done[0]:
            break
    cols = [np.stack(c) for c in zip(*rows)]
    return Trajectory(*cols, mask=episode_mask)


@dataclass
class DistillResult:
    student: PolicyNet
    records: list[dict]
    buffer: AggregateBuffer
    diverged: bool = False
    out_dir: Path | None = None


def _checksum(net) -> str:
    h = hashlib.sha256()
    for p in net.params():
        h.update(p.tobytes())
    return h.hexdigest()


def _preset_eval(student, model, clips, preset_name: str, seed: int,
                 steps: int) -> dict[str, float]:
    env = TrackingEnv(model, clips,
                      EnvConfig(num_envs=4, randomize=False),
                      masks=preset_name, seed=seed)
    act = _mean_action(student)
    obs = env.observe()
    err_sum, failures, episodes = 0.0, 0, 0
    for _ in range(steps):
        obs, _, done, info = env.step(act(obs))
        err_sum += float(info["tracking_error"].mean())
        failures += int(info["failed"].sum())
        episodes += int(done.sum())
    return {"tracking_error": err_sum / steps,
            "episode_failures": failures / max(episodes, 1)}


def train_student(oracle, model: RobotModel, clips: list[MotionClip],
                  config: DaggerConfig | None = None, seed: int = 0,
                  out_dir: str | Path | None = None,
                  masks: str | cmd.CommandMask = "random",
                  randomize: bool = True,
                  params: SimParams | None = None,
                  ranges: RandomizationRanges | None = None,
                  hidden: tuple[int, ...] = (512, 256, 128)) -> DistillResult:
    """Distill the teacher into one multi-mode student.

    Per iteration: collect steps_per_iteration (student obs, teacher
    action) pairs with the student driving and a fresh mask per episode,
    append them to the FIFO buffer, then run supervised updates on
    sampled minibatches. The metric log records losses, cumulative
    per-mode mask coverage, and each started episode's mask bits packed
    as an integer. The teacher's parameters are checksummed and never
    change.
    """
    config = config or DaggerConfig()
    if isinstance(oracle, (str, Path)):
        oracle = load_net(oracle)
    rng = np.random.default_rng(seed)
    env = TrackingEnv(
        model, clips, EnvConfig(num_envs=config.num_envs, randomize=randomize),
        masks=masks, seed=seed, mask_seed=config.mask_seed,
        params=params, ranges=ranges)
    oracle_width = (oracle.mlp if isinstance(oracle, PolicyNet) else oracle
                    ).spec.input_width
    if oracle_width != env.oracle_obs_width:
        raise DaggerError(
            f"teacher consumes {oracle_width}-wide observations, "
            f"env provides {env.oracle_obs_width}")
    oracle_act = _mean_action(oracle)
    oracle_sum = _checksum(oracle)
    student = PolicyNet.init(
        MlpSpec(env.student_obs_width, model.num_joints, hidden), rng)
    opt = Adam(student.mlp.params(), lr=config.learning_rate)
    buffer = AggregateBuffer(config.capacity)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "metrics.jsonl"
        log_path.write_text("")
    else:
        log_path = None

    layout = env.layout
    mode_hits = np.zeros(layout.num_modes)
    episodes = 0
    new_masks: list[int] = []

    def bits_to_int(bits) -> int:
        return int(sum(int(b) << i for i, b in enumerate(bits)))

    def tally(mask: cmd.CommandMask) -> None:
        nonlocal episodes
        episodes += 1
        mode_hits[:] += np.asarray(mask.mode, dtype=float)
        new_masks.append(bits_to_int(mask.mode + mask.sparsity))

    for m in env.masks:
        tally(m)

    cw, mw = layout.width, layout.mask_width
    obs = env.observe()
    records: list[dict] = []
    diverged = False

    for it in range(config.iterations):
        chunk_obs, chunk_act = [], []
        collected = 0
        try:
            while collected < config.steps_per_iteration:
                o_obs = env.oracle_observation()
                if not (np.isfinite(obs).all() and np.isfinite(o_obs).all()):
                    raise DaggerError("non-finite observation")
                if config.goal_noise_std > 0.0:
                    noise = rng.normal(size=(config.num_envs, cw))
                    obs[:, -cw - mw:-mw] += \
                        config.goal_noise_std * noise * env.mask_vectors
                a_o = oracle_act(o_obs)
                a_s = _mean_action(student)(obs)
                chunk_obs.append(obs)
                chunk_act.append(a_o)
                obs, _, done, _ = env.step(a_s)
                collected += config.num_envs
                for e in np.flatnonzero(done):
                    tally(env.masks[e])
            buffer.add(np.concatenate(chunk_obs), np.concatenate(chunk_act))
            losses = [
                dagger_update(student, *buffer.sample(
                    rng, config.minibatch_size), opt)
                for _ in range(config.updates_per_iteration)]
        except (SimulationError, DaggerError):
            diverged = True
            break
        record = {
            "iteration": it + 1,
            "pairs": len(buffer),
            "loss": float(np.mean(losses)),
            "loss_final": losses[-1],
            "episodes": episodes,
            "episode_masks": new_masks,
            **{f"mask/{region}_{family}": float(mode_hits[k]) / episodes
               for k, (region, family) in enumerate(layout.modes)},
        }
        new_masks = []
        last = it + 1 == config.iterations
        if last or (config.eval_every and (it + 1) % config.eval_every == 0):
            for pi, name in enumerate(cmd.PRESET_NAMES):
                ev = _preset_eval(student, model, clips, name,
                                  seed + 7919 + pi, config.eval_steps)
                for key, val in ev.items():
                    record[f"eval/{name}/{key}"] = val
            if out_dir is not None:
                save_net(student, out_dir / "student.bin")
        records.append(record)
        _append_record(log_path, record)
    if out_dir is not None:
        save_net(student, out_dir / "student.bin")
    if _checksum(oracle) != oracle_sum:
        raise DaggerError("teacher parameters changed during distillation")
    return DistillResult(student=student, records=records, buffer=buffer,
                         diverged=diverged, out_dir=out_dir)


def _append_record(path: Path | None, record: dict) -> None:
    if path is None:
        return
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
