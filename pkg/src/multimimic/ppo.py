"""Proximal policy optimization over the tracking environment.

The actor is a Gaussian policy (MLP mean, learned state-independent
log-std); the critic is a separate value MLP that always consumes the
full-state tracking observation, even when the actor sees the masked
deployment observation. Rollouts, advantage estimation and the clipped
surrogate update are all plain numpy; gradients reuse the network
module's exact reverse-mode backward.

Everything draws from one generator seeded at entry, so identical seeds
reproduce identical metric logs bit for bit (single trainer context).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import commands as cmd
from .env import EnvConfig, TrackingEnv
from .motion import MotionClip
from .nets import (Adam, Mlp, MlpSpec, PolicyNet, gaussian_entropy,
                   gaussian_log_prob, save_net)
from .rewards import GaitParams, RewardSigmas, RewardWeights
from .robot import RobotModel
from .sim import RandomizationRanges, SimParams, SimulationError


class PpoError(RuntimeError):
    """Raised when an update produces non-finite quantities."""


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float = 0.2
    epochs: int = 4
    minibatch_size: int = 512
    learning_rate: float = 3e-4
    entropy_coef: float = 1e-3
    value_coef: float = 0.5
    horizon: int = 32
    num_envs: int = 64
    total_steps: int = 2_000_000
    kl_ceiling: float = 0.02        # epoch loop aborts beyond this
    reward_scale: float = 0.01      # buffer rewards only; logs stay unscaled

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        if self.clip_eps <= 0.0:
            raise ValueError("clip_eps must be positive")
        if min(self.epochs, self.minibatch_size, self.horizon,
               self.num_envs, self.total_steps) < 1:
            raise ValueError("counts must be at least 1")
        if self.learning_rate <= 0 or self.kl_ceiling <= 0 or self.reward_scale <= 0:
            raise ValueError("rates must be positive")
        if self.entropy_coef < 0 or self.value_coef < 0:
            raise ValueError("coefficients must be non-negative")


class RolloutBuffer:
    """Fixed (horizon, num_envs) transition store.

    Advantages and returns exist only after :meth:`compute_advantages`,
    which may be called again whenever the stored values change. The
    flattened batch length is always horizon * num_envs.
    """

    def __init__(self, horizon: int, num_envs: int, obs_width: int,
                 critic_obs_width: int, action_width: int):
        T, E = horizon, num_envs
        self.horizon, self.num_envs = T, E
        self.obs = np.zeros((T, E, obs_width))
        self.critic_obs = np.zeros((T, E, critic_obs_width))
        self.actions = np.zeros((T, E, action_width))
        self.log_probs = np.zeros((T, E))
        self.rewards = np.zeros((T, E))
        self.values = np.zeros((T, E))
        self.dones = np.zeros((T, E), dtype=bool)
        self.episode_ids = np.zeros((T, E), dtype=np.intp)
        self.advantages = None
        self.returns = None
        self.ptr = 0

    @property
    def full(self) -> bool:
        return self.ptr == self.horizon

    def reset(self) -> None:
        self.ptr = 0
        self.advantages = None
        self.returns = None

    def add(self, obs, critic_obs, actions, log_probs, rewards, values,
            dones, episode_ids) -> None:
        if self.full:
            raise PpoError("rollout buffer is full")
        t = self.ptr
        self.obs[t] = obs
        self.critic_obs[t] = critic_obs
        self.actions[t] = actions
        self.log_probs[t] = log_probs
        self.rewards[t] = rewards
        self.values[t] = values
        self.dones[t] = dones
        self.episode_ids[t] = episode_ids
        self.ptr += 1

    def compute_advantages(self, last_values: np.ndarray, gamma: float,
                           lam: float) -> None:
        if not self.full:
            raise PpoError(f"buffer holds {self.ptr}/{self.horizon} steps")
        self.advantages, self.returns = gae(
            self.rewards, self.values, self.dones, gamma, lam, last_values)

    def flat(self) -> dict[str, np.ndarray]:
        if self.advantages is None:
            raise PpoError("compute_advantages first")
        N = self.horizon * self.num_envs
        return {
            "obs": self.obs.reshape(N, -1),
            "critic_obs": self.critic_obs.reshape(N, -1),
            "actions": self.actions.reshape(N, -1),
            "log_probs": self.log_probs.reshape(N),
            "advantages": self.advantages.reshape(N),
            "returns": self.returns.reshape(N),
            "episode_ids": self.episode_ids.reshape(N),
        }


def gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
        gamma: float, lam: float,
        last_values: np.ndarray | None = None
        ) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over a (T, ...) batch.

    ``last_values`` bootstraps the state after the final row (zeros when
    omitted, which is exact when every trajectory ends there). Episode
    boundaries (done flags) cut both the bootstrap and the recursion.
    Returns are advantages + values.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    live = 1.0 - np.asarray(dones, dtype=np.float64)
    if not rewards.shape == values.shape == live.shape:
        raise ValueError("rewards, values, dones must share a shape")
    T = rewards.shape[0]
    advantages = np.zeros_like(rewards)
    next_value = np.zeros_like(values[0]) if last_values is None \
        else np.asarray(last_values, dtype=np.float64)
    acc = np.zeros_like(values[0])
    for t in reversed(range(T)):
        delta = rewards[t] + gamma * next_value * live[t] - values[t]
        acc = delta + gamma * lam * live[t] * acc
        advantages[t] = acc
        next_value = values[t]
    return advantages, advantages + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def _policy_gradients(policy: PolicyNet, obs, actions, old_log_probs, adv,
                      config: PpoConfig):
    """Clipped-surrogate loss gradients for every policy parameter.

    A sample stops contributing gradient once the min() picks the
    clipped branch: ratio above 1+eps with positive advantage, or below
    1-eps with negative advantage. The entropy bonus only reaches
    log_std (the mean does not enter the Gaussian entropy).
    """
    B = obs.shape[0]
    mean, cache = policy.mlp.forward_cached(obs)
    log_std = policy.log_std_clamped()
    std = np.exp(log_std)
    log_probs = gaussian_log_prob(mean, log_std, actions)
    diff = log_probs - old_log_probs
    ratio = np.exp(diff)
    eps = config.clip_eps

    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    surrogate = np.minimum(unclipped, clipped)
    keep = ~(((adv >= 0) & (ratio > 1.0 + eps))
             | ((adv < 0) & (ratio < 1.0 - eps)))
    entropy = gaussian_entropy(log_std)
    loss = -surrogate.mean() - config.entropy_coef * entropy

    dlogp = -(adv * ratio * keep) / B
    z = (actions - mean) / std
    dmean = dlogp[:, None] * z / std
    dlog_std = (dlogp[:, None] * (z * z - 1.0)).sum(axis=0)
    dlog_std -= config.entropy_coef
    lo, hi = policy.log_std_bounds
    dlog_std *= (policy.log_std > lo) & (policy.log_std < hi)
    grads, _ = policy.mlp.backward(cache, dmean)
    stats = {
        "policy_loss": float(loss),
        "entropy": entropy,
        "approx_kl": float(np.mean(ratio - 1.0 - diff)),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > eps)),
    }
    return grads + [dlog_std], stats


def _value_gradients(critic: Mlp, obs, returns, value_coef: float):
    B = obs.shape[0]
    values, cache = critic.forward_cached(obs)
    err = values[:, 0] - returns
    loss = value_coef * float(np.mean(err * err))
    dout = (2.0 * value_coef / B) * err[:, None]
    grads, _ = critic.backward(cache, dout)
    return grads, loss


def ppo_update(policy: PolicyNet, critic: Mlp, buffer: RolloutBuffer,
               config: PpoConfig, policy_opt: Adam, critic_opt: Adam,
               rng: np.random.Generator) -> dict:
    """Run the configured epochs of minibatch updates on a full buffer.

    Advantages are normalized once over the whole batch. The epoch loop
    aborts (without applying the offending minibatch) as soon as the
    approximate KL passes the ceiling. Non-finite losses halt the run.
    """
    data = buffer.flat()
    adv = normalize_advantages(data["advantages"])
    N = adv.shape[0]
    sums = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
            "approx_kl": 0.0, "clip_fraction": 0.0}
    updates = 0
    stopped = False
    for _ in range(config.epochs):
        perm = rng.permutation(N)
        for start in range(0, N, config.minibatch_size):
            mb = perm[start:start + config.minibatch_size]
            pgrads, pstats = _policy_gradients(
                policy, data["obs"][mb], data["actions"][mb],
                data["log_probs"][mb], adv[mb], config)
            vgrads, value_loss = _value_gradients(
                critic, data["critic_obs"][mb], data["returns"][mb],
                config.value_coef)
            if not (np.isfinite(pstats["policy_loss"])
                    and np.isfinite(value_loss)):
                raise PpoError(
                    "non-finite loss: "
                    f"policy={pstats['policy_loss']!r} value={value_loss!r} "
                    f"adv=[{adv.min():.3g}, {adv.max():.3g}] "
                    f"returns=[{data['returns'].min():.3g}, "
                    f"{data['returns'].max():.3g}] "
                    f"log_probs=[{data['log_probs'].min():.3g}, "
                    f"{data['log_probs'].max():.3g}]")
            if pstats["approx_kl"] > config.kl_ceiling:
                stopped = True
                break
            policy_opt.step(policy.params(), pgrads)
            critic_opt.step(critic.params(), vgrads)
            pstats["value_loss"] = value_loss
            for key in sums:
                sums[key] += pstats[key]
            updates += 1
        if stopped:
            break
    out = {key: (val / updates if updates else 0.0)
           for key, val in sums.items()}
    out["updates"] = updates
    out["kl_stopped"] = stopped
    return out


# ---------------------------------------------------------------------------
# training drivers
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    policy: PolicyNet
    critic: Mlp
    steps: int
    records: list[dict]
    diverged: bool = False
    out_dir: Path | None = None


def _append_jsonl(path: Path | None, record: dict) -> None:
    if path is None:
        return
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _save_pair(out_dir: Path | None, policy: PolicyNet, critic: Mlp,
               steps: int, stamp: bool) -> None:
    if out_dir is None:
        return
    save_net(policy, out_dir / "policy.bin")
    save_net(critic, out_dir / "critic.bin")
    if stamp:
        save_net(policy, out_dir / f"policy_{steps:09d}.bin")


def train_oracle(model: RobotModel, clips: list[MotionClip],
                 config: PpoConfig | None = None,
                 seed: int = 0,
                 out_dir: str | Path | None = None,
                 masks: str | cmd.CommandMask | None = None,
                 weights: RewardWeights | None = None,
                 sigmas: RewardSigmas | None = None,
                 gait_params: GaitParams | None = None,
                 params: SimParams | None = None,
                 ranges: RandomizationRanges | None = None,
                 randomize: bool = True,
                 hidden: tuple[int, ...] = (512, 256, 128),
                 checkpoint_every: int = 50) -> TrainResult:
    """PPO training loop: rollout, advantage estimation, clipped update.

    Each environment tracks a uniformly drawn clip from a random phase
    and re-draws physics per episode. Emits a line-delimited metric log
    (one record per iteration with per-term reward means) and periodic
    checkpoints. Divergence (non-finite simulation state, observation or
    loss) halts the loop with the last good parameters saved.
    """
    config = config or PpoConfig()
    rng = np.random.default_rng(seed)
    env = TrackingEnv(
        model, clips, EnvConfig(num_envs=config.num_envs, randomize=randomize),
        masks=masks, weights=weights, sigmas=sigmas, gait_params=gait_params,
        params=params, ranges=ranges, seed=seed)
    act_width = model.num_joints
    policy = PolicyNet.init(
        MlpSpec(env.observation_width, act_width, hidden), rng)
    critic = Mlp.init(MlpSpec(env.oracle_obs_width, 1, hidden), rng)
    policy_opt = Adam(policy.params(), lr=config.learning_rate)
    critic_opt = Adam(critic.params(), lr=config.learning_rate)
    buffer = RolloutBuffer(config.horizon, config.num_envs,
                           env.observation_width, env.oracle_obs_width,
                           act_width)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "metrics.jsonl"
        log_path.write_text("")
    else:
        log_path = None

    obs = env.observe()
    critic_obs = obs if masks is None else env.oracle_observation()
    records: list[dict] = []
    outcomes: list[bool] = []  # True = episode ended without failing
    steps = 0
    diverged = False
    iterations = max(1, config.total_steps // (config.num_envs * config.horizon))

    for it in range(iterations):
        buffer.reset()
        term_sums: dict[str, float] = {}
        reward_sum = 0.0
        err_sum = 0.0
        try:
            for _ in range(config.horizon):
                values = critic.forward(critic_obs)[:, 0]
                actions, log_probs = policy.sample(obs, rng)
                if not np.isfinite(actions).all():
                    raise PpoError("non-finite actions sampled")
                next_obs, reward, done, info = env.step(actions)
                buffer.add(obs, critic_obs, actions, log_probs,
                           config.reward_scale * reward, values, done,
                           info["episode_ids"])
                obs = next_obs
                critic_obs = obs if masks is None else env.oracle_observation()
                steps += config.num_envs
                reward_sum += float(reward.mean())
                err_sum += float(info["tracking_error"].mean())
                for name, vals in info["breakdown"].items():
                    term_sums[name] = term_sums.get(name, 0.0) + float(vals.mean())
                ended = np.flatnonzero(done)
                for e in ended:
                    outcomes.append(bool(info["timeout"][e]))
                if len(outcomes) > 200:
                    del outcomes[:len(outcomes) - 200]
            last_values = critic.forward(critic_obs)[:, 0]
            buffer.compute_advantages(last_values, config.gamma, config.lam)
            stats = ppo_update(policy, critic, buffer, config,
                               policy_opt, critic_opt, rng)
        except (SimulationError, PpoError):
            diverged = True
            break
        record = {
            "step": steps,
            "reward": reward_sum / config.horizon,
            "tracking_error": err_sum / config.horizon,
            "survival": (sum(outcomes) / len(outcomes)) if outcomes else None,
            "episodes": len(outcomes),
            **{f"term/{k}": v / config.horizon for k, v in term_sums.items()},
            **{f"ppo/{k}": v for k, v in stats.items()},
        }
        records.append(record)
        _append_jsonl(log_path, record)
        if out_dir is not None and (it + 1) % checkpoint_every == 0:
            _save_pair(out_dir, policy, critic, steps, stamp=True)
    _save_pair(out_dir, policy, critic, steps, stamp=False)
    return TrainResult(policy=policy, critic=critic, steps=steps,
                       records=records, diverged=diverged, out_dir=out_dir)


def train_specialist(preset_name: str, model: RobotModel,
                     clips: list[MotionClip],
                     config: PpoConfig | None = None, seed: int = 0,
                     out_dir: str | Path | None = None,
                     **kwargs) -> TrainResult:
    """Same loop as train_oracle, but the actor observes the deployment
    observation under one fixed preset mask (the critic keeps the
    full-state view)."""
    if preset_name not in cmd.PRESET_NAMES:
        raise cmd.CommandError(
            f"unknown preset {preset_name!r}, expected one of {cmd.PRESET_NAMES}")
    return train_oracle(model, clips, config=config, seed=seed,
                        out_dir=out_dir, masks=preset_name, **kwargs)
