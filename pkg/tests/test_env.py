"""Tracking-environment checks.

Reset state is verified against the sampled clip frame, both observation
styles against hand-assembled references, masks against the command-space
builders, and the episode lifecycle (failure, timeout, auto-reset,
per-episode randomization) with scripted action sequences.
"""

import dataclasses

import numpy as np
import pytest

from multimimic import commands as cmd
from multimimic import motion as mo
from multimimic import robot as rb
from multimimic.env import EnvConfig, EnvError, TrackingEnv
from multimimic.motion import ReferenceFrame
from multimimic.sim import RandomizationRanges


@pytest.fixture(scope="module")
def biped():
    return rb.default_biped()


@pytest.fixture(scope="module")
def stand_clip(biped):
    q = np.tile(mo.stance_q(biped), (51, 1))
    return mo.make_clip(biped, "stand", 50.0, q)


@pytest.fixture(scope="module")
def sway_clip(biped):
    T = 120
    q = np.tile(mo.stance_q(biped), (T, 1))
    ph = np.arange(T) / 50.0
    q[:, 3] += 0.15 * np.sin(2.0 * np.pi * 0.5 * ph)
    q[:, 5] -= 0.15 * np.sin(2.0 * np.pi * 0.5 * ph)
    q[:, 7] += 0.25 * np.sin(2.0 * np.pi * 0.5 * ph)
    return mo.make_clip(biped, "sway", 50.0, q)


def quiet_env(biped, clips, masks=None, num_envs=3, seed=0, **kw):
    """No physics randomization, no observation noise."""
    return TrackingEnv(
        biped, clips, EnvConfig(num_envs=num_envs, randomize=False),
        masks=masks, seed=seed, **kw)


def hold_action(env):
    return env.frame_now.joint_pos / env.config.action_scale


def frame_row(frame, e):
    return ReferenceFrame(**{
        f.name: getattr(frame, f.name)[e]
        for f in dataclasses.fields(ReferenceFrame)})


def body_row(body, e):
    return cmd.BodyState(**{
        f.name: getattr(body, f.name)[e]
        for f in dataclasses.fields(cmd.BodyState)})


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(EnvError):
            EnvConfig(num_envs=0)
        with pytest.raises(EnvError):
            EnvConfig(action_scale=0.0)
        with pytest.raises(EnvError):
            EnvConfig(history_steps=0)

    def test_needs_clips(self, biped):
        with pytest.raises(EnvError):
            TrackingEnv(biped, [])

    def test_unknown_preset_rejected(self, biped, stand_clip):
        with pytest.raises(cmd.CommandError):
            TrackingEnv(biped, [stand_clip], masks="nope")


class TestWidths:
    def test_oracle_width(self, biped, stand_clip):
        env = quiet_env(biped, [stand_clip])
        assert env.oracle_obs_width == 111
        assert env.observation_width == 111
        assert env.observe().shape == (3, 111)

    def test_student_width(self, biped, stand_clip):
        env = quiet_env(biped, [stand_clip], masks="random")
        assert env.student_obs_width == 25 * (15 + 6) + 27 + 23
        assert env.student_obs_width == 575
        assert env.observe().shape == (3, 575)
        assert env.oracle_observation().shape == (3, 111)

    def test_oracle_mode_has_no_student_obs(self, biped, stand_clip):
        env = quiet_env(biped, [stand_clip])
        with pytest.raises(EnvError):
            env.student_observation()


class TestReset:
    def test_state_matches_sampled_frame(self, biped, sway_clip):
        env = quiet_env(biped, [sway_clip], seed=5)
        for e in range(3):
            ref = mo.sample_frame(sway_clip, float(env.t[e]))
            assert np.array_equal(env.q[e, :2], ref.root_pos)
            assert env.q[e, 2] == ref.root_rot
            assert np.array_equal(env.q[e, 3:], ref.joint_pos)
            assert np.array_equal(env.qd[e, :2], ref.root_vel)
            assert np.array_equal(env.qd[e, 3:], ref.joint_vel)

    def test_phases_spread_and_in_range(self, biped, sway_clip):
        env = quiet_env(biped, [sway_clip], num_envs=16, seed=1)
        assert np.all(env.t >= 0.0)
        assert np.all(env.t <= sway_clip.duration - env.dt + 1e-12)
        assert np.ptp(env.t) > 0.1

    def test_same_seed_same_obs(self, biped, sway_clip):
        a = quiet_env(biped, [sway_clip], seed=3).observe()
        b = quiet_env(biped, [sway_clip], seed=3).observe()
        assert np.array_equal(a, b)

    def test_different_seed_differs(self, biped, sway_clip):
        a = quiet_env(biped, [sway_clip], seed=3).observe()
        b = quiet_env(biped, [sway_clip], seed=4).observe()
        assert not np.array_equal(a, b)

    def test_clip_choice_uniformish(self, biped, stand_clip, sway_clip):
        env = quiet_env(biped, [stand_clip, sway_clip], num_envs=64, seed=2)
        counts = np.bincount(env.clip_idx, minlength=2)
        assert counts.min() >= 16


class TestOracleObservation:
    def test_proprio_blocks(self, biped, sway_clip):
        env = quiet_env(biped, [sway_clip], seed=8)
        obs = env.observe()
        b = env.body
        rel = b.body_pos.copy()
        rel[..., 0] -= b.root_pos[:, None, 0]
        assert np.array_equal(obs[:, :14], rel.reshape(3, -1))
        assert np.array_equal(obs[:, 14:21], b.body_rot)
        assert np.array_equal(obs[:, 21:35], b.body_vel.reshape(3, -1))
        assert np.array_equal(obs[:, 35:42], b.body_ang_vel)
        assert np.array_equal(obs[:, 42:48], env.prev_action)

    def test_goal_block_matches_builder(self, biped, sway_clip):
        env = quiet_env(biped, [sway_clip], seed=8)
        obs = env.observe()
        goal = cmd.build_oracle_goal(env.frame_next, env.frame_now, env.body)
        assert np.array_equal(obs[:, 48:], goal.vector)

    def test_lookahead_is_one_step(self, biped, sway_clip):
        env = quiet_env(biped, [sway_clip], seed=8)
        for e in range(3):
            nxt = mo.sample_frame(
                sway_clip, min(float(env.t[e]) + env.dt, sway_clip.duration))
            assert np.allclose(env.frame_next.joint_pos[e], nxt.joint_pos,
                               atol=1e-15)


class TestStudentObservation:
    def test_history_padding_repeats_first_reading(self, biped, sway_clip):
        env = quiet_env(biped, [sway_clip], masks="random", seed=6)
        obs = env.observe()
        hist = obs[:, :375].reshape(3, 25, 15)
        assert np.array_equal(hist, np.broadcast_to(hist[:, :1], hist.shape))
        snap = np.concatenate([
            env.q[:, 3:], env.qd[:, 3:], env.qd[:, 2:3],
            np.stack([-np.sin(env.q[:, 2]), -np.cos(env.q[:, 2])], axis=-1),
        ], axis=-1)
        assert np.array_equal(hist[:, -1], snap)
        acts = obs[:, 375:525].reshape(3, 25, 6)
        assert np.array_equal(
            acts, np.broadcast_to(env.prev_action[:, None], acts.shape))

    def test_history_shifts_on_step(self, biped, sway_clip):
        env = quiet_env(biped, [sway_clip], masks="random", seed=6)
        before = env.observe()[:, :375].reshape(3, 25, 15)
        a = hold_action(env) + 0.01
        obs, _, done, _ = env.step(a)
        assert not done.any()
        after = obs[:, :375].reshape(3, 25, 15)
        assert np.array_equal(after[:, :-1], before[:, 1:])
        assert not np.array_equal(after[:, -1], before[:, -1])
        acts = obs[:, 375:525].reshape(3, 25, 6)
        assert np.array_equal(acts[:, -1], a)

    def test_goal_matches_per_env_builder(self, biped, sway_clip):
        env = quiet_env(biped, [sway_clip], masks="random", seed=9)
        goal = env.observe()[:, 525:]
        for e in range(3):
            ref = cmd.build_student_goal(
                env.layout, biped, frame_row(env.frame_next, e),
                body_row(env.body, e), env.masks[e])
            assert np.array_equal(goal[e], ref.vector)

    def test_inactive_slots_zero(self, biped, sway_clip):
        env = quiet_env(biped, [sway_clip], masks="random", num_envs=8, seed=12)
        goal = env.observe()[:, 525:]
        for e in range(8):
            act = cmd.slot_activation(env.layout, env.masks[e])
            for i, on in enumerate(act):
                if not on:
                    span = env.layout.span(i)
                    assert np.all(goal[e, span] == 0.0)


class TestMasks:
    def test_preset_mode_is_constant(self, biped, stand_clip):
        env = quiet_env(biped, [stand_clip], masks="omnih2o", seed=2)
        want = cmd.preset(env.layout, "omnih2o")
        for m in env.masks:
            assert m.mode == want.mode and m.sparsity == want.sparsity
        env.step(hold_action(env))
        for m in env.masks:
            assert m.mode == want.mode and m.sparsity == want.sparsity

    def test_explicit_mask_instance(self, biped, stand_clip):
        fixed = cmd.sample_mask(cmd.command_layout(biped), 77)
        env = quiet_env(biped, [stand_clip], masks=fixed, seed=2)
        for m in env.masks:
            assert m.mode == fixed.mode and m.sparsity == fixed.sparsity

    def test_random_masks_fixed_within_episode(self, biped, sway_clip):
        env = quiet_env(biped, [sway_clip], masks="random", seed=3)
        start = [(m.mode, m.sparsity, m.episode) for m in env.masks]
        for _ in range(5):
            _, _, done, _ = env.step(hold_action(env))
            assert not done.any()
        assert [(m.mode, m.sparsity, m.episode) for m in env.masks] == start

    def test_random_masks_vary_across_episodes(self, biped, stand_clip):
        env = quiet_env(biped, [stand_clip], masks="random", num_envs=16, seed=3)
        seen = {(m.mode, m.sparsity) for m in env.masks}
        assert len(seen) > 1


class TestStepping:
    def test_reward_is_breakdown_sum(self, biped, sway_clip):
        env = quiet_env(biped, [sway_clip], seed=4)
        _, r, _, info = env.step(hold_action(env))
        acc = np.zeros_like(r)
        for val in info["breakdown"].values():
            acc = acc + val
        assert np.array_equal(acc, r)

    def test_holding_reference_tracks_well(self, biped, stand_clip):
        env = quiet_env(biped, [stand_clip], seed=10)
        for _ in range(25):
            _, r, done, info = env.step(hold_action(env))
            assert not info["failed"].any()
        assert np.all(info["tracking_error"] < 0.1)
        assert np.all(r > 0)

    def test_wrong_action_shape_raises(self, biped, stand_clip):
        env = quiet_env(biped, [stand_clip], seed=0)
        with pytest.raises(EnvError):
            env.step(np.zeros((2, 6)))

    def test_violent_action_fails_with_penalty(self, biped, stand_clip):
        env = quiet_env(biped, [stand_clip], seed=0)
        a = np.full((3, 6), 6.0)
        for _ in range(100):
            _, _, done, info = env.step(a)
            if info["failed"].any():
                break
        assert info["failed"].any()
        e = int(np.flatnonzero(info["failed"])[0])
        assert info["breakdown"]["termination"][e] == -250.0
        assert info["reason"][e] in ("fell", "lost_tracking")

    def test_timeout_is_not_failure(self, biped, stand_clip):
        env = quiet_env(biped, [stand_clip], seed=1)
        for _ in range(60):
            _, _, done, info = env.step(hold_action(env))
            if info["timeout"].any():
                break
        assert info["timeout"].any()
        e = int(np.flatnonzero(info["timeout"])[0])
        assert not info["failed"][e]
        assert info["reason"][e] == "timeout"
        assert info["breakdown"]["termination"][e] == 0.0

    def test_auto_reset_starts_new_episode(self, biped, stand_clip):
        env = quiet_env(biped, [stand_clip], seed=1)
        old_ids = env.episode_ids.copy()
        for _ in range(60):
            _, _, done, _ = env.step(hold_action(env))
            if done.any():
                break
        assert done.any()
        e = int(np.flatnonzero(done)[0])
        assert env.episode_ids[e] > old_ids[e]
        ref = mo.sample_frame(stand_clip, float(env.t[e]))
        assert np.array_equal(env.q[e, 3:], ref.joint_pos)

    def test_info_frame_is_reward_frame(self, biped, sway_clip):
        env = quiet_env(biped, [sway_clip], seed=7)
        t_before = env.t.copy()
        _, _, _, info = env.step(hold_action(env))
        for e in range(3):
            ref = mo.sample_frame(sway_clip, float(t_before[e]) + env.dt)
            assert np.allclose(info["frame"].joint_pos[e], ref.joint_pos,
                               atol=1e-15)


class TestDeterminismAndRandomization:
    def test_identical_seeds_identical_rollouts(self, biped, sway_clip):
        cfg = EnvConfig(num_envs=3, randomize=True)
        envs = [TrackingEnv(biped, [sway_clip], cfg, seed=21) for _ in range(2)]
        rng = np.random.default_rng(0)
        acts = rng.normal(scale=0.2, size=(15, 3, 6))
        logs = []
        for env in envs:
            rows = []
            for a in acts:
                obs, r, done, _ = env.step(env.frame_now.joint_pos / 0.3 + a)
                rows.append((obs.copy(), r.copy(), done.copy()))
            logs.append(rows)
        for (o1, r1, d1), (o2, r2, d2) in zip(*logs):
            assert np.array_equal(o1, o2)
            assert np.array_equal(r1, r2)
            assert np.array_equal(d1, d2)

    def test_randomization_changes_gains(self, biped, stand_clip):
        on = TrackingEnv(biped, [stand_clip],
                         EnvConfig(num_envs=8, randomize=True), seed=2)
        off = TrackingEnv(biped, [stand_clip],
                          EnvConfig(num_envs=8, randomize=False), seed=2)
        base = biped.joint_array("kp")
        assert not np.allclose(on.sim.kp, base[None, :])
        assert len({round(float(k), 9) for k in on.sim.kp[:, 0]}) > 1
        assert np.array_equal(off.sim.kp, np.tile(base, (8, 1)))

    def test_observation_noise_applied(self, biped, stand_clip):
        noisy = TrackingEnv(
            biped, [stand_clip], EnvConfig(num_envs=2, randomize=True),
            ranges=RandomizationRanges(obs_noise=0.05), seed=2)
        a = noisy.oracle_observation()
        b = noisy.oracle_observation()
        assert not np.array_equal(a[:, :48], b[:, :48])
        assert np.array_equal(a[:, 42:48], b[:, 42:48])  # action part is clean
