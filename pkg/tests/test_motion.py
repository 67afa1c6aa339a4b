"""Motion library checks against independent oracles.

Retargeting is verified by round trip: a designed joint trajectory is
pushed through forward kinematics to keypoints, retargeted back, and the
recovered joints must match the design. Interpolation is checked against
closed-form linear ramps at a binary-exact frame rate, the difference
operator against numpy.gradient, and serialization by bitwise equality.
"""

import struct

import numpy as np
import pytest

from multimimic import motion as mo
from multimimic import robot as rb
from multimimic.sim import PlanarSim


@pytest.fixture(scope="module")
def biped():
    return rb.default_biped()


@pytest.fixture(scope="module")
def sources0(biped):
    return mo.generate_synthetic_dataset(biped, seed=0)


@pytest.fixture(scope="module")
def dataset_dir(biped, tmp_path_factory):
    out = tmp_path_factory.mktemp("dataset")
    manifest = mo.build_dataset(biped, 0, out)
    return out, manifest


def keypoint_source(model, name, rate, q, **params):
    """Keypoint trajectory of a joint-space design, via forward kinematics."""
    fk = PlanarSim(model, q.shape[0]).fk_full(q, np.zeros_like(q))
    return mo.SourceMotion(name=name, frame_rate=rate,
                           keypoint_names=tuple(k.name for k in model.keypoints),
                           positions=fk["keypoints"], params=params)


def designed_walkish(model, T=80, rate=50.0):
    """Smooth in-limits trajectory exercising every joint and the root."""
    t = np.arange(T) / rate
    q = np.tile(mo.stance_q(model), (T, 1))
    q[:, 0] = 0.3 * t
    q[:, 1] += 0.02 * np.sin(2 * np.pi * t)
    q[:, 2] = 0.08 * np.sin(2 * np.pi * 0.7 * t)
    ji = {j.name: 3 + i for i, j in enumerate(model.joints)}
    ph = 2 * np.pi * 1.25 * t
    q[:, ji["l_hip"]] = 0.20 + 0.30 * np.sin(ph)
    q[:, ji["r_hip"]] = 0.20 - 0.30 * np.sin(ph)
    q[:, ji["l_knee"]] = -0.55 + 0.25 * np.cos(ph)
    q[:, ji["r_knee"]] = -0.55 - 0.25 * np.cos(ph)
    q[:, ji["l_shoulder"]] = 0.30 - 0.25 * np.sin(ph)
    q[:, ji["r_shoulder"]] = 0.30 + 0.25 * np.sin(ph)
    return q


# ---------------------------------------------------------------------------
# stance and the difference operator
# ---------------------------------------------------------------------------

class TestStance:
    def test_joints_and_ground_contact(self, biped):
        q = mo.stance_q(biped)
        for i, j in enumerate(biped.joints):
            assert q[3 + i] == mo.STANCE_JOINTS[j.name]
        fk = PlanarSim(biped, 1).fk_full(q[None], np.zeros((1, biped.num_dof)))
        assert abs(fk["contacts"][0, :, 1].min()) < 1e-12


class TestFiniteDifference:
    def test_matches_numpy_gradient(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(40, 3))
        rate = 50.0
        want = np.gradient(x, 1.0 / rate, axis=0, edge_order=1)
        np.testing.assert_allclose(mo.finite_difference(x, rate), want,
                                   rtol=0, atol=1e-12)

    def test_linear_series_exact(self):
        # i/128 is binary-exact, so the slope comes out bitwise
        x = np.arange(33.0)[:, None] / 128.0 * np.array([1.0, -2.0])
        v = mo.finite_difference(x, 32.0)
        assert np.array_equal(v, np.broadcast_to([0.25, -0.5], v.shape))

    def test_quadratic_interior_exact(self):
        t = np.arange(20.0) / 10.0
        v = mo.finite_difference(t[:, None] ** 2, 10.0)
        np.testing.assert_allclose(v[1:-1, 0], 2 * t[1:-1], rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# clip construction
# ---------------------------------------------------------------------------

class TestMakeClip:
    def test_constant_pose_is_static(self, biped):
        q = np.tile(mo.stance_q(biped), (30, 1))
        clip = mo.make_clip(biped, "hold", 50.0, q)
        clip.validate(biped)
        for arr in (clip.root_vel, clip.root_ang_vel, clip.joint_vel,
                    clip.body_vel, clip.body_ang_vel):
            assert np.all(arr == 0.0)
        assert np.all(clip.body_pos == clip.body_pos[0])

    def test_pure_translation_velocities_exact(self, biped):
        # root x = i/128 m at 32 Hz: every body moves at exactly 0.25 m/s
        T = 40
        q = np.tile(mo.stance_q(biped), (T, 1))
        q[:, 0] += np.arange(T) / 128.0
        clip = mo.make_clip(biped, "slide", 32.0, q)
        assert np.all(clip.root_vel[:, 0] == 0.25)   # ramp itself is exact
        np.testing.assert_allclose(clip.body_vel[..., 0], 0.25, rtol=0, atol=1e-12)
        np.testing.assert_allclose(clip.body_vel[..., 1], 0.0, rtol=0, atol=1e-12)
        assert np.all(clip.body_ang_vel == 0.0)

    def test_velocities_consistent_by_construction(self, biped):
        clip = mo.make_clip(biped, "w", 50.0, designed_walkish(biped))
        assert mo.velocity_consistency(clip) <= 1e-15

    def test_q_round_trip(self, biped):
        q = designed_walkish(biped)
        clip = mo.make_clip(biped, "w", 50.0, q)
        np.testing.assert_array_equal(clip.q(7), q[7])

    def test_rejects_wrong_dof_count(self, biped):
        with pytest.raises(mo.MotionError, match="dofs"):
            mo.make_clip(biped, "bad", 50.0, np.zeros((5, biped.num_dof + 1)))

    def test_rejects_single_frame(self, biped):
        with pytest.raises(mo.MotionError):
            mo.make_clip(biped, "bad", 50.0, np.zeros((1, biped.num_dof)))

    def test_validate_catches_nan(self, biped):
        clip = mo.make_clip(biped, "w", 50.0, designed_walkish(biped))
        clip.root_pos[3, 0] = np.nan
        with pytest.raises(mo.MotionError, match="non-finite"):
            clip.validate()

    def test_validate_catches_tampered_velocity(self, biped):
        clip = mo.make_clip(biped, "w", 50.0, designed_walkish(biped))
        clip.joint_vel[5, 2] += 1.0
        with pytest.raises(mo.MotionError, match="finite differences"):
            clip.validate()


# ---------------------------------------------------------------------------
# time interpolation
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def clip32(biped):
    return mo.make_clip(biped, "w", 32.0, designed_walkish(biped, rate=32.0))


class TestSampleFrame:
    # frame_rate 32 makes every frame time binary-exact, so boundary and
    # midpoint weights are exactly 0 and 0.5

    def test_frame_boundaries_exact(self, clip32):
        for k in (0, 1, 17):
            f = mo.sample_frame(clip32, k / 32.0)
            assert np.array_equal(f.joint_pos, clip32.joint_pos[k])
            assert np.array_equal(f.body_pos, clip32.body_pos[k])
            assert f.root_rot == clip32.root_rot[k]

    def test_end_of_clip(self, clip32):
        f = mo.sample_frame(clip32, clip32.duration)
        np.testing.assert_allclose(f.joint_pos, clip32.joint_pos[-1],
                                   rtol=0, atol=1e-12)

    def test_midpoint_is_average(self, clip32):
        f = mo.sample_frame(clip32, 10.5 / 32.0)
        want = 0.5 * (clip32.joint_pos[10] + clip32.joint_pos[11])
        np.testing.assert_allclose(f.joint_pos, want, rtol=0, atol=1e-15)
        want = 0.5 * (clip32.root_vel[10] + clip32.root_vel[11])
        np.testing.assert_allclose(f.root_vel, want, rtol=0, atol=1e-15)

    def test_linear_ramp_sampled_anywhere(self, biped):
        # positions linear in t, so lerp must reproduce the line exactly
        T = 33
        q = np.tile(mo.stance_q(biped), (T, 1))
        q[:, 0] = 0.25 * np.arange(T) / 32.0
        clip = mo.make_clip(biped, "ramp", 32.0, q)
        for t in (0.1234, 0.5, 0.77, clip.duration - 1e-9):
            f = mo.sample_frame(clip, t)
            assert abs(f.root_pos[0] - 0.25 * t) < 1e-9

    def test_out_of_range_raises(self, clip32):
        with pytest.raises(ValueError):
            mo.sample_frame(clip32, -0.01)
        with pytest.raises(ValueError):
            mo.sample_frame(clip32, clip32.duration + 0.01)


# ---------------------------------------------------------------------------
# retargeting
# ---------------------------------------------------------------------------

class TestRetarget:
    def test_round_trip_recovers_design(self, biped):
        q = designed_walkish(biped)
        src = keypoint_source(biped, "rt", 50.0, q)
        trace = []
        clip, flagged = mo.retarget_flags(src, biped, trace=trace)
        assert flagged == []
        assert np.abs(clip.joint_pos - q[:, 3:]).max() < 1e-3
        assert np.abs(clip.root_pos - q[:, :2]).max() < 1e-3
        assert np.abs(clip.root_rot - q[:, 2]).max() < 1e-3

    def test_objective_monotone_per_frame(self, biped):
        src = keypoint_source(biped, "rt", 50.0, designed_walkish(biped))
        trace = []
        mo.retarget_flags(src, biped, trace=trace)
        tr = np.stack(trace)
        assert tr.shape[0] >= 2
        assert np.diff(tr, axis=0).max() <= 0.0

    def test_idempotent(self, biped):
        src = keypoint_source(biped, "rt", 50.0, designed_walkish(biped))
        first = mo.retarget(src, biped)
        q1 = np.concatenate([first.root_pos, first.root_rot[:, None],
                             first.joint_pos], axis=1)
        again = mo.retarget(keypoint_source(biped, "rt2", 50.0, q1), biped)
        assert np.abs(again.joint_pos - first.joint_pos).max() < 1e-6

    def test_knees_stay_on_designed_branch(self, biped):
        # mirrored-knee solutions match the ankle target equally well; the
        # design keeps knees in [-0.80, -0.30], so must the recovery
        q = designed_walkish(biped)
        src = keypoint_source(biped, "rt", 50.0, q)
        clip = mo.retarget(src, biped)
        knees = clip.joint_pos[:, [1, 3]]
        assert knees.max() < -0.25
        assert knees.min() > -0.85

    def test_unreachable_frames_flagged_not_fatal(self, biped):
        # limb-length stretch is infeasible for rigid links; 3 of 80 frames
        # stays under the rejection fraction
        q = designed_walkish(biped)
        src = keypoint_source(biped, "stretch", 50.0, q)
        src.positions[40:43] *= 1.6
        clip, flagged = mo.retarget_flags(src, biped)
        assert {40, 41, 42} <= set(flagged)
        assert len(flagged) <= 0.05 * q.shape[0]

    def test_mostly_unreachable_rejected(self, biped):
        q = designed_walkish(biped)
        src = keypoint_source(biped, "stretch", 50.0, q)
        src.positions *= 1.6
        with pytest.raises(mo.RetargetError):
            mo.retarget(src, biped)

    def test_missing_keypoint_rejected(self, biped):
        q = designed_walkish(biped)
        src = keypoint_source(biped, "short", 50.0, q)
        src.keypoint_names = src.keypoint_names[:-1]
        src.positions = src.positions[:, :-1]
        with pytest.raises(mo.MotionError, match="missing keypoint"):
            mo.retarget(src, biped)


# ---------------------------------------------------------------------------
# feasibility filter
# ---------------------------------------------------------------------------

class TestFeasibility:
    def test_designed_clip_accepted(self, biped):
        clip = mo.make_clip(biped, "w", 50.0, designed_walkish(biped))
        result = mo.filter_feasible(clip, biped)
        assert result.accepted and bool(result) and result.reasons == []

    def test_angle_violation_names_joint_and_frame(self, biped):
        q = np.tile(mo.stance_q(biped), (20, 1))
        q[7:, 3 + 1] = 0.5     # l_knee past its stop from frame 7 on
        clip = mo.make_clip(biped, "bad", 50.0, q)
        result = mo.filter_feasible(clip, biped)
        assert not result
        assert any("l_knee" in r and "angle" in r and "frame 7" in r
                   for r in result.reasons)

    def test_angle_exactly_at_limit_accepted(self, biped):
        # bounds are closed; hold every joint at its upper stop
        q = np.tile(mo.stance_q(biped), (12, 1))
        for i, j in enumerate(biped.joints):
            q[:, 3 + i] = j.limit[1]
        clip = mo.make_clip(biped, "edge", 50.0, q)
        assert mo.filter_feasible(clip, biped).accepted

    def test_velocity_violation_names_joint(self, biped):
        q = np.tile(mo.stance_q(biped), (20, 1))
        q[10:, 3 + 0] += 1.5   # 75 rad/s step on l_hip
        clip = mo.make_clip(biped, "snap", 50.0, q)
        result = mo.filter_feasible(clip, biped)
        assert any("l_hip" in r and "velocity" in r for r in result.reasons)

    def test_root_accel_bound_closed(self, biped):
        q = np.tile(mo.stance_q(biped), (40, 1))
        q[:, 0] += 0.02 * np.sin(np.arange(40) * 0.9)
        clip = mo.make_clip(biped, "jiggle", 50.0, q)
        peak = float(np.linalg.norm(
            mo.finite_difference(clip.root_vel, 50.0), axis=-1).max())
        at = mo.FeasibilityBounds(root_accel=peak)
        below = mo.FeasibilityBounds(root_accel=peak * 0.999)
        assert mo.filter_feasible(clip, biped, at).accepted
        result = mo.filter_feasible(clip, biped, below)
        assert any("root linear acceleration" in r for r in result.reasons)

    def test_root_ang_accel_bound(self, biped):
        q = np.tile(mo.stance_q(biped), (30, 1))
        q[15, 2] = 0.4         # one-frame pitch spike
        clip = mo.make_clip(biped, "twitch", 50.0, q)
        result = mo.filter_feasible(clip, biped)
        assert any("root angular acceleration" in r for r in result.reasons)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def clip(biped):
    return mo.make_clip(biped, "round-trip", 50.0, designed_walkish(biped))


class TestSerialization:

    def test_binary_round_trip_bitwise(self, clip, tmp_path):
        path = tmp_path / "c.mclip"
        mo.save_clip(clip, path)
        back = mo.load_clip(path)
        assert back.name == clip.name
        assert back.frame_rate == clip.frame_rate
        for key in mo._ARRAYS:
            assert np.array_equal(getattr(back, key), getattr(clip, key)), key

    def test_encoding_deterministic(self, clip):
        assert mo.clip_bytes(clip) == mo.clip_bytes(clip)

    def test_text_export_lossless(self, clip):
        # 17 significant digits round-trip any float64 exactly
        text = mo.clip_text(clip)
        lines = text.splitlines()
        start = lines.index("[joint_pos]") + 1
        vals = np.array([[float(v) for v in lines[start + i].split()]
                         for i in range(clip.num_frames)])
        assert np.array_equal(vals, clip.joint_pos)

    def test_wrong_magic_rejected(self, clip, tmp_path):
        path = tmp_path / "bad.mclip"
        path.write_bytes(b"XXXX" + mo.clip_bytes(clip)[4:])
        with pytest.raises(mo.MotionError, match="not a motion clip"):
            mo.load_clip(path)

    def test_unsupported_version_rejected(self, clip, tmp_path):
        raw = bytearray(mo.clip_bytes(clip))
        raw[4:6] = struct.pack("<H", 99)
        path = tmp_path / "v99.mclip"
        path.write_bytes(bytes(raw))
        with pytest.raises(mo.MotionError, match="version"):
            mo.load_clip(path)

    def test_truncated_rejected(self, clip, tmp_path):
        path = tmp_path / "cut.mclip"
        path.write_bytes(mo.clip_bytes(clip)[:-100])
        with pytest.raises(mo.MotionError, match="truncated"):
            mo.load_clip(path)

    def test_trailing_bytes_rejected(self, clip, tmp_path):
        path = tmp_path / "fat.mclip"
        path.write_bytes(mo.clip_bytes(clip) + b"\x00")
        with pytest.raises(mo.MotionError, match="trailing"):
            mo.load_clip(path)

    def test_garbage_header_rejected(self, tmp_path):
        path = tmp_path / "tiny.mclip"
        path.write_bytes(b"MM")
        with pytest.raises(mo.MotionError):
            mo.load_clip(path)


class TestSourceSerialization:

    def test_round_trip_bitwise(self, biped, tmp_path):
        src = keypoint_source(biped, "loop", 50.0, designed_walkish(biped),
                              speed=0.375, cycles=3.0)
        path = tmp_path / "loop.mkp"
        mo.save_source(src, path)
        back = mo.load_source(path)
        assert back.name == src.name
        assert back.frame_rate == src.frame_rate
        assert back.keypoint_names == src.keypoint_names
        assert back.params == src.params
        assert np.array_equal(back.positions, src.positions)

    def test_directory_round_trip_preserves_order(self, sources0, tmp_path):
        index = mo.save_sources(sources0, tmp_path)
        back = mo.load_sources(tmp_path)
        assert [s.name for s in back] == [s.name for s in sources0]
        assert [e["file"] for e in index["sources"]] == \
            [f"{s.name}.mkp" for s in sources0]
        for a, b in zip(back, sources0):
            assert np.array_equal(a.positions, b.positions)

    def test_save_is_byte_deterministic(self, sources0, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        mo.save_sources(sources0, d1)
        mo.save_sources(sources0, d2)
        for f in sorted(d1.iterdir()):
            assert (d2 / f.name).read_bytes() == f.read_bytes(), f.name

    def test_wrong_magic_rejected(self, biped, tmp_path):
        src = keypoint_source(biped, "x", 50.0, designed_walkish(biped, T=4))
        path = tmp_path / "bad.mkp"
        path.write_bytes(b"XXXX" + mo.source_bytes(src)[4:])
        with pytest.raises(mo.MotionError, match="not a keypoint motion"):
            mo.load_source(path)

    def test_size_mismatch_rejected(self, biped, tmp_path):
        src = keypoint_source(biped, "x", 50.0, designed_walkish(biped, T=4))
        path = tmp_path / "cut.mkp"
        path.write_bytes(mo.source_bytes(src)[:-8])
        with pytest.raises(mo.MotionError, match="size mismatch"):
            mo.load_source(path)


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------

class TestSyntheticDataset:
    def test_same_seed_same_sources(self, biped, sources0):
        again = mo.generate_synthetic_dataset(biped, seed=0)
        assert [s.name for s in again] == [s.name for s in sources0]
        for a, b in zip(again, sources0):
            assert np.array_equal(a.positions, b.positions)
            assert a.params == b.params

    def test_different_seed_different_motion(self, biped, sources0):
        other = mo.generate_synthetic_dataset(biped, seed=1)
        walk0 = next(s for s in sources0 if s.name == "walk")
        walk1 = next(s for s in other if s.name == "walk")
        assert walk0.params["speed"] != walk1.params["speed"]

    def test_covers_expected_family(self, sources0):
        assert [s.name for s in sources0] == ["stand", "squat", "reach",
                                              "walk", "sway"]
        for s in sources0:
            assert 4.0 <= s.duration <= 10.0

    def test_all_clips_accepted(self, dataset_dir):
        _, manifest = dataset_dir
        assert all(c["accepted"] for c in manifest["clips"])
        assert all(c["flagged_frames"] == [] for c in manifest["clips"])

    def test_build_deterministic(self, biped, dataset_dir, tmp_path):
        out, _ = dataset_dir
        mo.build_dataset(biped, 0, tmp_path)
        for f in sorted(out.glob("*.mclip")):
            assert (tmp_path / f.name).read_bytes() == f.read_bytes(), f.name

    def test_split_stages_match_combined_build(self, biped, sources0,
                                               dataset_dir, tmp_path):
        # saving sources to disk and retargeting from the reload must
        # reproduce the one-shot build byte for byte
        out, _ = dataset_dir
        src_dir = tmp_path / "src"
        mo.save_sources(sources0, src_dir)
        clip_dir = tmp_path / "clips"
        mo.retarget_dataset(biped, mo.load_sources(src_dir), clip_dir, seed=0)
        for f in sorted(out.iterdir()):
            assert (clip_dir / f.name).read_bytes() == f.read_bytes(), f.name

    def test_accepted_clips_reload_valid_and_feasible(self, biped, dataset_dir):
        out, _ = dataset_dir
        clips = mo.load_dataset(out)
        assert len(clips) == 5
        for clip in clips:
            clip.validate(biped)
            assert mo.filter_feasible(clip, biped).accepted, clip.name

    def test_stand_is_still(self, biped, dataset_dir):
        out, _ = dataset_dir
        stand = next(c for c in mo.load_dataset(out) if c.name == "stand")
        assert np.abs(stand.root_vel).max() < 1e-5
        assert np.abs(stand.joint_vel).max() < 1e-5

    def test_walk_mean_speed_matches_parameter(self, biped, sources0):
        walk = next(s for s in sources0 if s.name == "walk")
        clip = mo.retarget(walk, biped)
        mean = (clip.root_pos[-1, 0] - clip.root_pos[0, 0]) / clip.duration
        assert abs(mean - walk.params["speed"]) < 1e-6

    def test_manifest_written_and_matches(self, dataset_dir):
        import json
        out, manifest = dataset_dir
        on_disk = json.loads((out / "manifest.json").read_text())
        assert on_disk == manifest

    def test_empty_dataset_rejected(self, tmp_path):
        import json
        (tmp_path / "manifest.json").write_text(
            json.dumps({"version": 1, "clips": []}))
        with pytest.raises(mo.MotionError, match="no accepted clips"):
            mo.load_dataset(tmp_path)
