import math

import numpy as np
import pytest

from offtrack.geometry import wrap_angle
from offtrack.synth import (GeneratorConfig, InfeasibleConfig, SceneRecord, TrackTooShort, augment_sample,
                            eligible_targets, fragment_scene, generate_scene, mask_pseudo_occlusion,
                            read_scenes, write_scenes)


def test_same_seed_is_byte_identical():
    a = generate_scene(5).to_json()
    b = generate_scene(5).to_json()
    assert a == b
    assert generate_scene(6).to_json() != a


def test_json_round_trip(tmp_path, scene):
    path = tmp_path / "scenes.jsonl"
    write_scenes(path, [scene, fragment_scene(scene, 1)])
    back = read_scenes(path)
    assert [s.to_json() for s in back] == [scene.to_json(), fragment_scene(scene, 1).to_json()]
    with pytest.raises(ValueError):
        SceneRecord.from_dict({"schema_version": 99})


def test_noise_free_constant_speed_kinematics():
    cfg = GeneratorConfig(template="straight", noise_xy=0, noise_theta=0, noise_v=0, accel_std=0,
                          initial_speed=(10, 10), lane_change_fraction=0, off_lane_fraction=0,
                          n_vehicles=4, late_entry_fraction=0)
    for trk in generate_scene(0, cfg).gt_tracks:
        step = np.linalg.norm(np.diff(trk.xy, axis=0), axis=1)
        assert np.allclose(step, 5.0, atol=1e-5)


def test_intersection_has_a_turning_track():
    for seed in range(3):
        sc = generate_scene(seed, GeneratorConfig(template="intersection"))
        turns = [abs(wrap_angle(t.poses[-1, 2] - t.poses[0, 2])) for t in sc.gt_tracks]
        assert max(turns) >= math.radians(60)


def test_scene_invariants(scene):
    ids = [t.id for t in scene.gt_tracks]
    assert len(ids) == len(set(ids))
    for trk in scene.gt_tracks:
        k = trk.times * scene.sample_rate
        assert np.allclose(k, np.round(k), atol=1e-9)
        assert np.all((trk.data[:, 7] >= 0.5) & (trk.data[:, 7] <= 1.0))
        speed = np.linalg.norm(np.diff(trk.xy, axis=0), axis=1) * scene.sample_rate
        assert speed.max() < 15.0 + 3.0  # noise-free cap 15 m/s plus observation noise


def test_infeasible_config_errors():
    with pytest.raises(InfeasibleConfig):
        generate_scene(0, GeneratorConfig(template="straight", n_vehicles=10_000))
    with pytest.raises(InfeasibleConfig):
        generate_scene(0, GeneratorConfig(template="nope"))


def test_pseudo_occlusion_sample_invariants(scene):
    period = 1.0 / scene.sample_rate
    n = 0
    for seed in range(20):
        for tid in eligible_targets(scene):
            s = mask_pseudo_occlusion(scene, seed, tid)
            n += 1
            assert s.history.t_end - s.history.t_start <= 2.5 + 1e-9
            assert 1.5 - 1e-9 <= s.occlusion_duration <= 12.5 + 1e-9
            assert all(len(c) >= 1 for c in s.future_candidates)
            assert 0 <= s.gt_match_index < len(s.future_candidates)
            assert s.gap == pytest.approx(s.occlusion_duration + period)
            assert len(s.masked_gt) == round(s.occlusion_duration / period)
            assert [c.id for c in s.future_candidates] == [f"cand{k:02d}" for k in range(len(s.future_candidates))]
    assert n > 100


def test_duration_cap_leaves_one_pose():
    # 12.5 s track at 2 Hz = 26 poses; the GT gap can hide at most 24 of them after a 1-pose history.
    from offtrack.types import Tracklet
    rows = [[0.5 * i, 10.0 * 0.5 * i, 0, 0, 4.5, 1.9, 1.6, 1.0, 10, 0] for i in range(26)]
    sc = SceneRecord("s", [], [Tracklet("a", "car", np.array(rows))])
    for seed in range(50):
        s = mask_pseudo_occlusion(sc, seed, "a")
        assert s.occlusion_duration <= 12.0 + 1e-9
        assert len(s.gt_future) >= 1
    short = SceneRecord("s", [], [Tracklet("b", "car", np.array(rows[:4]))])
    with pytest.raises(TrackTooShort):
        mask_pseudo_occlusion(short, 0, "b")


def test_mask_is_deterministic(scene):
    tid = eligible_targets(scene)[0]
    a = mask_pseudo_occlusion(scene, 3, tid)
    b = mask_pseudo_occlusion(scene, 3, tid)
    assert a.history.data.tobytes() == b.history.data.tobytes()
    assert a.gt_match_index == b.gt_match_index
    assert np.array_equal(a.masked_gt, b.masked_gt)


def test_augment_identity_and_rotation(scene):
    s = mask_pseudo_occlusion(scene, 0, eligible_targets(scene)[0])
    same = augment_sample(s, 0, rot_range=0.0, noise_std={})
    assert np.array_equal(same.history.data, s.history.data)
    assert np.array_equal(same.masked_gt, s.masked_gt)
    # Smallest rot_range that can draw exactly pi is pi itself; rotate by hand through a seed search.
    for seed in range(200):
        r = augment_sample(s, seed, rot_range=math.pi, noise_std={})
        ang = wrap_angle(r.history.poses[0, 2] - s.history.poses[0, 2])
        d0 = np.linalg.norm(np.diff(s.history.xy, axis=0), axis=1)
        d1 = np.linalg.norm(np.diff(r.history.xy, axis=0), axis=1)
        assert np.allclose(d0, d1, atol=1e-9)
        assert r.gt_match_index == s.gt_match_index
        c, sn = math.cos(ang), math.sin(ang)
        exp = s.masked_gt[:, :2] @ np.array([[c, sn], [-sn, c]])
        assert np.allclose(r.masked_gt[:, :2], exp, atol=1e-9)
    noisy = augment_sample(s, 1, rot_range=0.0)
    assert not np.array_equal(noisy.history.data, s.history.data)
    assert np.array_equal(noisy.masked_gt, s.masked_gt)  # supervision targets stay clean


def test_rotation_by_pi_negates_positions(scene):
    s = mask_pseudo_occlusion(scene, 0, eligible_targets(scene)[0])
    r = augment_sample(s, 0, noise_std={}, angle=math.pi)
    assert np.allclose(r.history.xy, -s.history.xy, atol=1e-9)
    assert np.allclose(r.history.data[:, 8:10], -s.history.data[:, 8:10], atol=1e-9)
    assert np.allclose(wrap_angle(r.history.poses[:, 2] - s.history.poses[:, 2] - math.pi), 0, atol=1e-9)
    assert np.all(r.history.poses[:, 2] > -math.pi) and np.all(r.history.poses[:, 2] <= math.pi)
    assert np.allclose(r.lane_graph.all_poses()[:, :2], -s.lane_graph.all_poses()[:, :2], atol=1e-9)


def test_candidate_count_band_is_reachable():
    cfg = GeneratorConfig(template="straight", n_vehicles=64, duration=30.0)
    sc = generate_scene(2, cfg)
    counts = [len(mask_pseudo_occlusion(sc, k, t).future_candidates) for k, t in enumerate(eligible_targets(sc)[:30])]
    assert min(counts) >= 2
    assert max(counts) <= 65 and max(counts) >= 30


def test_fragment_scene_pieces_cover_gt(scene):
    frag = fragment_scene(scene, 4, fraction=1.0)
    assert len(frag.tracks) > len(scene.gt_tracks)
    gt_rows = {(round(t, 6), round(x, 6)) for g in scene.gt_tracks for t, x in g.data[:, :2]}
    frag_rows = {(round(t, 6), round(x, 6)) for f in frag.tracks for t, x in f.data[:, :2]}
    assert frag_rows <= gt_rows
    assert frag.gt_tracks is scene.gt_tracks
