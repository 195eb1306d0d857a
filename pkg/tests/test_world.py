import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coirl.world import (
    DEFAULT_WORLD,
    AgentTrack,
    Polyline,
    Pose2D,
    boxes_overlap,
    boxes_overlap_batch,
    build_dataset,
    check_collision,
    expert_is_sound,
    generate_scene,
    load_dataset,
    mirror_scene,
    observe,
    script_expert,
    transform_scene,
    wrap_angle,
)
from coirl.world.collision import trajectory_headings
from coirl.world.dataset import config_hash, manifest_path_for

from oracles import in_boundary_band, overlap_by_sampling
from worldkit import static_agent, straight_scene

cfg = DEFAULT_WORLD


# -- geometry ----------------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(st.floats(-50, 50, allow_nan=False))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -np.pi < w <= np.pi
    assert np.isclose(np.cos(w), np.cos(a)) and np.isclose(np.sin(w), np.sin(a))


def test_wrap_angle_pi_maps_to_pi():
    assert wrap_angle(-np.pi) == np.pi


def test_polyline_projection_round_trip():
    rng = np.random.default_rng(0)
    pts = np.cumsum(rng.uniform(5, 10, (8, 2)), axis=0)
    line = Polyline(pts)
    s = rng.uniform(1, line.length - 1, 20)
    d = rng.uniform(-1.5, 1.5, 20)
    arc, off = line.project(line.frenet_to_world(s, d))
    np.testing.assert_allclose(arc, s, atol=1e-6)
    np.testing.assert_allclose(off, d, atol=1e-6)


# -- box overlap ---------------------------------------------------------------------

def _random_pairs(count, seed):
    rng = np.random.default_rng(seed)
    a = np.column_stack([np.zeros(count), np.zeros(count), rng.uniform(-np.pi, np.pi, count),
                         rng.uniform(0.5, 5.0, count), rng.uniform(0.5, 2.5, count)])
    b = np.column_stack([rng.uniform(-4.5, 4.5, count), rng.uniform(-4.5, 4.5, count),
                         rng.uniform(-np.pi, np.pi, count), rng.uniform(0.5, 5.0, count),
                         rng.uniform(0.5, 2.5, count)])
    return a, b


def sat_disagreements(count=1000, seed=0):
    """(disagreements outside the boundary band, number of pairs inside the band)."""
    a, b = _random_pairs(count, seed)
    sat = boxes_overlap_batch(a, b)
    bad, banded = 0, 0
    for i in range(count):
        if in_boundary_band(a[i], b[i]):
            banded += 1
            continue
        if bool(sat[i]) != overlap_by_sampling(a[i], b[i]):
            bad += 1
    return bad, banded


def test_sat_matches_point_sampling_oracle():
    bad, banded = sat_disagreements(1000, seed=0)
    assert bad == 0
    assert banded < 100


def test_sat_is_symmetric_and_scalar_matches_batch():
    a, b = _random_pairs(500, seed=1)
    ab = boxes_overlap_batch(a, b)
    np.testing.assert_array_equal(ab, boxes_overlap_batch(b, a))
    for i in range(0, 500, 25):
        assert boxes_overlap(a[i], b[i]) == ab[i] == boxes_overlap(b[i], a[i])


def test_touching_boxes_overlap():
    assert boxes_overlap((0, 0, 0, 2, 2), (2, 0, 0, 2, 2))
    assert not boxes_overlap((0, 0, 0, 2, 2), (2.001, 0, 0, 2, 2))


# -- scenes --------------------------------------------------------------------------

def test_generate_scene_deterministic():
    a = generate_scene(0, "A", 0.0)
    b = generate_scene(0, "A", 0.0)
    assert a.scene_id == b.scene_id
    for field in ("centerline", "ego_poses", "ego_speeds", "expert_actions"):
        assert getattr(a, field).tobytes() == getattr(b, field).tobytes()


def test_zero_difficulty_has_no_agents():
    for seed in range(5):
        assert generate_scene(seed, "A", 0.0).agents == []
        assert generate_scene(seed, "B", 0.0).agents == []


def test_expert_collision_free_on_100_scenes():
    n = cfg.n_steps
    for seed in range(100):
        scene = generate_scene(1000 + seed, "A", (seed % 11) / 10)
        for t in range(scene.horizon - n + 1):
            pos = np.cumsum(scene.expert_actions[t:t + n], axis=0)
            assert not check_collision(pos, scene, t, cfg).flags.any(), (seed, t)


@pytest.mark.parametrize("domain", ["A", "B"])
def test_expert_soundness_and_lane_offset(domain):
    for seed in range(15):
        scene = generate_scene(seed, domain, 1.0)
        assert expert_is_sound(scene, cfg)
        _, off = scene.lane.project(scene.ego_poses[:, :2])
        assert np.max(np.abs(off)) <= scene.lane_half_width


def test_domains_differ_in_curvature_and_density():
    def stats(domain):
        curv, agents = [], []
        for seed in range(10):
            sc = generate_scene(seed, domain, 1.0)
            h = sc.lane.heading_at(np.linspace(0, sc.lane.length, 200))
            curv.append(np.abs(wrap_angle(np.diff(h))).sum() / sc.lane.length)
            agents.append(len(sc.agents))
        return np.mean(curv), np.mean(agents)
    ca, na = stats("A")
    cb, nb = stats("B")
    assert cb > ca and nb > na


def test_straight_lane_cruise_actions():
    scene = straight_scene(cruise=5.0)
    np.testing.assert_allclose(scene.expert_actions, np.tile([2.5, 0.0], (cfg.horizon, 1)), atol=1e-6)


def test_stopped_lead_speed_non_increasing_to_zero():
    # a stopped car whose rear bumper is 3 m ahead of the ego front bumper
    gap = 3.0
    lead = static_agent(30.0 + cfg.ego_length / 2 + gap + 4.5 / 2, 0.0)
    lane = Polyline(np.array([[0.0, 0.0], [400.0, 0.0]]))
    _, speeds, _ = script_expert(lane, [lead], Pose2D(30.0, 0.0, 0.0), 5.0, cfg, start_speed=2.0)
    assert np.all(np.diff(speeds) <= 1e-12)
    assert speeds[-1] == 0.0


def test_mirrored_scene_mirrors_y_actions():
    for seed in (3, 4):
        scene = generate_scene(seed, "B", 0.0)
        m = mirror_scene(scene)
        np.testing.assert_allclose(m.expert_actions[:, 0], scene.expert_actions[:, 0], atol=1e-6)
        np.testing.assert_allclose(m.expert_actions[:, 1], -scene.expert_actions[:, 1], atol=1e-6)


# -- collisions ----------------------------------------------------------------------

def test_empty_scene_in_lane_is_clear():
    scene = straight_scene()
    pos = np.cumsum(np.tile([2.0, 0.0], (6, 1)), axis=0)
    res = check_collision(pos, scene, 0, cfg)
    assert not res.flags.any() and not res.horizon_overrun


def test_agent_at_ego_position_collides_at_that_step():
    # ego frame at t0=0 coincides with world frame (ego at x=30 heading 0)
    pos = np.cumsum(np.tile([2.0, 0.0], (6, 1)), axis=0)
    agent = AgentTrack((4.5, 1.9), np.tile([100.0, 0.0, 0.0], (cfg.horizon + 1, 1)))
    agent.poses[2] = [30.0 + pos[1, 0], 0.0, 0.0]
    scene = straight_scene([agent])
    flags = check_collision(pos, scene, 0, cfg).flags
    assert flags[1]
    assert flags.sum() == 1


def test_leaving_corridor_counts_as_collision():
    scene = straight_scene()
    pos = np.cumsum(np.tile([2.0, 0.6], (6, 1)), axis=0)   # 3.6 m left after 6 steps
    flags = check_collision(pos, scene, 0, cfg).flags
    assert flags[-1] and not flags[0]
    off = DEFAULT_WORLD.__class__(drivable_area_collision=False)
    assert not check_collision(pos, scene, 0, off).flags.any()


def test_horizon_overrun_is_flagged():
    scene = straight_scene([static_agent(200.0, 0.0)])
    pos = np.cumsum(np.tile([1.0, 0.0], (6, 1)), axis=0)
    assert check_collision(pos, scene, cfg.horizon - 3, cfg).horizon_overrun


def test_headings_from_positions():
    pos = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
    np.testing.assert_allclose(trajectory_headings(pos, 0.3), [0.0, 0.0, np.pi / 2])
    np.testing.assert_allclose(trajectory_headings(np.zeros((2, 2)), 0.3), [0.3, 0.3])


# -- observations --------------------------------------------------------------------

def test_no_agents_gives_sentinel_slots():
    scene = straight_scene()
    o = observe(scene, 0, cfg)
    assert o.shape == (cfg.obs_dim,)
    np.testing.assert_array_equal(o[2:2 + 7 * cfg.num_agents_obs], 0.0)


def test_on_centerline_lane_offsets_zero():
    o = observe(straight_scene(), 0, cfg)
    lane = o[2 + 7 * cfg.num_agents_obs: 2 + 7 * cfg.num_agents_obs + cfg.num_lane_samples]
    np.testing.assert_allclose(lane, 0.0, atol=1e-12)


def test_translation_leaves_observations_unchanged():
    scene = generate_scene(5, "B", 1.0)
    moved = transform_scene(scene, 10.0, 10.0)
    for t in range(0, scene.horizon, 3):
        np.testing.assert_allclose(observe(moved, t, cfg), observe(scene, t, cfg), atol=1e-5)


@settings(max_examples=10, deadline=None)
@given(st.floats(-100, 100), st.floats(-100, 100), st.floats(-np.pi, np.pi))
def test_rigid_motion_leaves_observations_unchanged(dx, dy, dtheta):
    scene = generate_scene(7, "B", 0.8)
    moved = transform_scene(scene, dx, dy, dtheta)
    for t in (0, 7, 14):
        np.testing.assert_allclose(observe(moved, t, cfg), observe(scene, t, cfg), atol=1e-5)


def test_agents_sorted_by_distance():
    scene = generate_scene(2, "B", 1.0)
    o = observe(scene, 0, cfg)
    slots = o[2:2 + 7 * cfg.num_agents_obs].reshape(-1, 7)
    present = slots[slots[:, 6] == 1]
    d = np.hypot(present[:, 0], present[:, 1])
    assert np.all(np.diff(d) >= 0)


# -- dataset -------------------------------------------------------------------------

def test_dataset_record_count_and_determinism(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    man = build_dataset(10, 0, (1.0, 0.0), a)
    build_dataset(10, 0, (1.0, 0.0), b)
    assert man["records"] == 10 * (cfg.horizon - cfg.n_steps)
    assert a.read_bytes() == b.read_bytes()
    assert manifest_path_for(a).read_bytes() == manifest_path_for(b).read_bytes()
    lines = a.read_text().splitlines()
    assert len(lines) == json.loads(manifest_path_for(a).read_text())["records"]


def test_records_link_to_next_observation(tiny_dataset):
    recs = tiny_dataset.records
    by_key = {r.key: r for r in recs}
    for r in recs:
        assert r.expert_actions.shape == (cfg.n_steps, 2)
        nxt = by_key.get(f"{r.scene_id}/{r.t + 1}")
        if nxt is not None:
            np.testing.assert_array_equal(r.next_obs, nxt.obs)


def test_record_observation_matches_regenerated_scene(tiny_dataset):
    rec = tiny_dataset.records[17]
    scene = tiny_dataset.scene(rec)
    np.testing.assert_allclose(observe(scene, rec.t, tiny_dataset.world), rec.obs, rtol=0, atol=1e-12)


def test_manifest_config_hash_recomputes(tiny_dataset_path):
    man = json.loads(manifest_path_for(tiny_dataset_path).read_text())
    settings_ = {"num_scenes": man["num_scenes"], "seed": man["seed"], "domain_mix": man["domain_mix"],
                 "world": man["world"]}
    assert config_hash(settings_) == man["config_hash"]


def test_partial_files_removed_on_failure(tmp_path, monkeypatch):
    import coirl.world.dataset as dsmod

    def boom(*a, **k):
        raise OSError("disk full")
    monkeypatch.setattr(dsmod, "scene_records", boom)
    out = tmp_path / "x.jsonl"
    with pytest.raises(OSError):
        build_dataset(2, 0, "1:0", out)
    assert not out.exists() and not manifest_path_for(out).exists()


def test_domain_mix_parsing():
    from coirl.world import parse_domain_mix
    assert parse_domain_mix("0.7:0.3") == (0.7, 0.3)
    for bad in ("x", "1:2:3", "-1:1", "0:0"):
        with pytest.raises(ValueError):
            parse_domain_mix(bad)


def test_load_rejects_count_mismatch(tmp_path):
    p = tmp_path / "d.jsonl"
    build_dataset(2, 0, "1:0", p)
    p.write_text("".join(p.read_text().splitlines(keepends=True)[:-1]))
    from coirl.world import DatasetError
    with pytest.raises(DatasetError):
        load_dataset(p)
