"""Ego-frame feature vectors standing in for camera observations."""

from __future__ import annotations

import numpy as np

from .geometry import to_frame, wrap_angle

# feature scales
POS_SCALE = 20.0
VEL_SCALE = 10.0
SIZE_SCALE = 5.0
LANE_SCALE = 5.0
COMMAND_ANGLE = 0.15   # rad of lane heading change that turns "straight" into a turn
COMMAND_DIST = 30.0

AGENT_SENTINEL = np.zeros(7)


def high_level_command(lane, arc):
    """One-hot (left, straight, right) from the lane heading change ahead."""
    dh = wrap_angle(lane.heading_at(arc + COMMAND_DIST) - lane.heading_at(arc))
    if dh > COMMAND_ANGLE:
        return np.array([1.0, 0.0, 0.0])
    if dh < -COMMAND_ANGLE:
        return np.array([0.0, 0.0, 1.0])
    return np.array([0.0, 1.0, 0.0])


def observe(scene, t, cfg):
    """Observation vector at step ``t``.

    Layout: [speed, heading error] + K agent slots of
    (dx, dy, rel vx, rel vy, length, width, present) + M lane offsets + command.
    """
    if not 0 <= t <= scene.horizon:
        raise IndexError(f"step {t} outside horizon {scene.horizon}")
    ex, ey, eh = scene.ego_poses[t]
    v = scene.ego_speeds[t]
    lane = scene.lane
    arc, _ = lane.project(np.array([ex, ey]))
    arc = float(arc)
    ego_part = np.array([v / VEL_SCALE, wrap_angle(eh - lane.heading_at(arc))])

    K = cfg.num_agents_obs
    slots = np.tile(AGENT_SENTINEL, (K, 1))
    if scene.agents:
        nxt = min(t + 1, scene.horizon)
        prv = nxt - 1
        now = np.array([a.poses[t, :2] for a in scene.agents])
        vel = np.array([(a.poses[nxt, :2] - a.poses[prv, :2]) / scene.timestep for a in scene.agents])
        rel = to_frame(now, (ex, ey), eh)
        c, s = np.cos(eh), np.sin(eh)
        vel_ego = np.stack([c * vel[:, 0] + s * vel[:, 1], -s * vel[:, 0] + c * vel[:, 1]], axis=1)
        vel_ego[:, 0] -= v
        dist = np.hypot(rel[:, 0], rel[:, 1])
        order = np.argsort(dist, kind="stable")[:K]
        for slot, j in enumerate(order):
            L, W = scene.agents[j].footprint
            slots[slot] = [rel[j, 0] / POS_SCALE, rel[j, 1] / POS_SCALE,
                           vel_ego[j, 0] / VEL_SCALE, vel_ego[j, 1] / VEL_SCALE,
                           L / SIZE_SCALE, W / SIZE_SCALE, 1.0]

    ahead = arc + cfg.lane_sample_spacing * np.arange(1, cfg.num_lane_samples + 1)
    lane_pts = to_frame(lane.point_at(ahead), (ex, ey), eh)
    lane_part = lane_pts[:, 1] / LANE_SCALE

    return np.concatenate([ego_part, slots.reshape(-1), lane_part, high_level_command(lane, arc)])
