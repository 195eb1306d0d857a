"""Trajectory collision checks against scripted agents and the drivable corridor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import boxes_overlap_batch


@dataclass
class CollisionCheck:
    flags: np.ndarray            # (n,) bool, True where step i collides
    horizon_overrun: bool = False  # agents were frozen at their last pose

    def __iter__(self):
        return iter(self.flags)

    def __len__(self):
        return len(self.flags)

    def __getitem__(self, i):
        return self.flags[i]


def trajectory_headings(positions, start_heading=0.0, eps=1e-3):
    """Heading of each step from the displacement into it (ego frame).

    A near-zero displacement keeps the previous heading; the first step falls
    back to ``start_heading``.
    """
    pos = np.asarray(positions, dtype=np.float64)
    prev = np.concatenate([np.zeros_like(pos[..., :1, :]), pos[..., :-1, :]], axis=-2)
    d = pos - prev
    raw = np.arctan2(d[..., 1], d[..., 0])
    moving = np.hypot(d[..., 0], d[..., 1]) > eps
    out = np.empty(raw.shape)
    last = np.full(raw.shape[:-1], float(start_heading))
    for i in range(raw.shape[-1]):
        last = np.where(moving[..., i], raw[..., i], last)
        out[..., i] = last
    return out


def collision_flags_batch(positions, scene, t0, cfg, return_overrun=False):
    """Per-step collision flags for a batch of ego-frame position sequences.

    ``positions`` is (B, n, 2), expressed in the ego frame at step ``t0``.
    Returns bool (B, n).
    """
    pos = np.asarray(positions, dtype=np.float64)
    B, n, _ = pos.shape
    ex, ey, eh = scene.ego_poses[t0]
    c, s = np.cos(eh), np.sin(eh)
    wx = ex + c * pos[..., 0] - s * pos[..., 1]
    wy = ey + s * pos[..., 0] + c * pos[..., 1]
    wh = trajectory_headings(pos) + eh
    overrun = t0 + n > scene.horizon
    flags = np.zeros((B, n), dtype=bool)
    if scene.agents:
        times = np.minimum(np.arange(t0 + 1, t0 + n + 1), scene.horizon)
        agent = np.stack([scene.agent_boxes(t) for t in times])          # (n, A, 5)
        ego = np.stack([wx, wy, wh,
                        np.full_like(wx, cfg.ego_length), np.full_like(wx, cfg.ego_width)], axis=-1)
        hit = boxes_overlap_batch(ego[:, :, None, :], agent[None, :, :, :])  # (B, n, A)
        flags |= hit.any(axis=-1)
    if cfg.drivable_area_collision:
        arc0 = float(scene.lane.project(np.array([ex, ey]))[0])
        _, off = scene.lane.project(np.stack([wx, wy], axis=-1), lo=arc0 - 30.0, hi=arc0 + 80.0)
        flags |= np.abs(off) > scene.lane_half_width
    if return_overrun:
        return flags, overrun
    return flags


def check_collision(positions, scene, t0, cfg):
    """Collision flags for one ego-frame position sequence starting at step ``t0``."""
    flags, overrun = collision_flags_batch(np.asarray(positions)[None], scene, t0, cfg, return_overrun=True)
    return CollisionCheck(flags=flags[0], horizon_overrun=bool(overrun))
