"""Synthetic scenes: lane generation, scripted agents and the scripted expert driver."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .geometry import Polyline, Pose2D, wrap_angle


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    n_steps: int = 6            # planned actions per record (3 s at 2 Hz)
    horizon: int = 20           # scene length in 0.5 s steps
    dt: float = 0.5
    num_agents_obs: int = 6     # K nearest agents in the observation
    num_lane_samples: int = 8   # M centerline samples
    lane_sample_spacing: float = 1.5
    lane_half_width: float = 2.0
    ego_length: float = 4.5
    ego_width: float = 1.9
    drivable_area_collision: bool = True
    expert_retries: int = 30

    @property
    def obs_dim(self):
        return 2 + 7 * self.num_agents_obs + self.num_lane_samples + 3

    def to_dict(self):
        return asdict(self)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


DEFAULT_WORLD = WorldConfig()


@dataclass
class AgentTrack:
    footprint: tuple            # (length, width) metres
    poses: np.ndarray           # (horizon + 1, 3): x, y, heading
    kind: str = "vehicle"

    def __post_init__(self):
        if self.footprint[0] <= 0 or self.footprint[1] <= 0:
            raise ValueError("agent footprint dims must be positive")

    def pose_at(self, t):
        """Pose at (possibly fractional) step ``t``; frozen past the last pose."""
        t = float(np.clip(t, 0, len(self.poses) - 1))
        i = min(int(np.floor(t)), len(self.poses) - 2)
        f = t - i
        p0, p1 = self.poses[i], self.poses[i + 1]
        xy = (1 - f) * p0[:2] + f * p1[:2]
        h = p0[2] + f * wrap_angle(p1[2] - p0[2])
        return np.array([xy[0], xy[1], h])


@dataclass
class Scene:
    scene_id: str
    seed: int
    domain: str
    difficulty: float
    centerline: np.ndarray
    lane_half_width: float
    agents: list
    ego_start: Pose2D
    cruise_speed: float
    ego_poses: np.ndarray = None      # (horizon + 1, 3)
    ego_speeds: np.ndarray = None     # (horizon + 1,)
    expert_actions: np.ndarray = None  # (horizon, 2) ego-frame displacements
    timestep: float = 0.5
    horizon: int = 20
    lane: Polyline = field(default=None, repr=False)

    def __post_init__(self):
        if self.lane is None:
            self.lane = Polyline(self.centerline)

    def agent_boxes(self, t):
        """(A, 5) boxes at integer step ``t`` (clamped to the last pose)."""
        t = int(min(max(t, 0), self.horizon))
        if not self.agents:
            return np.zeros((0, 5))
        return np.array([[*a.poses[t], a.footprint[0], a.footprint[1]] for a in self.agents])

    def expert_window(self, t, n):
        return self.expert_actions[t:t + n]


# -- lane and agents -----------------------------------------------------------------

DOMAINS = {
    # max |curvature|, max agents, cruise speed range, kind weights
    "A": dict(kappa=0.006, max_agents=4, cruise=(6.0, 9.0),
              kinds={"lead": 0.35, "stopped": 0.15, "oncoming": 0.2, "parked": 0.15, "crossing": 0.1, "cutin": 0.05}),
    "B": dict(kappa=0.035, max_agents=9, cruise=(4.5, 7.5),
              kinds={"lead": 0.2, "stopped": 0.15, "oncoming": 0.15, "parked": 0.1, "crossing": 0.25, "cutin": 0.15}),
}

EGO_START_ARC = 30.0
LANE_LENGTH = 320.0


def _make_centerline(rng, kappa_max, origin, theta0):
    pts = [np.array(origin, dtype=np.float64)]
    heading = theta0
    s = 0.0
    while s < LANE_LENGTH:
        seg_len = rng.uniform(20.0, 60.0)
        kappa = 0.0 if rng.uniform() < 0.3 else rng.uniform(-kappa_max, kappa_max)
        if s < EGO_START_ARC + 10:
            kappa = kappa * 0.3
        for _ in range(int(seg_len)):
            heading += kappa * 1.0
            pts.append(pts[-1] + np.array([np.cos(heading), np.sin(heading)]))
            s += 1.0
    return np.array(pts)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return 0.5 - 0.5 * np.cos(np.pi * x)


def _agent_frenet(kind, rng, cruise, horizon, dt):
    """Lane-frame track (s(t), d(t), heading offset) plus footprint for one agent."""
    t = np.arange(horizon + 1) * dt
    side = 1.0 if rng.uniform() < 0.5 else -1.0
    car = (rng.uniform(4.0, 5.0), rng.uniform(1.8, 2.0))
    s0 = EGO_START_ARC
    if kind == "lead":
        v0 = rng.uniform(0.3, 1.0) * cruise
        start = s0 + rng.uniform(12.0, 40.0)
        if rng.uniform() < 0.5:
            tb, decel = rng.uniform(0.5, 7.0), rng.uniform(1.0, 4.0)
            v = np.where(t < tb, v0, np.maximum(0.0, v0 - decel * (t - tb)))
        else:
            v = np.full_like(t, v0)
        s = start + np.concatenate([[0.0], np.cumsum((v[:-1] + v[1:]) / 2 * dt)])
        return s, np.full_like(t, rng.uniform(-0.3, 0.3)), np.zeros_like(t), car
    if kind == "stopped":
        s = np.full_like(t, s0 + rng.uniform(20.0, 70.0))
        return s, np.full_like(t, rng.uniform(-0.4, 0.4)), np.zeros_like(t), car
    if kind == "oncoming":
        v = rng.uniform(5.0, 12.0)
        s = s0 + rng.uniform(30.0, 120.0) - v * t
        return s, np.full_like(t, side * rng.uniform(3.7, 4.3)), np.full_like(t, np.pi), car
    if kind == "parked":
        s = np.full_like(t, s0 + rng.uniform(5.0, 80.0))
        return s, np.full_like(t, side * rng.uniform(3.3, 3.9)), np.zeros_like(t), car
    if kind == "crossing":
        ped = (0.6, 0.6)
        sc = s0 + rng.uniform(12.0, 55.0)
        d_start = side * rng.uniform(4.5, 7.5)
        speed = rng.uniform(0.8, 1.6)
        t0 = rng.uniform(0.0, 5.0)
        d = d_start - side * speed * np.maximum(0.0, t - t0)
        return np.full_like(t, sc), d, np.full_like(t, -side * np.pi / 2), ped
    if kind == "cutin":
        v = rng.uniform(0.55, 0.95) * cruise
        start = s0 + rng.uniform(8.0, 30.0)
        tc, dur = rng.uniform(0.5, 5.0), rng.uniform(2.0, 3.5)
        d0 = side * 4.0
        d = d0 * (1 - _smoothstep((t - tc) / dur))
        s = start + v * t
        lat_v = np.gradient(d, dt)
        return s, d, np.arctan2(lat_v, v), car
    raise ValueError(f"unknown agent kind {kind!r}")


def _place_agents(rng, lane, domain, difficulty, cruise, cfg):
    spec = DOMAINS[domain]
    count = int(round(difficulty * spec["max_agents"]))
    kinds = list(spec["kinds"])
    probs = np.array([spec["kinds"][k] for k in kinds])
    agents = []
    for _ in range(count):
        kind = kinds[rng.choice(len(kinds), p=probs / probs.sum())]
        s, d, dh, fp = _agent_frenet(kind, rng, cruise, cfg.horizon, cfg.dt)
        xy = lane.frenet_to_world(s, d)
        heading = wrap_angle(lane.heading_at(s) + dh)
        poses = np.column_stack([xy, heading])
        agents.append(AgentTrack(footprint=(float(fp[0]), float(fp[1])), poses=poses, kind=kind))
    return agents


# -- expert --------------------------------------------------------------------------

class ExpertParams:
    headway = 2.0        # s, time headway the gap keeper maintains
    standstill_gap = 2.0  # m
    max_accel = 1.5
    max_decel = 6.0
    k_speed = 0.8
    k_gap = 0.4
    k_rel = 0.8
    lookahead_time = 3.0
    corridor_margin = 0.4
    lat_accel = 2.5
    substeps = 5


def _curve_speed(lane, s, dist):
    arcs = np.linspace(s, s + dist, 12)
    h = lane.heading_at(arcs)
    kappa = np.abs(wrap_angle(np.diff(h))).max() / max(dist / 11, 1e-6) if len(h) > 1 else 0.0
    return np.inf if kappa < 1e-6 else np.sqrt(ExpertParams.lat_accel / kappa)


class _AgentLaneTracks:
    """Agent tracks resampled on the expert's substep grid, in lane coordinates."""

    def __init__(self, lane, agents, cfg):
        P = ExpertParams
        self.per_step = P.substeps
        extra = int(np.ceil(P.lookahead_time / cfg.dt))
        grid = np.arange((cfg.horizon + extra) * P.substeps + 1) / P.substeps
        self.empty = not agents
        if self.empty:
            return
        poses = np.array([[a.pose_at(t) for t in grid] for a in agents])  # (A, T, 3)
        arc, off = lane.project(poses[..., :2])
        rel_h = poses[..., 2] - lane.heading_at(arc)
        fp = np.array([a.footprint for a in agents])
        L, W = fp[:, 0:1], fp[:, 1:2]
        self.arc = arc
        self.off = off
        self.lat_ext = 0.5 * (np.abs(L * np.sin(rel_h)) + np.abs(W * np.cos(rel_h)))
        self.lon_ext = 0.5 * (np.abs(L * np.cos(rel_h)) + np.abs(W * np.sin(rel_h)))
        h = cfg.dt / P.substeps
        v = np.diff(arc, axis=1) / h
        self.v_lon = np.maximum(0.0, np.concatenate([v, v[:, -1:]], axis=1))
        step = P.substeps
        n_look = int(round(P.lookahead_time / cfg.dt))
        self.offsets = np.arange(n_look + 1) * step


def _obstacle_accel(tracks, k, s_e, v, cfg):
    """Most restrictive gap-keeping acceleration over agents entering the ego corridor.

    ``k`` indexes the substep grid of ``tracks``.
    """
    P = ExpertParams
    if tracks.empty:
        return np.inf
    idx = k + tracks.offsets
    arc = tracks.arc[:, idx]
    inside = np.abs(tracks.off[:, idx]) < cfg.ego_width / 2 + tracks.lat_ext[:, idx] + P.corridor_margin
    ahead = arc - s_e > 0
    sel = inside & ahead
    if not sel.any():
        return np.inf
    gap = (arc - s_e - cfg.ego_length / 2 - tracks.lon_ext[:, idx])[sel]
    v_lon = tracks.v_lon[:, idx][sel]
    desired = P.standstill_gap + P.headway * v
    acc = P.k_gap * (gap - desired) + P.k_rel * (v_lon - v)
    stop_dist = v * v / (2 * P.max_decel * 0.8)
    acc = np.where((gap - stop_dist < 0.5) & (v > v_lon), -P.max_decel, acc)
    return float(acc.min())


def script_expert(lane, agents, ego_start, cruise_speed, cfg=DEFAULT_WORLD, start_speed=None):
    """Pure-pursuit lane tracking with a time-headway gap keeper.

    Returns (poses (H+1, 3), speeds (H+1,), actions (H, 2)) where each action is
    the 0.5 s displacement expressed in the ego frame at the start of the step.
    """
    P = ExpertParams
    x, y, psi = ego_start.x, ego_start.y, ego_start.heading
    v = cruise_speed if start_speed is None else start_speed
    h = cfg.dt / P.substeps
    poses = [(x, y, psi)]
    speeds = [v]
    s_e = float(lane.project(np.array([x, y]))[0])
    tracks = _AgentLaneTracks(lane, agents, cfg)
    for t in range(cfg.horizon):
        for sub in range(P.substeps):
            s_e, _ = lane.project(np.array([x, y]), lo=s_e - 5.0, hi=s_e + 20.0)
            s_e = float(s_e)
            look = max(5.0, 1.2 * v)
            target = lane.point_at(s_e + look)
            dx, dy = target[0] - x, target[1] - y
            alpha = wrap_angle(np.arctan2(dy, dx) - psi)
            kappa = float(np.clip(2 * np.sin(alpha) / look, -0.25, 0.25))
            v_target = min(cruise_speed, _curve_speed(lane, s_e, 2 * v + 10.0))
            acc = float(np.clip(P.k_speed * (v_target - v), -3.0, P.max_accel))
            acc = min(acc, _obstacle_accel(tracks, t * P.substeps + sub, s_e, v, cfg))
            acc = float(np.clip(acc, -P.max_decel, P.max_accel))
            v_new = max(0.0, v + acc * h)
            v_mid = 0.5 * (v + v_new)
            psi_mid = psi + 0.5 * kappa * v_mid * h
            x += v_mid * np.cos(psi_mid) * h
            y += v_mid * np.sin(psi_mid) * h
            psi = float(wrap_angle(psi + kappa * v_mid * h))
            v = v_new
        poses.append((x, y, psi))
        speeds.append(v)
    poses = np.array(poses)
    actions = np.empty((cfg.horizon, 2))
    for t in range(cfg.horizon):
        d = poses[t + 1, :2] - poses[t, :2]
        c, s = np.cos(poses[t, 2]), np.sin(poses[t, 2])
        actions[t] = (c * d[0] + s * d[1], -s * d[0] + c * d[1])
    return poses, np.array(speeds), actions


# -- scene assembly --------------------------------------------------------------------

def _scene_rng(seed, domain, attempt):
    key = int.from_bytes(hashlib.sha256(f"{seed}:{domain}:{attempt}".encode()).digest()[:8], "little")
    return np.random.default_rng(key)


def _finish(scene, cfg):
    poses, speeds, actions = script_expert(scene.lane, scene.agents, scene.ego_start, scene.cruise_speed, cfg)
    scene.ego_poses, scene.ego_speeds, scene.expert_actions = poses, speeds, actions
    return scene


def expert_is_sound(scene, cfg=DEFAULT_WORLD):
    """Every record window of the expert is collision-free and inside the lane."""
    from .collision import collision_flags_batch

    n = cfg.n_steps
    _, off = scene.lane.project(scene.ego_poses[:, :2])
    if np.max(np.abs(off)) > scene.lane_half_width:
        return False
    windows = [np.cumsum(scene.expert_actions[t:t + n], axis=0) for t in range(scene.horizon - n + 1)]
    for t0, pos in enumerate(windows):
        if collision_flags_batch(pos[None], scene, t0, cfg)[0].any():
            return False
    return True


def generate_scene(seed, domain="A", difficulty=0.5, cfg=DEFAULT_WORLD):
    """Deterministic scene for (seed, domain, difficulty) with a sound expert."""
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}")
    if not 0.0 <= difficulty <= 1.0:
        raise ValueError("difficulty must lie in [0, 1]")
    spec = DOMAINS[domain]
    for attempt in range(cfg.expert_retries):
        rng = _scene_rng(seed, domain, attempt)
        origin = rng.uniform(-500.0, 500.0, size=2)
        theta0 = rng.uniform(-np.pi, np.pi)
        cl = _make_centerline(rng, spec["kappa"], origin, theta0)
        lane = Polyline(cl)
        cruise = rng.uniform(*spec["cruise"])
        start_xy = lane.point_at(EGO_START_ARC)
        ego_start = Pose2D(float(start_xy[0]), float(start_xy[1]), float(lane.heading_at(EGO_START_ARC)))
        agents = _place_agents(rng, lane, domain, difficulty, cruise, cfg)
        scene = Scene(
            scene_id=f"{domain}-{seed:06d}",
            seed=int(seed), domain=domain, difficulty=float(difficulty),
            centerline=cl, lane_half_width=cfg.lane_half_width, agents=agents,
            ego_start=ego_start, cruise_speed=float(cruise),
            timestep=cfg.dt, horizon=cfg.horizon, lane=lane,
        )
        _finish(scene, cfg)
        if expert_is_sound(scene, cfg):
            return scene
    raise SceneGenerationError(f"no sound expert for seed={seed} domain={domain} after {cfg.expert_retries} tries")


def transform_scene(scene, dx=0.0, dy=0.0, dtheta=0.0, cfg=DEFAULT_WORLD):
    """Rigidly rotate (about the origin) then translate every pose in the scene."""
    c, s = np.cos(dtheta), np.sin(dtheta)

    def xy(p):
        return np.column_stack([c * p[:, 0] - s * p[:, 1] + dx, s * p[:, 0] + c * p[:, 1] + dy])

    def poses(p):
        return np.column_stack([xy(p[:, :2]), wrap_angle(p[:, 2] + dtheta)])

    e = scene.ego_start
    ego = poses(np.array([[e.x, e.y, e.heading]]))[0]
    return replace(
        scene,
        centerline=xy(scene.centerline),
        agents=[AgentTrack(a.footprint, poses(a.poses), a.kind) for a in scene.agents],
        ego_start=Pose2D(*map(float, ego)),
        ego_poses=poses(scene.ego_poses),
        lane=None,
    )


def mirror_scene(scene, cfg=DEFAULT_WORLD):
    """Reflect the scene about the world x-axis and re-run the expert."""
    def poses(p):
        return np.column_stack([p[:, 0], -p[:, 1], wrap_angle(-p[:, 2])])

    e = scene.ego_start
    mirrored = replace(
        scene,
        scene_id=scene.scene_id + "-m",
        centerline=scene.centerline * np.array([1.0, -1.0]),
        agents=[AgentTrack(a.footprint, poses(a.poses), a.kind) for a in scene.agents],
        ego_start=Pose2D(e.x, -e.y, float(wrap_angle(-e.heading))),
        lane=None,
    )
    return _finish(mirrored, cfg)
