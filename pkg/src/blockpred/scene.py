"""Ground-truth scenes: pedestrians crossing a circle, and their LOS link state.

Trajectories come from a sampling-based reciprocal avoidance rule: every
frame each walker scores a fixed number of candidate velocities against its
preferred velocity and the time to collision with its neighbours, subject to
a hard clearance constraint that keeps bodies apart.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .geometry import segment_cylinder_interval

FORMAT_VERSION = 1
GOAL_TOL = 0.05
N_CANDIDATES = 64


class InfeasibleSceneError(ValueError):
    pass


@dataclass
class SceneConfig:
    circle_radius: float = 12.5
    n_humans: int = 10
    frame_rate: float = 10.0
    duration: int = 300
    human_radius: float = 0.25
    human_height: float = 1.7
    preferred_speed: float = 1.3
    tx_position: tuple | None = None
    rng_seed: int = 0
    # avoidance tuning
    comfort_margin: float = 0.3
    avoid_weight: float = 0.8
    horizon: float = 4.0

    def __post_init__(self):
        if self.circle_radius <= 0:
            raise ValueError("circle_radius must be positive")
        if self.n_humans < 1:
            raise ValueError("n_humans must be at least 1")
        if self.frame_rate <= 0:
            raise ValueError("frame_rate must be positive")
        if self.human_radius <= 0:
            raise ValueError("human_radius must be positive")
        if self.duration < 1:
            raise ValueError("duration must be at least one frame")
        if self.tx_position is None:
            # elevated access point on the circle boundary
            self.tx_position = (self.circle_radius, 0.0, 3.0)
        self.tx_position = tuple(float(v) for v in self.tx_position)

    @property
    def tx(self) -> np.ndarray:
        return np.array(self.tx_position, dtype=float)

    @property
    def dt(self) -> float:
        return 1.0 / self.frame_rate


@dataclass
class Scene:
    config: SceneConfig
    trajectories: np.ndarray  # (duration, n_humans, 2)
    goals: np.ndarray  # (n_humans, 2)

    @property
    def n_humans(self) -> int:
        return self.trajectories.shape[1]

    @property
    def duration(self) -> int:
        return self.trajectories.shape[0]


@dataclass(frozen=True)
class LinkState:
    value: int
    blocker: int | None = None

    def __post_init__(self):
        if (self.value == 1) != (self.blocker is not None):
            raise ValueError("blocker must be given exactly when the link is blocked")


def _start_angles(cfg: SceneConfig, rng, max_tries=20_000):
    need = 2 * cfg.human_radius + 0.1
    if cfg.n_humans * need > 2 * math.pi * cfg.circle_radius:
        raise InfeasibleSceneError(
            f"{cfg.n_humans} humans of radius {cfg.human_radius} do not fit on a "
            f"circle of radius {cfg.circle_radius}")
    angles: list[float] = []
    tries = 0
    while len(angles) < cfg.n_humans:
        tries += 1
        if tries > max_tries:
            raise InfeasibleSceneError("could not seat humans on the circle; lower n_humans")
        a = rng.uniform(0, 2 * math.pi)
        # chord length between points on the circle
        if all(2 * cfg.circle_radius * abs(math.sin((a - b) / 2)) >= need for b in angles):
            angles.append(a)
    return np.array(angles)


def _avoidance_penalty(pos, vel, cand, radius, weight, horizon, eye):
    """Worst weight/time-to-collision over neighbours, for every (walker, candidate)."""
    dp = pos[:, None, :] - pos[None, :, :]  # (i, j, 2)
    c = dp[..., 0] ** 2 + dp[..., 1] ** 2 - radius * radius
    c[eye] = np.inf  # nobody avoids themselves
    c = c[:, None, :]
    both = vel[:, None, :] + vel[None, :, :]
    # reciprocal: each side is assumed to take half of the avoiding
    dvx = 2 * cand[:, :, 0, None] - both[:, None, :, 0]  # (i, k, j)
    dvy = 2 * cand[:, :, 1, None] - both[:, None, :, 1]
    b = dp[:, None, :, 0] * dvx
    b += dp[:, None, :, 1] * dvy
    a = dvx * dvx
    a += dvy * dvy
    with np.errstate(invalid="ignore"):
        disc = b * b - a * c
    approaching = (b < 0) & (a > 1e-12) & (disc > 0)
    ttc = np.full(b.shape, np.inf)
    ttc[approaching] = (-b[approaching] - np.sqrt(disc[approaching])) / a[approaching]
    overlap = np.broadcast_to(c <= 0, b.shape)
    if overlap.any():
        ttc[overlap & (b < 0)] = 0.0
        ttc[overlap & (b >= 0)] = np.inf
    # the worst neighbour is the one with the earliest contact
    soonest = ttc.min(axis=2)
    return np.where(soonest < horizon, weight / np.maximum(soonest, 0.05), 0.0)


def generate_scene(config: SceneConfig, start_angles=None) -> Scene:
    """Walk every human from a point on the circle to its antipode.

    ``start_angles`` (radians) pins the start points; otherwise they are drawn
    from the config seed with enough spacing to seat everyone.
    """
    cfg = config
    rng = np.random.default_rng(cfg.rng_seed)
    n = cfg.n_humans
    angles = _start_angles(cfg, rng) if start_angles is None else np.asarray(start_angles, float)
    if len(angles) != n:
        raise ValueError(f"expected {n} start angles, got {len(angles)}")
    pos = np.stack([np.cos(angles), np.sin(angles)], axis=1) * cfg.circle_radius
    goals = -pos
    vel = np.zeros((n, 2))
    dt = cfg.dt
    v0 = cfg.preferred_speed
    hard_min = 2 * cfg.human_radius + 0.02
    comfort = 2 * cfg.human_radius + cfg.comfort_margin
    traj = np.empty((cfg.duration, n, 2))
    traj[0] = pos
    eye = np.eye(n, dtype=bool)
    for t in range(1, cfg.duration):
        to_goal = goals - pos
        dist = np.linalg.norm(to_goal, axis=1)
        moving = dist >= GOAL_TOL
        heading = np.where(moving, np.arctan2(to_goal[:, 1], to_goal[:, 0]), np.arctan2(vel[:, 1], vel[:, 0]))
        pref = np.zeros((n, 2))
        pref[moving] = to_goal[moving] / dist[moving, None] * np.minimum(v0, dist[moving] / dt)[:, None]

        cand = np.empty((n, N_CANDIDATES, 2))
        cand[:, 0] = pref
        cand[:, 1] = 0.0
        speeds = rng.uniform(0.0, 1.25, (n, N_CANDIDATES - 2)) * v0
        ang = heading[:, None] + rng.uniform(-math.pi, math.pi, (n, N_CANDIDATES - 2))
        cand[:, 2:, 0] = speeds * np.cos(ang)
        cand[:, 2:, 1] = speeds * np.sin(ang)

        cost = np.linalg.norm(cand - pref[:, None, :], axis=2)
        if n > 1:
            cost += _avoidance_penalty(pos, vel, cand, comfort, cfg.avoid_weight, cfg.horizon, eye)
        order = np.argsort(cost, axis=1, kind="stable")
        # sequential pass so each walker checks clearance against the latest positions
        for i in range(n):
            for k in order[i]:
                step = pos[i] + cand[i, k] * dt
                if k == 1 or n == 1:
                    break  # standing still is always admissible
                diff = pos - step
                gap2 = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1]
                gap2[i] = np.inf
                if gap2.min() >= hard_min * hard_min:
                    break
            vel[i] = cand[i, k]
            pos[i] = step
        traj[t] = pos
    return Scene(cfg, traj, goals)


def body_reference(scene: Scene, t: int, p: int) -> np.ndarray:
    x, y = scene.trajectories[t, p]
    return np.array([x, y, scene.config.human_height / 2])


def ground_truth_los(scene: Scene, t: int, p: int) -> LinkState:
    if not 0 <= t < scene.duration:
        raise IndexError(f"frame {t} outside scene of {scene.duration} frames")
    cfg = scene.config
    tx = cfg.tx
    target = body_reference(scene, t, p)
    best, best_s = None, math.inf
    for j in range(scene.n_humans):
        if j == p:
            continue
        hit = segment_cylinder_interval(tx, target, scene.trajectories[t, j], cfg.human_radius, 0.0, cfg.human_height)
        if hit is not None and hit[0] < best_s:
            best, best_s = j, hit[0]
    return LinkState(0) if best is None else LinkState(1, best)


def los_table(scene: Scene) -> np.ndarray:
    """Blocker index per (frame, human), -1 for line of sight. Vectorised ground truth."""
    cfg = scene.config
    tx = cfg.tx
    r, h = cfg.human_radius, cfg.human_height
    T, n = scene.duration, scene.n_humans
    out = np.full((T, n), -1, dtype=int)
    if n < 2:
        return out
    pos = scene.trajectories
    # segment from tx to (x_q, y_q, h/2): param s in [0, 1]
    d = np.concatenate([pos - tx[:2], np.full((T, n, 1), h / 2 - tx[2])], axis=2)  # (T, q, 3)
    # height clamp
    if abs(d[0, 0, 2]) < 1e-12:
        z_lo = np.zeros((T, n))
        z_hi = np.ones((T, n)) if 0 <= tx[2] <= h else np.full((T, n), -1.0)
    else:
        t0 = (0.0 - tx[2]) / d[..., 2]
        t1 = (h - tx[2]) / d[..., 2]
        z_lo = np.maximum(np.minimum(t0, t1), 0.0)
        z_hi = np.minimum(np.maximum(t0, t1), 1.0)
    # against each blocker p (T, q, p)
    o = tx[None, None, None, :2] - pos[:, None, :, :]
    dq = d[:, :, None, :2]
    a = np.sum(dq * dq, axis=3)
    b = 2 * np.sum(o * dq, axis=3)
    c = np.sum(o * o, axis=3) - r * r
    disc = b * b - 4 * a * c
    sq = np.sqrt(np.maximum(disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        s0 = (-b - sq) / (2 * a)
        s1 = (-b + sq) / (2 * a)
    lo = np.maximum(s0, z_lo[:, :, None])
    hi = np.minimum(s1, z_hi[:, :, None])
    hit = (disc >= 0) & (lo <= hi) & (a > 1e-12)
    idx = np.arange(n)
    hit[:, idx, idx] = False
    entry = np.where(hit, lo, np.inf)
    blocked = hit.any(axis=2)
    out[blocked] = np.argmin(entry, axis=2)[blocked]
    return out


def ground_truth_window_label(scene: Scene, t_e: int, w: int, p: int, table: np.ndarray | None = None) -> int:
    if w < 1 or t_e < 0 or t_e + w >= scene.duration:
        raise ValueError(f"window [{t_e + 1}, {t_e + w}] exceeds scene of {scene.duration} frames")
    if table is not None:
        return int(np.any(table[t_e + 1:t_e + w + 1, p] >= 0))
    return int(any(ground_truth_los(scene, t, p).value for t in range(t_e + 1, t_e + w + 1)))


def min_pairwise_distance(scene: Scene) -> float:
    if scene.n_humans < 2:
        return math.inf
    p = scene.trajectories
    d = np.linalg.norm(p[:, :, None, :] - p[:, None, :, :], axis=3)
    iu = np.triu_indices(scene.n_humans, 1)
    return float(d[:, iu[0], iu[1]].min())


def goal_attainment(scene: Scene, tol=0.5) -> np.ndarray:
    return np.linalg.norm(scene.trajectories[-1] - scene.goals, axis=1) <= tol


def scene_to_dict(scene: Scene) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config": asdict(scene.config),
        "goals": scene.goals.tolist(),
        "trajectories": scene.trajectories.tolist(),
    }


def scene_from_dict(doc: dict) -> Scene:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported scene format_version {version!r}")
    cfg = SceneConfig(**doc["config"])
    traj = np.asarray(doc["trajectories"], dtype=float).reshape(-1, cfg.n_humans, 2)
    return Scene(cfg, traj, np.asarray(doc["goals"], dtype=float).reshape(-1, 2))


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=1) + "\n")


def load_scene(path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()))
