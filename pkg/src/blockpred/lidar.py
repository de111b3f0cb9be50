"""Spinning multi-ring LiDAR simulator for an empty square room with walking people.

Static returns (floor and walls) are the same every frame, so the per-ray
static range is computed once per sensor and only the human cylinders are
intersected per frame.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .geometry import rot_y, rot_z

BIN_MAGIC = b"PCF1"
BIN_VERSION = 1


@dataclass(frozen=True)
class Room:
    half_x: float = 14.0
    half_y: float = 14.0
    height: float = 5.0


@dataclass(frozen=True)
class SensorConfig:
    position: tuple = (0.0, 0.0, 4.0)
    yaw: float = 0.0  # heading of the tilt direction, degrees
    tilt: float = 35.0  # downward pitch, degrees
    n_rings: int = 32
    fov_up: float = 10.67
    fov_down: float = -30.67
    azimuth_step: float = 0.2
    max_range: float = 50.0
    range_noise_sigma: float = 0.02

    def __post_init__(self):
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if not 0 < self.azimuth_step <= 10:
            raise ValueError("azimuth_step must be in (0, 10] degrees")
        if self.n_rings < 1:
            raise ValueError("n_rings must be at least 1")
        object.__setattr__(self, "position", tuple(float(v) for v in self.position))

    @property
    def rotation(self) -> np.ndarray:
        """Sensor-to-world rotation: mount heading, then downward tilt."""
        return rot_z(math.radians(self.yaw)) @ rot_y(math.radians(self.tilt))

    @property
    def extrinsic(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.position
        return m


@dataclass
class PointCloudFrame:
    frame: int
    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __len__(self):
        return len(self.points)


def default_sensors(room: Room = Room(), height: float = 4.0, mount_distance: float = 16.0,
                    heading_offset: float = 90.0, **overrides) -> list[SensorConfig]:
    """Two sensors on opposite ends of the room diagonal.

    Each sits ``mount_distance`` from the centre and tilts down along a heading
    turned ``heading_offset`` degrees from the centre direction. With the 35
    degree tilt, a sensor tilted straight at the centre only sees the floor
    within ~9 m of itself, so the tilt points sideways and the untilted
    flanks of the scan cover the middle of the room.
    """
    out = []
    p = min(mount_distance / math.sqrt(2), room.half_x - 0.1, room.half_y - 0.1)
    for s in (-1, 1):
        pos = (s * p, s * p, height)
        yaw = math.degrees(math.atan2(-pos[1], -pos[0])) + heading_offset
        out.append(SensorConfig(position=pos, yaw=yaw, **overrides))
    return out


def local_directions(sensor: SensorConfig) -> np.ndarray:
    elev = np.radians(np.linspace(sensor.fov_up, sensor.fov_down, sensor.n_rings))
    n_az = int(round(360.0 / sensor.azimuth_step))
    az = np.radians(np.arange(n_az) * (360.0 / n_az))
    ce = np.cos(elev)[:, None]
    dirs = np.stack([
        ce * np.cos(az)[None, :],
        ce * np.sin(az)[None, :],
        np.broadcast_to(np.sin(elev)[:, None], (sensor.n_rings, n_az)),
    ], axis=2)
    return dirs.reshape(-1, 3)


@lru_cache(maxsize=16)
def _ray_table(sensor: SensorConfig, room: Room):
    """(local dirs, world dirs, static range with inf for no hit) for one sensor."""
    local = local_directions(sensor)
    world = local @ sensor.rotation.T
    origin = np.array(sensor.position)
    static = np.full(len(world), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_floor = np.where(world[:, 2] < 0, -origin[2] / world[:, 2], np.inf)
        static = np.minimum(static, t_floor)
        for axis, half in ((0, room.half_x), (1, room.half_y)):
            for sign in (-1.0, 1.0):
                t = (sign * half - origin[axis]) / world[:, axis]
                t = np.where(t > 0, t, np.inf)
                hit = origin + t[:, None] * world
                other = 1 - axis
                other_half = room.half_y if axis == 0 else room.half_x
                ok = (np.abs(hit[:, other]) <= other_half + 1e-9) & (hit[:, 2] >= 0) & (hit[:, 2] <= room.height)
                static = np.minimum(static, np.where(ok, t, np.inf))
    local.setflags(write=False)
    world.setflags(write=False)
    static.setflags(write=False)
    return local, world, static


@lru_cache(maxsize=16)
def _azimuth_index(sensor: SensorConfig, room: Room):
    """World rays sorted by ground-plane heading, plus the near-vertical ones."""
    world = _ray_table(sensor, room)[1]
    flat = np.hypot(world[:, 0], world[:, 1])
    steep = np.flatnonzero(flat < 1e-6)
    heading = np.arctan2(world[:, 1], world[:, 0])
    order = np.argsort(heading, kind="stable")
    return order, heading[order], steep


def _heading_candidates(index, bearing, half_width):
    order, sorted_h, steep = index
    lo, hi = bearing - half_width, bearing + half_width
    parts = [steep]
    # the heading window may wrap around +-pi
    for a, b in ((lo, hi), (lo + 2 * math.pi, hi + 2 * math.pi), (lo - 2 * math.pi, hi - 2 * math.pi)):
        i = np.searchsorted(sorted_h, a, side="left")
        j = np.searchsorted(sorted_h, b, side="right")
        if j > i:
            parts.append(order[i:j])
    return np.unique(np.concatenate(parts))


def cylinder_ranges(origin, dirs, centers, radius, height, heading_index=None) -> np.ndarray:
    """Nearest hit distance of each ray against vertical capped cylinders (inf if none).

    ``heading_index`` (rays sorted by ground-plane heading) narrows the rays
    tried per cylinder to its angular window; results are the same without it.
    """
    best = np.full(len(dirs), np.inf)
    ox, oy, oz = origin
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    a = dx * dx + dy * dy
    for cx, cy in centers:
        px, py = ox - cx, oy - cy
        dist = math.hypot(px, py)
        if heading_index is not None and dist > radius * 1.01:
            # small slack on the window; the exact test below decides
            half = math.asin(radius / dist) + 1e-6
            pool = _heading_candidates(heading_index, math.atan2(-py, -px), half)
        else:
            pool = np.arange(len(dirs))
        # rays whose ground-plane line passes far from the axis cannot hit
        cross = np.abs(px * dy[pool] - py * dx[pool])
        cand = pool[cross <= radius * np.sqrt(a[pool])]
        if len(cand) == 0:
            continue
        ca, cdx, cdy, cdz = a[cand], dx[cand], dy[cand], dz[cand]
        b = 2 * (px * cdx + py * cdy)
        c = px * px + py * py - radius * radius
        disc = np.maximum(b * b - 4 * ca * c, 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_side = (-b - np.sqrt(disc)) / (2 * ca)
        z_side = oz + t_side * cdz
        side_ok = (t_side > 0) & (z_side >= 0) & (z_side <= height)
        t = np.where(side_ok, t_side, np.inf)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_cap = (height - oz) / cdz
            cap_x = px + t_cap * cdx
            cap_y = py + t_cap * cdy
        cap_ok = (t_cap > 0) & (cap_x * cap_x + cap_y * cap_y <= radius * radius)
        t = np.minimum(t, np.where(cap_ok, t_cap, np.inf))
        best[cand] = np.minimum(best[cand], t)
    return best


def scan_frame(scene, t: int, sensor: SensorConfig, include_humans=True, rng_seed=0,
               room: Room = Room()) -> PointCloudFrame:
    """Points in the sensor frame for scene frame ``t`` (``scene`` may be None for an empty room)."""
    local, world, static = _ray_table(sensor, room)
    ranges = static
    if include_humans and scene is not None:
        cfg = scene.config
        humans = cylinder_ranges(np.array(sensor.position), world, scene.trajectories[t],
                                 cfg.human_radius, cfg.human_height, _azimuth_index(sensor, room))
        ranges = np.minimum(static, humans)
    keep = np.flatnonzero(ranges <= sensor.max_range)
    r = ranges[keep]
    if sensor.range_noise_sigma > 0:
        rng = np.random.default_rng(rng_seed)
        r = r + rng.normal(0.0, sensor.range_noise_sigma, len(r))
    return PointCloudFrame(t, local[keep] * r[:, None])


def register_clouds(clouds, extrinsics) -> PointCloudFrame:
    clouds = list(clouds)
    extrinsics = list(extrinsics)
    if len(clouds) != len(extrinsics):
        raise ValueError(f"{len(clouds)} clouds but {len(extrinsics)} extrinsics")
    if not clouds:
        return PointCloudFrame(0)
    parts = []
    for cloud, m in zip(clouds, extrinsics):
        m = np.asarray(m, dtype=float)
        parts.append(cloud.points @ m[:3, :3].T + m[:3, 3])
    return PointCloudFrame(clouds[0].frame, np.concatenate(parts, axis=0))


def scan_registered(scene, t, sensors, seed, include_humans=True, room: Room = Room()) -> PointCloudFrame:
    """Scan all sensors at frame ``t`` and merge into the world frame."""
    seeds = np.random.SeedSequence(seed, spawn_key=(t,)).generate_state(len(sensors))
    clouds = [scan_frame(scene, t, s, include_humans, int(k), room) for s, k in zip(sensors, seeds)]
    return register_clouds(clouds, [s.extrinsic for s in sensors])


def build_global_map(sensors, seed=0, room: Room = Room(), cache_path=None) -> PointCloudFrame:
    """Static-only registered cloud of the empty room, optionally cached as a binary cloud file."""
    if cache_path is not None and Path(cache_path).exists():
        return read_bin(cache_path)
    cloud = scan_registered(None, 0, sensors, seed, include_humans=False, room=room)
    if cache_path is not None:
        write_bin(cloud, cache_path)
    return cloud


def write_ply(cloud: PointCloudFrame, path) -> None:
    pts = np.asarray(cloud.points, dtype=np.float32)
    header = (
        "ply\nformat ascii 1.0\n"
        f"comment frame {cloud.frame}\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    with open(path, "w") as fh:
        fh.write(header)
        np.savetxt(fh, pts, fmt="%.6f")


def read_ply(path) -> PointCloudFrame:
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise ValueError(f"{path}: not a PLY file")
        frame, count = 0, None
        for line in fh:
            line = line.strip()
            if line.startswith("comment frame"):
                frame = int(line.split()[-1])
            elif line.startswith("element vertex"):
                count = int(line.split()[-1])
            elif line == "end_header":
                break
        if count is None:
            raise ValueError(f"{path}: missing vertex count")
        pts = np.loadtxt(fh, dtype=np.float64, ndmin=2) if count else np.zeros((0, 3))
    if len(pts) != count:
        raise ValueError(f"{path}: expected {count} vertices, found {len(pts)}")
    return PointCloudFrame(frame, pts.reshape(-1, 3))


def ply_name(frame: int) -> str:
    return f"frame_{frame:06d}.ply"


def write_bin(cloud: PointCloudFrame, path) -> None:
    pts = np.ascontiguousarray(cloud.points, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(BIN_MAGIC + struct.pack("<IQ", BIN_VERSION, len(pts)))
        fh.write(pts.tobytes())


def read_bin(path, frame: int = 0) -> PointCloudFrame:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != BIN_MAGIC:
        raise ValueError(f"{path}: bad magic")
    version, count = struct.unpack("<IQ", data[4:16])
    if version != BIN_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pts = np.frombuffer(data, dtype="<f4", offset=16)
    if len(pts) != 3 * count:
        raise ValueError(f"{path}: truncated payload")
    return PointCloudFrame(frame, pts.reshape(count, 3).astype(np.float64))
