"""Vector/box primitives and slab-method ray-box intersection.

Points are plain numpy arrays of shape (3,) (or (2,) on the ground plane).
Hot paths (the slab test) work on Python floats since they are called once
per (ray, box) pair from the blockage search.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PARALLEL_EPS = 1e-12
JACOBI_TOL = 1e-12


class EmptyClusterError(ValueError):
    pass


def vec3(x, y, z) -> np.ndarray:
    v = np.array([x, y, z], dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite vector {v}")
    return v


@dataclass(frozen=True)
class Segment:
    origin: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        object.__setattr__(self, "target", np.asarray(self.target, dtype=float))
        if not self.length > 0:
            raise ValueError("segment has zero length")

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.target - self.origin))

    @property
    def direction(self) -> np.ndarray:
        return (self.target - self.origin) / self.length


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=float)
        hi = np.asarray(self.max, dtype=float)
        if np.any(lo > hi):
            raise ValueError(f"invalid box: min {lo} > max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def corners(self) -> np.ndarray:
        return _box_corners(self.min, self.max)

    def contains(self, p, tol=0.0) -> bool:
        p = np.asarray(p)
        return bool(np.all(p >= self.min - tol) and np.all(p <= self.max + tol))

    def translated(self, offset) -> "Aabb":
        offset = np.asarray(offset, dtype=float)
        return Aabb(self.min + offset, self.max + offset)


@dataclass(frozen=True)
class Obb:
    """Box that is axis aligned in its own frame.

    A world point p maps to object coordinates as ``rotation.T @ (p - center)``;
    ``min_obj``/``max_obj`` bound the box in those coordinates.
    """

    min_obj: np.ndarray
    max_obj: np.ndarray
    rotation: np.ndarray
    center: np.ndarray
    degenerate: bool = field(default=False, compare=False)

    def __post_init__(self):
        lo = np.asarray(self.min_obj, dtype=float)
        hi = np.asarray(self.max_obj, dtype=float)
        rot = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if np.any(lo > hi):
            raise ValueError("invalid box: min_obj > max_obj")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9, rtol=0.0):
            raise ValueError("rotation is not orthonormal")
        object.__setattr__(self, "min_obj", lo)
        object.__setattr__(self, "max_obj", hi)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))

    def to_object(self, p) -> np.ndarray:
        return self.rotation.T @ (np.asarray(p, dtype=float) - self.center)

    def to_world(self, q) -> np.ndarray:
        return self.rotation @ np.asarray(q, dtype=float) + self.center

    @property
    def box_center(self) -> np.ndarray:
        """World position of the geometric middle of the box."""
        return self.to_world(0.5 * (self.min_obj + self.max_obj))

    def corners(self) -> np.ndarray:
        local = _box_corners(self.min_obj, self.max_obj)
        return local @ self.rotation.T + self.center

    def contains(self, p, tol=0.0) -> bool:
        q = self.to_object(p)
        return bool(np.all(q >= self.min_obj - tol) and np.all(q <= self.max_obj + tol))

    @classmethod
    def from_aabb(cls, box: Aabb) -> "Obb":
        c = box.center
        return cls(box.min - c, box.max - c, np.eye(3), c)


def _box_corners(lo, hi) -> np.ndarray:
    return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


def box_center(box) -> np.ndarray:
    return box.center if isinstance(box, Aabb) else box.box_center


def slab_interval(origin, direction, length, lo, hi):
    """Clip the segment ``origin + t*direction, t in [0, length]`` against a box.

    Returns ``(t_enter, t_exit)`` or None. ``direction`` must be unit length so
    that t is a distance. A grazing contact (t_enter == t_exit) is a hit.
    """
    t_min = 0.0
    t_max = float(length)
    for a in range(3):
        d = float(direction[a])
        o = float(origin[a])
        if abs(d) < PARALLEL_EPS:
            if o < lo[a] or o > hi[a]:
                return None
            continue
        inv = 1.0 / d
        t0 = (lo[a] - o) * inv
        t1 = (hi[a] - o) * inv
        if t0 > t1:
            t0, t1 = t1, t0
        if t0 > t_min:
            t_min = t0
        if t1 < t_max:
            t_max = t1
        if t_min > t_max:
            return None
    return t_min, t_max


def slab_enter_batch(origin, direction, length, lo, hi) -> np.ndarray:
    """Row-wise ``slab_interval`` entry distance; NaN where a row misses. All inputs (N, 3) / (N,)."""
    origin = np.asarray(origin, float)
    direction = np.asarray(direction, float)
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    n = len(origin)
    t_min = np.zeros(n)
    t_max = np.asarray(length, float).copy()
    ok = np.ones(n, dtype=bool)
    for a in range(3):
        d = direction[:, a]
        o = origin[:, a]
        par = np.abs(d) < PARALLEL_EPS
        ok &= ~(par & ((o < lo[:, a]) | (o > hi[:, a])))
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / np.where(par, 1.0, d)
        t0 = (lo[:, a] - o) * inv
        t1 = (hi[:, a] - o) * inv
        near = np.minimum(t0, t1)
        far = np.maximum(t0, t1)
        t_min = np.where(par, t_min, np.maximum(t_min, near))
        t_max = np.where(par, t_max, np.minimum(t_max, far))
        ok &= t_min <= t_max
    return np.where(ok, t_min, np.nan)


def slab_intersect_aabb(seg: Segment, box: Aabb):
    """Distance from ``seg.origin`` to where the segment enters ``box``, or None."""
    hit = slab_interval(seg.origin, seg.direction, seg.length, box.min, box.max)
    return None if hit is None else hit[0]


def slab_intersect_obb(seg: Segment, box: Obb):
    # rigid transform: distances along the segment are the same in both frames
    o = box.to_object(seg.origin)
    t = box.to_object(seg.target)
    d = t - o
    length = math.sqrt(float(d @ d))
    hit = slab_interval(o, d / length, length, box.min_obj, box.max_obj)
    return None if hit is None else hit[0]


def fit_aabb(points) -> Aabb:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyClusterError("cannot fit a box to an empty cluster")
    return Aabb(pts.min(axis=0), pts.max(axis=0))


def jacobi_eigh(a, tol=JACOBI_TOL, max_sweeps=50):
    """Eigen-decomposition of a small symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) with eigenvectors in columns, in the
    order the sweeps leave them (unsorted).
    """
    a = np.array(a, dtype=float)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(np.abs(a).max(), 1e-300)
    for _ in range(max_sweeps):
        off = math.sqrt(sum(a[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    return np.diag(a).copy(), v


def _orient_columns(vecs: np.ndarray) -> np.ndarray:
    out = vecs.copy()
    for k in range(2):
        col = out[:, k]
        i = int(np.argmax(np.abs(col)))
        if col[i] < 0:
            out[:, k] = -col
    # third axis completes a right-handed frame
    out[:, 2] = np.cross(out[:, 0], out[:, 1])
    return out


def fit_obb(points, rank_tol=1e-12) -> Obb:
    """PCA-oriented box around ``points``.

    Axes are covariance eigenvectors sorted by decreasing variance. The first
    two get their largest-magnitude component made positive and the third is
    their cross product. Rank-deficient clouds fall back to the world axes
    with ``degenerate=True``.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise EmptyClusterError("cannot fit a box to an empty cluster")
    mean = pts.mean(axis=0)
    centered = pts - mean
    degenerate = len(pts) < 3
    rot = np.eye(3)
    if not degenerate:
        cov = centered.T @ centered / len(pts)
        vals, vecs = jacobi_eigh(cov)
        order = np.argsort(-vals, kind="stable")
        vals, vecs = vals[order], vecs[:, order]
        if vals[-1] <= rank_tol * max(vals[0], 1e-300) or vals[-1] <= rank_tol:
            degenerate = True
        else:
            rot = _orient_columns(vecs)
    proj = centered @ rot
    return Obb(proj.min(axis=0), proj.max(axis=0), rot, mean, degenerate=degenerate)


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def segment_cylinder_interval(origin, target, center_xy, radius, z_lo, z_hi):
    """Parameter interval (fractions of the segment, in [0, 1]) inside a vertical cylinder."""
    o = np.asarray(origin, dtype=float)
    d = np.asarray(target, dtype=float) - o
    lo, hi = 0.0, 1.0
    if abs(d[2]) < PARALLEL_EPS:
        if o[2] < z_lo or o[2] > z_hi:
            return None
    else:
        t0 = (z_lo - o[2]) / d[2]
        t1 = (z_hi - o[2]) / d[2]
        if t0 > t1:
            t0, t1 = t1, t0
        lo, hi = max(lo, t0), min(hi, t1)
        if lo > hi:
            return None
    ox = o[0] - center_xy[0]
    oy = o[1] - center_xy[1]
    a = d[0] * d[0] + d[1] * d[1]
    c = ox * ox + oy * oy - radius * radius
    if a < PARALLEL_EPS:
        if c > 0:
            return None
    else:
        b = 2.0 * (ox * d[0] + oy * d[1])
        disc = b * b - 4.0 * a * c
        if disc < 0:
            return None
        sq = math.sqrt(disc)
        lo = max(lo, (-b - sq) / (2.0 * a))
        hi = min(hi, (-b + sq) / (2.0 * a))
        if lo > hi:
            return None
    return lo, hi
