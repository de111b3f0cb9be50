"""Human detection: background subtraction, clustering, box fitting."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, cKDTree
from scipy.spatial.distance import pdist

from .geometry import Aabb, Obb, fit_aabb, fit_obb

BG_RADIUS = 0.1


@dataclass
class ClusterParams:
    link_distance: float = 0.25
    # vertical distances are shrunk before linking: the tilted rings cross a
    # body as slanted streaks up to ~0.7 m apart, which would cut people into slices
    z_scale: float = 0.25
    min_points: int = 10
    min_height: float = 0.8
    max_height: float = 2.2
    max_footprint: float = 1.2
    # clusters wider than this are tried as several people standing close
    split_footprint: float = 0.8


@dataclass
class Detection:
    centroid: np.ndarray
    aabb: Aabb
    obb: Obb
    n_points: int
    # ground-plane body axis; the centroid leans toward the sensors
    # because only the near side of a body returns points
    axis_xy: np.ndarray | None = None

    @property
    def xy(self) -> np.ndarray:
        return self.centroid[:2] if self.axis_xy is None else self.axis_xy


def circle_fit(xy) -> tuple[np.ndarray, float]:
    """Algebraic least-squares circle through ground-plane points: (center, radius)."""
    xy = np.asarray(xy, dtype=float)
    shift = xy.mean(axis=0)
    u = xy - shift
    a = np.column_stack([2 * u, np.ones(len(u))])
    sol, *_ = np.linalg.lstsq(a, np.sum(u * u, axis=1), rcond=None)
    c = sol[:2]
    r2 = sol[2] + c @ c
    return c + shift, math.sqrt(r2) if r2 > 0 else 0.0


def body_axis(points, r_lo=0.1, r_hi=0.6) -> np.ndarray:
    """Ground-plane axis of a roughly cylindrical cluster.

    Falls back to the box center when the fitted circle is not body sized
    (too few points, or an arc too flat to pin down).
    """
    pts = np.asarray(points, dtype=float)
    box_mid = (pts[:, :2].min(axis=0) + pts[:, :2].max(axis=0)) / 2
    if len(pts) < 5:
        return box_mid
    c, r = circle_fit(pts[:, :2])
    if not (r_lo <= r <= r_hi) or np.linalg.norm(c - box_mid) > r_hi:
        return box_mid
    return c


class BackgroundIndex:
    """Radius lookup against a static map.

    A voxel grid remembers which cells lie entirely within ``radius`` of some
    map point; points in those cells are background without a tree query.
    Cells are classified the first time a query lands in them, and the rest
    go through a KD-tree, so answers are exact either way.
    """

    UNKNOWN, SURE, UNSURE = 0, 1, 2

    def __init__(self, map_points, radius=BG_RADIUS, cell=None):
        pts = np.asarray(map_points, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("global map is empty")
        self.radius = float(radius)
        self.tree = cKDTree(pts)
        self.cell = float(cell) if cell else self.radius / 2
        self.inner = self.radius - self.cell * math.sqrt(3) / 2
        # one padding cell on every side catches everything outside the map bounds
        self.origin = pts.min(axis=0) - self.radius - self.cell
        self.shape = tuple(int(v) for v in np.ceil((pts.max(axis=0) + self.radius - self.origin) / self.cell) + 2)
        state = np.zeros(self.shape, dtype=np.int8)
        for axis in range(3):
            edge = [slice(None)] * 3
            for end in (0, -1):
                edge[axis] = end
                state[tuple(edge)] = self.UNSURE
        self.state = state.reshape(-1)
        self._strides = np.array([self.shape[1] * self.shape[2], self.shape[2], 1])
        self._hi = np.array(self.shape) - 1

    def _cells(self, pts) -> np.ndarray:
        q = np.clip((pts - self.origin) * (1.0 / self.cell), 0, self._hi).astype(np.int64)
        return q[:, 0] * self._strides[0] + q[:, 1] * self._strides[1] + q[:, 2]

    def _classify(self, flat):
        ijk = np.stack(np.unravel_index(flat, self.shape), axis=1)
        centers = self.origin + (ijk + 0.5) * self.cell
        if self.inner > 0:
            d, _ = self.tree.query(centers, k=1, distance_upper_bound=self.inner)
            sure = np.isfinite(d)
        else:
            sure = np.zeros(len(flat), dtype=bool)
        self.state[flat] = np.where(sure, self.SURE, self.UNSURE)

    def background_mask(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            return np.zeros(0, dtype=bool)
        flat = self._cells(pts)
        state = self.state[flat]
        fresh = state == self.UNKNOWN
        if fresh.any():
            self._classify(np.unique(flat[fresh]))
            state = self.state[flat]
        mask = state == self.SURE
        rest = np.flatnonzero(~mask)
        if len(rest):
            d, _ = self.tree.query(pts[rest], k=1, distance_upper_bound=self.radius * (1 + 1e-12))
            mask[rest] = d <= self.radius
        return mask


def subtract_background(frame_points, global_map, radius=BG_RADIUS) -> np.ndarray:
    """Points of the frame with no global-map point within ``radius``.

    ``global_map`` is a point array, a PointCloudFrame, or a prebuilt
    BackgroundIndex (reuse one across frames).
    """
    pts = np.asarray(getattr(frame_points, "points", frame_points), dtype=float).reshape(-1, 3)
    if isinstance(global_map, BackgroundIndex):
        index = global_map
    else:
        index = BackgroundIndex(getattr(global_map, "points", global_map), radius)
    return pts[~index.background_mask(pts)]


def euclidean_clusters(points, link_distance, z_scale=1.0) -> list[np.ndarray]:
    """Single-linkage components; each entry is an index array into ``points``."""
    n = len(points)
    if n == 0:
        return []
    scaled = np.asarray(points, dtype=float) * [1.0, 1.0, z_scale]
    pairs = cKDTree(scaled).query_pairs(link_distance, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    n_comp, labels = connected_components(graph, directed=False)
    order = np.argsort(labels, kind="stable")
    bounds = np.flatnonzero(np.diff(labels[order])) + 1
    return [np.sort(g) for g in np.split(order, bounds)]


def footprint_diameter(points) -> float:
    xy = np.asarray(points)[:, :2]
    if len(xy) < 2:
        return 0.0
    if len(xy) > 64:
        try:
            xy = xy[ConvexHull(xy).vertices]
        except Exception:  # collinear or degenerate input
            pass
    return float(pdist(xy).max())


def _height(points) -> float:
    return float(np.ptp(points[:, 2]))


def _viable(points, params: ClusterParams) -> bool:
    return len(points) >= params.min_points and params.min_height <= _height(points) <= params.max_height


def plausible_human(points, params: ClusterParams) -> bool:
    return _viable(points, params) and footprint_diameter(points) <= params.max_footprint


def two_means(xy, max_iter=50) -> np.ndarray:
    """Boolean split of ground-plane points, seeded from the two most distant points."""
    if len(xy) > 64:
        try:
            hull = ConvexHull(xy).vertices
        except Exception:
            hull = np.arange(len(xy))
    else:
        hull = np.arange(len(xy))
    sub = xy[hull]
    d = np.linalg.norm(sub[:, None] - sub[None], axis=2)
    i, j = np.unravel_index(np.argmax(d), d.shape)
    centers = np.stack([sub[i], sub[j]])
    labels = None
    for _ in range(max_iter):
        dist = np.linalg.norm(xy[:, None, :] - centers[None], axis=2)
        new = dist[:, 1] < dist[:, 0]
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        if labels.all() or not labels.any():
            break
        centers = np.stack([xy[~labels].mean(axis=0), xy[labels].mean(axis=0)])
    return labels


def _split_merge(points, idx, params: ClusterParams, depth=0) -> list[np.ndarray]:
    pts = points[idx]
    if footprint_diameter(pts) <= params.split_footprint or depth > 8:
        return [idx]
    labels = two_means(pts[:, :2])
    a, b = idx[~labels], idx[labels]
    if len(a) == 0 or len(b) == 0 or not (_viable(points[a], params) and _viable(points[b], params)):
        # fragment too small to be a person: keep the pieces together
        return [idx]
    return _split_merge(points, a, params, depth + 1) + _split_merge(points, b, params, depth + 1)


def cluster_humans(points, params: ClusterParams | None = None) -> list[np.ndarray]:
    """Point clusters (arrays of points) that look like standing people."""
    params = params or ClusterParams()
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    out = []
    for idx in euclidean_clusters(pts, params.link_distance, params.z_scale):
        if len(idx) < params.min_points:
            continue
        for part in _split_merge(pts, idx, params):
            if plausible_human(pts[part], params):
                out.append(pts[part])
    return out


def make_detection(cluster) -> Detection:
    cluster = np.asarray(cluster, dtype=float)
    return Detection(cluster.mean(axis=0), fit_aabb(cluster), fit_obb(cluster), len(cluster), body_axis(cluster))


def detect(frame, global_map, params: ClusterParams | None = None, radius=BG_RADIUS) -> list[Detection]:
    dynamic = subtract_background(frame, global_map, radius)
    return [make_detection(c) for c in cluster_humans(dynamic, params)]


def detection_record(frame_idx: int, det: Detection) -> dict:
    return {
        "frame": frame_idx,
        "centroid": det.centroid.tolist(),
        "axis_xy": det.xy.tolist(),
        "n_points": det.n_points,
        "aabb": [*det.aabb.min.tolist(), *det.aabb.max.tolist()],
        "obb": {
            "min_obj": det.obb.min_obj.tolist(),
            "max_obj": det.obb.max_obj.tolist(),
            "rotation": det.obb.rotation.reshape(-1).tolist(),
            "center": det.obb.center.tolist(),
        },
    }


def write_detection_dump(records, path) -> None:
    """One JSON object per line: frame, centroid, aabb, obb (rotation row-major)."""
    with open(path, "w") as fh:
        for frame_idx, dets in records:
            for det in dets:
                fh.write(json.dumps(detection_record(frame_idx, det)) + "\n")
