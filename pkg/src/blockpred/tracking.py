"""Constant-velocity Kalman tracking in the ground plane with gated GNN association."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import Aabb, Obb

H = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]])


@dataclass
class TrackerConfig:
    q: float = 0.5  # white-acceleration density, m^2/s^3
    meas_sigma: float = 0.05
    gate: float = 5.99  # squared Mahalanobis, chi-square 95% with 2 dof
    confirm_hits: int = 3
    max_misses: int = 5
    init_vel_var: float = 10.0
    history_len: int = 32


@dataclass
class Track:
    id: int
    state: np.ndarray  # x, y, vx, vy
    cov: np.ndarray
    aabb: Aabb | None = None
    obb: Obb | None = None
    z_extent: tuple = (0.0, 0.0)
    age: int = 0
    hits: int = 1
    misses: int = 0
    confirmed: bool = False
    history: list = field(default_factory=list)  # (frame, xy) pairs, oldest first

    @property
    def xy(self) -> np.ndarray:
        return self.state[:2]

    @property
    def velocity(self) -> np.ndarray:
        return self.state[2:]

    def positions(self) -> np.ndarray:
        return np.array([xy for _, xy in self.history]).reshape(-1, 2)


def transition(dt: float) -> np.ndarray:
    f = np.eye(4)
    f[0, 2] = f[1, 3] = dt
    return f


def process_noise(dt: float, q: float) -> np.ndarray:
    blk = q * np.array([[dt**3 / 3, dt**2 / 2], [dt**2 / 2, dt]])
    out = np.zeros((4, 4))
    for a in (0, 1):
        idx = np.ix_([a, a + 2], [a, a + 2])
        out[idx] = blk
    return out


def _sym(p):
    return (p + p.T) / 2


def kf_predict(track: Track, dt: float, q: float = 0.5) -> Track:
    """Prior for the next frame; the input track is left untouched."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    f = transition(dt)
    return replace(track, state=f @ track.state, cov=_sym(f @ track.cov @ f.T + process_noise(dt, q)))


def kf_update(track: Track, z, sigma: float = 0.05) -> Track:
    r = sigma**2 * np.eye(2)
    s = H @ track.cov @ H.T + r
    k = np.linalg.solve(s, H @ track.cov).T
    innov = np.asarray(z, dtype=float) - H @ track.state
    # Joseph form keeps the covariance positive-definite under rounding
    ikh = np.eye(4) - k @ H
    cov = _sym(ikh @ track.cov @ ikh.T + k @ r @ k.T)
    return replace(track, state=track.state + k @ innov, cov=cov)


def mahalanobis_sq(track: Track, z, sigma: float = 0.05) -> float:
    s = H @ track.cov @ H.T + sigma**2 * np.eye(2)
    d = np.asarray(z, dtype=float) - H @ track.state
    return float(d @ np.linalg.solve(s, d))


@dataclass
class Association:
    pairs: list  # (track index, detection index)
    unmatched_tracks: list
    unmatched_detections: list


def associate(tracks, detections_xy, sigma: float = 0.05, gate: float = 5.99) -> Association:
    """Jointly optimal one-to-one matching on Mahalanobis distance, gated.

    Among all gated matchings, the largest is chosen, ties broken by the
    smallest summed distance.
    """
    n_t, n_d = len(tracks), len(detections_xy)
    if n_t == 0 or n_d == 0:
        return Association([], list(range(n_t)), list(range(n_d)))
    d2 = np.array([[mahalanobis_sq(t, z, sigma) for z in detections_xy] for t in tracks])
    allowed = d2 <= gate
    cost = np.sqrt(d2)
    # a forbidden pair costs more than any full set of allowed ones
    big = (cost[allowed].sum() if allowed.any() else 0.0) + 1.0
    rows, cols = linear_sum_assignment(np.where(allowed, cost, big))
    pairs = [(int(i), int(j)) for i, j in zip(rows, cols) if allowed[i, j]]
    mt = {i for i, _ in pairs}
    md = {j for _, j in pairs}
    return Association(pairs, [i for i in range(n_t) if i not in mt], [j for j in range(n_d) if j not in md])


def _shift_boxes(track: Track, delta) -> Track:
    dx = np.array([delta[0], delta[1], 0.0])
    aabb = track.aabb.translated(dx) if track.aabb is not None else None
    obb = None
    if track.obb is not None:
        o = track.obb
        obb = Obb(o.min_obj, o.max_obj, o.rotation, o.center + dx, o.degenerate)
    return replace(track, aabb=aabb, obb=obb)


class Tracker:
    """Track lifecycle over a stream of per-frame detections."""

    def __init__(self, config: TrackerConfig | None = None):
        self.config = config or TrackerConfig()
        self.tracks: list[Track] = []
        self.next_id = 0
        self.frame = -1

    def _spawn(self, det, frame) -> Track:
        cfg = self.config
        cov = np.diag([cfg.meas_sigma**2, cfg.meas_sigma**2, cfg.init_vel_var, cfg.init_vel_var])
        xy = np.asarray(det.xy, dtype=float)
        t = Track(self.next_id, np.array([xy[0], xy[1], 0.0, 0.0]), cov, det.aabb, det.obb,
                  (float(det.aabb.min[2]), float(det.aabb.max[2])),
                  confirmed=cfg.confirm_hits <= 1, history=[(frame, xy.copy())])
        self.next_id += 1
        return t

    def step(self, detections, dt: float, frame: int | None = None) -> list[Track]:
        """Advance one frame; returns the confirmed tracks."""
        cfg = self.config
        self.frame = self.frame + 1 if frame is None else frame
        predicted = []
        for t in self.tracks:
            p = kf_predict(t, dt, cfg.q)
            predicted.append(_shift_boxes(p, p.xy - t.xy))
        zs = [np.asarray(d.xy, dtype=float) for d in detections]
        assoc = associate(predicted, zs, cfg.meas_sigma, cfg.gate)
        survivors = []
        for i, j in assoc.pairs:
            t = kf_update(predicted[i], zs[j], cfg.meas_sigma)
            d = detections[j]
            hits = t.hits + 1
            t = replace(t, aabb=d.aabb, obb=d.obb, z_extent=(float(d.aabb.min[2]), float(d.aabb.max[2])),
                        age=t.age + 1, hits=hits, misses=0, confirmed=t.confirmed or hits >= cfg.confirm_hits)
            survivors.append(t)
        for i in assoc.unmatched_tracks:
            t = predicted[i]
            if not t.confirmed:
                continue  # tentative tracks die on their first miss
            t = replace(t, age=t.age + 1, hits=0, misses=t.misses + 1)
            if t.misses < cfg.max_misses:
                survivors.append(t)
        for j in assoc.unmatched_detections:
            survivors.append(self._spawn(detections[j], self.frame))
        for t in survivors:
            if t.history and t.history[-1][0] == self.frame:
                continue
            t.history = (t.history + [(self.frame, t.xy.copy())])[-cfg.history_len:]
        survivors.sort(key=lambda t: t.id)
        self.tracks = survivors
        return [t for t in survivors if t.confirmed]


def track_frame(tracker: Tracker, detections, dt: float) -> list[Track]:
    return tracker.step(detections, dt)


def write_track_log(rows, path) -> None:
    """rows: iterable of (frame, tracks). One line per confirmed track per frame."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "id", "x", "y", "vx", "vy"])
        for frame, tracks in rows:
            for t in tracks:
                w.writerow([frame, t.id, *(f"{v:.6f}" for v in t.state)])


def read_track_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"frame": int(r["frame"]), "id": int(r["id"]), **{k: float(r[k]) for k in ("x", "y", "vx", "vy")}}
            for r in csv.DictReader(fh)
        ]

