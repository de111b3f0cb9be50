"""Ray-casting blockage prediction over a forecast window.

Every future step, each person's current box is moved to its forecast
position and the transmitter-to-person segments are tested against the
other people's boxes with the slab method.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .geometry import (
    Aabb, Obb, Segment, box_center, rot_z, slab_enter_batch, slab_intersect_aabb, slab_intersect_obb,
)

MIN_STEP = 0.05  # below this a step has no usable heading
PRUNE_EPS = 1e-9


@dataclass
class Subject:
    """One tracked person at the evaluation frame."""
    id: int
    xy: np.ndarray
    box: Aabb | Obb
    motion: np.ndarray | None = None  # recent ground-plane displacement, for OBB heading


@dataclass
class BlockageReport:
    id: int
    label: int
    first_step: int | None = None
    blocker: int | None = None
    distance: float | None = None

    def __post_init__(self):
        present = [v is not None for v in (self.first_step, self.blocker, self.distance)]
        if self.label not in (0, 1) or any(present) != bool(self.label) or not all(present) == bool(self.label):
            raise ValueError("blocker fields must be present exactly when label is 1")
        if self.blocker == self.id:
            raise ValueError("a person cannot block themselves")


def _heading_change(current_dir, step_dir) -> float | None:
    if current_dir is None or step_dir is None:
        return None
    a = np.asarray(current_dir, float)[:2]
    b = np.asarray(step_dir, float)[:2]
    if np.linalg.norm(a) <= MIN_STEP or np.linalg.norm(b) <= MIN_STEP:
        return None
    return math.atan2(a[0] * b[1] - a[1] * b[0], a @ b)


def bounding_box_transform(box, current, predicted, current_dir=None, step_dir=None):
    """Move a box from ``current`` to ``predicted`` in the ground plane.

    An OBB also turns about the vertical through ``predicted`` by the angle
    from ``current_dir`` to ``step_dir`` when both are longer than 5 cm.
    """
    delta = np.zeros(3)
    delta[:2] = np.asarray(predicted, float)[:2] - np.asarray(current, float)[:2]
    if isinstance(box, Aabb):
        return box.translated(delta)
    center = box.center + delta
    rotation = box.rotation
    yaw = _heading_change(current_dir, step_dir)
    if yaw is not None and yaw != 0.0:
        rz = rot_z(yaw)
        pivot = np.array([predicted[0], predicted[1], 0.0])
        center = pivot + rz @ (center - pivot)
        rotation = rz @ rotation
    return Obb(box.min_obj, box.max_obj, rotation, center, box.degenerate)


def xy_circumradius(box) -> float:
    c = box_center(box)
    return float(np.max(np.linalg.norm(box.corners()[:, :2] - c[:2], axis=1)))


def check_intersect(tx, target, box) -> float | None:
    seg = Segment(tx, target)
    if isinstance(box, Aabb):
        return slab_intersect_aabb(seg, box)
    return slab_intersect_obb(seg, box)


def _positions(fc) -> np.ndarray:
    return np.asarray(getattr(fc, "positions", fc), float).reshape(-1, 2)


def predict_blockage(subjects, forecasts, tx, w: int, prune=True, line11_as_printed=False) -> dict:
    """Window labels for every subject; ``forecasts`` maps id to (>= w, 2) positions.

    ``line11_as_printed`` swaps the distance screen so only blockers farther
    from the transmitter than the target survive. Kept for comparison only.
    """
    subjects = list(subjects)
    ids = [s.id for s in subjects]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate subject ids")
    if set(ids) != set(forecasts):
        raise ValueError(f"tracks {sorted(ids)} and forecasts {sorted(forecasts)} do not match")
    tx = np.asarray(tx, float)
    paths = {}
    for s in subjects:
        p = _positions(forecasts[s.id])
        if len(p) < w:
            raise ValueError(f"forecast for {s.id} has {len(p)} steps, need {w}")
        paths[s.id] = np.vstack([np.asarray(s.xy, float)[:2], p[:w]])
    reports = {s.id: BlockageReport(s.id, 0) for s in subjects}
    n = len(ids)
    if n < 2:
        return reports
    rot, ctr, lo, hi, is_obb = _box_frames([s.box for s in subjects])
    mid_obj = (lo + hi) / 2
    # translation and yaw leave the ground-plane circumradius unchanged
    radii = np.array([xy_circumradius(s.box) for s in subjects]) if prune else None
    xy = np.array([np.asarray(s.xy, float)[:2] for s in subjects])
    motion = np.array([np.full(2, np.nan) if s.motion is None else np.asarray(s.motion, float)[:2]
                       for s in subjects])
    track = np.stack([paths[i] for i in ids])  # (n, w + 1, 2)
    # all steps at once; skipping targets already blocked is the same as
    # keeping each target's first blocked step
    steps = track[:, 1:] - track[:, :-1]  # (n, w, 2)
    shift = np.zeros((w, n, 3))
    shift[..., :2] = (track[:, 1:] - xy[:, None]).transpose(1, 0, 2)
    obb = is_obb[None, :, None]
    c_k = ctr[None] + shift * obb
    lo_k = lo[None] + shift * ~obb
    hi_k = hi[None] + shift * ~obb
    r_k = np.broadcast_to(rot, (w, n, 3, 3)).copy()
    yaw = _heading_change_batch(np.broadcast_to(motion, (w, n, 2)).reshape(-1, 2),
                                steps.transpose(1, 0, 2).reshape(-1, 2)).reshape(w, n)
    turn = is_obb[None, :] & (yaw != 0)
    if turn.any():
        rz = np.array([rot_z(a) for a in yaw[turn]])
        pivot = np.zeros((len(rz), 3))
        pivot[:, :2] = track[:, 1:].transpose(1, 0, 2)[turn]
        c_k[turn] = pivot + np.einsum("nij,nj->ni", rz, c_k[turn] - pivot)
        r_k[turn] = rz @ r_k[turn]
    centers = np.where(obb, np.einsum("knij,nj->kni", r_k, mid_obj) + c_k, (lo_k + hi_k) / 2)
    qi, pi = np.nonzero(~np.eye(n, dtype=bool))  # every ordered (target, blocker) pair
    kk = np.repeat(np.arange(w), len(qi))
    qq = np.tile(qi, w)
    pp = np.tile(pi, w)
    sel = np.any(centers[kk, qq] != tx, axis=1)
    if prune:
        sel &= _may_block_batch(tx[:2], centers[kk, qq, :2], centers[kk, pp, :2], radii[pp], line11_as_printed)
    kk, qq, pp = kk[sel], qq[sel], pp[sel]
    dist = np.full((w, n, n), np.inf)
    d = _pair_distances(tx, centers[kk, qq], (r_k[kk, pp], c_k[kk, pp], lo_k[kk, pp], hi_k[kk, pp]))
    dist[kk, qq, pp] = np.where(np.isnan(d), np.inf, d)
    blocked = np.isfinite(dist).any(axis=2)  # (w, n)
    for q in np.flatnonzero(blocked.any(axis=0)).tolist():
        k = int(np.argmax(blocked[:, q]))
        p = int(np.argmin(dist[k, q]))  # ties go to the lower id position
        reports[ids[q]] = BlockageReport(ids[q], 1, k + 1, ids[p], float(dist[k, q, p]))
    return reports


def _heading_change_batch(current, step) -> np.ndarray:
    """Vectorised ``_heading_change``; 0 where either step is too short or unknown."""
    ok = (np.hypot(current[:, 0], current[:, 1]) > MIN_STEP) & (np.hypot(step[:, 0], step[:, 1]) > MIN_STEP)
    cross = current[:, 0] * step[:, 1] - current[:, 1] * step[:, 0]
    dot = current[:, 0] * step[:, 0] + current[:, 1] * step[:, 1]
    return np.where(ok, np.arctan2(np.where(ok, cross, 0.0), np.where(ok, dot, 1.0)), 0.0)


def _box_frames(boxes):
    """Stack boxes as object frames (rotation, center, lo, hi) plus an OBB flag.

    An AABB is an identity frame at the origin, so its object space is world space.
    """
    n = len(boxes)
    rot = np.tile(np.eye(3), (n, 1, 1))
    ctr = np.zeros((n, 3))
    lo = np.empty((n, 3))
    hi = np.empty((n, 3))
    is_obb = np.zeros(n, dtype=bool)
    for i, b in enumerate(boxes):
        if isinstance(b, Aabb):
            lo[i], hi[i] = b.min, b.max
        else:
            rot[i], ctr[i], lo[i], hi[i] = b.rotation, b.center, b.min_obj, b.max_obj
            is_obb[i] = True
    return rot, ctr, lo, hi, is_obb


def _pair_distances(tx, targets, frames) -> np.ndarray:
    rot, ctr, lo, hi = frames
    o = np.einsum("nji,nj->ni", rot, tx - ctr)
    t = np.einsum("nji,nj->ni", rot, targets - ctr)
    d = t - o
    length = np.sqrt(np.einsum("ni,ni->n", d, d))
    with np.errstate(invalid="ignore", divide="ignore"):
        return slab_enter_batch(o, d / length[:, None], length, lo, hi)


def _may_block_batch(tx_xy, target_xy, blocker_xy, blocker_r, line11_as_printed) -> np.ndarray:
    dq = target_xy - tx_xy
    dp = blocker_xy - tx_xy
    nq = np.hypot(dq[:, 0], dq[:, 1])
    np_ = np.hypot(dp[:, 0], dp[:, 1])
    same_side = np.einsum("ni,ni->n", dq, dp) >= -blocker_r * nq - PRUNE_EPS
    if line11_as_printed:
        return same_side & (nq < np_)
    return same_side & (np_ <= nq + blocker_r + PRUNE_EPS)


def labels_by_window(reports: dict, windows) -> dict:
    """Label for each shorter window from one run at the longest: blocked by step w."""
    return {w: {i: int(r.label and r.first_step <= w) for i, r in reports.items()} for w in windows}


def write_report_records(rows, path) -> None:
    """rows: (scene, t_e, w, BlockageReport) tuples."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["scene", "t_e", "w", "id", "label", "blocker", "first_step"])
        for scene, t_e, w, r in rows:
            out.writerow([scene, t_e, w, r.id, r.label,
                          "" if r.blocker is None else r.blocker, "" if r.first_step is None else r.first_step])
