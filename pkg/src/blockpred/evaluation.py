"""Scoring: displacement error per forecast step and window-label confusion counts.

``run_experiment`` drives scans, detection, tracking, forecasting and
blockage prediction over a set of scenes and compares the labels with the
cylinder ground truth.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .blockage import Subject, predict_blockage
from .geometry import Aabb, Obb
from .lidar import build_global_map, default_sensors, scan_registered
from .perception import BackgroundIndex, ClusterParams, detect
from .scene import SceneConfig, generate_scene, los_table
from .tracking import Tracker
from .trajpred import OBS_LEN, PRED_LEN, forecast, forecast_batch

log = logging.getLogger(__name__)

BOX_MODES = ("aabb", "obb")


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def add(self, pred: int, truth: int) -> None:
        if pred and truth:
            self.tp += 1
        elif pred:
            self.fp += 1
        elif truth:
            self.fn += 1
        else:
            self.tn += 1

    def merge(self, other: "ConfusionCounts") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.tn += other.tn
        self.fn += other.fn


@dataclass
class MetricsRow:
    w: int
    accuracy: float | None
    precision: float | None
    recall: float | None
    f1: float | None


def _ratio(num, den):
    return num / den if den else None


def metrics_row(counts: ConfusionCounts, w: int = 0) -> MetricsRow:
    p = _ratio(counts.tp, counts.tp + counts.fp)
    r = _ratio(counts.tp, counts.tp + counts.fn)
    f1 = None
    if p is not None and r is not None:
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return MetricsRow(w, _ratio(counts.tp + counts.tn, counts.total), p, r, f1)


def confusion_metrics(predicted, truth, w: int = 0) -> tuple[ConfusionCounts, MetricsRow]:
    predicted, truth = list(predicted), list(truth)
    if len(predicted) != len(truth):
        raise ValueError(f"{len(predicted)} predictions but {len(truth)} truth labels")
    c = ConfusionCounts()
    for a, b in zip(predicted, truth):
        c.add(int(a), int(b))
    return c, metrics_row(c, w)


def ade_per_step(predicted, truth) -> np.ndarray:
    """Mean ground-plane error at each step over windows: (N, H, 2) each -> (H,)."""
    predicted = np.asarray(predicted, float)
    truth = np.asarray(truth, float)
    if predicted.shape != truth.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {truth.shape}")
    if predicted.ndim != 3 or len(predicted) == 0:
        raise ValueError("need at least one aligned (window, step, 2) pair")
    return np.linalg.norm(predicted - truth, axis=2).mean(axis=0)


def ade_on_windows(model, windows, obs_len=OBS_LEN) -> np.ndarray:
    """Mean-mode forecast error per step on ground-truth windows (N, obs+pred, 2)."""
    windows = np.asarray(windows, float)
    pred = forecast_batch(windows[:, :obs_len], windows.shape[1] - obs_len, model)
    return ade_per_step(pred, windows[:, obs_len:])


@dataclass
class ExperimentConfig:
    windows: tuple = (1, 3, 5, 7, 9)
    oracle: bool = False  # true positions and cylinder boxes instead of perception
    forecast_mode: str = "mean"
    azimuth_step: float = 0.2
    match_gate: float = 0.5
    obs_len: int = OBS_LEN
    seed: int = 0
    workers: int = 1
    keep_records: bool = False

    def __post_init__(self):
        self.windows = tuple(sorted({int(w) for w in self.windows}))
        if not self.windows or self.windows[0] < 1 or self.windows[-1] > PRED_LEN:
            raise ValueError(f"window sizes must lie in [1, {PRED_LEN}]")
        if self.forecast_mode not in ("mean", "sample"):
            raise ValueError(f"unknown forecast mode {self.forecast_mode!r}")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")


@dataclass
class SceneResult:
    counts: dict  # mode -> w -> ConfusionCounts
    ade_sum: np.ndarray
    ade_n: int
    unmatched_tracks: int = 0
    missed_humans: int = 0
    records: list = field(default_factory=list)


@dataclass
class Report:
    config: dict
    counts: dict
    metrics: dict
    ade: list | None
    ade_windows: int
    unmatched_tracks: int
    missed_humans: int
    n_scenes: int
    records: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "n_scenes": self.n_scenes,
            "unmatched_tracks": self.unmatched_tracks,
            "missed_humans": self.missed_humans,
            "ade_windows": self.ade_windows,
            "ade": self.ade,
            "metrics": {m: [asdict(r) for r in rows] for m, rows in self.metrics.items()},
            "counts": {m: {str(w): asdict(c) for w, c in per.items()} for m, per in self.counts.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def row(self, mode: str, w: int) -> MetricsRow:
        return next(r for r in self.metrics[mode] if r.w == w)


def match_to_truth(track_xy, truth_xy, gate: float) -> dict:
    """One-to-one nearest matching of tracks to true people, gated; returns track index -> person."""
    track_xy = np.asarray(track_xy, float).reshape(-1, 2)
    truth_xy = np.asarray(truth_xy, float).reshape(-1, 2)
    if not len(track_xy) or not len(truth_xy):
        return {}
    d = np.linalg.norm(track_xy[:, None] - truth_xy[None], axis=2)
    big = d.max() * len(d) + 1.0
    rows, cols = linear_sum_assignment(np.where(d <= gate, d, big))
    return {int(i): int(j) for i, j in zip(rows, cols) if d[i, j] <= gate}


def cylinder_box(xy, cfg: SceneConfig) -> Aabb:
    r = cfg.human_radius
    return Aabb(np.array([xy[0] - r, xy[1] - r, 0.0]), np.array([xy[0] + r, xy[1] + r, cfg.human_height]))


def _empty_counts(windows):
    return {m: {w: ConfusionCounts() for w in windows} for m in BOX_MODES}


def _score_anchor(res, subjects_by_mode, forecasts, scene, table, t_e, truth_of, cfg, scene_idx):
    w_max = min(cfg.windows[-1], scene.duration - 1 - t_e)
    for mode in BOX_MODES:
        reports = predict_blockage(subjects_by_mode[mode], forecasts, scene.config.tx, w_max)
        for sid, rep in reports.items():
            if sid not in truth_of:
                continue
            future = table[t_e + 1:t_e + 1 + w_max, truth_of[sid]] >= 0
            first_true = int(np.argmax(future)) + 1 if future.any() else math.inf
            first_pred = rep.first_step if rep.label else math.inf
            for w in cfg.windows:
                if w > w_max:
                    break
                res.counts[mode][w].add(first_pred <= w, first_true <= w)
            if cfg.keep_records:
                res.records.append((mode, scene_idx, t_e, w_max, rep))


def _oracle_scene(scene, cfg: ExperimentConfig, scene_idx: int) -> SceneResult:
    res = SceneResult(_empty_counts(cfg.windows), np.zeros(PRED_LEN), 0)
    table = los_table(scene)
    sc = scene.config
    traj = scene.trajectories
    for t_e in range(cfg.obs_len - 1, scene.duration - 1):
        w_max = min(cfg.windows[-1], scene.duration - 1 - t_e)
        forecasts = {p: traj[t_e + 1:t_e + 1 + w_max, p] for p in range(scene.n_humans)}
        boxes = [cylinder_box(traj[t_e, p], sc) for p in range(scene.n_humans)]
        motion = [traj[t_e, p] - traj[t_e - 1, p] for p in range(scene.n_humans)]
        subjects = {
            "aabb": [Subject(p, traj[t_e, p], boxes[p], motion[p]) for p in range(scene.n_humans)],
            "obb": [Subject(p, traj[t_e, p], Obb.from_aabb(boxes[p]), motion[p]) for p in range(scene.n_humans)],
        }
        _score_anchor(res, subjects, forecasts, scene, table, t_e, {p: p for p in range(scene.n_humans)},
                      cfg, scene_idx)
    return res


def _forecast_tracks(tracks, model, cfg: ExperimentConfig, seed_key) -> dict:
    out = {}
    full = [t for t in tracks if len(t.history) >= cfg.obs_len]
    if cfg.forecast_mode == "mean" and full:
        hist = np.stack([t.positions()[-cfg.obs_len:] for t in full])
        for t, f in zip(full, forecast_batch(hist, PRED_LEN, model)):
            out[t.id] = f
    for t in tracks:
        if t.id in out:
            continue
        hist = t.positions()[-cfg.obs_len:]
        if len(hist) < 2:
            # a single sighting: hold position
            out[t.id] = np.tile(t.xy, (PRED_LEN, 1))
            continue
        seed = None
        if cfg.forecast_mode == "sample":
            seed = np.random.SeedSequence(cfg.seed, spawn_key=(*seed_key, t.id))
        out[t.id] = forecast(hist, PRED_LEN, model, cfg.forecast_mode, seed).positions
    return out


def _pipeline_scene(scene, model, index, sensors, cfg: ExperimentConfig, scene_idx: int) -> SceneResult:
    res = SceneResult(_empty_counts(cfg.windows), np.zeros(PRED_LEN), 0)
    table = los_table(scene)
    traj = scene.trajectories
    dt = scene.config.dt
    tracker = Tracker()
    params = ClusterParams()
    scan_seed = int(np.random.SeedSequence(cfg.seed, spawn_key=(1, scene_idx)).generate_state(1)[0])
    for t in range(scene.duration):
        cloud = scan_registered(scene, t, sensors, scan_seed)
        tracks = tracker.step(detect(cloud, index, params), dt, frame=t)
        if t < cfg.obs_len - 1 or t >= scene.duration - 1:
            continue
        match = match_to_truth([tr.xy for tr in tracks], traj[t], cfg.match_gate)
        res.unmatched_tracks += len(tracks) - len(match)
        res.missed_humans += scene.n_humans - len(match)
        if not tracks:
            continue
        forecasts = _forecast_tracks(tracks, model, cfg, (scene_idx, t))
        subjects = {
            "aabb": [Subject(tr.id, tr.xy, tr.aabb, tr.velocity * dt) for tr in tracks],
            "obb": [Subject(tr.id, tr.xy, tr.obb, tr.velocity * dt) for tr in tracks],
        }
        truth_of = {tracks[i].id: p for i, p in match.items()}
        _score_anchor(res, subjects, forecasts, scene, table, t, truth_of, cfg, scene_idx)
        if t + PRED_LEN < scene.duration:
            for i, p in match.items():
                tr = tracks[i]
                if len(tr.history) >= cfg.obs_len:
                    err = np.linalg.norm(forecasts[tr.id] - traj[t + 1:t + 1 + PRED_LEN, p], axis=1)
                    res.ade_sum += err
                    res.ade_n += 1
    return res


def _run_one(args):
    scene, model, index, sensors, cfg, idx = args
    if cfg.oracle:
        return _oracle_scene(scene, cfg, idx)
    return _pipeline_scene(scene, model, index, sensors, cfg, idx)


def run_experiment(scenes, model, config: ExperimentConfig | None = None, sensors=None, index=None) -> Report:
    """Score window labels for every scene; scenes are reduced in the order given."""
    cfg = config or ExperimentConfig()
    scenes = list(scenes)
    if not scenes:
        raise ValueError("no scenes to evaluate")
    if not cfg.oracle:
        if model is None:
            raise ValueError("the full pipeline needs a trained model")
        sensors = sensors or default_sensors(azimuth_step=cfg.azimuth_step)
        if index is None:
            gmap_seed = int(np.random.SeedSequence(cfg.seed, spawn_key=(0,)).generate_state(1)[0])
            index = BackgroundIndex(build_global_map(sensors, gmap_seed).points)
    jobs = [(s, model, index, sensors, cfg, i) for i, s in enumerate(scenes)]
    if cfg.workers > 1 and len(scenes) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            parts = list(pool.map(_run_one, jobs))
    else:
        parts = [_run_one(j) for j in jobs]
    counts = _empty_counts(cfg.windows)
    ade_sum, ade_n = np.zeros(PRED_LEN), 0
    unmatched = missed = 0
    records = []
    for i, part in enumerate(parts):
        log.debug("scene %d merged", i)
        for m in BOX_MODES:
            for w in cfg.windows:
                counts[m][w].merge(part.counts[m][w])
        ade_sum += part.ade_sum
        ade_n += part.ade_n
        unmatched += part.unmatched_tracks
        missed += part.missed_humans
        records.extend(part.records)
    metrics = {m: [metrics_row(counts[m][w], w) for w in cfg.windows] for m in BOX_MODES}
    ade = (ade_sum / ade_n).tolist() if ade_n else None
    return Report(asdict(cfg), counts, metrics, ade, ade_n, unmatched, missed, len(scenes), records)


def write_metrics_table(report: Report, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["mode", "w", "tp", "fp", "tn", "fn", "accuracy", "precision", "recall", "f1"])
        for m in BOX_MODES:
            for row in report.metrics[m]:
                c = report.counts[m][row.w]
                vals = ["" if v is None else f"{v:.6f}" for v in (row.accuracy, row.precision, row.recall, row.f1)]
                out.writerow([m, row.w, c.tp, c.fp, c.tn, c.fn, *vals])


def write_ade_table(ade, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["step", "ade_m"])
        for k, v in enumerate(ade or [], start=1):
            out.writerow([k, f"{v:.6f}"])


def plot_report(report: Report, out_dir) -> list:
    """Metric-vs-window and ADE figures as PNG files; returns the paths written."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from pathlib import Path

    out_dir = Path(out_dir)
    paths = []
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6), sharey=True)
    for ax, m in zip(axes, BOX_MODES):
        rows = report.metrics[m]
        ws = [r.w for r in rows]
        for name in ("accuracy", "precision", "recall", "f1"):
            ys = [math.nan if getattr(r, name) is None else getattr(r, name) for r in rows]
            ax.plot(ws, ys, marker="o", label=name)
        ax.set_title(m.upper())
        ax.set_xlabel("window (frames)")
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("score")
    axes[1].legend(loc="lower right")
    fig.tight_layout()
    p = out_dir / "metrics_vs_window.png"
    fig.savefig(p, dpi=100, metadata={"Software": None})
    plt.close(fig)
    paths.append(p)
    if report.ade:
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        ax.plot(range(1, len(report.ade) + 1), report.ade, marker="o")
        ax.set_xlabel("future step")
        ax.set_ylabel("ADE (m)")
        ax.grid(alpha=0.3)
        fig.tight_layout()
        p = out_dir / "ade.png"
        fig.savefig(p, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(p)
    return paths


# ---- tracker benchmark ----

def separated_scene(idx: int, n: int = 3, duration: int = 200, min_sep: float = 1.5, seed: int = 0):
    """Walkers spread around the circle, cut before any pair comes within ``min_sep``."""
    cfg = SceneConfig(n_humans=n, duration=duration, rng_seed=seed + idx)
    angles = (idx * 0.3 + 2.1 * np.arange(n)) % (2 * np.pi)
    scene = generate_scene(cfg, start_angles=angles)
    p = scene.trajectories
    d = np.linalg.norm(p[:, :, None] - p[:, None], axis=3) + np.eye(n) * 1e9
    close = np.flatnonzero(d.min(axis=(1, 2)) < min_sep)
    end = int(close[0]) if len(close) else duration
    scene.trajectories = p[:end]
    scene.config.duration = end
    return scene


def tracker_benchmark(scenes, sensors=None, index=None, seed: int = 0, gate: float = 0.5) -> dict:
    """Identity switches and position RMSE of confirmed tracks against the truth."""
    sensors = sensors or default_sensors()
    if index is None:
        index = BackgroundIndex(build_global_map(sensors, seed).points)
    switches, sq, n = 0, 0.0, 0
    for k, scene in enumerate(scenes):
        tracker = Tracker()
        last_id = {}
        for t in range(scene.duration):
            cloud = scan_registered(scene, t, sensors, seed * 1000 + k)
            tracks = tracker.step(detect(cloud, index), scene.config.dt, frame=t)
            match = match_to_truth([tr.xy for tr in tracks], scene.trajectories[t], gate)
            for i, p in match.items():
                tid = tracks[i].id
                if p in last_id and last_id[p] != tid:
                    switches += 1
                last_id[p] = tid
                sq += float(np.sum((tracks[i].xy - scene.trajectories[t, p]) ** 2))
                n += 1
    return {"id_switches": switches, "rmse": math.sqrt(sq / n) if n else math.nan, "matched": n}
