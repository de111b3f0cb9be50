"""Command-line entry point: gen-scenes, simulate, train, evaluate, report.

Settings come from an optional JSON manifest (``--config``); flags given on
the command line win over the manifest. Set BLOCKPRED_LOG to a logging level
name (DEBUG, INFO, ...) for progress output on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .evaluation import (
    BOX_MODES, ExperimentConfig, Report, MetricsRow, ConfusionCounts, plot_report, run_experiment,
    write_ade_table, write_metrics_table,
)
from .blockage import write_report_records
from .lidar import build_global_map, default_sensors, scan_registered, write_bin, write_ply, ply_name
from .scene import SceneConfig, generate_scene, load_scene, save_scene
from .trajpred import TrainConfig, load_model, make_windows, save_model, split_items, train, write_loss_log

log = logging.getLogger("blockpred")

# stage indices for seed fan-out
STAGE_SCENES, STAGE_SCANS, STAGE_TRAIN, STAGE_EVAL = range(4)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    scene_dir: str = "scenes"
    cloud_dir: str = "clouds"
    model_path: str = "model/lstm.bin"
    report_dir: str = "report"
    n_scenes: int = 10
    seed: int = 0
    scene: dict = field(default_factory=dict)  # SceneConfig overrides
    sensor: dict = field(default_factory=dict)  # SensorConfig overrides
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    windows: list = field(default_factory=lambda: [1, 3, 5, 7, 9])
    forecast_mode: str = "mean"
    oracle: bool = False
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    cloud_format: str = "bin"

    def validate(self) -> None:
        if self.n_scenes < 1:
            raise UsageError("n_scenes must be at least 1")
        if not self.windows or any(not 1 <= int(w) <= 9 for w in self.windows):
            raise UsageError("window sizes must lie in [1, 9]")
        if self.forecast_mode not in ("mean", "sample"):
            raise UsageError(f"unknown forecast mode {self.forecast_mode!r}")
        if self.cloud_format not in ("bin", "ply"):
            raise UsageError("cloud format must be bin or ply")
        if self.workers < 1:
            raise UsageError("workers must be at least 1")
        for name, cls in (("scene", SceneConfig), ("train", TrainConfig)):
            known = {f.name for f in fields(cls)}
            extra = set(getattr(self, name)) - known
            if extra:
                raise UsageError(f"unknown {name} settings: {sorted(extra)}")


def stage_seed(seed: int, stage: int, *key) -> int:
    """Counter-based split of the global seed: one independent stream per stage (and item)."""
    return int(np.random.SeedSequence(seed, spawn_key=(stage, *key)).generate_state(1)[0])


def scene_path(cfg: RunConfig, i: int) -> Path:
    return Path(cfg.scene_dir) / f"scene_{i:04d}.json"


def load_scenes(cfg: RunConfig):
    paths = sorted(Path(cfg.scene_dir).glob("scene_*.json"))
    if not paths:
        raise DataError(f"no scene files in {cfg.scene_dir}; run `gen-scenes` first")
    try:
        return [load_scene(p) for p in paths]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"could not read scenes in {cfg.scene_dir}: {exc}") from exc


def _mkdir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {p}: {exc}") from exc
    return p


def cmd_gen_scenes(cfg: RunConfig) -> list:
    out = _mkdir(cfg.scene_dir)
    written = []
    for i in range(cfg.n_scenes):
        sc = SceneConfig(**{**cfg.scene, "rng_seed": stage_seed(cfg.seed, STAGE_SCENES, i)})
        path = out / f"scene_{i:04d}.json"
        save_scene(generate_scene(sc), path)
        log.info("wrote %s", path)
        written.append(path)
    return written


def _sensors(cfg: RunConfig):
    return default_sensors(**cfg.sensor)


def cmd_simulate(cfg: RunConfig) -> list:
    scenes = load_scenes(cfg)
    sensors = _sensors(cfg)
    root = _mkdir(cfg.cloud_dir)
    gmap = build_global_map(sensors, stage_seed(cfg.seed, STAGE_SCANS, 0))
    write_bin(gmap, root / "global_map.bin")
    written = [root / "global_map.bin"]
    for i, scene in enumerate(scenes):
        d = _mkdir(root / f"scene_{i:04d}")
        seed = stage_seed(cfg.seed, STAGE_SCANS, 1, i)
        for t in range(scene.duration):
            cloud = scan_registered(scene, t, sensors, seed)
            if cfg.cloud_format == "ply":
                path = d / ply_name(t)
                write_ply(cloud, path)
            else:
                path = d / f"{t:06d}.bin"
                write_bin(cloud, path)
            written.append(path)
        log.info("scene %d: %d frames", i, scene.duration)
    return written


def scene_trajectories(scenes, idx) -> list:
    return [scenes[i].trajectories[:, p] for i in idx for p in range(scenes[i].n_humans)]


def training_split(cfg: RunConfig, n: int):
    tcfg = TrainConfig(**cfg.train)
    return split_items(n, tcfg.val_fraction, stage_seed(cfg.seed, STAGE_TRAIN, 0))


def cmd_train(cfg: RunConfig):
    scenes = load_scenes(cfg)
    tcfg = TrainConfig(**{**cfg.train, "seed": stage_seed(cfg.seed, STAGE_TRAIN, 1)})
    tr, va = training_split(cfg, len(scenes))
    wtr = make_windows(scene_trajectories(scenes, tr), tcfg.obs_len, tcfg.pred_len, tcfg.stride)
    wva = make_windows(scene_trajectories(scenes, va), tcfg.obs_len, tcfg.pred_len, tcfg.stride)
    if len(wtr) == 0:
        raise DataError("scenes are too short to cut any training windows")
    result = train(wtr, wva, tcfg)
    path = Path(cfg.model_path)
    _mkdir(path.parent)
    save_model(result.model, path)
    write_loss_log(result, path.with_suffix(".loss.csv"))
    log.info("best epoch %d, val nll %.4f", result.best_epoch, result.val_loss[result.best_epoch - 1])
    return result


def _experiment(cfg: RunConfig) -> ExperimentConfig:
    sensor = dict(cfg.sensor)
    return ExperimentConfig(
        windows=tuple(cfg.windows), oracle=cfg.oracle, forecast_mode=cfg.forecast_mode,
        azimuth_step=sensor.pop("azimuth_step", 0.2), seed=stage_seed(cfg.seed, STAGE_EVAL),
        workers=cfg.workers, keep_records=True,
    )


def cmd_evaluate(cfg: RunConfig) -> Report:
    scenes = load_scenes(cfg)
    model = None
    if not cfg.oracle:
        path = Path(cfg.model_path)
        if not path.exists():
            raise DataError(f"model file {path} not found; run `train` first (or pass --oracle)")
        try:
            model = load_model(path)
        except ValueError as exc:
            raise DataError(f"{path}: {exc}; retrain with `train`") from exc
    ecfg = _experiment(cfg)
    report = run_experiment(scenes, model, ecfg, sensors=None if cfg.oracle else _sensors(cfg))
    out = _mkdir(cfg.report_dir)
    # the echo holds the run manifest, not machine-specific settings
    doc = report.to_dict()
    doc["config"] = {k: v for k, v in asdict(cfg).items() if k != "workers"}
    (out / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    write_metrics_table(report, out / "metrics.csv")
    write_ade_table(report.ade, out / "ade.csv")
    for mode in BOX_MODES:
        rows = [(s, t, w, r) for m, s, t, w, r in report.records if m == mode]
        write_report_records(rows, out / f"records_{mode}.csv")
    return report


def load_report(path) -> Report:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read report {path}: {exc}; run `evaluate` first") from exc
    counts = {m: {int(w): ConfusionCounts(**c) for w, c in per.items()} for m, per in doc["counts"].items()}
    metrics = {m: [MetricsRow(**r) for r in rows] for m, rows in doc["metrics"].items()}
    return Report(doc["config"], counts, metrics, doc["ade"], doc["ade_windows"], doc["unmatched_tracks"],
                  doc["missed_humans"], doc["n_scenes"])


def cmd_report(cfg: RunConfig, out=sys.stdout) -> list:
    report = load_report(Path(cfg.report_dir) / "report.json")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["mode", "w", "accuracy", "precision", "recall", "f1"])
    for mode in BOX_MODES:
        for r in report.metrics[mode]:
            w.writerow([mode, r.w, *("" if v is None else f"{v:.4f}" for v in (r.accuracy, r.precision, r.recall, r.f1))])
    if report.ade:
        w.writerow([])
        w.writerow(["step", "ade_m"])
        for k, v in enumerate(report.ade, start=1):
            w.writerow([k, f"{v:.4f}"])
    return plot_report(report, cfg.report_dir)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    d = RunConfig()
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON manifest with RunConfig fields")
    common.add_argument("--seed", type=int, help=f"global seed (default {d.seed})")
    common.add_argument("--scene-dir", help=f"scene files (default {d.scene_dir})")
    common.add_argument("--cloud-dir", help=f"simulated clouds (default {d.cloud_dir})")
    common.add_argument("--model", dest="model_path", help=f"model weights file (default {d.model_path})")
    common.add_argument("--report-dir", help=f"report output (default {d.report_dir})")
    common.add_argument("--workers", type=int, help="scene-level worker processes (default: CPU count)")

    p = _Parser(prog="blockpred", description="LiDAR-aided human blockage prediction pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = sub.add_parser("gen-scenes", parents=[common], help="generate pedestrian scenes")
    g.add_argument("--n", dest="n_scenes", type=int, help=f"number of scenes (default {d.n_scenes})")
    g.add_argument("--humans", type=int, help="people per scene (default 10)")
    g.add_argument("--duration", type=int, help="frames per scene (default 300)")
    s = sub.add_parser("simulate", parents=[common], help="write registered LiDAR clouds for every frame")
    s.add_argument("--format", dest="cloud_format", choices=("bin", "ply"), help="cloud file format (default bin)")
    t = sub.add_parser("train", parents=[common], help="train the trajectory forecaster")
    t.add_argument("--epochs", type=int, help="training epochs (default 30)")
    e = sub.add_parser("evaluate", parents=[common], help="run the full pipeline and score it")
    e.add_argument("--window", dest="windows", type=int, action="append",
                   help="window size in frames, repeatable (default 1 3 5 7 9)")
    e.add_argument("--oracle", action="store_true", default=None,
                   help="use true positions and cylinder boxes instead of perception and forecasts")
    e.add_argument("--forecast-mode", choices=("mean", "sample"), help="forecast rollout (default mean)")
    sub.add_parser("report", parents=[common], help="print metric tables and render figures")
    return p


def resolve_config(args) -> RunConfig:
    base = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        except ValueError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
        unknown = set(base) - {f.name for f in fields(RunConfig)}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**base)
    for name in ("seed", "scene_dir", "cloud_dir", "model_path", "report_dir", "workers", "n_scenes",
                 "cloud_format", "windows", "oracle", "forecast_mode"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "humans", None) is not None:
        cfg.scene = {**cfg.scene, "n_humans": args.humans}
    if getattr(args, "duration", None) is not None:
        cfg.scene = {**cfg.scene, "duration": args.duration}
    if getattr(args, "epochs", None) is not None:
        cfg.train = {**cfg.train, "epochs": args.epochs}
    cfg.validate()
    return cfg


COMMANDS = {
    "gen-scenes": cmd_gen_scenes,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("BLOCKPRED_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already reported by argparse
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"blockpred: error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"blockpred: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # bad values that only the pipeline stages can judge, e.g. an infeasible scene
        print(f"blockpred: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
