import io
import json

import numpy as np
import pytest

from blockpred.cli import RunConfig, cmd_report, main, resolve_config, build_parser, stage_seed
from blockpred.scene import load_scene, min_pairwise_distance


@pytest.fixture
def manifest(tmp_path):
    doc = {
        "scene_dir": str(tmp_path / "scenes"),
        "cloud_dir": str(tmp_path / "clouds"),
        "model_path": str(tmp_path / "model" / "m.bin"),
        "report_dir": str(tmp_path / "report"),
        "n_scenes": 3,
        "seed": 5,
        "scene": {"n_humans": 3, "duration": 40},
        "train": {"epochs": 3, "d_emb": 4, "d_h": 8, "stride": 3},
        "workers": 1,
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(doc))
    return str(path), doc


def run(*argv):
    return main(list(argv))


def test_gen_scenes_is_idempotent(manifest, tmp_path):
    path, doc = manifest
    assert run("gen-scenes", "--config", path) == 0
    first = {p.name: p.read_bytes() for p in (tmp_path / "scenes").iterdir()}
    assert run("gen-scenes", "--config", path) == 0
    second = {p.name: p.read_bytes() for p in (tmp_path / "scenes").iterdir()}
    assert first == second and len(first) == 3


def test_generated_scenes_satisfy_invariants(manifest, tmp_path):
    path, _ = manifest
    run("gen-scenes", "--config", path)
    for p in sorted((tmp_path / "scenes").iterdir()):
        sc = load_scene(p)
        assert sc.trajectories.shape == (40, 3, 2)
        assert min_pairwise_distance(sc) >= 2 * sc.config.human_radius - 0.05
        step = np.linalg.norm(np.diff(sc.trajectories, axis=0), axis=2)
        assert step.max() <= sc.config.preferred_speed * 1.5 / sc.config.frame_rate + 1e-12


def test_zero_scenes_is_usage_error(capsys):
    assert run("gen-scenes", "--n", "0") == 1
    assert "n_scenes" in capsys.readouterr().err


def test_unknown_flag_is_usage_error():
    assert run("evaluate", "--bogus") == 1


def test_unknown_config_key(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"scenes": 3}))
    assert run("gen-scenes", "--config", str(p)) == 1


def test_flags_override_manifest(manifest):
    path, _ = manifest
    args = build_parser().parse_args(["gen-scenes", "--config", path, "--n", "7", "--humans", "4"])
    cfg = resolve_config(args)
    assert cfg.n_scenes == 7 and cfg.scene == {"n_humans": 4, "duration": 40}


def test_stage_seeds_are_independent():
    assert stage_seed(0, 0, 1) != stage_seed(0, 1, 1)
    assert stage_seed(3, 2) == stage_seed(3, 2)


def test_train_without_scenes_is_data_error(manifest, capsys):
    path, _ = manifest
    assert run("train", "--config", path) == 2
    assert "gen-scenes" in capsys.readouterr().err


def test_train_reproducible_with_loss_log(manifest, tmp_path):
    path, _ = manifest
    run("gen-scenes", "--config", path)
    assert run("train", "--config", path) == 0
    weights = (tmp_path / "model" / "m.bin").read_bytes()
    log = (tmp_path / "model" / "m.loss.csv").read_text().splitlines()
    assert log[0] == "epoch,train_nll,val_nll" and len(log) == 4
    losses = [float(r.split(",")[1]) for r in log[1:]]
    assert losses[-1] < losses[0]
    assert run("train", "--config", path) == 0
    assert (tmp_path / "model" / "m.bin").read_bytes() == weights


def test_evaluate_missing_model_hint(manifest, capsys):
    path, _ = manifest
    run("gen-scenes", "--config", path)
    assert run("evaluate", "--config", path) == 2
    err = capsys.readouterr().err
    assert "not found" in err and "train" in err


def test_oracle_evaluate_window_row(manifest, tmp_path):
    path, _ = manifest
    run("gen-scenes", "--config", path, "--humans", "8", "--duration", "60")
    assert run("evaluate", "--config", path, "--oracle", "--window", "3") == 0
    doc = json.loads((tmp_path / "report" / "report.json").read_text())
    rows = doc["metrics"]["aabb"]
    assert [r["w"] for r in rows] == [3]
    assert rows[0]["recall"] == 1.0
    assert (tmp_path / "report" / "records_aabb.csv").exists()


def test_full_run_is_byte_identical(manifest, tmp_path):
    path, _ = manifest
    run("gen-scenes", "--config", path)
    run("train", "--config", path)
    assert run("evaluate", "--config", path) == 0
    outputs = {p.name: p.read_bytes() for p in (tmp_path / "report").iterdir()}
    assert run("evaluate", "--config", path) == 0
    again = {p.name: p.read_bytes() for p in (tmp_path / "report").iterdir()}
    assert outputs == again
    buf = io.StringIO()
    cfg = resolve_config(build_parser().parse_args(["report", "--config", path]))
    figs = cmd_report(cfg, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "mode,w,accuracy,precision,recall,f1"
    assert sum(line.startswith("aabb,") for line in lines) == 5
    assert {p.name for p in figs} == {"metrics_vs_window.png", "ade.png"}


def test_report_without_evaluate(manifest):
    path, _ = manifest
    assert run("report", "--config", path) == 2


def test_simulate_writes_frames(manifest, tmp_path):
    path, doc = manifest
    doc = {**doc, "n_scenes": 1, "scene": {"n_humans": 2, "duration": 2}, "sensor": {"azimuth_step": 2.0}}
    p = tmp_path / "sim.json"
    p.write_text(json.dumps(doc))
    run("gen-scenes", "--config", str(p))
    assert run("simulate", "--config", str(p), "--format", "ply") == 0
    frames = sorted((tmp_path / "clouds" / "scene_0000").iterdir())
    assert len(frames) == 2 and frames[0].suffix == ".ply"
    assert (tmp_path / "clouds" / "global_map.bin").exists()


def test_run_config_defaults_are_valid():
    RunConfig().validate()
