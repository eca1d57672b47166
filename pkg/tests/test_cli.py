import csv
import json

import pytest

from tissuegnn.cli import main, validate
from tissuegnn.fem import read_displacement, write_displacement


def tiny_config(tmp_path):
    return {
        "seed": 3,
        "mesh": str(tmp_path / "phantom.mesh"),
        "phantom": str(tmp_path / "phantom.pgvx"),
        "dataset_dir": str(tmp_path / "data"),
        "checkpoint": str(tmp_path / "model.ckpt"),
        "output_dir": str(tmp_path / "out"),
        "phantom_params": {"radius_mm": 20.0, "target_edge_mm": 10.0},
        "dataset_params": {"max_force": 2.0, "n_steps": 4, "n_directions": 5},
        "model": {"layers": [
            {"kind": "graphsage", "in_dim": 7, "out_dim": 8},
            {"kind": "graphconv", "in_dim": 8, "out_dim": 8},
            {"kind": "dense", "in_dim": 16, "out_dim": 8},
            {"kind": "dense", "in_dim": 8, "out_dim": 3, "activation": "none"},
        ]},
        "train": {"max_epochs": 5},
        "grid": {"n": 16},
        "bench": {"repeats": 2},
    }


def run(cfg, tmp_path, command, *extra):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return main([command, "--config", str(path), *extra])


def read_error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_version(capsys):
    assert main(["--version"]) == 0
    versions = json.loads(capsys.readouterr().out)
    assert versions["mesh"] == "tetmesh v1" and versions["checkpoint"] == "PGNM v1"
    assert set(versions) == {"mesh", "displacement", "sample", "checkpoint", "phantom", "training_log"}


def test_every_violation_is_listed(tmp_path, capsys):
    cfg = {"bogus": 1, "train": {"plateau_factor": 3.0, "min_lr": 0}, "split": {"mode": "kfold"}}
    assert run(cfg, tmp_path, "train") == 2
    err = read_error(capsys)
    assert err["error"] == "config"
    v = err["violations"]
    for needle in ("bogus", "'seed' is required", "'mesh' is required", "plateau_factor", "min_lr", "kfold"):
        assert any(needle in x for x in v), needle


def test_missing_input_file(tmp_path):
    cfg = tiny_config(tmp_path)
    assert any("does not exist" in p for p in validate(cfg, "dataset"))


def test_bad_mesh_file_is_io_error(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    (tmp_path / "phantom.mesh").write_text("tetmesh v1\nnodes 2\n")
    assert run(cfg, tmp_path, "dataset") == 4
    assert read_error(capsys)["error"] == "io"


def test_numerical_failure_exit_code(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    assert run(cfg, tmp_path, "phantom") == 0
    from tissuegnn.mesh import read_mesh

    mesh = read_mesh(cfg["mesh"])
    write_displacement(-2.0 * mesh.nodes, tmp_path / "flip.disp")  # inverts every element
    cfg["displacement"] = str(tmp_path / "flip.disp")
    assert run(cfg, tmp_path, "reconstruct") == 3
    assert read_error(capsys)["error"] == "numerical"


def test_flag_overrides_top_level(tmp_path):
    cfg = tiny_config(tmp_path)
    other = tmp_path / "elsewhere.mesh"
    assert run(cfg, tmp_path, "phantom", "--mesh", str(other), "--seed", "4") == 0
    assert other.exists() and not (tmp_path / "phantom.mesh").exists()


def test_pipeline_end_to_end(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    assert run(cfg, tmp_path, "phantom") == 0
    assert run(cfg, tmp_path, "dataset") == 0
    manifest = json.loads((tmp_path / "data" / "manifest.json").read_text())
    assert manifest["n_cases"] == 20 and manifest["seed"] == 3

    cfg2 = dict(cfg, dataset_dir=str(tmp_path / "data2"))
    assert run(cfg2, tmp_path, "dataset", "--workers", "2") == 0
    assert (tmp_path / "data2" / "manifest.json").read_text().replace("data2", "data") \
        == (tmp_path / "data" / "manifest.json").read_text()

    assert run(cfg, tmp_path, "train") == 0
    rows = list(csv.DictReader(open(tmp_path / "out" / "train_log.csv")))
    assert len(rows) == 5 and set(rows[0]) == {"epoch", "train_mee_mm", "val_mee_mm", "lr", "seconds"}

    assert run(cfg, tmp_path, "evaluate") == 0
    metrics = list(csv.DictReader(open(tmp_path / "out" / "metrics.csv")))
    assert metrics[0]["experiment"] == "holdout"
    overlap = json.loads((tmp_path / "out" / "overlap.json").read_text())
    assert set(overlap["dice"]) == {"fat", "gland", "skin"}

    assert run(dict(cfg, split={"mode": "lodo"}), tmp_path, "evaluate") == 0
    assert list(csv.DictReader(open(tmp_path / "out" / "metrics.csv")))[0]["experiment"] == "lodo"

    assert run(dict(cfg, load_cases=[[1, 4], [0, 2]]), tmp_path, "predict") == 0
    u = read_displacement(tmp_path / "out" / "predictions" / "d001_s004.disp")
    assert u.shape[1] == 3

    assert run(cfg, tmp_path, "reconstruct") == 0
    losses = json.loads((tmp_path / "out" / "volume_loss.json").read_text())
    assert abs(losses["total"]) < 10
    assert run(dict(cfg, displacement=str(tmp_path / "out" / "compression.disp")), tmp_path, "reconstruct") == 0

    assert run(cfg, tmp_path, "bench") == 0
    timing = list(csv.DictReader(open(tmp_path / "out" / "timing.csv")))[0]
    assert float(timing["speedup"]) > 0


def test_evaluate_perfect_predictions(tmp_path):
    cfg = tiny_config(tmp_path)
    assert run(cfg, tmp_path, "phantom") == 0
    assert run(cfg, tmp_path, "dataset") == 0
    from tissuegnn.dataset import read_dataset, split_holdout

    samples, _ = read_dataset(tmp_path / "data")
    pdir = tmp_path / "preds"
    pdir.mkdir()
    for s in split_holdout(samples, (0.7, 0.2, 0.1), 3)[2]:
        write_displacement(s.target, pdir / f"d{s.direction_id:03d}_s{s.step_id:03d}.disp")
    cfg.pop("checkpoint")
    cfg.pop("phantom")
    cfg["predictions_dir"] = str(pdir)
    assert run(cfg, tmp_path, "evaluate") == 0
    row = list(csv.DictReader(open(tmp_path / "out" / "metrics.csv")))[0]
    for key in ("mae_x", "mae_y", "mae_z", "mee", "mean_abs_position_error"):
        assert float(row[key]) == 0.0
    assert float(row["pct_euclidean_le_threshold"]) == 100.0
    assert float(row["pct_abs_position_le_threshold"]) == 100.0


@pytest.mark.parametrize("command", ["phantom", "dataset", "train", "predict", "evaluate", "reconstruct", "bench"])
def test_seed_is_mandatory(tmp_path, command):
    cfg = tiny_config(tmp_path)
    del cfg["seed"]
    assert "'seed' is required" in validate(cfg, command)
