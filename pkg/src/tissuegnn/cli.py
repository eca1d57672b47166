"""Config-driven batch front end.

Every subcommand reads one JSON config (``--config``); ``--<field> VALUE``
overrides a top-level field (VALUE is parsed as JSON when possible).
Logs go to stderr, artifacts to files. Exit codes: 0 ok, 2 config error,
3 numerical failure, 4 I/O error; failures print a JSON object on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import fem, gnn, metrics, train, voxel
from .autodiff import StaleTapeError
from .mesh import MeshError, MeshParseError, build_graph, generate_hemisphere_phantom, read_mesh, write_mesh

log = logging.getLogger("tissuegnn")

COMMANDS = ("phantom", "dataset", "train", "predict", "evaluate", "reconstruct", "bench")

SECTIONS = {
    "phantom_params": {"radius_mm": 50.0, "target_edge_mm": 12.5, "skin_thickness_mm": 2.0,
                       "gland_radius_mm": None, "jitter": 0.1},
    "dataset_params": {"max_force": 90.0, "n_steps": 30, "n_directions": 40, "n_normal": 1,
                       "hemisphere_axis": [0.0, 0.0, -1.0]},
    "model": {"layers": None, "dropout": 0.1, "sage_aggregation": "weighted_mean"},
    "train": {f.name: f.default for f in fields(train.TrainConfig) if f.name != "seed"},
    "split": {"mode": "holdout", "fractions": None, "held_out_step": None},
    "grid": {"n": 64, "spacing": None, "margin": 1},
    "compression": {"axis": 2, "fraction": 0.2, "n_increments": 10},
    "bench": {"repeats": 5, "direction_id": 1},
}
PATHS = ("mesh", "phantom", "dataset_dir", "checkpoint", "output_dir", "displacement", "predictions_dir")
TOP_LEVEL = ("seed", "workers", "load_cases", "evaluate_sample") + PATHS + tuple(SECTIONS)

# inputs each command reads (must exist) and outputs it writes
NEEDS = {
    "phantom": ((), ("mesh", "phantom")),
    "dataset": (("mesh",), ("dataset_dir",)),
    "train": (("mesh", "dataset_dir"), ("checkpoint", "output_dir")),
    "predict": (("mesh", "checkpoint"), ("output_dir",)),
    "evaluate": (("mesh", "dataset_dir"), ("output_dir",)),
    "reconstruct": (("mesh", "phantom"), ("output_dir",)),
    "bench": (("mesh", "checkpoint", "dataset_dir"), ("output_dir",)),
}

FORMAT_VERSIONS = {
    "mesh": "tetmesh v1",
    "displacement": "dispfield v1",
    "sample": f"{ds.SAMPLE_MAGIC.decode()} v{ds.SAMPLE_VERSION}",
    "checkpoint": f"{gnn.CHECKPOINT_MAGIC.decode()} v{gnn.CHECKPOINT_VERSION}",
    "phantom": f"{voxel.PHANTOM_MAGIC.decode()} v{voxel.PHANTOM_VERSION}",
    "training_log": "csv " + ",".join(train.LOG_FIELDS),
}


class ConfigError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


# --- config -------------------------------------------------------------------------

def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path=None, overrides=None):
    cfg = {}
    if path is not None:
        try:
            cfg = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config is not valid JSON: {exc}"]) from exc
        if not isinstance(cfg, dict):
            raise ConfigError(["config must be a JSON object"])
    for key, value in (overrides or {}).items():
        cfg[key] = value
    return cfg


def resolve(cfg):
    """Config with every section filled from defaults (input is not modified)."""
    out = {k: v for k, v in cfg.items() if k not in SECTIONS}
    for name, defaults in SECTIONS.items():
        sec = dict(defaults)
        sec.update(cfg.get(name) or {})
        out[name] = sec
    out.setdefault("workers", 1)
    return out


def validate(cfg, command):
    """All violations for ``command``; an empty list means the config is usable."""
    problems = []
    for key in cfg:
        if key not in TOP_LEVEL:
            problems.append(f"unknown field '{key}'")
    for name, defaults in SECTIONS.items():
        sec = cfg.get(name)
        if sec is None:
            continue
        if not isinstance(sec, dict):
            problems.append(f"'{name}' must be an object")
            continue
        for key in sec:
            if key not in defaults:
                problems.append(f"unknown field '{name}.{key}'")
    seed = cfg.get("seed")
    if seed is None:
        problems.append("'seed' is required")
    elif not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        problems.append("'seed' must be a non-negative integer")
    workers = cfg.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        problems.append("'workers' must be a positive integer")
    for key in PATHS:
        if key in cfg and not isinstance(cfg[key], str):
            problems.append(f"'{key}' must be a path string")

    inputs, outputs = NEEDS[command]
    for key in inputs + outputs:
        if not isinstance(cfg.get(key), str):
            problems.append(f"'{key}' is required for {command}")
    for key in inputs:
        if isinstance(cfg.get(key), str) and not Path(cfg[key]).exists():
            problems.append(f"{key} '{cfg[key]}' does not exist")
    if command == "evaluate" and not (cfg.get("checkpoint") or cfg.get("predictions_dir")):
        problems.append("evaluate needs 'checkpoint' or 'predictions_dir'")
    optional = {"evaluate": ("checkpoint", "predictions_dir"), "reconstruct": ("displacement",)}
    for key in optional.get(command, ()):
        if isinstance(cfg.get(key), str) and not Path(cfg[key]).exists():
            problems.append(f"{key} '{cfg[key]}' does not exist")

    if all(isinstance(cfg.get(n), (dict, type(None))) for n in SECTIONS):
        r = resolve({k: v for k, v in cfg.items() if k in TOP_LEVEL})
        if not isinstance(r.get("seed"), int):
            r["seed"] = 0
        r = {**r, **{n: {k: v for k, v in r[n].items() if k in SECTIONS[n]} for n in SECTIONS}}
        problems += _check_sections(r, command)
    return problems


def _check_sections(r, command):
    problems = []
    dp = r["dataset_params"]
    if not (isinstance(dp["n_steps"], int) and dp["n_steps"] >= 1):
        problems.append("dataset_params.n_steps must be an integer >= 1")
    if not (isinstance(dp["n_directions"], int) and dp["n_directions"] >= 1):
        problems.append("dataset_params.n_directions must be an integer >= 1")
    elif not (isinstance(dp["n_normal"], int) and 0 <= dp["n_normal"] <= dp["n_directions"]):
        problems.append("dataset_params.n_normal must lie in [0, n_directions]")
    if not isinstance(dp["max_force"], (int, float)) or dp["max_force"] <= 0:
        problems.append("dataset_params.max_force must be positive")
    pp = r["phantom_params"]
    for key in ("radius_mm", "target_edge_mm", "skin_thickness_mm"):
        if not isinstance(pp[key], (int, float)) or pp[key] <= 0:
            problems.append(f"phantom_params.{key} must be positive")
    try:
        train.TrainConfig(seed=r["seed"], **r["train"])
    except (TypeError, ValueError) as exc:
        problems.extend(f"train: {p}" for p in str(exc).split("; "))
    try:
        _split_spec(r)
    except (TypeError, ValueError) as exc:
        problems.append(f"split: {exc}")
    m = r["model"]
    if m["sage_aggregation"] not in ("weighted_mean", "mean"):
        problems.append("model.sage_aggregation must be 'weighted_mean' or 'mean'")
    if m["layers"] is not None:
        try:
            gnn.validate_layers(_layers(m["layers"]))
        except (TypeError, ValueError) as exc:
            problems.append(f"model.layers: {exc}")
    g = r["grid"]
    if not isinstance(g["n"], int) or g["n"] < 2:
        problems.append("grid.n must be an integer >= 2")
    c = r["compression"]
    if c["axis"] not in (0, 1, 2):
        problems.append("compression.axis must be 0, 1 or 2")
    if not isinstance(c["fraction"], (int, float)) or not 0 <= c["fraction"] < 0.5:
        problems.append("compression.fraction must lie in [0, 0.5)")
    if command == "predict" and r.get("load_cases") is None and not r.get("dataset_dir"):
        problems.append("predict needs 'load_cases' or 'dataset_dir'")
    return problems


def _layers(spec):
    return [gnn.LayerSpec(**d) for d in spec]


def _split_spec(r):
    s = r["split"]
    return ds.SplitSpec(s["mode"], tuple(s["fractions"]) if s["fractions"] else None, r["seed"],
                        s["held_out_step"])


def _train_config(r):
    return train.TrainConfig(seed=r["seed"], **r["train"])


# --- helpers ------------------------------------------------------------------------

def _directions(r):
    dp = r["dataset_params"]
    return ds.sample_directions(dp["hemisphere_axis"], dp["n_directions"], r["seed"], dp["n_normal"])


def _out_dir(r):
    out = Path(r["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _grid(mesh, r):
    g = r["grid"]
    lo, hi = mesh.nodes.min(axis=0), mesh.nodes.max(axis=0)
    if g["spacing"]:
        return voxel.GridSpec.covering(lo, hi, spacing=g["spacing"], margin=g["margin"])
    return voxel.GridSpec.covering(lo, hi, n=g["n"], margin=g["margin"])


def _load_samples(r, graph):
    samples, manifest = ds.read_dataset(r["dataset_dir"], graph)
    if not samples:
        raise ConfigError([f"dataset '{r['dataset_dir']}' has no usable samples"])
    return samples, manifest


def _test_split(r, samples):
    return ds.split(samples, _split_spec(r))


# --- subcommands --------------------------------------------------------------------

def cmd_phantom(r):
    pp = r["phantom_params"]
    mesh = generate_hemisphere_phantom(pp["radius_mm"], pp["target_edge_mm"], pp["skin_thickness_mm"],
                                       pp["gland_radius_mm"], seed=r["seed"], jitter=pp["jitter"])
    Path(r["mesh"]).parent.mkdir(parents=True, exist_ok=True)
    write_mesh(mesh, r["mesh"])
    ph = voxel.rasterize(mesh, _grid(mesh, r))
    Path(r["phantom"]).parent.mkdir(parents=True, exist_ok=True)
    voxel.write_phantom(ph, r["phantom"])
    log.info("phantom: %d nodes, %d tets, grid %s", mesh.n_nodes, mesh.n_tets, ph.dims)
    return {"n_nodes": mesh.n_nodes, "n_tets": mesh.n_tets, "grid": list(ph.dims)}


def cmd_dataset(r):
    mesh = read_mesh(r["mesh"])
    dp = r["dataset_params"]
    samples, report = ds.generate_dataset(mesh, fem.MaterialParams(), _directions(r), dp["max_force"],
                                          dp["n_steps"], workers=r["workers"])
    echo = {"seed": r["seed"], "dataset_params": dp}
    ds.write_dataset(samples, report, r["dataset_dir"], echo, mesh_path=r["mesh"])
    log.info("dataset: %d samples, %d failed", len(samples), len(report.failures))
    return {"n_samples": len(samples), "n_failed": len(report.failures)}


def cmd_train(r):
    mesh = read_mesh(r["mesh"])
    graph = build_graph(mesh)
    samples, _ = _load_samples(r, graph)
    tr, va, _ = _test_split(r, samples)
    m = r["model"]
    layers = _layers(m["layers"]) if m["layers"] is not None else None
    model = gnn.init_params(layers, seed=r["seed"], dropout=m["dropout"], sage_aggregation=m["sage_aggregation"])
    cfg = _train_config(r)
    res = train.fit(model, tr, va, cfg, graph)
    Path(r["checkpoint"]).parent.mkdir(parents=True, exist_ok=True)
    gnn.save_checkpoint(res.model, r["checkpoint"], res.state)
    train.write_log(res.log, _out_dir(r) / "train_log.csv")
    best = min((row["val_mee_mm"] for row in res.log), default=float("nan"))
    log.info("train: %d epochs, best val MEE %.4f mm", len(res.log), best)
    return {"epochs": len(res.log), "best_val_mee_mm": best, "stopped_early": res.stopped_early}


def _prediction_name(direction_id, step_id):
    return f"d{direction_id:03d}_s{step_id:03d}.disp"


def cmd_predict(r):
    mesh = read_mesh(r["mesh"])
    graph = build_graph(mesh)
    model, _ = gnn.load_checkpoint(r["checkpoint"])
    cases = r.get("load_cases")
    if cases is None:
        samples, _ = _load_samples(r, graph)
        items = [(s.direction_id, s.step_id, s.features) for s in _test_split(r, samples)[2]]
    else:
        dp = r["dataset_params"]
        dirs = _directions(r)
        items = []
        for d, t in cases:
            if not (0 <= d < len(dirs) and 1 <= t <= dp["n_steps"]):
                raise ConfigError([f"load case ({d}, {t}) is out of range"])
            full = ds.direction_forces(mesh, dirs, d, dp["max_force"])
            items.append((d, t, ds.assemble_features(mesh, full * (t / dp["n_steps"]))))
    out = _out_dir(r) / "predictions"
    out.mkdir(exist_ok=True)
    for d, t, feats in items:
        fem.write_displacement(gnn.predict(model, graph, feats), out / _prediction_name(d, t))
    log.info("predict: wrote %d displacement fields", len(items))
    return {"n_predictions": len(items)}


def _compress(uncompressed, mesh, u, workers):
    return voxel.reconstruct_compressed(uncompressed, mesh, u, workers=workers)


def cmd_evaluate(r):
    mesh = read_mesh(r["mesh"])
    graph = build_graph(mesh)
    samples, _ = _load_samples(r, graph)
    test = _test_split(r, samples)[2]
    if r.get("predictions_dir"):
        pdir = Path(r["predictions_dir"])
        preds = [fem.read_displacement(pdir / _prediction_name(s.direction_id, s.step_id)) for s in test]
    else:
        model, _ = gnn.load_checkpoint(r["checkpoint"])
        preds = [gnn.predict(model, graph, s.features) for s in test]
    targets = [s.target for s in test]
    mode = r["split"]["mode"]
    out = _out_dir(r)
    rep = metrics.compute_metrics(preds, targets)
    (out / "metrics.csv").write_text(metrics.metrics_csv([(mode, rep)]))
    stats = metrics.compute_test_statistics(targets, preds)
    (out / "test_statistics.csv").write_text(metrics.statistics_csv([(mode, stats)]))
    result = {"mode": mode, "n_test": len(test), "mee": rep.mee}
    if r.get("phantom"):
        # overlap on the test sample with the largest mean target displacement
        k = r.get("evaluate_sample")
        if k is None:
            k = int(np.argmax([np.linalg.norm(t, axis=1).mean() for t in targets]))
        before = voxel.read_phantom(r["phantom"])
        grid = voxel.default_output_grid(before, mesh, targets[k])
        ref = voxel.reconstruct_compressed(before, mesh, targets[k], grid, workers=r["workers"])
        sur = voxel.reconstruct_compressed(before, mesh, preds[k], grid, workers=r["workers"])
        summary = metrics.overlap_summary(ref, sur, before)
        summary["sample"] = {"direction_id": test[k].direction_id, "step_id": test[k].step_id}
        (out / "overlap.json").write_text(metrics.dump_json(summary))
        result["dice"] = summary["dice"]
    log.info("evaluate (%s): MEE %.4f mm over %d samples", mode, rep.mee, len(test))
    return result


def cmd_reconstruct(r):
    mesh = read_mesh(r["mesh"])
    before = voxel.read_phantom(r["phantom"])
    if r.get("displacement"):
        u = fem.read_displacement(r["displacement"])
        if u.shape != mesh.nodes.shape:
            raise ConfigError([f"displacement has {len(u)} rows, mesh has {mesh.n_nodes} nodes"])
    else:
        c = r["compression"]
        u = fem.prescribed_compression(mesh, fem.MaterialParams(), c["axis"], c["fraction"],
                                       n_increments=c["n_increments"])
        fem.write_displacement(u, _out_dir(r) / "compression.disp")
    after = voxel.reconstruct_compressed(before, mesh, u, workers=r["workers"])
    out = _out_dir(r)
    voxel.write_phantom(after, out / "compressed.pgvx")
    losses = {name: metrics.volume_loss(before, after, code)
              for code, name in voxel.CLASS_NAMES.items() if code and np.any(before.labels == code)}
    losses["total"] = metrics.volume_loss(before, after)
    (out / "volume_loss.json").write_text(metrics.dump_json(losses))
    log.info("reconstruct: grid %s, total volume loss %.3f%%", after.dims, losses["total"])
    return {"grid": list(after.dims), "volume_loss": losses}


def cmd_bench(r):
    mesh = read_mesh(r["mesh"])
    graph = build_graph(mesh)
    model, _ = gnn.load_checkpoint(r["checkpoint"])
    samples, _ = _load_samples(r, graph)
    test = _test_split(r, samples)[2]
    dp, b = r["dataset_params"], r["bench"]
    forces = ds.direction_forces(mesh, _directions(r), b["direction_id"], dp["max_force"])
    mat = fem.MaterialParams()
    ops = gnn.operators(graph)
    rep = metrics.time_inference_vs_fe(lambda f: gnn.predict(model, ops, f),
                                       lambda: fem.incremental_solve(mesh, mat, forces, dp["n_steps"]),
                                       [s.features for s in test], repeats=b["repeats"])
    (_out_dir(r) / "timing.csv").write_text(metrics.timing_csv(rep))
    log.info("bench: surrogate %.4g s, FE %.4g s, speedup %.1fx", rep.surrogate_seconds, rep.fe_seconds, rep.speedup)
    return asdict(rep)


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


# --- entry point ----------------------------------------------------------------------

def _error(kind, exc, code, extra=None):
    payload = {"error": kind, "message": str(exc)}
    payload.update(extra or {})
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def build_parser():
    p = argparse.ArgumentParser(prog="tissuegnn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="store_true", help="print artifact format versions and exit")
    sub = p.add_subparsers(dest="command")
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--workers", type=int, help="parallel workers (never changes outputs)")
        sp.add_argument("--log-level", default="INFO")
        for key in TOP_LEVEL:
            if key != "workers":
                sp.add_argument(f"--{key.replace('_', '-')}", dest=f"ov_{key}", metavar="VALUE")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.version:
        print(json.dumps(FORMAT_VERSIONS, indent=2))
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    overrides = {k[3:]: _parse_value(v) for k, v in vars(args).items() if k.startswith("ov_") and v is not None}
    if args.workers is not None:
        overrides["workers"] = args.workers
    try:
        cfg = load_config(args.config, overrides)
        problems = validate(cfg, args.command)
        if problems:
            raise ConfigError(problems)
        result = HANDLERS[args.command](resolve(cfg))
    except ConfigError as exc:
        return _error("config", exc, 2, {"violations": exc.violations})
    except (fem.FEError, train.TrainingError, voxel.ReconstructionError, StaleTapeError,
            FloatingPointError, np.linalg.LinAlgError) as exc:
        return _error("numerical", exc, 3)
    except (OSError, MeshParseError, ds.DataError, gnn.CheckpointError) as exc:
        return _error("io", exc, 4)
    except (MeshError, ds.SplitConfigError, ValueError) as exc:
        return _error("config", exc, 2, {"violations": [str(exc)]})
    print(json.dumps(result, sort_keys=True, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
