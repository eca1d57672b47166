"""Error metrics, test-set statistics, overlap/volume measures and timing."""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import astuple, dataclass, fields

import numpy as np

from .voxel import CLASS_NAMES, VoxelPhantom


@dataclass(frozen=True)
class MetricsReport:
    mae_x: float
    mae_x_sd: float
    mae_y: float
    mae_y_sd: float
    mae_z: float
    mae_z_sd: float
    mee: float
    mee_sd: float
    pct_euclidean_le_threshold: float
    mean_abs_position_error: float
    mean_abs_position_error_sd: float
    pct_abs_position_le_threshold: float
    threshold: float = 1.0


@dataclass(frozen=True)
class TestSetStatistics:
    __test__ = False  # not a pytest class

    delta_y_max: float
    delta_y_mean: float
    delta_y_sd: float
    max_euclidean_error_mean: float
    max_euclidean_error_sd: float


@dataclass(frozen=True)
class TimingReport:
    surrogate_seconds: float
    surrogate_seconds_sd: float
    fe_seconds: float
    fe_seconds_sd: float
    speedup: float
    n_repeats: int


def _check(preds, targets):
    if len(preds) == 0:
        raise ValueError("empty input")
    if len(preds) != len(targets):
        raise ValueError("prediction and target lists differ in length")
    p = [np.asarray(a, dtype=np.float64) for a in preds]
    t = [np.asarray(a, dtype=np.float64) for a in targets]
    for a, b in zip(p, t):
        if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
            raise ValueError("each prediction/target must be a matching (N, 3) array")
    return p, t


def compute_metrics(preds, targets, threshold=1.0) -> MetricsReport:
    """Per-axis MAE, MEE and absolute position error (mean and population sd
    over samples), and pooled per-node percentages at or under ``threshold``."""
    p, t = _check(preds, targets)
    absd = [np.abs(a - b) for a, b in zip(p, t)]
    eucl = [np.linalg.norm(a - b, axis=1) for a, b in zip(p, t)]
    apos = [d.mean(axis=1) for d in absd]
    per_axis = np.array([d.mean(axis=0) for d in absd])  # (samples, 3)
    mee = np.array([e.mean() for e in eucl])
    ape = np.array([a.mean() for a in apos])
    all_e = np.concatenate(eucl)
    all_a = np.concatenate(apos)
    return MetricsReport(
        float(per_axis[:, 0].mean()), float(per_axis[:, 0].std()),
        float(per_axis[:, 1].mean()), float(per_axis[:, 1].std()),
        float(per_axis[:, 2].mean()), float(per_axis[:, 2].std()),
        float(mee.mean()), float(mee.std()),
        float(100.0 * np.mean(all_e <= threshold)),
        float(ape.mean()), float(ape.std()),
        float(100.0 * np.mean(all_a <= threshold)),
        float(threshold),
    )


def compute_test_statistics(targets, preds) -> TestSetStatistics:
    t, p = _check(targets, preds)
    mags = [np.linalg.norm(a, axis=1) for a in t]
    per_max = np.array([m.max() for m in mags])
    err_max = np.array([np.linalg.norm(a - b, axis=1).max() for a, b in zip(t, p)])
    return TestSetStatistics(float(per_max.max()), float(per_max.mean()), float(per_max.std()),
                             float(err_max.mean()), float(err_max.std()))


def dice(a: VoxelPhantom, b: VoxelPhantom, label) -> float:
    """2|A and B| / (|A| + |B|) for one class code; 1.0 when both are empty."""
    if a.labels.shape != b.labels.shape:
        raise ValueError("phantom grids differ")
    ma, mb = a.labels == label, b.labels == label
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


def volume_loss(before: VoxelPhantom, after: VoxelPhantom, label="total") -> float:
    """Percent volume lost; ``label`` is a class code or "total" (all non-air)."""
    if not np.allclose(before.spacing, after.spacing):
        raise ValueError("phantoms have different voxel spacing")

    def vol(ph):
        mask = ph.labels != 0 if label == "total" else ph.labels == label
        return int(mask.sum()) * ph.voxel_volume

    v0 = vol(before)
    if v0 == 0:
        raise ValueError(f"class {label!r} absent before compression")
    return 100.0 * (v0 - vol(after)) / v0


def overlap_summary(reference: VoxelPhantom, other: VoxelPhantom, before: VoxelPhantom):
    """Per-class Dice and volume losses keyed by class name (JSON-ready)."""
    out = {"dice": {}, "volume_loss_reference": {}, "volume_loss_other": {}}
    for code, name in CLASS_NAMES.items():
        if code == 0:
            continue
        out["dice"][name] = dice(reference, other, code)
        if np.any(before.labels == code):
            out["volume_loss_reference"][name] = volume_loss(before, reference, code)
            out["volume_loss_other"][name] = volume_loss(before, other, code)
    out["volume_loss_reference"]["total"] = volume_loss(before, reference)
    out["volume_loss_other"]["total"] = volume_loss(before, other)
    return out


def time_inference_vs_fe(predict_fn, fe_fn, feature_sets, repeats=5):
    """Median wall-clock of the surrogate (per sample) against one FE run.

    ``predict_fn(features)`` and ``fe_fn()`` are timed; sd is population sd.
    """
    if repeats < 1 or not feature_sets:
        raise ValueError("need repeats >= 1 and at least one sample")
    sur = []
    for _ in range(repeats):
        for f in feature_sets:
            t0 = time.perf_counter()
            predict_fn(f)
            sur.append(time.perf_counter() - t0)
    fe = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fe_fn()
        fe.append(time.perf_counter() - t0)
    s_med, f_med = float(np.median(sur)), float(np.median(fe))
    return TimingReport(s_med, float(np.std(sur)), f_med, float(np.std(fe)), f_med / s_med, repeats)


# --- serialization ----------------------------------------------------------------

def metrics_csv(rows):
    """``rows`` is a list of (experiment name, MetricsReport)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["experiment"] + [f.name for f in fields(MetricsReport)])
    for name, rep in rows:
        w.writerow([name] + [repr(float(v)) for v in astuple(rep)])
    return buf.getvalue()


def timing_csv(rep: TimingReport):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f.name for f in fields(TimingReport)])
    w.writerow([repr(v) for v in astuple(rep)])
    return buf.getvalue()


def statistics_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["experiment"] + [f.name for f in fields(TestSetStatistics)])
    for name, rep in rows:
        w.writerow([name] + [repr(float(v)) for v in astuple(rep)])
    return buf.getvalue()


def dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
