"""
Training data from load-stepped simulations
===========================================

Force directions (one per-node inward normal, the rest drawn uniformly on
the hemisphere about -z), ramped loads, 7-column node features and the two
split protocols.
"""
import tempfile

import numpy as np

from tissuegnn.dataset import (FEATURE_NAMES, build_load_cases, generate_dataset, read_dataset,
                               sample_directions, split_holdout, split_lodo, write_dataset)
from tissuegnn.fem import MaterialParams
from tissuegnn.mesh import generate_hemisphere_phantom

mesh = generate_hemisphere_phantom(30.0, 10.0)
directions = sample_directions((0.0, 0.0, -1.0), n_total=6, seed=0)
print("provenance:", directions.provenance)

cases = build_load_cases(mesh, directions, max_force=5.0, n_steps=5)
print(len(cases), "load cases; totals of direction 2:",
      [round(c.total_magnitude, 3) for c in cases if c.direction_id == 2])

samples, report = generate_dataset(mesh, MaterialParams(), directions, max_force=5.0, n_steps=5)
print(len(samples), "samples,", len(report.failures), "failures")
print("features:", FEATURE_NAMES)
print(np.round(samples[7].features[:3], 4))

train, val, test = split_holdout(samples, (0.7, 0.2, 0.1), seed=0)
print("hold-out sizes", len(train), len(val), len(test))
train, val, test = split_lodo(samples)
print("leave-one-deformation-out test steps", sorted({s.step_id for s in test}))

with tempfile.TemporaryDirectory() as tmp:
    write_dataset(samples, report, tmp, {"seed": 0})
    back, manifest = read_dataset(tmp)
    print("round trip:", len(back), "samples,", manifest["n_failed"], "failed")
