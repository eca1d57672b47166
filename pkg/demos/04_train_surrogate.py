"""
Training the graph surrogate
============================

Three GraphSAGE and two GraphConv layers, jumping-knowledge concatenation
and a dense head, trained with AdamW on the mean Euclidean error. The run
here is short; see the acceptance tests for the full protocol.
"""
import time

import numpy as np

from tissuegnn.dataset import generate_dataset, sample_directions, split_holdout
from tissuegnn.fem import MaterialParams
from tissuegnn.gnn import init_params, predict
from tissuegnn.mesh import build_graph, generate_hemisphere_phantom
from tissuegnn.train import TrainConfig, fit

mesh = generate_hemisphere_phantom(50.0, 12.5)
graph = build_graph(mesh)
samples, _ = generate_dataset(mesh, MaterialParams(), sample_directions(n_total=6, seed=1),
                              max_force=10.0, n_steps=10, graph=graph)
train, val, test = split_holdout(samples, (0.7, 0.2, 0.1), seed=0)

model = init_params(seed=0)
print(model.n_params, "parameters, independent of mesh size")

t0 = time.perf_counter()
result = fit(model, train, val, TrainConfig(max_epochs=40, seed=0), graph,
             callback=lambda r: print(f"epoch {r['epoch']:3d} train {r['train_mee_mm']:.3f} "
                                      f"val {r['val_mee_mm']:.3f} lr {r['lr']:.0e}") if r["epoch"] % 5 == 0 else None)
print(f"{len(result.log)} epochs in {time.perf_counter() - t0:.0f} s")

errs = [np.linalg.norm(predict(result.model, graph, s.features) - s.target, axis=1).mean() for s in test]
mags = [np.linalg.norm(s.target, axis=1).mean() for s in test]
print(f"test MEE {np.mean(errs):.3f} mm against mean displacement {np.mean(mags):.3f} mm")
