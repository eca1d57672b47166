"""
Neo-Hookean finite elements
===========================

Quasi-static solves of a compressible Neo-Hookean body with Newton's
method: a small-strain bar checked against sigma L / E, a distributed
surface load on the phantom, and a plate-like 20 % compression.
"""
import time

import numpy as np

from tissuegnn.fem import (MaterialParams, incremental_solve, lame_from_young_poisson,
                           prescribed_compression, solve_static)
from tissuegnn.mesh import TetMesh, extract_surface, generate_hemisphere_phantom, structured_box_mesh

# Lame parameters of fat (MPa)
print("fat mu, lambda:", lame_from_young_poisson(4.46e-3, 0.49))

# %% bar on rollers, axial traction at the free end
L, a, E, nu, sigma = 50.0, 5.0, 0.01, 0.3, 1e-7
nodes, tets = structured_box_mesh((10, 2, 2), (L / 10, a / 2, a / 2))
x0 = nodes[:, 0] < 1e-9
corner = x0 & (nodes[:, 1] < 1e-9) & (nodes[:, 2] < 1e-9)
bar = TetMesh(nodes, tets, np.zeros(len(nodes), np.int8), corner.astype(np.int8))
mask = np.zeros(nodes.shape, dtype=bool)
mask[x0, 0] = True
mask[x0 & (nodes[:, 1] < 1e-9), 1] = True
mask[x0 & (nodes[:, 2] < 1e-9), 2] = True
tip = np.isclose(nodes[:, 0], L)
f = np.zeros_like(nodes)
for tri in extract_surface(bar).surface_faces:
    if tip[tri].all():
        p = nodes[tri]
        f[tri, 0] += sigma * 0.5 * np.linalg.norm(np.cross(p[1] - p[0], p[2] - p[0])) / 3
u = solve_static(bar, MaterialParams({"fat": E}, nu), f, prescribed=(mask, np.zeros_like(nodes)))
print(f"bar tip {u[tip, 0].mean():.6e} mm, analytic {sigma * L / E:.6e} mm")

# %% distributed load on the phantom, ramped over 10 steps
mesh = generate_hemisphere_phantom(50.0, 12.5)
surf = extract_surface(mesh)
loaded = surf.surface_nodes[~mesh.fixed[surf.surface_nodes]]
forces = np.zeros_like(mesh.nodes)
forces[loaded] = np.array([0.3, 0.0, -1.0]) / np.linalg.norm([0.3, 0.0, -1.0]) * 10.0 / len(loaded)
t0 = time.perf_counter()
steps = incremental_solve(mesh, MaterialParams(), forces, 10)
print(f"10 load steps in {time.perf_counter() - t0:.1f} s")
for k in (0, 4, 9):
    print(f"  step {k + 1}: max |u| = {np.linalg.norm(steps[k], axis=1).max():.2f} mm")

# %% 20 % compression between plates normal to z
u = prescribed_compression(mesh, MaterialParams(), axis=2, compression_fraction=0.2)
z = mesh.nodes[:, 2] + u[:, 2]
print(f"height {np.ptp(mesh.nodes[:, 2]):.1f} -> {np.ptp(z):.1f} mm, "
      f"volume change {100 * (mesh.volumes(u).sum() / mesh.volumes().sum() - 1):+.2f} %")
