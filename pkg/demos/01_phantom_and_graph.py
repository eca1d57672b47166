"""
Synthetic hemisphere phantom and its graph
==========================================

A half-ball of fat with a glandular core and a thin skin shell, fixed on
its flat base. The tetrahedral mesh becomes a graph whose edges carry
inverse-length weights.
"""
import numpy as np

from tissuegnn.mesh import (FIXED, GLAND, SKIN, build_graph, extract_surface,
                            generate_hemisphere_phantom, locate_point)

mesh = generate_hemisphere_phantom(radius_mm=50.0, target_edge_mm=12.5, skin_thickness_mm=2.0, seed=0)
print(f"{mesh.n_nodes} nodes, {mesh.n_tets} tets, volume {mesh.volumes().sum():.0f} mm^3")
print("half-ball volume", round(2 / 3 * np.pi * 50.0 ** 3))

# tissue and boundary labels live on the nodes
print("gland nodes", np.sum(mesh.node_tissue == GLAND), "skin nodes", np.sum(mesh.node_tissue == SKIN))
print("fixed base nodes", np.sum(mesh.node_bc == FIXED))

# graph: one undirected edge per tet edge, weight 1 / length
graph = build_graph(mesh)
print(f"{len(graph.edges)} edges, weights in [{graph.edge_weight.min():.3f}, {graph.edge_weight.max():.3f}] 1/mm")

# the boundary surface and its outward normals drive the loading
surf = extract_surface(mesh)
print(f"{len(surf.surface_faces)} boundary faces on {len(surf.surface_nodes)} nodes")

# barycentric point location
tet, bary = locate_point(mesh, [5.0, -3.0, 20.0])
print("point lies in tet", tet, "with weights", np.round(bary, 3))
