"""Graph-network surrogate for hyperelastic finite-element tissue compression.

Modules: ``mesh`` (tetrahedral meshes, graphs, phantoms), ``fem``
(Neo-Hookean solver), ``dataset`` (load cases, features, splits), ``gnn``
(surrogate network), ``train`` (optimisation), ``metrics`` (evaluation),
``voxel`` (label volumes and reconstruction) and ``cli``.
"""

__version__ = "0.1.0"
