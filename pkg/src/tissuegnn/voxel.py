"""Voxel phantoms: rasterization of labelled meshes and compressed-phantom
reconstruction by barycentric back-mapping with nearest-neighbour labels.

Grid convention: ``origin`` is the centre of voxel (0, 0, 0); voxel (i, j, k)
is centred at ``origin + (i, j, k) * spacing``.
"""
from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import PointLocator, TetMesh

AIR, FAT_LABEL, GLAND_LABEL, SKIN_LABEL = 0, 1, 2, 3
CLASS_NAMES = {AIR: "air", FAT_LABEL: "fat", GLAND_LABEL: "gland", SKIN_LABEL: "skin"}

PHANTOM_MAGIC = b"PGVX"
PHANTOM_VERSION = 1


class ReconstructionError(RuntimeError):
    def __init__(self, tet):
        self.tet = int(tet)
        super().__init__(f"deformed element {self.tet} is inverted")


@dataclass(frozen=True)
class GridSpec:
    dims: tuple
    spacing: tuple
    origin: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError("grid dims must be three positive integers")
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError("grid spacing must be three positive numbers")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    def centers(self):
        idx = np.stack(np.meshgrid(*[np.arange(d) for d in self.dims], indexing="ij"), -1).reshape(-1, 3)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    @classmethod
    def covering(cls, lo, hi, spacing=None, n=None, margin=1):
        """Grid whose voxel centres cover [lo, hi] plus ``margin`` voxels.

        Give either an isotropic ``spacing`` or ``n`` voxels along the longest axis.
        """
        lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
        if spacing is None:
            if n is None:
                raise ValueError("give spacing or n")
            spacing = (hi - lo).max() / max(n - 1 - 2 * margin, 1)
        dims = np.ceil((hi - lo) / spacing).astype(int) + 1 + 2 * margin
        return cls(tuple(dims), (spacing,) * 3, tuple(lo - margin * spacing))


@dataclass(frozen=True, eq=False)
class VoxelPhantom:
    labels: np.ndarray  # (nx, ny, nz) uint8
    spacing: tuple
    origin: tuple

    def __post_init__(self):
        lab = np.asarray(self.labels, dtype=np.uint8)
        if lab.ndim != 3 or 0 in lab.shape:
            raise ValueError("labels must be a non-empty 3-D array")
        if lab.max(initial=0) > 3:
            raise ValueError("label codes must be in {0, 1, 2, 3}")
        object.__setattr__(self, "labels", lab)
        GridSpec(lab.shape, self.spacing, self.origin)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def dims(self):
        return self.labels.shape

    @property
    def grid(self):
        return GridSpec(self.dims, self.spacing, self.origin)

    @property
    def voxel_volume(self):
        return float(np.prod(self.spacing))

    def class_volume(self, label):
        return int(np.sum(self.labels == label)) * self.voxel_volume

    def lookup_nearest(self, points):
        """Nearest-voxel label per point; points off the grid get air."""
        idx = np.rint((np.asarray(points) - np.asarray(self.origin)) / np.asarray(self.spacing)).astype(np.int64)
        ok = np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=1)
        out = np.zeros(len(idx), dtype=np.uint8)
        i = idx[ok]
        out[ok] = self.labels[i[:, 0], i[:, 1], i[:, 2]]
        return out

    def __eq__(self, other):
        if not isinstance(other, VoxelPhantom):
            return NotImplemented
        return (np.array_equal(self.labels, other.labels) and self.spacing == other.spacing
                and self.origin == other.origin)

    __hash__ = None


def element_labels(mesh: TetMesh):
    """Voxel class code of each tet (mesh tissue codes are shifted past air)."""
    return (mesh.element_tissue() + 1).astype(np.uint8)


def grid_for_mesh(mesh: TetMesh, n=64, margin=1):
    return GridSpec.covering(mesh.nodes.min(axis=0), mesh.nodes.max(axis=0), n=n, margin=margin)


def rasterize(mesh: TetMesh, grid: GridSpec, locator=None) -> VoxelPhantom:
    """Label each voxel centre with the tissue of its containing tet, else air."""
    locator = locator or PointLocator(mesh.nodes, mesh.tets)
    tet, _ = locator.locate(grid.centers())
    lab = np.zeros(len(tet), dtype=np.uint8)
    inside = tet >= 0
    lab[inside] = element_labels(mesh)[tet[inside]]
    return VoxelPhantom(lab.reshape(grid.dims), grid.spacing, grid.origin)


def default_output_grid(uncompressed: VoxelPhantom, mesh: TetMesh, displacement):
    """Input grid shifted with the deformed bounding box, enlarged if needed."""
    rest_lo = mesh.nodes.min(axis=0)
    x = mesh.nodes + displacement
    lo, hi = x.min(axis=0), x.max(axis=0)
    sp = np.asarray(uncompressed.spacing)
    origin = np.asarray(uncompressed.origin) + (lo - rest_lo)
    need = np.ceil((hi - origin) / sp).astype(int) + 1
    dims = np.maximum(np.asarray(uncompressed.dims), need)
    return GridSpec(tuple(dims), tuple(sp), tuple(origin))


def reconstruct_compressed(uncompressed: VoxelPhantom, mesh: TetMesh, displacement, grid: GridSpec | None = None,
                           workers=1, chunk=65536) -> VoxelPhantom:
    """Compressed phantom from a nodal displacement field.

    Each output voxel centre is located in the deformed mesh; the same
    barycentric weights on the rest nodes give its pre-deformation position,
    whose label is read from ``uncompressed`` by nearest neighbour. Voxels
    outside the deformed mesh are air. Where the back-mapped point lands on
    air or off the input grid, the containing element's tissue is used.
    """
    u = np.asarray(displacement, dtype=np.float64)
    if u.shape != mesh.nodes.shape:
        raise ValueError("displacement must be (n_nodes, 3)")
    vol = mesh.volumes(u)
    if np.any(vol <= 0):
        raise ReconstructionError(np.flatnonzero(vol <= 0)[0])
    grid = grid or default_output_grid(uncompressed, mesh, u)
    deformed = mesh.nodes + u
    locator = PointLocator(deformed, mesh.tets)
    elem = element_labels(mesh)
    centers = grid.centers()
    out = np.zeros(len(centers), dtype=np.uint8)

    def work(sl):
        tet, bary = locator.locate(centers[sl])
        inside = tet >= 0
        t = tet[inside]
        p0 = np.einsum("ki,kij->kj", bary[inside], mesh.nodes[mesh.tets[t]])
        lab = uncompressed.lookup_nearest(p0)
        lab = np.where(lab == AIR, elem[t], lab)
        res = np.zeros(len(tet), dtype=np.uint8)
        res[inside] = lab
        out[sl] = res

    slabs = [slice(i, min(i + chunk, len(centers))) for i in range(0, len(centers), chunk)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(work, slabs))
    else:
        for sl in slabs:
            work(sl)
    return VoxelPhantom(out.reshape(grid.dims), grid.spacing, grid.origin)


# --- I/O --------------------------------------------------------------------------

def phantom_bytes(ph: VoxelPhantom):
    head = PHANTOM_MAGIC + struct.pack("<I3I3d3d", PHANTOM_VERSION, *ph.dims, *ph.spacing, *ph.origin)
    return head + np.ascontiguousarray(ph.labels.ravel(order="F")).tobytes()


def phantom_from_bytes(data):
    if data[:4] != PHANTOM_MAGIC:
        raise ValueError("not a phantom file (bad magic)")
    hdr = struct.Struct("<I3I3d3d")
    if len(data) < 4 + hdr.size:
        raise ValueError("truncated phantom header")
    version, nx, ny, nz, sx, sy, sz, ox, oy, oz = hdr.unpack_from(data, 4)
    if version != PHANTOM_VERSION:
        raise ValueError(f"unsupported phantom version {version}")
    body = data[4 + hdr.size:]
    if len(body) != nx * ny * nz:
        raise ValueError(f"phantom body has {len(body)} bytes, expected {nx * ny * nz}")
    lab = np.frombuffer(body, dtype=np.uint8).reshape((nx, ny, nz), order="F")
    return VoxelPhantom(lab.copy(), (sx, sy, sz), (ox, oy, oz))


def write_phantom(ph, path):
    Path(path).write_bytes(phantom_bytes(ph))


def read_phantom(path):
    return phantom_from_bytes(Path(path).read_bytes())


def import_raw_labels(raw_path, sidecar_path=None):
    """Raw uint8 label volume (x fastest) with a JSON sidecar giving
    ``dims``, ``spacing`` and optionally ``origin`` and a ``label_map``
    from the file's codes to {0 air, 1 fat, 2 gland, 3 skin}."""
    raw_path = Path(raw_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else raw_path.with_suffix(".json")
    meta = json.loads(sidecar_path.read_text())
    dims = tuple(int(d) for d in meta["dims"])
    data = np.frombuffer(raw_path.read_bytes(), dtype=np.uint8)
    if data.size != int(np.prod(dims)):
        raise ValueError(f"raw volume has {data.size} voxels, sidecar says {int(np.prod(dims))}")
    lab = data.reshape(dims, order="F").copy()
    if "label_map" in meta:
        lut = np.zeros(256, dtype=np.uint8)
        for src, dst in meta["label_map"].items():
            lut[int(src)] = int(dst)
        lab = lut[lab]
    return VoxelPhantom(lab, tuple(meta["spacing"]), tuple(meta.get("origin", (0.0, 0.0, 0.0))))
