"""Tetrahedral meshes: graph extraction, surface geometry, point location,
a synthetic hemisphere phantom and a plain-text mesh format.

Units are millimetres throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TISSUES = ("fat", "gland", "skin")
BCS = ("free", "fixed")

FAT, GLAND, SKIN = 0, 1, 2
FREE, FIXED = 0, 1

# stiffness rank used to break element majority-vote ties
_STIFFNESS_RANK = {FAT: 0, GLAND: 1, SKIN: 2}

# the 6 edges and 4 faces of a tet, as local vertex indices
TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])
TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


class MeshError(ValueError):
    """Invalid mesh geometry or topology."""


class DegenerateEdgeError(MeshError):
    pass


class MeshParseError(MeshError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def signed_volumes(nodes, tets):
    """Signed volume of every tet, positive for the (0,1,2,3) right-handed order."""
    p = nodes[tets]
    d = p[:, 1:] - p[:, :1]
    return np.einsum("ij,ij->i", d[:, 0], np.cross(d[:, 1], d[:, 2])) / 6.0


@dataclass(frozen=True, eq=False)
class TetMesh:
    nodes: np.ndarray        # (N, 3) float64, mm
    tets: np.ndarray         # (M, 4) int64
    node_tissue: np.ndarray  # (N,) int8, FAT | GLAND | SKIN
    node_bc: np.ndarray      # (N,) int8, FREE | FIXED

    def __post_init__(self):
        nodes = np.ascontiguousarray(self.nodes, dtype=np.float64)
        tets = np.ascontiguousarray(self.tets, dtype=np.int64).reshape(-1, 4)
        tissue = np.ascontiguousarray(self.node_tissue, dtype=np.int8)
        bc = np.ascontiguousarray(self.node_bc, dtype=np.int8)
        for name, arr in (("nodes", nodes), ("tets", tets), ("node_tissue", tissue), ("node_bc", bc)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self.validate()

    def validate(self):
        n = len(self.nodes)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 3:
            raise MeshError("nodes must have shape (N, 3)")
        if self.node_tissue.shape != (n,) or self.node_bc.shape != (n,):
            raise MeshError("per-node arrays must have one entry per node")
        if len(self.tets) == 0:
            raise MeshError("mesh has no tetrahedra")
        if self.tets.min() < 0 or self.tets.max() >= n:
            raise MeshError("tet index out of range")
        srt = np.sort(self.tets, axis=1)
        if np.any(srt[:, 1:] == srt[:, :-1]):
            raise MeshError("tet with repeated node index")
        vol = signed_volumes(self.nodes, self.tets)
        if np.any(vol <= 0):
            bad = int(np.flatnonzero(vol <= 0)[0])
            raise MeshError(f"tet {bad} has non-positive signed volume")
        if not np.isin(self.node_tissue, (FAT, GLAND, SKIN)).all():
            raise MeshError("unknown tissue label")
        if not np.isin(self.node_bc, (FREE, FIXED)).all():
            raise MeshError("unknown boundary flag")
        if not np.any(self.node_bc == FIXED):
            raise MeshError("at least one node must be fixed")

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_tets(self):
        return len(self.tets)

    @property
    def fixed(self):
        return self.node_bc == FIXED

    def volumes(self, displacement=None):
        x = self.nodes if displacement is None else self.nodes + displacement
        return signed_volumes(x, self.tets)

    def element_tissue(self):
        """Majority tissue of each tet's four nodes; ties go to the stiffer tissue."""
        lab = self.node_tissue[self.tets]
        counts = np.stack([(lab == t).sum(axis=1) for t in (FAT, GLAND, SKIN)], axis=1)
        # stiffer tissue wins among equal counts: scan in ascending stiffness, >= keeps the later
        best = np.zeros(len(lab), dtype=np.int8)
        best_count = np.full(len(lab), -1)
        for t in sorted(_STIFFNESS_RANK, key=_STIFFNESS_RANK.get):
            take = counts[:, t] >= best_count
            best[take] = t
            best_count = np.where(take, counts[:, t], best_count)
        return best

    def mean_edge_length(self):
        e = self.tets[:, TET_EDGES].reshape(-1, 2)
        return float(np.linalg.norm(self.nodes[e[:, 0]] - self.nodes[e[:, 1]], axis=1).mean())

    def with_nodes(self, nodes):
        return TetMesh(nodes, self.tets, self.node_tissue, self.node_bc)

    def __eq__(self, other):
        if not isinstance(other, TetMesh):
            return NotImplemented
        return (np.array_equal(self.nodes, other.nodes) and np.array_equal(self.tets, other.tets)
                and np.array_equal(self.node_tissue, other.node_tissue)
                and np.array_equal(self.node_bc, other.node_bc))

    __hash__ = None


@dataclass(frozen=True)
class MeshGraph:
    n_nodes: int
    edges: np.ndarray        # (E, 2) int64, u < v, lexicographically sorted
    edge_weight: np.ndarray  # (E,) float64, 1/distance in mm^-1

    def adjacency(self):
        """Symmetric weighted adjacency as a scipy CSR matrix."""
        from scipy import sparse

        u, v = self.edges[:, 0], self.edges[:, 1]
        w = self.edge_weight
        a = sparse.coo_matrix((np.concatenate([w, w]), (np.concatenate([u, v]), np.concatenate([v, u]))),
                              shape=(self.n_nodes, self.n_nodes))
        return a.tocsr()


@dataclass(frozen=True)
class SurfaceInfo:
    surface_faces: np.ndarray  # (F, 3) outward-oriented triangles
    surface_nodes: np.ndarray  # sorted node indices
    node_normal: np.ndarray    # (len(surface_nodes), 3) unit outward normals


def unique_edges(tets):
    e = np.sort(np.asarray(tets)[:, TET_EDGES].reshape(-1, 2), axis=1)
    return np.unique(e, axis=0)


def build_graph(mesh: TetMesh) -> MeshGraph:
    edges = unique_edges(mesh.tets)
    d = np.linalg.norm(mesh.nodes[edges[:, 0]] - mesh.nodes[edges[:, 1]], axis=1)
    if np.any(d < 1e-12):
        i = int(np.argmin(d))
        raise DegenerateEdgeError(f"coincident nodes {edges[i, 0]} and {edges[i, 1]}")
    return MeshGraph(mesh.n_nodes, edges, 1.0 / d)


def extract_surface(mesh: TetMesh) -> SurfaceInfo:
    faces = mesh.tets[:, TET_FACES].reshape(-1, 3)
    key = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    if np.any(counts > 2):
        raise MeshError("non-manifold face shared by more than two tets")
    boundary = counts[inverse] == 1
    tri = faces[boundary]
    owner = np.repeat(np.arange(mesh.n_tets), 4)[boundary]

    p = mesh.nodes
    fn = 0.5 * np.cross(p[tri[:, 1]] - p[tri[:, 0]], p[tri[:, 2]] - p[tri[:, 0]])
    centroid = p[mesh.tets[owner]].mean(axis=1)
    outward = np.einsum("ij,ij->i", fn, p[tri].mean(axis=1) - centroid)
    flip = outward < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    fn[flip] *= -1

    surface_nodes = np.unique(tri)
    acc = np.zeros((mesh.n_nodes, 3))
    for k in range(3):
        np.add.at(acc, tri[:, k], fn)
    normals = acc[surface_nodes]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return SurfaceInfo(tri, surface_nodes, normals)


class PointLocator:
    """Uniform-grid spatial hash over tet bounding boxes.

    Containment uses barycentric coordinates with tolerance ``tol``; a point on
    a shared face resolves to the lowest tet index.
    """

    def __init__(self, nodes, tets, cell_size=None, tol=1e-9):
        self.nodes = np.asarray(nodes, dtype=np.float64)
        self.tets = np.asarray(tets, dtype=np.int64)
        self.tol = tol
        p = self.nodes[self.tets]
        self._x0 = p[:, 0]
        t = np.transpose(p[:, 1:] - p[:, :1], (0, 2, 1))
        det = np.linalg.det(t)
        if np.any(np.abs(det) < 1e-300):
            raise MeshError("degenerate tet in point locator")
        self._tinv = np.linalg.inv(t)

        if cell_size is None:
            e = self.tets[:, TET_EDGES].reshape(-1, 2)
            cell_size = np.linalg.norm(self.nodes[e[:, 0]] - self.nodes[e[:, 1]], axis=1).mean()
        self.cell = float(cell_size)
        lo, hi = p.min(axis=1), p.max(axis=1)
        self.origin = lo.min(axis=0)
        self.shape = np.maximum(np.ceil((hi.max(axis=0) - self.origin) / self.cell).astype(np.int64), 1)

        clo = self._cell_of(lo)
        chi = self._cell_of(hi)
        cells, owners = [], []
        for t_idx in range(len(self.tets)):
            a, b = clo[t_idx], chi[t_idx]
            g = np.mgrid[a[0]:b[0] + 1, a[1]:b[1] + 1, a[2]:b[2] + 1].reshape(3, -1).T
            cells.append(self._flat(g))
            owners.append(np.full(len(g), t_idx))
        cells = np.concatenate(cells)
        owners = np.concatenate(owners)
        order = np.lexsort((owners, cells))
        self._cell_tets = owners[order]
        n_cells = int(np.prod(self.shape))
        self._indptr = np.zeros(n_cells + 1, dtype=np.int64)
        np.add.at(self._indptr, cells + 1, 1)
        np.cumsum(self._indptr, out=self._indptr)

    def _cell_of(self, x):
        c = np.floor((x - self.origin) / self.cell).astype(np.int64)
        return np.clip(c, 0, self.shape - 1)

    def _flat(self, c):
        return (c[:, 0] * self.shape[1] + c[:, 1]) * self.shape[2] + c[:, 2]

    def barycentric(self, tet_idx, points):
        b = np.einsum("kij,kj->ki", self._tinv[tet_idx], points - self._x0[tet_idx])
        return np.column_stack([1.0 - b.sum(axis=1), b])

    def locate(self, points, chunk=100_000):
        """Return (tet index or -1, barycentric (n, 4)) for each query point."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = len(points)
        tet_out = np.full(n, -1, dtype=np.int64)
        bary_out = np.zeros((n, 4))
        for start in range(0, n, chunk):
            sl = slice(start, min(start + chunk, n))
            t, b = self._locate_chunk(points[sl])
            tet_out[sl], bary_out[sl] = t, b
        return tet_out, bary_out

    def _locate_chunk(self, pts):
        n = len(pts)
        tet_out = np.full(n, -1, dtype=np.int64)
        bary_out = np.zeros((n, 4))
        rel = (pts - self.origin) / self.cell
        # points outside the hashed box (beyond tolerance) cannot be inside any tet
        slack = 1e-9
        inside_box = np.all((rel >= -slack) & (rel <= self.shape + slack), axis=1)
        q = np.flatnonzero(inside_box)
        if len(q) == 0:
            return tet_out, bary_out
        c = self._flat(self._cell_of(pts[q]))
        start, stop = self._indptr[c], self._indptr[c + 1]
        counts = stop - start
        pair_q = np.repeat(np.arange(len(q)), counts)
        offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        pair_t = self._cell_tets[np.repeat(start, counts) + offs]
        b = self.barycentric(pair_t, pts[q[pair_q]])
        ok = np.all(b >= -self.tol, axis=1)
        hit_q, first = np.unique(pair_q[ok], return_index=True)
        hits = np.flatnonzero(ok)[first]
        tet_out[q[hit_q]] = pair_t[hits]
        bary_out[q[hit_q]] = b[hits]
        return tet_out, bary_out


def locate_point(mesh: TetMesh, p, locator: PointLocator | None = None):
    """Containing tet and barycentric coordinates of ``p``, or None when outside."""
    locator = locator or PointLocator(mesh.nodes, mesh.tets)
    t, b = locator.locate(np.asarray(p, dtype=np.float64)[None])
    if t[0] < 0:
        return None
    return int(t[0]), b[0]


# --- synthetic phantom -------------------------------------------------------

def _cube_to_ball(u):
    x, y, z = u[:, 0], u[:, 1], u[:, 2]
    x2, y2, z2 = x * x, y * y, z * z
    return np.column_stack([
        x * np.sqrt(1 - y2 / 2 - z2 / 2 + y2 * z2 / 3),
        y * np.sqrt(1 - z2 / 2 - x2 / 2 + z2 * x2 / 3),
        z * np.sqrt(1 - x2 / 2 - y2 / 2 + x2 * y2 / 3),
    ])


# Kuhn subdivision of the unit cube into 6 tets along the (0,0,0)-(1,1,1) diagonal
_KUHN = [
    [(0, 0, 0), (1, 0, 0), (1, 1, 0), (1, 1, 1)],
    [(0, 0, 0), (1, 0, 0), (1, 0, 1), (1, 1, 1)],
    [(0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 1, 1)],
    [(0, 0, 0), (0, 1, 0), (0, 1, 1), (1, 1, 1)],
    [(0, 0, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1)],
    [(0, 0, 0), (0, 0, 1), (0, 1, 1), (1, 1, 1)],
]


def structured_box_mesh(shape, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    """Nodes and Kuhn tets of an axis-aligned box with ``shape`` cells per axis."""
    nx, ny, nz = shape
    ijk = np.stack(np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), np.arange(nz + 1), indexing="ij"), -1)
    ijk = ijk.reshape(-1, 3)
    nodes = np.asarray(origin) + ijk * np.asarray(spacing)

    def nid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    ci, cj, ck = [a.ravel() for a in np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")]
    tets = np.stack([np.stack([nid(ci + a, cj + b, ck + c) for a, b, c in kt], axis=1) for kt in _KUHN], axis=1)
    tets = tets.reshape(-1, 4)
    return nodes, _orient(nodes, tets)


def _orient(nodes, tets):
    tets = tets.copy()
    neg = signed_volumes(nodes, tets) < 0
    tets[neg] = tets[neg][:, [0, 2, 1, 3]]
    return tets


def generate_hemisphere_phantom(radius_mm=50.0, target_edge_mm=12.5, skin_thickness_mm=2.0,
                                gland_radius_mm=None, seed=0, jitter=0.1) -> TetMesh:
    """Half-ball phantom: dome along +z, flat posterior face at z = 0 (fixed).

    A Kuhn-split cube grid is mapped onto the ball. Nodes within
    ``skin_thickness_mm`` of the dome are skin, nodes inside a ball of
    ``gland_radius_mm`` about the origin are glandular, the rest fat.
    ``jitter`` perturbs interior nodes by up to that fraction of a cell.
    """
    if radius_mm <= 0 or target_edge_mm <= 0:
        raise ValueError("radius and target edge must be positive")
    if not 0 < skin_thickness_mm < radius_mm:
        raise ValueError("skin thickness must lie in (0, radius)")
    if gland_radius_mm is None:
        gland_radius_mm = 0.45 * radius_mm
    if not 0 < gland_radius_mm < radius_mm - skin_thickness_mm:
        raise ValueError("gland radius must lie in (0, radius - skin thickness)")
    n = int(round(radius_mm / target_edge_mm))
    if n < 1:
        raise ValueError("parameters yield fewer than 4 nodes")

    u, tets = structured_box_mesh((2 * n, 2 * n, n), (1.0 / n,) * 3, (-1.0, -1.0, 0.0))
    boundary = (np.isclose(np.abs(u[:, 0]), 1) | np.isclose(np.abs(u[:, 1]), 1)
                | np.isclose(u[:, 2], 1) | np.isclose(u[:, 2], 0))
    if jitter > 0:
        rng = np.random.default_rng(seed)
        du = rng.uniform(-jitter / n, jitter / n, size=u.shape)
        u = u + np.where(boundary[:, None], 0.0, du)
    nodes = radius_mm * _cube_to_ball(u)
    nodes[np.isclose(u[:, 2], 0), 2] = 0.0
    tets = _orient(nodes, tets)

    r = np.linalg.norm(nodes, axis=1)
    tissue = np.full(len(nodes), FAT, dtype=np.int8)
    tissue[r < gland_radius_mm] = GLAND
    tissue[r >= radius_mm - skin_thickness_mm - 1e-9] = SKIN
    if not np.any(tissue == GLAND):
        inner = np.flatnonzero(tissue != SKIN)
        tissue[inner[np.argmin(r[inner])]] = GLAND
    bc = np.where(np.abs(nodes[:, 2]) < 1e-9, FIXED, FREE).astype(np.int8)
    return TetMesh(nodes, tets, tissue, bc)


# --- text format ---------------------------------------------------------------

def write_mesh(mesh: TetMesh, path):
    lines = ["tetmesh v1", f"nodes {mesh.n_nodes}"]
    for p, t, b in zip(mesh.nodes, mesh.node_tissue, mesh.node_bc):
        lines.append(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {TISSUES[t]} {BCS[b]}")
    lines.append(f"tets {mesh.n_tets}")
    lines.extend(" ".join(str(int(i)) for i in t) for t in mesh.tets)
    Path(path).write_text("\n".join(lines) + "\n")


def _content_lines(text):
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield no, line.split()


def read_mesh(path) -> TetMesh:
    it = _content_lines(Path(path).read_text())
    last = 0

    def take(what):
        nonlocal last
        try:
            no, tok = next(it)
        except StopIteration:
            raise MeshParseError(f"unexpected end of file, expected {what}", last + 1) from None
        last = no
        return no, tok

    no, tok = take("header")
    if tok != ["tetmesh", "v1"]:
        raise MeshParseError("expected header 'tetmesh v1'", no)

    def count(keyword):
        no, tok = take(f"'{keyword} <count>'")
        if len(tok) != 2 or tok[0] != keyword or not tok[1].isdigit():
            raise MeshParseError(f"expected '{keyword} <count>'", no)
        return int(tok[1])

    n = count("nodes")
    nodes = np.empty((n, 3))
    tissue = np.empty(n, dtype=np.int8)
    bc = np.empty(n, dtype=np.int8)
    for i in range(n):
        no, tok = take("node line")
        if len(tok) != 5:
            raise MeshParseError(f"node line needs 5 fields, got {len(tok)}", no)
        try:
            nodes[i] = [float(v) for v in tok[:3]]
        except ValueError:
            raise MeshParseError("bad coordinate", no) from None
        if tok[3] not in TISSUES or tok[4] not in BCS:
            raise MeshParseError(f"bad tissue/bc '{tok[3]} {tok[4]}'", no)
        tissue[i], bc[i] = TISSUES.index(tok[3]), BCS.index(tok[4])
    m = count("tets")
    tets = np.empty((m, 4), dtype=np.int64)
    for i in range(m):
        no, tok = take("tet line")
        if len(tok) != 4:
            raise MeshParseError(f"tet line needs 4 indices, got {len(tok)}", no)
        try:
            tets[i] = [int(v) for v in tok]
        except ValueError:
            raise MeshParseError("bad tet index", no) from None
    extra = next(it, None)
    if extra is not None:
        raise MeshParseError("trailing content after tets", extra[0])
    try:
        return TetMesh(nodes, tets, tissue, bc)
    except MeshError as exc:
        raise MeshParseError(str(exc)) from exc
