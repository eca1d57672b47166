"""Load cases, node features, ground-truth generation and data splits."""
from __future__ import annotations

import json
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fem import FEError, LoadCase, MaterialParams, NeoHookeanModel, solve_static
from .mesh import FAT, GLAND, SKIN, MeshError, MeshGraph, TetMesh, extract_surface

log = logging.getLogger(__name__)

NORMAL, RANDOM = "surface-normal", "random-hemisphere"
PHYS_PROP = {FAT: 1.0, GLAND: 0.6, SKIN: 0.1}
FEATURE_NAMES = ("F_x", "F_y", "F_z", "F_rho", "F_theta", "F_phi", "phys_prop")

SAMPLE_MAGIC = b"PGNS"
SAMPLE_VERSION = 1


class DataError(ValueError):
    pass


class SplitConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DirectionSet:
    vectors: np.ndarray       # (n, 3) unit vectors
    provenance: tuple         # NORMAL | RANDOM per entry
    seed: int
    axis: tuple = (0.0, 0.0, -1.0)

    def __len__(self):
        return len(self.vectors)


@dataclass(frozen=True)
class DeformationSample:
    features: np.ndarray  # (N, 7)
    target: np.ndarray    # (N, 3) mm
    direction_id: int
    step_id: int
    graph: MeshGraph | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if len(self.features) != len(self.target):
            raise DataError("feature rows and target rows differ")


def _frame(axis):
    """Orthonormal frame whose third column is ``axis``."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    helper = np.array([1.0, 0.0, 0.0]) if abs(a[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(helper, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(a, e1)
    return np.column_stack([e1, e2, a])


def sample_hemisphere(n, axis, rng):
    """Area-uniform unit vectors on the hemisphere about ``axis``."""
    cos_t = rng.uniform(0.0, 1.0, n)
    az = rng.uniform(0.0, 2 * np.pi, n)
    sin_t = np.sqrt(1.0 - cos_t ** 2)
    local = np.column_stack([sin_t * np.cos(az), sin_t * np.sin(az), cos_t])
    v = local @ _frame(axis).T
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sample_directions(surface_normal_axis=(0.0, 0.0, -1.0), n_total=40, seed=0, n_normal=1):
    """``n_normal`` per-node-normal entries followed by random hemisphere vectors.

    Normal entries store the hemisphere axis as a stand-in vector; the actual
    per-node inward normals are applied when loads are built.
    """
    if n_total < 1 or not 0 <= n_normal <= n_total:
        raise ValueError("need n_total >= 1 and 0 <= n_normal <= n_total")
    axis = np.asarray(surface_normal_axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    rand = sample_hemisphere(n_total - n_normal, axis, rng)
    vectors = np.vstack([np.tile(axis, (n_normal, 1)), rand])
    prov = (NORMAL,) * n_normal + (RANDOM,) * (n_total - n_normal)
    return DirectionSet(vectors, prov, seed, tuple(axis))


def loaded_nodes(mesh, surface=None):
    surface = surface or extract_surface(mesh)
    keep = ~mesh.fixed[surface.surface_nodes]
    return surface.surface_nodes[keep], surface.node_normal[keep]


def direction_forces(mesh, directions, direction_id, max_force, surface=None):
    """Full-load nodal force array for one direction.

    ``max_force`` is split equally over the free surface nodes; normal-mode
    directions push each node along its inward normal.
    """
    nodes, normals = loaded_nodes(mesh, surface)
    if len(nodes) == 0:
        raise MeshError("mesh has no free surface nodes to load")
    per_node = max_force / len(nodes)
    f = np.zeros((mesh.n_nodes, 3))
    if directions.provenance[direction_id] == NORMAL:
        f[nodes] = -normals * per_node
    else:
        f[nodes] = directions.vectors[direction_id] * per_node
    return f


def build_load_cases(mesh, directions, max_force=90.0, n_steps=30, surface=None):
    """All (direction, step) load cases, ordered by direction then step."""
    surface = surface or extract_surface(mesh)
    cases = []
    for d in range(len(directions)):
        full = direction_forces(mesh, directions, d, max_force, surface)
        for t in range(1, n_steps + 1):
            cases.append(LoadCase(full * (t / n_steps), d, t))
    return cases


def cartesian_to_spherical(F):
    """(rho, theta, phi) with theta from +z in [0, pi] and phi = atan2(y, x).

    Works on a single 3-vector or an (n, 3) array; the zero vector maps to
    (0, 0, 0).
    """
    F = np.asarray(F, dtype=np.float64)
    v = np.atleast_2d(F)
    rho = np.linalg.norm(v, axis=1)
    safe = np.where(rho > 0, rho, 1.0)
    theta = np.where(rho > 0, np.arccos(np.clip(v[:, 2] / safe, -1.0, 1.0)), 0.0)
    phi = np.where(rho > 0, np.arctan2(v[:, 1], v[:, 0]), 0.0)
    # atan2 returns -pi for (-x, -0.0); the range is (-pi, pi]
    phi = np.where(phi == -np.pi, np.pi, phi)
    out = np.column_stack([rho, theta, phi])
    return tuple(out[0]) if F.ndim == 1 else out


def phys_prop(mesh):
    p = np.empty(mesh.n_nodes)
    for code, val in PHYS_PROP.items():
        p[mesh.node_tissue == code] = val
    unknown = ~np.isin(mesh.node_tissue, list(PHYS_PROP))
    if unknown.any():
        raise DataError(f"unknown tissue label at node {int(np.flatnonzero(unknown)[0])}")
    p[mesh.fixed] = 0.0
    return p


def assemble_features(mesh, load):
    forces = load.forces if isinstance(load, LoadCase) else np.asarray(load, dtype=np.float64)
    if forces.shape != (mesh.n_nodes, 3):
        raise DataError("load does not match mesh node count")
    return np.column_stack([forces, cartesian_to_spherical(forces), phys_prop(mesh)])


@dataclass
class GenerationReport:
    n_cases: int
    failures: list = field(default_factory=list)  # (direction_id, step_id, message)


def _solve_direction(args):
    mesh, materials, forces, n_steps, options = args
    model = NeoHookeanModel(mesh, materials)
    u = np.zeros_like(forces)
    fields, error = [], None
    for t in range(1, n_steps + 1):
        try:
            u = solve_static(mesh, materials, forces * (t / n_steps), u0=u, options=options, model=model)
        except FEError as exc:
            error = (t, str(exc))
            break
        fields.append(u)
    return fields, error


def generate_dataset(mesh, materials, directions, max_force=90.0, n_steps=30, workers=1,
                     options=None, graph=None):
    """One sample per load case, targets from load-stepped FE solves.

    A solver failure at step t of a direction drops steps t..n_steps of that
    direction; the report lists them. Output order is (direction, step).
    """
    surface = extract_surface(mesh)
    jobs = [(mesh, materials, direction_forces(mesh, directions, d, max_force, surface), n_steps, options)
            for d in range(len(directions))]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_solve_direction, jobs))
    else:
        results = [_solve_direction(j) for j in jobs]

    samples = []
    report = GenerationReport(len(directions) * n_steps)
    for d, ((fields, error), job) in enumerate(zip(results, jobs)):
        full = job[2]
        for t, u in enumerate(fields, start=1):
            feats = assemble_features(mesh, full * (t / n_steps))
            samples.append(DeformationSample(feats, u, d, t, graph))
        if error is not None:
            t0, msg = error
            log.warning("direction %d failed at step %d: %s", d, t0, msg)
            report.failures.extend((d, t, msg) for t in range(t0, n_steps + 1))
    return samples, report


# --- splits -------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    mode: str = "holdout"         # holdout | lodo
    fractions: tuple | None = None  # (train, val, test) or (train, val) for lodo
    seed: int = 0
    held_out_step: int | None = None

    def __post_init__(self):
        if self.mode not in ("holdout", "lodo"):
            raise SplitConfigError(f"unknown split mode {self.mode!r}")
        if self.fractions is None:
            object.__setattr__(self, "fractions", (0.7, 0.2, 0.1) if self.mode == "holdout" else (0.8, 0.2))
        fr = tuple(float(f) for f in self.fractions)
        object.__setattr__(self, "fractions", fr)
        if len(fr) != (3 if self.mode == "holdout" else 2):
            raise SplitConfigError(f"{self.mode} split needs {3 if self.mode == 'holdout' else 2} fractions")
        if any(f < 0 for f in fr) or abs(sum(fr) - 1) > 1e-9:
            raise SplitConfigError("split fractions must be non-negative and sum to 1")


def split_holdout(samples, fractions=(0.7, 0.2, 0.1), seed=0):
    """Random partition; val/test sizes are floored, the remainder goes to train."""
    fractions = tuple(fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise SplitConfigError("fractions must be three non-negative numbers summing to 1")
    n = len(samples)
    n_val = int(np.floor(fractions[1] * n + 1e-9))
    n_test = int(np.floor(fractions[2] * n + 1e-9))
    n_train = n - n_val - n_test
    for name, f, k in zip(("train", "val", "test"), fractions, (n_train, n_val, n_test)):
        if f > 0 and k == 0:
            raise SplitConfigError(f"{name} split is empty for {n} samples")
    order = np.random.default_rng(np.random.SeedSequence(seed)).permutation(n)
    pick = lambda idx: [samples[i] for i in idx]
    return pick(order[:n_train]), pick(order[n_train:n_train + n_val]), pick(order[n_train + n_val:])


def split_lodo(samples, held_out_step=None, fractions=(0.8, 0.2), seed=0):
    """Test on every sample of one step (default: the last); shuffle the rest 80/20."""
    steps = [s.step_id for s in samples]
    if held_out_step is None:
        if not steps:
            raise SplitConfigError("no samples")
        held_out_step = max(steps)
    test = [s for s in samples if s.step_id == held_out_step]
    if not test:
        raise SplitConfigError(f"no samples with step_id {held_out_step}")
    rest = [s for s in samples if s.step_id != held_out_step]
    tr, va = fractions[0], fractions[1]
    train, val, _ = split_holdout(rest, (tr / (tr + va), va / (tr + va), 0.0), seed)
    return train, val, test


def split(samples, spec: SplitSpec):
    if spec.mode == "holdout":
        return split_holdout(samples, spec.fractions, spec.seed)
    return split_lodo(samples, spec.held_out_step, spec.fractions, spec.seed)


# --- serialization --------------------------------------------------------------------

def sample_to_bytes(sample: DeformationSample):
    n = len(sample.features)
    head = SAMPLE_MAGIC + struct.pack("<II", SAMPLE_VERSION, n)
    body = (np.ascontiguousarray(sample.features.T, dtype="<f8").tobytes()
            + np.ascontiguousarray(sample.target.T, dtype="<f8").tobytes())
    return head + body + struct.pack("<II", sample.direction_id, sample.step_id)


def sample_from_bytes(data, graph=None):
    if len(data) < 12 or data[:4] != SAMPLE_MAGIC:
        raise DataError("not a sample file (bad magic)")
    version, n = struct.unpack_from("<II", data, 4)
    if version != SAMPLE_VERSION:
        raise DataError(f"unsupported sample version {version}")
    expected = 12 + 80 * n + 8
    if len(data) != expected:
        raise DataError(f"sample file has {len(data)} bytes, expected {expected}")
    arr = np.frombuffer(data, dtype="<f8", count=10 * n, offset=12)
    feats = arr[:7 * n].reshape(7, n).T.astype(np.float64)
    target = arr[7 * n:].reshape(3, n).T.astype(np.float64)
    d, t = struct.unpack_from("<II", data, 12 + 80 * n)
    return DeformationSample(feats, target, d, t, graph)


def sample_filename(sample):
    return f"sample_d{sample.direction_id:03d}_s{sample.step_id:03d}.pgns"


def write_dataset(samples, report, out_dir, config, mesh_path=None):
    """Write one binary file per sample plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        name = sample_filename(s)
        (out / name).write_bytes(sample_to_bytes(s))
        entries.append({"file": name, "direction_id": s.direction_id, "step_id": s.step_id, "status": "ok"})
    for d, t, msg in report.failures:
        entries.append({"file": None, "direction_id": d, "step_id": t, "status": "failed", "error": msg})
    entries.sort(key=lambda e: (e["direction_id"], e["step_id"]))
    manifest = {
        "format": "tissuegnn-dataset",
        "sample_version": SAMPLE_VERSION,
        "mesh": None if mesh_path is None else str(mesh_path),
        "config": config,
        "seed": config.get("seed"),
        "n_cases": report.n_cases,
        "n_failed": len(report.failures),
        "samples": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(out_dir, graph=None):
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    samples = [sample_from_bytes((out / e["file"]).read_bytes(), graph)
               for e in manifest["samples"] if e["status"] == "ok"]
    return samples, manifest
