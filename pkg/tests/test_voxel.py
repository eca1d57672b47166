import json

import numpy as np
import pytest

from tissuegnn.mesh import PointLocator
from tissuegnn.metrics import dice
from tissuegnn.voxel import (
    AIR, FAT_LABEL, GLAND_LABEL, SKIN_LABEL, GridSpec, ReconstructionError, VoxelPhantom,
    grid_for_mesh, import_raw_labels, phantom_bytes, phantom_from_bytes, rasterize, read_phantom,
    reconstruct_compressed, write_phantom,
)

from conftest import make_mesh


@pytest.fixture(scope="module")
def big_tet():
    return make_mesh(10.0 * np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]]), [[0, 1, 2, 3]])


@pytest.fixture(scope="module")
def hemi_phantom(hemisphere):
    return rasterize(hemisphere, grid_for_mesh(hemisphere, n=48))


def test_grid_outside_mesh_is_air(big_tet):
    ph = rasterize(big_tet, GridSpec((5, 5, 5), (1, 1, 1), (100, 100, 100)))
    assert np.all(ph.labels == AIR)


def test_grid_validation():
    with pytest.raises(ValueError):
        GridSpec((0, 4, 4), (1, 1, 1), (0, 0, 0))
    with pytest.raises(ValueError):
        GridSpec((4, 4, 4), (1, -1, 1), (0, 0, 0))
    with pytest.raises(ValueError):
        VoxelPhantom(np.full((2, 2, 2), 9), (1, 1, 1), (0, 0, 0))


def tet_volume_error(mesh, h):
    grid = GridSpec.covering(mesh.nodes.min(axis=0), mesh.nodes.max(axis=0), spacing=h)
    ph = rasterize(mesh, grid)
    return abs(ph.class_volume(FAT_LABEL) - mesh.volumes().sum())


def test_single_tet_volume(big_tet):
    area = 3 * 50.0 + np.sqrt(3) / 4 * 200.0
    h = 0.5
    assert tet_volume_error(big_tet, h) <= area * h


def test_volume_converges_under_refinement(big_tet, cube5):
    for mesh in (big_tet, cube5):
        size = np.ptp(mesh.nodes, axis=0).max()
        errs = [tet_volume_error(mesh, size / n) for n in (10, 20, 40, 80)]
        assert all(b < a for a, b in zip(errs, errs[1:])), errs


def test_rasterized_classes(hemisphere, hemi_phantom):
    present = set(np.unique(hemi_phantom.labels))
    assert present == {AIR, FAT_LABEL, GLAND_LABEL, SKIN_LABEL}
    assert hemi_phantom.class_volume(FAT_LABEL) > hemi_phantom.class_volume(GLAND_LABEL)


def test_identity_reconstruction(hemisphere, hemi_phantom):
    out = reconstruct_compressed(hemi_phantom, hemisphere, np.zeros_like(hemisphere.nodes))
    assert out == hemi_phantom
    for c in (FAT_LABEL, GLAND_LABEL, SKIN_LABEL):
        assert dice(out, hemi_phantom, c) == 1.0


def test_translation_shifts_phantom(hemisphere, hemi_phantom):
    t = np.array([3.7, -1.2, 0.5])
    out = reconstruct_compressed(hemi_phantom, hemisphere, np.tile(t, (hemisphere.n_nodes, 1)))
    np.testing.assert_allclose(out.origin, np.asarray(hemi_phantom.origin) + t)
    assert out.dims == hemi_phantom.dims
    assert np.mean(out.labels == hemi_phantom.labels) > 0.999


def stretch(mesh, lam):
    u = np.zeros_like(mesh.nodes)
    u[:, 2] = (lam - 1.0) * mesh.nodes[:, 2]
    return u


def analytic_warp(ph, grid, lam):
    c = grid.centers()
    return VoxelPhantom(ph.lookup_nearest(c / [1.0, 1.0, lam]).reshape(grid.dims), grid.spacing, grid.origin)


def test_uniaxial_stretch_matches_analytic_warp(hemisphere, hemi_phantom):
    u = stretch(hemisphere, 0.8)
    out = reconstruct_compressed(hemi_phantom, hemisphere, u)
    ref = analytic_warp(hemi_phantom, out.grid, 0.8)
    assert dice(out, ref, FAT_LABEL) >= 0.95
    assert dice(out, ref, GLAND_LABEL) >= 0.95


def test_air_exactly_outside_deformed_mesh(hemisphere, hemi_phantom):
    u = stretch(hemisphere, 0.8)
    out = reconstruct_compressed(hemi_phantom, hemisphere, u)
    tet, _ = PointLocator(hemisphere.nodes + u, hemisphere.tets).locate(out.grid.centers())
    np.testing.assert_array_equal(out.labels.ravel() == AIR, tet < 0)


def test_reconstruction_independent_of_chunking(hemisphere, hemi_phantom):
    u = stretch(hemisphere, 0.85)
    a = reconstruct_compressed(hemi_phantom, hemisphere, u)
    b = reconstruct_compressed(hemi_phantom, hemisphere, u, chunk=997, workers=3)
    assert a == b


def test_inverted_element_reported(cube5):
    ph = rasterize(cube5, grid_for_mesh(cube5, n=8))
    u = np.zeros((8, 3))
    u[7] = [-3.0, -3.0, -3.0]
    with pytest.raises(ReconstructionError) as err:
        reconstruct_compressed(ph, cube5, u)
    assert 0 <= err.value.tet < 5


def test_phantom_file_round_trip(tmp_path, hemi_phantom):
    write_phantom(hemi_phantom, tmp_path / "p.pgvx")
    assert read_phantom(tmp_path / "p.pgvx") == hemi_phantom
    data = phantom_bytes(hemi_phantom)
    with pytest.raises(ValueError):
        phantom_from_bytes(b"NOPE" + data[4:])
    with pytest.raises(ValueError):
        phantom_from_bytes(data[:-1])


def test_phantom_bytes_are_x_fastest():
    lab = np.zeros((3, 2, 2), dtype=np.uint8)
    lab[1, 0, 0] = 2
    lab[0, 1, 0] = 3
    body = phantom_bytes(VoxelPhantom(lab, (1, 1, 1), (0, 0, 0)))[-12:]
    assert body[1] == 2 and body[3] == 3


def test_raw_import(tmp_path):
    raw = np.array([0, 10, 20, 30, 10, 10, 0, 20], dtype=np.uint8)
    (tmp_path / "v.raw").write_bytes(raw.tobytes())
    meta = {"dims": [2, 2, 2], "spacing": [0.5, 0.5, 1.0], "origin": [1, 2, 3],
            "label_map": {"0": 0, "10": 1, "20": 2, "30": 3}}
    (tmp_path / "v.json").write_text(json.dumps(meta))
    ph = import_raw_labels(tmp_path / "v.raw")
    assert ph.labels[1, 0, 0] == 1 and ph.labels[1, 1, 0] == 3 and ph.labels[1, 1, 1] == 2
    assert ph.spacing == (0.5, 0.5, 1.0) and ph.origin == (1.0, 2.0, 3.0)
    meta["dims"] = [2, 2, 3]
    (tmp_path / "v.json").write_text(json.dumps(meta))
    with pytest.raises(ValueError):
        import_raw_labels(tmp_path / "v.raw")
