import numpy as np
import pytest

from tissuegnn.mesh import FAT, FIXED, FREE, TetMesh, generate_hemisphere_phantom, signed_volumes

CUBE_CORNERS = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], dtype=float)
# corner index = x + 2y + 4z
CUBE5 = np.array([[0, 1, 2, 4], [1, 2, 3, 7], [1, 4, 5, 7], [2, 4, 6, 7], [1, 2, 4, 7]])


def oriented(nodes, tets):
    tets = np.array(tets)
    neg = signed_volumes(nodes, tets) < 0
    tets[neg] = tets[neg][:, [0, 2, 1, 3]]
    return tets


def make_mesh(nodes, tets, fixed=(0,)):
    nodes = np.asarray(nodes, dtype=float)
    bc = np.full(len(nodes), FREE, dtype=np.int8)
    bc[list(fixed)] = FIXED
    return TetMesh(nodes, oriented(nodes, tets), np.full(len(nodes), FAT, dtype=np.int8), bc)


@pytest.fixture
def unit_tet():
    return make_mesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], [[0, 1, 2, 3]])


@pytest.fixture
def cube5():
    return make_mesh(CUBE_CORNERS, CUBE5)


@pytest.fixture(scope="session")
def hemisphere():
    return generate_hemisphere_phantom(50.0, 12.5, 2.0, seed=0)


@pytest.fixture(scope="session")
def small_hemisphere():
    return generate_hemisphere_phantom(20.0, 10.0, 2.0, seed=0)


def bar_problem(cells=(10, 2, 2), length=50.0, width=5.0, E=0.01, nu=0.3, stress=1e-7):
    """Bar on rollers at x=0 with a uniform axial traction on x=L.

    The x=0 face is held axially, the two symmetry edges of that face
    transversely, and the corner node fully, so the exact solution is the
    homogeneous uniaxial state. Returns (mesh, materials, forces,
    prescribed, tip mask, analytic tip displacement).
    """
    from tissuegnn.fem import MaterialParams
    from tissuegnn.mesh import extract_surface, structured_box_mesh

    nodes, tets = structured_box_mesh(cells, (length / cells[0], width / cells[1], width / cells[2]))
    x0 = nodes[:, 0] < 1e-9
    corner = x0 & (nodes[:, 1] < 1e-9) & (nodes[:, 2] < 1e-9)
    mesh = TetMesh(nodes, tets, np.zeros(len(nodes), np.int8), corner.astype(np.int8))
    mask = np.zeros((len(nodes), 3), dtype=bool)
    mask[x0, 0] = True
    mask[x0 & (nodes[:, 1] < 1e-9), 1] = True
    mask[x0 & (nodes[:, 2] < 1e-9), 2] = True
    tip = np.isclose(nodes[:, 0], length)
    f = np.zeros_like(nodes)
    for tri in extract_surface(mesh).surface_faces:
        if tip[tri].all():
            p = nodes[tri]
            f[tri, 0] += stress * 0.5 * np.linalg.norm(np.cross(p[1] - p[0], p[2] - p[0])) / 3
    prescribed = (mask, np.zeros((len(nodes), 3)))
    return mesh, MaterialParams({"fat": E}, nu), f, prescribed, tip, stress * length / E


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
