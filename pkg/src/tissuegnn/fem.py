"""Quasi-static Neo-Hookean finite elements on linear tetrahedra.

Units: mm, N, MPa (N/mm^2). Energy density

    W(F) = mu/2 (I1 - 3) - mu ln J + lam/2 (ln J)^2

with one quadrature point per element, solved by Newton-Raphson with
backtracking line search and a sparse direct solver.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .mesh import FAT, GLAND, SKIN, TISSUES, TetMesh

log = logging.getLogger(__name__)

KPA = 1e-3  # MPa per kPa


class FEError(RuntimeError):
    pass


class ElementInversionError(FEError):
    def __init__(self, tet):
        self.tet = int(tet)
        super().__init__(f"element {self.tet} inverted (det F <= 0)")


class ConvergenceError(FEError):
    def __init__(self, residual, iterations):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"Newton did not converge in {iterations} iterations (residual {residual:.3e} N)")


def lame_from_young_poisson(E, nu):
    """Lame parameters (mu, lambda) from Young's modulus and Poisson ratio."""
    if E <= 0:
        raise ValueError("Young's modulus must be positive")
    if nu >= 0.5:
        raise ValueError("Poisson ratio >= 0.5 is incompressible")
    if nu <= 0:
        raise ValueError("Poisson ratio must be positive")
    mu = E / (2 * (1 + nu))
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    return mu, lam


@dataclass(frozen=True)
class MaterialParams:
    """Per-tissue Young's moduli (MPa) with a shared Poisson ratio."""

    young_modulus: dict = field(default_factory=lambda: {
        "fat": 4.46 * KPA, "gland": 15.1 * KPA, "skin": 20.0 * KPA})
    poisson_ratio: float = 0.49

    def __post_init__(self):
        if not 0 < self.poisson_ratio < 0.5:
            raise ValueError("poisson_ratio must lie in (0, 0.5)")
        for name, e in self.young_modulus.items():
            if name not in TISSUES:
                raise ValueError(f"unknown tissue {name!r}")
            if e <= 0:
                raise ValueError(f"young modulus for {name} must be positive")

    def lame(self, tissue):
        return lame_from_young_poisson(self.young_modulus[tissue], self.poisson_ratio)

    def element_lame(self, mesh: TetMesh):
        et = mesh.element_tissue()
        mu = np.empty(mesh.n_tets)
        lam = np.empty(mesh.n_tets)
        for code in np.unique(et):
            name = TISSUES[code]
            if name not in self.young_modulus:
                raise ValueError(f"no material defined for tissue {name!r}")
            mu[et == code], lam[et == code] = self.lame(name)
        return mu, lam


@dataclass(frozen=True)
class LoadCase:
    forces: np.ndarray   # (N, 3) nodal forces, N
    direction_id: int = 0
    step_id: int = 1

    @property
    def total_magnitude(self):
        return float(np.linalg.norm(self.forces, axis=1).sum())


# --- element kernels --------------------------------------------------------------

def _grad_ops(rest):
    """Per-element shape-function gradients G (M, 4, 3) and rest volumes."""
    dm = np.transpose(rest[:, 1:] - rest[:, :1], (0, 2, 1))
    vol = np.linalg.det(dm) / 6.0
    if np.any(vol <= 1e-12):
        raise FEError(f"degenerate rest element {int(np.argmin(vol))}")
    dminv = np.linalg.inv(dm)
    g = np.concatenate([-dminv.sum(axis=1, keepdims=True), dminv], axis=1)
    return g, vol


def _deformation_gradient(x, g):
    # F_ij = sum_a x_ai G_aj
    return np.einsum("mai,maj->mij", x, g)


def neo_hookean_energy(F, mu, lam, first=0):
    J = np.linalg.det(F)
    if np.any(J <= 0):
        raise ElementInversionError(first + int(np.flatnonzero(J <= 0)[0]))
    lnJ = np.log(J)
    I1 = np.einsum("mij,mij->m", F, F)
    return 0.5 * mu * (I1 - 3) - mu * lnJ + 0.5 * lam * lnJ ** 2


def element_energy_and_forces(rest, displacement, mu, lam, tangent=True):
    """Energy, nodal forces (-dE/dx) and tangent (d2E/dx2) of tet elements.

    ``rest`` and ``displacement`` are (4, 3) for a single element or (M, 4, 3)
    for a batch; ``mu``/``lam`` scalars or (M,). Returns shapes (M,),
    (M, 4, 3), (M, 12, 12), squeezed for a single element.
    """
    rest = np.asarray(rest, dtype=np.float64)
    single = rest.ndim == 2
    if single:
        rest = rest[None]
    u = np.asarray(displacement, dtype=np.float64).reshape(rest.shape)
    g, vol = _grad_ops(rest)
    out = _element_terms(rest + u, g, vol, np.broadcast_to(mu, vol.shape), np.broadcast_to(lam, vol.shape), tangent)
    if single:
        return tuple(None if o is None else o[0] for o in out)
    return out


def _element_terms(x, g, vol, mu, lam, tangent=True):
    F = _deformation_gradient(x, g)
    psi = neo_hookean_energy(F, mu, lam)
    Finv = np.linalg.inv(F)
    FinvT = np.transpose(Finv, (0, 2, 1))
    lnJ = np.log(np.linalg.det(F))
    P = mu[:, None, None] * (F - FinvT) + (lam * lnJ)[:, None, None] * FinvT
    forces = -vol[:, None, None] * np.einsum("mij,maj->mai", P, g)
    K = None
    if tangent:
        # dP_ij/dF_kl = mu d_ik d_jl + (mu - lam lnJ) Finv_jk Finv_li + lam Finv_ji Finv_lk
        c1 = (mu - lam * lnJ)[:, None, None, None, None]
        eye = np.eye(3)
        C = (mu[:, None, None, None, None] * np.einsum("ik,jl->ijkl", eye, eye)[None]
             + c1 * np.einsum("mjk,mli->mijkl", Finv, Finv)
             + lam[:, None, None, None, None] * np.einsum("mji,mlk->mijkl", Finv, Finv))
        # K_(a i),(b k) = V sum_jl C_ijkl G_aj G_bl
        K = vol[:, None, None, None, None] * np.einsum("mijkl,maj,mbl->maibk", C, g, g)
        K = K.reshape(-1, 12, 12)
    return vol * psi, forces, K


# --- global assembly ----------------------------------------------------------------

class NeoHookeanModel:
    """Assembled energy, internal force and tangent for a mesh + materials."""

    def __init__(self, mesh: TetMesh, materials: MaterialParams):
        self.mesh = mesh
        self.mu, self.lam = materials.element_lame(mesh)
        self.g, self.vol = _grad_ops(mesh.nodes[mesh.tets])
        dof = (3 * mesh.tets[:, :, None] + np.arange(3)).reshape(-1, 12)
        self.dof = dof
        self.rows = np.repeat(dof, 12, axis=1).ravel()
        self.cols = np.tile(dof, (1, 12)).ravel()
        self.ndof = 3 * mesh.n_nodes

    def _x(self, u):
        return (self.mesh.nodes + u.reshape(-1, 3))[self.mesh.tets]

    def energy(self, u):
        F = _deformation_gradient(self._x(u), self.g)
        return float(np.sum(self.vol * neo_hookean_energy(F, self.mu, self.lam)))

    def internal(self, u, tangent=True):
        """Total strain energy, internal force dE/du (flat) and sparse tangent."""
        e, f, K = _element_terms(self._x(u), self.g, self.vol, self.mu, self.lam, tangent)
        fint = np.zeros(self.ndof)
        np.add.at(fint, self.dof.ravel(), -f.reshape(-1))
        Kg = None
        if tangent:
            Kg = sparse.csc_matrix((K.ravel(), (self.rows, self.cols)), shape=(self.ndof, self.ndof))
        return float(e.sum()), fint, Kg


# --- solvers -----------------------------------------------------------------------

@dataclass
class SolverOptions:
    tol: float = 1e-8          # residual inf-norm at free dofs, N
    max_iter: int = 50
    max_halvings: int = 20


def _newton(model, fext, constrained, target, u0, opts):
    """Minimise E(u) - fext.u subject to u[constrained] = target.

    ``constrained`` is a boolean mask over dofs. Returns (u, iterations).
    """
    free = ~constrained
    u = u0.copy()
    res_norm = np.inf
    for it in range(opts.max_iter + 1):
        e, fint, K = model.internal(u)
        r = fint - fext
        du_c = target - u[constrained]
        res_norm = float(np.abs(r[free]).max()) if free.any() else 0.0
        if res_norm < opts.tol and not np.any(du_c):
            return u, it
        if it == opts.max_iter:
            break
        du = np.zeros_like(u)
        du[constrained] = du_c
        Kff = K[free][:, free]
        rhs = -r[free]
        if np.any(du_c):
            rhs -= K[free][:, constrained] @ du_c
        du[free] = splu(Kff.tocsc()).solve(rhs)
        pi0 = e - fext @ u
        alpha, accepted, inverted = 1.0, False, None
        for _ in range(opts.max_halvings + 1):
            trial = u + alpha * du
            if alpha == 1.0:
                trial[constrained] = target
            try:
                et, ft, _ = model.internal(trial, tangent=False)
            except ElementInversionError as exc:
                inverted = exc
                alpha *= 0.5
                continue
            # while driving prescribed dofs only admissibility is required
            if np.any(du_c):
                accepted = True
                break
            pit = et - fext @ trial
            rt = float(np.abs((ft - fext)[free]).max())
            if pit <= pi0 or rt < res_norm:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if inverted is not None:
                raise inverted
            raise ConvergenceError(res_norm, it)
        u = trial
    raise ConvergenceError(res_norm, opts.max_iter)


def _fixed_mask(mesh):
    return np.repeat(mesh.fixed, 3)


def solve_static(mesh: TetMesh, materials: MaterialParams, load=None, prescribed=None,
                 u0=None, options: SolverOptions | None = None, model=None):
    """Static equilibrium under nodal forces and/or prescribed displacements.

    ``load`` is a LoadCase or (N, 3) force array. ``prescribed`` is a
    ``(mask (N, 3) bool, values (N, 3))`` pair of extra Dirichlet dofs; fixed
    nodes are always held at zero unless the mask overrides them.
    Returns the (N, 3) displacement field.
    """
    opts = options or SolverOptions()
    model = model or NeoHookeanModel(mesh, materials)
    n = mesh.n_nodes
    fext = np.zeros(3 * n)
    if load is not None:
        forces = load.forces if isinstance(load, LoadCase) else np.asarray(load, dtype=np.float64)
        if forces.shape != (n, 3):
            raise ValueError("force array must have shape (n_nodes, 3)")
        if np.any(forces[mesh.fixed] != 0):
            raise ValueError("forces at fixed nodes must be zero")
        fext = forces.ravel().copy()
    constrained = _fixed_mask(mesh)
    values = np.zeros(3 * n)
    if prescribed is not None:
        mask, vals = prescribed
        mask = np.asarray(mask, dtype=bool).ravel()
        constrained = constrained | mask
        values = np.where(mask, np.asarray(vals, dtype=np.float64).ravel(), 0.0)
    u_start = np.zeros(3 * n) if u0 is None else np.asarray(u0, dtype=np.float64).ravel().copy()
    u, _ = _newton(model, fext, constrained, values[constrained], u_start, opts)
    return u.reshape(n, 3)


def incremental_solve(mesh, materials, forces, n_steps, options=None):
    """Load-stepped solves of ``t/n_steps * forces`` for t = 1..n_steps.

    ``forces`` is the full-load (N, 3) nodal force array. Each step is
    warm-started from the previous one.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    model = NeoHookeanModel(mesh, materials)
    forces = np.asarray(forces, dtype=np.float64)
    u = np.zeros_like(forces)
    out = []
    for t in range(1, n_steps + 1):
        u = solve_static(mesh, materials, forces * (t / n_steps), u0=u, options=options, model=model)
        out.append(u)
    return out


def compression_planes(mesh, axis, compression_fraction, split=None):
    """Plate positions (lower, upper) along ``axis``.

    ``split`` is the share of the travel taken by the lower plate; by default
    the plate on the side of the fixed surface stays put when all fixed nodes
    sit at one extreme, otherwise both plates move equally.
    """
    x = mesh.nodes[:, axis]
    lo, hi = x.min(), x.max()
    length = hi - lo
    if split is None:
        xf = x[mesh.fixed]
        tol = 1e-9 * max(length, 1.0)
        if np.all(xf <= lo + tol):
            split = 0.0
        elif np.all(xf >= hi - tol):
            split = 1.0
        else:
            split = 0.5
    travel = compression_fraction * length
    return lo + split * travel, hi - (1 - split) * travel


def prescribed_compression(mesh, materials, axis=2, compression_fraction=0.2, split=None,
                           n_increments=10, max_active_set_rounds=10, options=None):
    """Plate compression approximated by prescribed axis displacements.

    Nodes beyond either plate plane are moved onto it along ``axis`` and left
    free tangentially. Free nodes that end up penetrating a plate are added to
    the constrained set and the step re-solved.
    """
    if compression_fraction == 0:
        return np.zeros((mesh.n_nodes, 3))
    if not 0 < compression_fraction < 0.5:
        raise ValueError("compression_fraction must lie in (0, 0.5)")
    lower, upper = compression_planes(mesh, axis, compression_fraction, split)
    model = NeoHookeanModel(mesh, materials)
    x = mesh.nodes[:, axis]
    lo0, hi0 = x.min(), x.max()
    u = np.zeros((mesh.n_nodes, 3))
    contact_lo = x < lower
    contact_hi = x > upper
    for k in range(1, n_increments + 1):
        s = k / n_increments
        lo_k, hi_k = lo0 + s * (lower - lo0), hi0 + s * (upper - hi0)
        for _ in range(max_active_set_rounds):
            mask = np.zeros((mesh.n_nodes, 3), dtype=bool)
            vals = np.zeros((mesh.n_nodes, 3))
            c_lo = contact_lo & (x < lo_k)
            c_hi = contact_hi & (x > hi_k)
            mask[c_lo, axis] = True
            mask[c_hi, axis] = True
            vals[c_lo, axis] = lo_k - x[c_lo]
            vals[c_hi, axis] = hi_k - x[c_hi]
            u = solve_static(mesh, materials, prescribed=(mask, vals), u0=u, options=options, model=model)
            cur = x + u[:, axis]
            tol = 1e-9 * (hi0 - lo0)
            pen_lo = (cur < lo_k - tol) & ~contact_lo
            pen_hi = (cur > hi_k + tol) & ~contact_hi
            if not (pen_lo.any() or pen_hi.any()):
                break
            contact_lo |= pen_lo
            contact_hi |= pen_hi
        # nodes reaching the plates in later increments join the contact set
        contact_lo |= x + u[:, axis] < lo_k
        contact_hi |= x + u[:, axis] > hi_k
    return u


# --- displacement field file ----------------------------------------------------------

def write_displacement(u, path):
    u = np.asarray(u, dtype=np.float64)
    lines = ["dispfield v1", f"nodes {len(u)}"]
    lines.extend(f"{float(a)!r} {float(b)!r} {float(c)!r}" for a, b, c in u)
    Path(path).write_text("\n".join(lines) + "\n")


def read_displacement(path):
    from .mesh import MeshParseError, _content_lines

    it = _content_lines(Path(path).read_text())
    first = next(it, None)
    if first is None or first[1] != ["dispfield", "v1"]:
        raise MeshParseError("expected header 'dispfield v1'", first[0] if first else 1)
    hdr = next(it, None)
    if hdr is None or len(hdr[1]) != 2 or hdr[1][0] != "nodes" or not hdr[1][1].isdigit():
        raise MeshParseError("expected 'nodes <count>'", hdr[0] if hdr else None)
    n = int(hdr[1][1])
    u = np.empty((n, 3))
    for i in range(n):
        row = next(it, None)
        if row is None:
            raise MeshParseError("unexpected end of file in displacement rows")
        no, tok = row
        if len(tok) != 3:
            raise MeshParseError("displacement line needs 3 fields", no)
        try:
            u[i] = [float(v) for v in tok]
        except ValueError:
            raise MeshParseError("bad displacement value", no) from None
    extra = next(it, None)
    if extra is not None:
        raise MeshParseError("trailing content", extra[0])
    return u
