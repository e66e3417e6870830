"""
Multiscale finite elements on a structured coarse mesh.

Each coarse element gets four multiscale basis functions from local Dirichlet
problems on its (possibly oversampled) sample box. Local matrices are stored
with rows indexed by test functions and columns by trial functions, so
S[i, j] = a(phi_j, test_i); for Galerkin S is symmetric.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .exceptions import EllipticityError, IncompleteAssemblyError
from .fem_core import (
    BoundaryCondition,
    Source,
    apply_dirichlet,
    factorize,
    load_vector,
    solve,
    stiffness_matrix,
)
from .mesh import CoarsePatch, Meshes, StructuredMesh, coarse_to_fine_nodes

logger = logging.getLogger(__name__)

BoundaryKind = Literal["bilinear", "oscillatory"]
Formulation = Literal["galerkin", "petrov_galerkin"]


@dataclass(frozen=True)
class CellProblemSpec:
    patch: CoarsePatch
    boundary_kind: BoundaryKind = "bilinear"
    formulation: Formulation = "galerkin"


@dataclass(eq=False)
class MultiscaleBasis:
    patch_id: Tuple[int, int]
    phi: np.ndarray
    boundary_data: np.ndarray
    recombination: np.ndarray


@dataclass(eq=False)
class LocalUpscaled:
    S: np.ndarray
    b: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.S.ravel(), self.b])

    @classmethod
    def from_vector(cls, values: np.ndarray) -> "LocalUpscaled":
        values = np.asarray(values, dtype=float)
        return cls(values[:16].reshape(4, 4).copy(), values[16:20].copy())


def bilinear_shapes(mesh: StructuredMesh) -> np.ndarray:
    """The four nodal bilinear functions of the mesh's bounding box, on its nodes."""
    s = np.arange(mesh.nx + 1) / mesh.nx
    t = np.arange(mesh.ny + 1) / mesh.ny
    ss, tt = np.meshgrid(s, t)
    ss = ss.ravel()
    tt = tt.ravel()
    return np.array([(1 - ss) * (1 - tt), ss * (1 - tt), ss * tt, (1 - ss) * tt])


def _edge_profile(kappa_row: np.ndarray, h: float) -> np.ndarray:
    """Solution of -(k u')' = 0 on one edge with u = 0 at the start and 1 at the end."""
    cumulative = np.concatenate([[0.0], np.cumsum(h / kappa_row)])
    return cumulative / cumulative[-1]


def oscillatory_data(mesh: StructuredMesh, kappa: np.ndarray) -> np.ndarray:
    """Nodal boundary data from 1-D edge problems using the coefficient of the adjacent cells."""
    K = np.asarray(kappa, dtype=float).reshape(mesh.ny, mesh.nx)
    g = np.zeros((4, mesh.n_nodes))
    ii = np.arange(mesh.nx + 1)
    jj = np.arange(mesh.ny + 1)
    bottom, top = mesh.node_index(ii, 0), mesh.node_index(ii, mesh.ny)
    left, right = mesh.node_index(0, jj), mesh.node_index(mesh.nx, jj)
    s_bottom = _edge_profile(K[0, :], mesh.hx)
    s_top = _edge_profile(K[-1, :], mesh.hx)
    t_left = _edge_profile(K[:, 0], mesh.hy)
    t_right = _edge_profile(K[:, -1], mesh.hy)
    g[0, bottom], g[1, bottom] = 1.0 - s_bottom, s_bottom
    g[3, top], g[2, top] = 1.0 - s_top, s_top
    g[0, left], g[3, left] = 1.0 - t_left, t_left
    g[1, right], g[2, right] = 1.0 - t_right, t_right
    return g


def boundary_data(mesh: StructuredMesh, kind: BoundaryKind, kappa: np.ndarray,
                  bilinear: Optional[np.ndarray] = None) -> np.ndarray:
    if kind == "oscillatory":
        return oscillatory_data(mesh, kappa)
    return bilinear_shapes(mesh) if bilinear is None else bilinear


class LocalUpscaler:
    """Cell solves and local assembly for one patch; index maps are computed once."""

    def __init__(self, patch: CoarsePatch, fine: StructuredMesh, boundary_kind: BoundaryKind = "bilinear",
                 formulation: Formulation = "galerkin", source: Source = 1.0):
        self.patch = patch
        self.boundary_kind = boundary_kind
        self.formulation = formulation
        self.cells = fine.window_cells(patch.sample_cells)
        self.sample_mesh = patch.sample_mesh(fine)
        self.element_mesh = patch.element_mesh(fine)
        window = patch.element_window_in_sample
        self.element_nodes = self.sample_mesh.window_nodes(window)
        self.element_cells = self.sample_mesh.window_cells(window)
        r = self.element_mesh.nx
        self.corners = np.array([0, r, (r + 1) * (r + 1) - 1, r * (r + 1)])
        self.boundary = self.sample_mesh.boundary_nodes()
        mask = np.ones(self.sample_mesh.n_nodes, dtype=bool)
        mask[self.boundary] = False
        self.free = np.flatnonzero(mask)
        self.test_shapes = bilinear_shapes(self.element_mesh)
        self.load = load_vector(self.element_mesh, source)
        self._bilinear = bilinear_shapes(self.sample_mesh)

    @property
    def oversampled(self) -> bool:
        return self.patch.oversampled

    def element_kappa(self, kappa_sample: np.ndarray) -> np.ndarray:
        return np.asarray(kappa_sample)[self.element_cells]

    def psi(self, kappa_sample: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Cell solutions on the whole sample box, before extraction; returns (psi, boundary data)."""
        lowest = float(np.min(kappa_sample))
        if not lowest > 0.0:
            raise EllipticityError(f"patch {self.patch.patch_id}: coefficient minimum {lowest:.3e} is not positive")
        data = boundary_data(self.sample_mesh, self.boundary_kind, kappa_sample, self._bilinear)
        psi = data.copy()
        if len(self.free):
            A = stiffness_matrix(self.sample_mesh, kappa_sample)
            rows = A[self.free]
            rhs = -(rows[:, self.boundary] @ data[:, self.boundary].T)
            lu = factorize(rows[:, self.free])
            psi[:, self.free] = lu.solve(rhs).T
        return psi, data

    def extract(self, psi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Element restriction, recombined to be nodal at the element corners when oversampled."""
        psi_e = psi[:, self.element_nodes]
        if not self.oversampled:
            return psi_e, np.eye(4)
        corner_values = psi_e[:, self.corners]
        C = np.linalg.inv(corner_values)
        phi = C @ psi_e
        phi[:, self.corners] = np.eye(4)
        return phi, C

    def basis(self, kappa_sample: np.ndarray) -> MultiscaleBasis:
        psi, data = self.psi(kappa_sample)
        phi, C = self.extract(psi)
        return MultiscaleBasis(self.patch.patch_id, phi, data[:, self.boundary], C)

    def assemble(self, basis: MultiscaleBasis, kappa_sample: np.ndarray) -> LocalUpscaled:
        return assemble_local(basis, self.element_kappa(kappa_sample), self.load, self.formulation,
                              self.element_mesh, self.test_shapes)

    def upscale(self, kappa_sample: np.ndarray) -> LocalUpscaled:
        return self.assemble(self.basis(kappa_sample), kappa_sample)


def solve_cell(spec: CellProblemSpec, kappa_sample: np.ndarray, fine: StructuredMesh) -> MultiscaleBasis:
    return LocalUpscaler(spec.patch, fine, spec.boundary_kind, spec.formulation).basis(kappa_sample)


def assemble_local(basis: MultiscaleBasis, kappa_element: np.ndarray, source: Source,
                   formulation: Formulation, element_mesh: StructuredMesh,
                   test_shapes: Optional[np.ndarray] = None) -> LocalUpscaled:
    """`source` is a callable/constant, or an already assembled element load vector."""
    K = stiffness_matrix(element_mesh, kappa_element)
    if isinstance(source, np.ndarray) and source.shape == (element_mesh.n_nodes,):
        f = source
    else:
        f = load_vector(element_mesh, source)
    trial = basis.phi
    if formulation == "galerkin":
        test = trial
    else:
        test = bilinear_shapes(element_mesh) if test_shapes is None else test_shapes
    S = test @ (K @ trial.T)
    if formulation == "galerkin":
        S = 0.5 * (S + S.T)
    return LocalUpscaled(S, test @ f)


def assemble_global(locals_: Sequence[Optional[LocalUpscaled]], coarse: StructuredMesh,
                    boundary: BoundaryCondition, symmetric: bool = True):
    if len(locals_) != coarse.n_cells or any(loc is None for loc in locals_):
        missing = [m for m in range(coarse.n_cells) if m >= len(locals_) or locals_[m] is None]
        raise IncompleteAssemblyError(f"missing local contributions for elements {missing[:10]}")
    nodes = coarse.cell_nodes
    S = np.array([loc.S for loc in locals_])
    b = np.array([loc.b for loc in locals_])
    rows = np.repeat(nodes, 4, axis=1).ravel()
    cols = np.tile(nodes, (1, 4)).ravel()
    A = sp.coo_matrix((S.ravel(), (rows, cols)), shape=(coarse.n_nodes, coarse.n_nodes)).tocsr()
    if symmetric:
        A = ((A + A.T) * 0.5).tocsr()
    F = np.bincount(nodes.ravel(), weights=b.ravel(), minlength=coarse.n_nodes)
    fixed, values = boundary.constrained(coarse)
    return apply_dirichlet(A, F, fixed, values, symmetric=symmetric)


def solve_coarse_and_reconstruct(system, bases: Optional[Sequence[MultiscaleBasis]], patches: Sequence[CoarsePatch],
                                 coarse: StructuredMesh, fine: StructuredMesh):
    """(U on coarse nodes, u_H on fine nodes or None when no bases are given)."""
    U = solve(system)
    if bases is None:
        return U, None
    u_fine = np.zeros(fine.n_nodes)
    for patch, basis in zip(patches, bases):
        ids = fine.window_nodes(patch.element_cells)
        u_fine[ids] = U[list(patch.corner_nodes)] @ basis.phi
    u_fine[coarse_to_fine_nodes(coarse, fine)] = U
    return U, u_fine


class MsFEMSolver:
    """Per-sample MsFEM: one LocalUpscaler per patch plus the coarse solve."""

    def __init__(self, meshes: Meshes, boundary: BoundaryCondition, source: Source = 1.0,
                 boundary_kind: BoundaryKind = "bilinear", formulation: Formulation = "galerkin"):
        self.meshes = meshes
        self.boundary = boundary
        self.formulation = formulation
        self.upscalers: List[LocalUpscaler] = [
            LocalUpscaler(p, meshes.fine, boundary_kind, formulation, source) for p in meshes.patches
        ]

    @property
    def symmetric(self) -> bool:
        return self.formulation == "galerkin"

    def local_matrices(self, kappa_fine: np.ndarray, with_bases: bool = False):
        locals_, bases = [], []
        for upscaler in self.upscalers:
            kappa_sample = np.asarray(kappa_fine)[upscaler.cells]
            basis = upscaler.basis(kappa_sample)
            locals_.append(upscaler.assemble(basis, kappa_sample))
            if with_bases:
                bases.append(basis)
        return locals_, (bases if with_bases else None)

    def coarse_solve(self, locals_: Sequence[LocalUpscaled], bases=None):
        system = assemble_global(locals_, self.meshes.coarse, self.boundary, self.symmetric)
        return solve_coarse_and_reconstruct(system, bases, self.meshes.patches, self.meshes.coarse, self.meshes.fine)

    def direct(self, kappa_fine: np.ndarray, reconstruct: bool = False):
        locals_, bases = self.local_matrices(kappa_fine, with_bases=reconstruct)
        return self.coarse_solve(locals_, bases)
