"""
Bilinear (Q1) finite elements for -div(kappa grad u) = b on structured meshes.

kappa is constant per cell; element integrals of grad(phi_i).grad(phi_j) are exact,
the load uses the cell midpoint rule. Dirichlet nodes are eliminated.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Literal, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exceptions import EllipticityError, SolverNotConverged
from .mesh import EDGES, StructuredMesh

logger = logging.getLogger(__name__)

RESIDUAL_TOLERANCE = 1e-10
DIRECT_SOLVE_LIMIT = 60000
REFINEMENT_STEPS = 2

_KX = np.array([
    [2.0, -2.0, -1.0, 1.0],
    [-2.0, 2.0, 1.0, -1.0],
    [-1.0, 1.0, 2.0, -2.0],
    [1.0, -1.0, -2.0, 2.0],
]) / 6.0
_KY = np.array([
    [2.0, 1.0, -1.0, -2.0],
    [1.0, 2.0, -2.0, -1.0],
    [-1.0, -2.0, 2.0, 1.0],
    [-2.0, -1.0, 1.0, 2.0],
]) / 6.0

Source = Union[Callable, np.ndarray, float]


def element_stiffness(hx: float, hy: float) -> np.ndarray:
    """Q1 stiffness of one hx-by-hy cell with kappa = 1, corners counter-clockwise."""
    return (hy / hx) * _KX + (hx / hy) * _KY


@dataclass(frozen=True)
class BoundaryCondition:
    """Dirichlet data on whole edges or on grid lines; all other boundary is homogeneous Neumann."""

    kind: Literal["edges", "lines"] = "edges"
    edges: Tuple[str, ...] = EDGES
    axis: Literal["x", "y"] = "x"
    positions: Tuple[float, ...] = ()
    value: Union[Callable, float] = 0.0

    def constrained(self, mesh: StructuredMesh) -> Tuple[np.ndarray, np.ndarray]:
        if self.kind == "edges":
            nodes = mesh.boundary_nodes(self.edges)
        else:
            coords = mesh.node_x if self.axis == "x" else mesh.node_y
            tol = 1e-6 * (mesh.hx if self.axis == "x" else mesh.hy)
            lines = [np.flatnonzero(np.abs(coords - p) <= tol) for p in self.positions]
            if any(len(line) == 0 for line in lines):
                raise ValueError(f"Dirichlet lines {self.positions} are not grid lines of the mesh")
            hits = np.concatenate(lines)
            if self.axis == "x":
                i, j = np.meshgrid(hits, np.arange(mesh.ny + 1))
            else:
                i, j = np.meshgrid(np.arange(mesh.nx + 1), hits)
            nodes = np.unique(mesh.node_index(i, j).ravel())
        xy = mesh.node_coordinates()[nodes]
        if callable(self.value):
            values = np.asarray(self.value(xy[:, 0], xy[:, 1]), dtype=float)
            values = np.broadcast_to(values, (len(nodes),)).copy()
        else:
            values = np.full(len(nodes), float(self.value))
        return nodes, values


def zero_dirichlet() -> BoundaryCondition:
    return BoundaryCondition()


def dirichlet_all(value: Union[Callable, float]) -> BoundaryCondition:
    return BoundaryCondition(value=value)


@dataclass
class EllipticProblem:
    mesh: StructuredMesh
    kappa: np.ndarray
    source: Source = 1.0
    boundary: BoundaryCondition = zero_dirichlet()

    def __post_init__(self):
        self.kappa = np.broadcast_to(np.asarray(self.kappa, dtype=float), (self.mesh.n_cells,))
        if not np.all(self.kappa > 0):
            raise EllipticityError(f"kappa must be positive on every cell, min is {self.kappa.min():.3e}")


@dataclass
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    free: np.ndarray
    fixed: np.ndarray
    fixed_values: np.ndarray
    n_nodes: int
    symmetric: bool = True

    def expand(self, u_free: np.ndarray) -> np.ndarray:
        u = np.zeros(self.n_nodes)
        u[self.fixed] = self.fixed_values
        u[self.free] = u_free
        return u


def stiffness_matrix(mesh: StructuredMesh, kappa: np.ndarray) -> sp.csr_matrix:
    """Global Q1 stiffness for cellwise coefficients; the coefficient sign is not checked."""
    kappa = np.broadcast_to(np.asarray(kappa, dtype=float), (mesh.n_cells,))
    ke = element_stiffness(mesh.hx, mesh.hy)
    nodes = mesh.cell_nodes
    rows = np.repeat(nodes, 4, axis=1).ravel()
    cols = np.tile(nodes, (1, 4)).ravel()
    vals = (kappa[:, None, None] * ke[None, :, :]).ravel()
    A = sp.coo_matrix((vals, (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)).tocsr()
    return ((A + A.T) * 0.5).tocsr()


def load_vector(mesh: StructuredMesh, source: Source) -> np.ndarray:
    if callable(source):
        c = mesh.cell_centers()
        values = np.broadcast_to(np.asarray(source(c[:, 0], c[:, 1]), dtype=float), (mesh.n_cells,))
    else:
        values = np.broadcast_to(np.asarray(source, dtype=float), (mesh.n_cells,))
    contrib = np.repeat((values * mesh.cell_area * 0.25)[:, None], 4, axis=1)
    return np.bincount(mesh.cell_nodes.ravel(), weights=contrib.ravel(), minlength=mesh.n_nodes)


def apply_dirichlet(A: sp.spmatrix, f: np.ndarray, fixed: np.ndarray, values: np.ndarray,
                    symmetric: bool = True) -> SparseSystem:
    n = A.shape[0]
    if len(fixed) == 0:
        raise ValueError("pure Neumann problems are singular; constrain at least one node")
    mask = np.ones(n, dtype=bool)
    mask[fixed] = False
    free = np.flatnonzero(mask)
    A = sp.csr_matrix(A)
    A_ff = A[free][:, free].tocsr()
    rhs = f[free] - A[free][:, fixed] @ values
    return SparseSystem(A_ff, rhs, free, np.asarray(fixed), np.asarray(values, dtype=float), n, symmetric)


def assemble(problem: EllipticProblem) -> SparseSystem:
    A = stiffness_matrix(problem.mesh, problem.kappa)
    f = load_vector(problem.mesh, problem.source)
    fixed, values = problem.boundary.constrained(problem.mesh)
    return apply_dirichlet(A, f, fixed, values)


def jacobi_scale(A: sp.spmatrix) -> np.ndarray:
    d = np.abs(A.diagonal())
    d[d == 0] = 1.0
    return 1.0 / np.sqrt(d)


def scaled_residual(A: sp.spmatrix, x: np.ndarray, b: np.ndarray, scale: Optional[np.ndarray] = None) -> float:
    """Relative residual of the equilibrated system D^-1/2 A D^-1/2 y = D^-1/2 b, with x = D^-1/2 y."""
    s = jacobi_scale(A) if scale is None else scale
    norm_b = np.linalg.norm(s * b)
    r = np.linalg.norm(s * (b - A @ x))
    return float(r / norm_b) if norm_b > 0 else float(r)


def _solve_cg(system: SparseSystem, tol: float, maxiter: Optional[int]) -> np.ndarray:
    s = jacobi_scale(system.matrix)
    D = sp.diags(s)
    A = (D @ system.matrix @ D).tocsr()
    b = s * system.rhs
    try:
        ilu = spla.spilu(A.tocsc(), drop_tol=1e-4, fill_factor=10)
        M = spla.LinearOperator(A.shape, ilu.solve)
    except RuntimeError:
        M = None
    y, info = spla.cg(A, b, rtol=0.1 * tol, atol=0.0, maxiter=maxiter or 10 * A.shape[0], M=M)
    x = s * y
    residual = scaled_residual(system.matrix, x, system.rhs, s)
    if info != 0 or residual > tol:
        raise SolverNotConverged(f"CG stopped with info={info}, relative residual {residual:.3e}", residual)
    return x


def _solve_direct(system: SparseSystem, tol: float) -> np.ndarray:
    A = system.matrix
    lu = factorize(A)
    x = lu.solve(system.rhs)
    s = jacobi_scale(A)
    residual = scaled_residual(A, x, system.rhs, s)
    for _ in range(REFINEMENT_STEPS):
        if residual <= tol or not np.all(np.isfinite(x)):
            break
        x = x + lu.solve(system.rhs - A @ x)
        residual = scaled_residual(A, x, system.rhs, s)
    if not np.all(np.isfinite(x)) or residual > tol:
        raise SolverNotConverged(f"direct solve residual {residual:.3e}", residual)
    return x


def solve(system: SparseSystem, method: Literal["auto", "direct", "cg"] = "auto",
          tol: float = RESIDUAL_TOLERANCE, maxiter: Optional[int] = None) -> np.ndarray:
    """Nodal solution on all mesh nodes (Dirichlet values included)."""
    if not np.any(system.rhs):
        return system.expand(np.zeros(len(system.free)))
    if method == "auto":
        method = "direct" if (system.matrix.shape[0] <= DIRECT_SOLVE_LIMIT or not system.symmetric) else "cg"
    if method == "cg":
        x = _solve_cg(system, tol, maxiter)
    else:
        x = _solve_direct(system, tol)
    return system.expand(x)


def solve_problem(problem: EllipticProblem, method: str = "auto") -> np.ndarray:
    return solve(assemble(problem), method=method)


def factorize(matrix: sp.spmatrix):
    """Sparse LU of a free-free block, reused for several right-hand sides."""
    try:
        return spla.splu(sp.csc_matrix(matrix))
    except RuntimeError as e:
        raise SolverNotConverged(f"sparse factorization failed: {e}") from e


def energy(mesh: StructuredMesh, kappa: np.ndarray, u: np.ndarray) -> float:
    return float(u @ (stiffness_matrix(mesh, kappa) @ u))


def l2_norm(mesh: StructuredMesh, u: np.ndarray) -> float:
    return float(np.sqrt(np.sum(mesh.node_quadrature_weights() * u ** 2)))
