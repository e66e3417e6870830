"""
Reduced basis surrogates for the local upscaled matrices.

For each of the four cell solutions psi^l, snapshots on a collocation grid are
compressed by a KL expansion (method of snapshots) in the kappa_bar-weighted
energy of the target element. Online, the reduced Galerkin system A(xi) c = F(xi) is
assembled from affine blocks and S, b follow from precomputed tensors without
touching the fine mesh.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .exceptions import NotSPDError, OutOfRangeError, SolverNotConverged, UnsupportedModelError
from .fem_core import stiffness_matrix
from .msfem import LocalUpscaled, LocalUpscaler
from .random_field import LocalParametrization
from .sparse_grid import CollocationGrid
from .surrogate import RANGE_TOLERANCE, from_unit, to_unit

logger = logging.getLogger(__name__)

DROP_TOLERANCE = 1e-10


@dataclass(eq=False)
class ReducedSpace:
    mean: np.ndarray
    modes: np.ndarray
    energies: np.ndarray
    A_blocks: np.ndarray
    F_blocks: np.ndarray
    corner_values: np.ndarray

    @property
    def Q(self) -> int:
        return len(self.modes)

    def solve(self, theta: np.ndarray) -> np.ndarray:
        if self.Q == 0:
            return np.zeros(0)
        A = np.tensordot(theta, self.A_blocks, axes=1)
        F = theta @ self.F_blocks
        try:
            factor = sla.cho_factor(0.5 * (A + A.T))
        except sla.LinAlgError as e:
            raise NotSPDError(f"reduced matrix is not positive definite: {e}") from e
        return sla.cho_solve(factor, F)


@dataclass(eq=False)
class ReducedBasisLocal:
    patch_id: Tuple[int, int]
    formulation: str
    oversampled: bool
    lower: np.ndarray
    upper: np.ndarray
    spaces: List[ReducedSpace]
    S_tensors: Optional[Dict[Tuple[int, int], np.ndarray]] = None
    load_forms: Optional[List[np.ndarray]] = None
    pg_tensors: Optional[List[np.ndarray]] = None
    b_fixed: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def mode_counts(self) -> List[int]:
        return [space.Q for space in self.spaces]

    def _theta(self, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float).reshape(self.dim)
        if self.dim:
            t = to_unit(xi, self.lower, self.upper)
            if np.any(np.abs(t) > 1.0 + RANGE_TOLERANCE):
                raise OutOfRangeError(f"patch {self.patch_id}: parameter outside the training box",
                                      patch_id=self.patch_id, point=xi)
        return np.concatenate([[1.0], xi])

    def coefficients(self, xi: np.ndarray) -> List[np.ndarray]:
        theta = self._theta(xi)
        return [space.solve(theta) for space in self.spaces]

    def reconstruct(self, xi: np.ndarray) -> np.ndarray:
        """Reduced cell solutions psi^l on the sample box nodes."""
        return np.array([s.mean + c @ s.modes for s, c in zip(self.spaces, self.coefficients(xi))])

    def evaluate(self, xi: np.ndarray) -> LocalUpscaled:
        theta = self._theta(xi)
        a = [np.concatenate([[1.0], space.solve(theta)]) for space in self.spaces]
        if self.oversampled:
            corner = np.array([a[k] @ self.spaces[k].corner_values for k in range(4)])
            C = np.linalg.inv(corner)
        else:
            C = np.eye(4)
        if self.formulation == "galerkin":
            S_psi = np.empty((4, 4))
            for n in range(4):
                for m in range(4):
                    S_psi[n, m] = a[n] @ np.tensordot(theta, self.S_tensors[(n, m)], axes=1) @ a[m]
            S = C @ S_psi @ C.T
            S = 0.5 * (S + S.T)
            g = np.array([self.load_forms[m] @ a[m] for m in range(4)])
            return LocalUpscaled(S, C @ g)
        B = np.column_stack([np.tensordot(theta, self.pg_tensors[m], axes=1) @ a[m] for m in range(4)])
        return LocalUpscaled(B @ C.T, self.b_fixed.copy())

    def to_arrays(self) -> Tuple[Dict[str, np.ndarray], Dict]:
        arrays = {"lower": self.lower, "upper": self.upper}
        for k, space in enumerate(self.spaces):
            for name in ("mean", "modes", "energies", "A_blocks", "F_blocks", "corner_values"):
                arrays[f"space{k}_{name}"] = getattr(space, name)
        if self.formulation == "galerkin":
            for (n, m), tensor in self.S_tensors.items():
                arrays[f"S_{n}{m}"] = tensor
            for m, form in enumerate(self.load_forms):
                arrays[f"load_{m}"] = form
        else:
            for m, tensor in enumerate(self.pg_tensors):
                arrays[f"pg_{m}"] = tensor
            arrays["b_fixed"] = self.b_fixed
        metadata = {
            "surrogate": "reduced_basis",
            "patch_id": list(self.patch_id),
            "formulation": self.formulation,
            "oversampled": self.oversampled,
        }
        return arrays, metadata

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], metadata: Dict) -> "ReducedBasisLocal":
        spaces = [
            ReducedSpace(*(np.asarray(arrays[f"space{k}_{name}"]) for name in
                           ("mean", "modes", "energies", "A_blocks", "F_blocks", "corner_values")))
            for k in range(4)
        ]
        rb = cls(tuple(metadata["patch_id"]), metadata["formulation"], bool(metadata["oversampled"]),
                 np.asarray(arrays["lower"], dtype=float), np.asarray(arrays["upper"], dtype=float), spaces)
        if rb.formulation == "galerkin":
            rb.S_tensors = {(n, m): np.asarray(arrays[f"S_{n}{m}"]) for n in range(4) for m in range(4)}
            rb.load_forms = [np.asarray(arrays[f"load_{m}"]) for m in range(4)]
        else:
            rb.pg_tensors = [np.asarray(arrays[f"pg_{m}"]) for m in range(4)]
            rb.b_fixed = np.asarray(arrays["b_fixed"])
        return rb


def _orthonormalize(vectors: List[np.ndarray], gram: sp.spmatrix) -> np.ndarray:
    """Two-pass Gram-Schmidt in the `gram` inner product, dropping dependent vectors."""
    basis: List[np.ndarray] = []
    for v in vectors:
        w = v.copy()
        norm0 = np.sqrt(max(w @ (gram @ w), 0.0))
        if norm0 == 0.0:
            continue
        for _ in range(2):
            for z in basis:
                w -= (z @ (gram @ w)) * z
        norm = np.sqrt(max(w @ (gram @ w), 0.0))
        if norm > DROP_TOLERANCE * norm0:
            basis.append(w / norm)
    return np.array(basis).reshape(len(basis), len(vectors[0]) if vectors else 0)


def _select_count(energies: np.ndarray, dim: int, n_snapshots: int,
                  threshold: Optional[float], n_modes: Optional[int]) -> int:
    if dim == 0 or energies.size == 0 or energies[0] <= 0:
        return 0
    if n_modes is not None:
        return int(min(n_modes, n_snapshots))
    if threshold is not None:
        return int(np.sum(np.sqrt(energies / energies[0]) >= threshold))
    return int(min(3 * dim, n_snapshots))


def build_reduced_basis(param: LocalParametrization, upscaler: LocalUpscaler, training_grid: CollocationGrid,
                        threshold: Optional[float] = None, n_modes: Optional[int] = None) -> ReducedBasisLocal:
    if not param.is_affine:
        raise UnsupportedModelError(
            f"patch {param.patch.patch_id}: reduced basis needs a coefficient affine in the parameters"
        )
    if upscaler.boundary_kind != "bilinear":
        raise UnsupportedModelError("reduced basis needs parameter-independent (bilinear) boundary data")
    if training_grid.dim != param.dim:
        raise ValueError(f"training grid has dimension {training_grid.dim}, patch has {param.dim}")

    points = np.array([from_unit(t, param.lower, param.upper) for t in training_grid.points])
    weights = training_grid.quadrature_weights()
    if np.any(weights < 0):
        weights = np.full(len(points), 1.0 / len(points))
    snapshots = []
    for c, xi in enumerate(points):
        try:
            snapshots.append(upscaler.psi(param.kappa(xi))[0])
        except SolverNotConverged as e:
            raise SolverNotConverged(f"patch {param.patch.patch_id}: training solve {c} failed: {e}", e.residual) from e
    snapshots = np.array(snapshots)

    sample_mesh = upscaler.sample_mesh
    kappa_bar = param.kappa(param.center)
    gram = stiffness_matrix(sample_mesh, kappa_bar)
    element_gram = stiffness_matrix(upscaler.element_mesh, kappa_bar[upscaler.element_cells])
    terms = param.affine_terms
    K_terms = [stiffness_matrix(sample_mesh, term) for term in terms]
    K_elem = [stiffness_matrix(upscaler.element_mesh, term[upscaler.element_cells]) for term in terms]
    corner_ids = upscaler.element_nodes[upscaler.corners]

    spaces: List[ReducedSpace] = []
    element_spaces: List[np.ndarray] = []
    root_w = np.sqrt(weights)
    for k in range(4):
        mean = weights @ snapshots[:, k, :]
        D = root_w[:, None] * (snapshots[:, k, :] - mean)
        D[:, upscaler.boundary] = 0.0
        # energy of the snapshots restricted to the target element
        D_e = D[:, upscaler.element_nodes]
        C = D_e @ (element_gram @ D_e.T)
        energies, vectors = np.linalg.eigh(0.5 * (C + C.T))
        order = np.argsort(energies)[::-1]
        energies = np.clip(energies[order], 0.0, None)
        vectors = vectors[:, order]
        Q = _select_count(energies, param.dim, len(points), threshold, n_modes)
        candidates = [
            vectors[:, q] @ D / (np.sqrt(energies[q]) if energies[q] > 0 else 1.0) for q in range(Q)
        ]
        Z = _orthonormalize(candidates, gram) if Q else np.zeros((0, sample_mesh.n_nodes))
        A_blocks = np.array([Z @ (K @ Z.T) for K in K_terms]).reshape(len(terms), len(Z), len(Z))
        F_blocks = np.array([-(Z @ (K @ mean)) for K in K_terms]).reshape(len(terms), len(Z))
        V = np.vstack([mean[None, :], Z])
        spaces.append(ReducedSpace(mean, Z, energies, A_blocks, F_blocks, V[:, corner_ids]))
        element_spaces.append(V[:, upscaler.element_nodes])
        logger.debug("patch %s: reduced space %d keeps %d modes", param.patch.patch_id, k, len(Z))

    rb = ReducedBasisLocal(
        patch_id=param.patch.patch_id,
        formulation=upscaler.formulation,
        oversampled=upscaler.oversampled,
        lower=np.asarray(param.lower, dtype=float),
        upper=np.asarray(param.upper, dtype=float),
        spaces=spaces,
    )
    if upscaler.formulation == "galerkin":
        rb.S_tensors = {
            (n, m): np.array([element_spaces[n] @ (K @ element_spaces[m].T) for K in K_elem])
            for n in range(4) for m in range(4)
        }
        rb.load_forms = [Ve @ upscaler.load for Ve in element_spaces]
    else:
        rb.pg_tensors = [np.array([upscaler.test_shapes @ (K @ Ve.T) for K in K_elem]) for Ve in element_spaces]
        rb.b_fixed = upscaler.test_shapes @ upscaler.load
    return rb


def eval_reduced_basis(rb: ReducedBasisLocal, xi: np.ndarray) -> LocalUpscaled:
    return rb.evaluate(xi)
