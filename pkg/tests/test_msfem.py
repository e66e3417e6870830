import os
import sys
import unittest

import numpy as np

# Add the project root to the Python path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from stomsfem.exceptions import EllipticityError, IncompleteAssemblyError  # noqa: E402
from stomsfem.fem_core import (  # noqa: E402
    EllipticProblem,
    dirichlet_all,
    element_stiffness,
    energy,
    solve_problem,
    zero_dirichlet,
)
from stomsfem.mesh import build_meshes, coarse_to_fine_nodes  # noqa: E402
from stomsfem.models import Domain2D, GridSpec  # noqa: E402
from stomsfem.msfem import (  # noqa: E402
    CellProblemSpec,
    LocalUpscaler,
    MsFEMSolver,
    assemble_global,
    assemble_local,
    bilinear_shapes,
    solve_cell,
)


def _meshes(n=4, refine=4, eta=1.0):
    return build_meshes(Domain2D(), GridSpec(coarse_nx=n, coarse_ny=n, refine=refine, oversample_ratio=eta))


def _random_kappa(mesh, seed=0, low=0.1, high=10.0):
    return np.random.default_rng(seed).uniform(low, high, mesh.n_cells)


class TestCellProblems(unittest.TestCase):

    def test_constant_coefficient_gives_bilinear_basis(self):
        """Test that kappa = 1 reproduces the bilinear shape functions."""
        meshes = _meshes()
        upscaler = LocalUpscaler(meshes.patches[5], meshes.fine)
        basis = upscaler.basis(np.ones(len(upscaler.cells)))
        np.testing.assert_allclose(basis.phi, bilinear_shapes(upscaler.element_mesh), atol=1e-10)

    def test_constant_coefficient_oversampled_basis_is_bilinear(self):
        """Test that extraction and recombination keep the bilinear basis for constant kappa."""
        meshes = _meshes(eta=2.0)
        upscaler = LocalUpscaler(meshes.patches[5], meshes.fine, formulation="petrov_galerkin")
        self.assertTrue(upscaler.oversampled)
        basis = upscaler.basis(np.full(len(upscaler.cells), 3.0))
        np.testing.assert_allclose(basis.phi, bilinear_shapes(upscaler.element_mesh), atol=1e-10)

    def test_constant_coefficient_matrix_is_q1_element(self):
        """Test that S equals the Q1 stiffness of the coarse element when kappa = 1."""
        meshes = _meshes()
        upscaler = LocalUpscaler(meshes.patches[0], meshes.fine)
        local = upscaler.upscale(np.ones(len(upscaler.cells)))
        np.testing.assert_allclose(local.S, element_stiffness(0.25, 0.25), atol=1e-10)

    def test_basis_matches_direct_fem_solve(self):
        """Test a basis function against an independent Dirichlet solve on the element."""
        meshes = _meshes()
        patch = meshes.patches[6]
        upscaler = LocalUpscaler(patch, meshes.fine)
        kappa = _random_kappa(meshes.fine)[upscaler.cells]
        basis = upscaler.basis(kappa)
        x0, x1, y0, y1 = patch.element_box

        def corner(x, y):
            return (1 - (x - x0) / (x1 - x0)) * (1 - (y - y0) / (y1 - y0))

        oracle = solve_problem(EllipticProblem(upscaler.element_mesh, kappa, 0.0, dirichlet_all(corner)))
        np.testing.assert_allclose(basis.phi[0], oracle, atol=1e-8)

    def test_basis_is_nodal_and_a_partition_of_unity(self):
        """Test nodality at the corners and the partition of unity, with and without oversampling."""
        for eta, kind in ((1.0, "bilinear"), (2.0, "bilinear"), (1.0, "oscillatory"), (2.0, "oscillatory")):
            meshes = _meshes(eta=eta)
            kappa = _random_kappa(meshes.fine, seed=3)
            for index in (0, 5, 15):
                upscaler = LocalUpscaler(meshes.patches[index], meshes.fine, kind)
                phi = upscaler.basis(kappa[upscaler.cells]).phi
                np.testing.assert_allclose(phi[:, upscaler.corners], np.eye(4), atol=1e-10)
                np.testing.assert_allclose(phi.sum(axis=0), 1.0, atol=1e-10)

    def test_galerkin_matrix_symmetric_with_zero_row_sums(self):
        """Test symmetry and the constant kernel of a Galerkin local matrix."""
        meshes = _meshes()
        upscaler = LocalUpscaler(meshes.patches[9], meshes.fine)
        S = upscaler.upscale(_random_kappa(meshes.fine, seed=5)[upscaler.cells]).S
        scale = np.abs(S).max()
        np.testing.assert_allclose(S, S.T, atol=1e-12 * scale)
        np.testing.assert_allclose(S.sum(axis=1), 0.0, atol=1e-8 * scale)

    def test_petrov_galerkin_matrix_has_zero_row_sums(self):
        """Test that constants are in the kernel of a Petrov-Galerkin local matrix."""
        meshes = _meshes(eta=2.0)
        upscaler = LocalUpscaler(meshes.patches[9], meshes.fine, formulation="petrov_galerkin")
        S = upscaler.upscale(_random_kappa(meshes.fine, seed=6)[upscaler.cells]).S
        np.testing.assert_allclose(S.sum(axis=1), 0.0, atol=1e-8 * np.abs(S).max())

    def test_nonpositive_coefficient_is_rejected(self):
        """Test that a cell problem with negative coefficient values raises."""
        meshes = _meshes()
        upscaler = LocalUpscaler(meshes.patches[5], meshes.fine)
        kappa = np.ones(len(upscaler.cells))
        kappa[::3] = -0.5
        with self.assertRaises(EllipticityError):
            upscaler.psi(kappa)

    def test_free_functions_match_upscaler(self):
        """Test solve_cell and assemble_local against the cached upscaler."""
        meshes = _meshes(eta=2.0)
        patch = meshes.patches[5]
        upscaler = LocalUpscaler(patch, meshes.fine, formulation="petrov_galerkin")
        kappa = _random_kappa(meshes.fine, seed=4)[upscaler.cells]
        basis = solve_cell(CellProblemSpec(patch, formulation="petrov_galerkin"), kappa, meshes.fine)
        local = assemble_local(basis, upscaler.element_kappa(kappa), 1.0, "petrov_galerkin", upscaler.element_mesh)
        expected = upscaler.upscale(kappa)
        np.testing.assert_allclose(local.S, expected.S, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(local.b, np.full(4, 0.25 * 0.25 / 4))


class TestCoarseSolve(unittest.TestCase):

    def test_refine_one_equals_coarse_q1(self):
        """Test that one fine cell per element reduces MsFEM to the coarse Q1 method."""
        meshes = _meshes(n=32, refine=1)
        kappa = _random_kappa(meshes.fine, seed=7)
        U, _ = MsFEMSolver(meshes, zero_dirichlet(), 1.0).direct(kappa)
        reference = solve_problem(EllipticProblem(meshes.coarse, kappa, 1.0))
        np.testing.assert_allclose(U, reference, rtol=1e-10, atol=1e-14)

    def test_reconstruction_interpolates_coarse_values(self):
        """Test that the fine reconstruction agrees with U at the coarse nodes."""
        meshes = _meshes(eta=2.0)
        solver = MsFEMSolver(meshes, zero_dirichlet(), 1.0, formulation="petrov_galerkin")
        U, u_fine = solver.direct(_random_kappa(meshes.fine, seed=8), reconstruct=True)
        np.testing.assert_allclose(u_fine[coarse_to_fine_nodes(meshes.coarse, meshes.fine)], U)
        self.assertEqual(len(u_fine), meshes.fine.n_nodes)

    def test_coarse_energy_equals_energy_of_reconstruction(self):
        """Test that summed U^T S U over the elements equals the fine energy of u_H."""
        meshes = _meshes(n=4, refine=6)
        kappa = _random_kappa(meshes.fine, seed=10)
        solver = MsFEMSolver(meshes, zero_dirichlet(), 1.0)
        U, u_fine = solver.direct(kappa, reconstruct=True)
        locals_, _ = solver.local_matrices(kappa)
        coarse_energy = sum(U[nodes] @ local.S @ U[nodes] for nodes, local in zip(meshes.coarse.cell_nodes, locals_))
        self.assertAlmostEqual(coarse_energy / energy(meshes.fine, kappa, u_fine), 1.0, delta=1e-8)

    def test_msfem_is_close_to_fine_solution(self):
        """Test that the multiscale solution approximates the fine solution at the coarse nodes."""
        meshes = _meshes(n=8, refine=8)
        kappa = _random_kappa(meshes.fine, seed=9, low=1.0, high=2.0)
        U, _ = MsFEMSolver(meshes, zero_dirichlet(), 1.0).direct(kappa)
        fine = solve_problem(EllipticProblem(meshes.fine, kappa, 1.0))
        reference = fine[coarse_to_fine_nodes(meshes.coarse, meshes.fine)]
        self.assertLess(np.max(np.abs(U - reference)), 0.1 * np.max(np.abs(reference)))

    def test_missing_local_matrix_raises(self):
        """Test that assembly refuses an incomplete set of local contributions."""
        meshes = _meshes(n=2)
        solver = MsFEMSolver(meshes, zero_dirichlet(), 1.0)
        locals_, _ = solver.local_matrices(np.ones(meshes.fine.n_cells))
        locals_[2] = None
        with self.assertRaises(IncompleteAssemblyError):
            assemble_global(locals_, meshes.coarse, zero_dirichlet())
