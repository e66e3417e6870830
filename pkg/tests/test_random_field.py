import os
import sys
import unittest

import numpy as np
import pytest

# Add the project root to the Python path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from stomsfem.exceptions import EllipticityError, NonPSDKernelError  # noqa: E402
from stomsfem.mesh import StructuredMesh  # noqa: E402
from stomsfem.random_field import (  # noqa: E402
    CellSet,
    CovarianceKernel,
    FieldMode,
    FieldModel,
    StandardNormal,
    Uniform,
    build_local_kl,
    captured_counts,
    exp_shift,
    indicator,
    keep_count,
    keep_fraction,
    kl_field_model,
    kl_truncation_errors,
    project_many,
    project_to_local,
    sample_field,
    sample_rng,
    tanh_bounded,
)


def _dense_cells(mesh):
    """Same cells as CellSet.from_mesh but without the tensor shape, forcing the dense path."""
    cells = CellSet.from_mesh(mesh)
    return CellSet(cells.centers, cells.weights, cells.ids, shape=None)


class TestLocalKL(unittest.TestCase):

    def setUp(self):
        self.mesh = StructuredMesh(0.0, 0.0, 1.0 / 8, 1.0 / 8, 8, 8)
        self.kernel = CovarianceKernel("gaussian_anisotropic", lengths=(0.5, 0.25))

    def test_separable_matches_dense(self):
        """Test that the factorized eigenproblem agrees with the dense one."""
        separable = build_local_kl(self.kernel, CellSet.from_mesh(self.mesh), keep_count(6))
        dense = build_local_kl(self.kernel, _dense_cells(self.mesh), keep_count(6))
        np.testing.assert_allclose(separable.eigenvalues[:6], dense.eigenvalues[:6], rtol=1e-8)

    def test_modes_are_orthonormal(self):
        """Test that retained modes are orthonormal in the weighted inner product."""
        kl = build_local_kl(self.kernel, CellSet.from_mesh(self.mesh), keep_count(5))
        gram = kl.modes @ (kl.weights[:, None] * kl.modes.T)
        np.testing.assert_allclose(gram, np.eye(5), atol=1e-10)

    def test_trace_identity(self):
        """Test that the eigenvalues sum to the integrated variance."""
        kl = build_local_kl(self.kernel, CellSet.from_mesh(self.mesh), keep_fraction(0.99))
        self.assertAlmostEqual(kl.eigenvalues.sum() / kl.total_variance, 1.0, delta=1e-8)

    def test_keep_fraction_captures_requested_variance(self):
        """Test that the truncation reaches the requested fraction with the fewest modes."""
        kl = build_local_kl(self.kernel, CellSet.from_mesh(self.mesh), keep_fraction(0.95))
        self.assertGreaterEqual(kl.captured_fraction, 0.95 - 1e-12)
        shorter = kl.eigenvalues[:kl.truncation - 1].sum() / kl.eigenvalues.sum()
        self.assertLess(shorter, 0.95)

    def test_projection_inverts_synthesis(self):
        """Test that projecting a synthesized field returns its parameters."""
        kl = build_local_kl(self.kernel, CellSet.from_mesh(self.mesh), keep_count(3))
        xi = np.array([0.7, -1.2, 0.4])
        projection = project_to_local(kl.synthesize(xi), kl)
        np.testing.assert_allclose(projection.xi, xi, atol=1e-10)
        self.assertEqual(projection.skipped, [])

    def test_batched_projection_matches_single(self):
        """Test that projecting stacked fields row by row and at once agree."""
        kl = build_local_kl(self.kernel, CellSet.from_mesh(self.mesh), keep_count(4))
        rng = np.random.default_rng(8)
        deltas = np.array([kl.synthesize(rng.standard_normal(4)) for _ in range(5)])
        expected = np.array([project_to_local(delta, kl).xi for delta in deltas])
        np.testing.assert_allclose(project_many(deltas, kl), expected, atol=1e-12)

    def test_truncation_error_decreases(self):
        """Test that the reconstruction error of a random field shrinks with more modes."""
        kl = build_local_kl(self.kernel, CellSet.from_mesh(self.mesh), keep_count(8))
        delta = kl.synthesize(np.random.default_rng(3).standard_normal(8))
        errors = kl_truncation_errors(delta, kl)
        self.assertEqual(len(errors), 8)
        self.assertTrue(np.all(np.diff(errors) <= 1e-12))
        self.assertLess(errors[-1], 1e-8)

    def test_non_psd_matrix_raises(self):
        """Test that a covariance with a clearly negative eigenvalue is rejected."""
        kernel = CovarianceKernel("explicit_matrix", matrix=np.array([[1.0, 2.0], [2.0, 1.0]]))
        cells = CellSet(np.zeros((2, 2)), np.ones(2), np.arange(2))
        with self.assertRaises(NonPSDKernelError):
            build_local_kl(kernel, cells, keep_count(1))


class TestFieldModel(unittest.TestCase):

    def setUp(self):
        self.mesh = StructuredMesh(0.0, 0.0, 0.25, 0.25, 4, 4)
        box = (0.0, 1.0, 0.25, 0.5)
        self.model = FieldModel(
            mean_field=lambda x, y: np.full(np.shape(x), 0.2),
            modes=(FieldMode(indicator(box), box, Uniform(0.0, 1.0)),),
        )

    def test_sampling_is_deterministic(self):
        """Test that equal seeds give equal fields."""
        xi1, k1 = sample_field(self.model, self.mesh, sample_rng(7, 3))
        xi2, k2 = sample_field(self.model, self.mesh, sample_rng(7, 3))
        np.testing.assert_array_equal(xi1, xi2)
        np.testing.assert_array_equal(k1, k2)

    def test_streams_are_independent(self):
        """Test that stream 1 differs from stream 0 for the same index."""
        xi0, _ = sample_field(self.model, self.mesh, sample_rng(7, 3, 0))
        xi1, _ = sample_field(self.model, self.mesh, sample_rng(7, 3, 1))
        self.assertNotEqual(float(xi0[0]), float(xi1[0]))

    def test_kappa_is_affine_in_parameters(self):
        """Test the affine mode expansion on cells inside and outside the mode support."""
        kappa = self.model.kappa(self.mesh, np.array([0.5]))
        self.assertAlmostEqual(kappa[1 * 4 + 2], 0.7)
        self.assertAlmostEqual(kappa[0], 0.2)

    def test_ellipticity_bound(self):
        """Test the lower bound over the parameter box."""
        self.assertAlmostEqual(self.model.check_ellipticity(self.mesh), 0.2)

    def test_ellipticity_violation_raises(self):
        """Test that a mode that can drive the coefficient negative is rejected."""
        box = (0.0, 1.0, 0.0, 1.0)
        model = FieldModel(
            mean_field=lambda x, y: np.full(np.shape(x), 0.2),
            modes=(FieldMode(indicator(box), box, Uniform(-1.0, 1.0)),),
        )
        with self.assertRaises(EllipticityError):
            model.check_ellipticity(self.mesh)

    def test_unbounded_parameters_need_a_transform(self):
        """Test that Gaussian parameters with an identity transform are rejected."""
        box = (0.0, 1.0, 0.0, 1.0)
        model = FieldModel(mean_field=lambda x, y: np.ones(np.shape(x)),
                           modes=(FieldMode(indicator(box), box, StandardNormal()),))
        with self.assertRaises(EllipticityError):
            model.check_ellipticity(self.mesh)


def test_exp_shift_stays_above_kappa_min():
    """Test that the exponential transform keeps the coefficient above its shift."""
    transform = exp_shift(0.1)
    values = transform(np.array([-5.0, 0.0, 3.0]))
    assert np.all(values > 0.1)
    assert values[1] == pytest.approx(1.1)


def test_short_correlation_local_count_is_small():
    """Test that a 2H x 2H patch of the l2 = 1/64 kernel needs about four local terms."""
    kernel = CovarianceKernel("gaussian_anisotropic", lengths=(1.0, 1.0 / 64.0))
    h = 1.0 / 256
    patch = StructuredMesh(0.5, 0.5, h, h, 8, 8)
    kl = build_local_kl(kernel, CellSet.from_mesh(patch), keep_fraction(0.99))
    assert 3 <= kl.truncation <= 5


def test_short_correlation_global_count_is_large():
    """Test that the same kernel needs over a hundred global terms on a 256 x 256 grid."""
    kernel = CovarianceKernel("gaussian_anisotropic", lengths=(1.0, 1.0 / 64.0))
    mesh = StructuredMesh(0.0, 0.0, 1.0 / 256, 1.0 / 256, 256, 256)
    kl = build_local_kl(kernel, CellSet.from_mesh(mesh), keep_count(0))
    assert captured_counts(kl.eigenvalues, [0.99])[0] >= 100


def test_global_kl_model_is_stationary_and_gaussian():
    """Test that the KL sampler model has standard normal parameters."""
    kernel = CovarianceKernel("gaussian_anisotropic", lengths=(1.0, 0.25))
    mesh = StructuredMesh(0.0, 0.0, 1.0 / 8, 1.0 / 8, 8, 8)
    model, kl = kl_field_model(kernel, mesh, 0.99, exp_shift(0.1))
    assert model.stationary
    assert model.n_params == kl.truncation
    assert all(isinstance(mode.distribution, StandardNormal) for mode in model.modes)
    _, kappa = sample_field(model, mesh, 11)
    assert np.all(kappa > 0.1)


def test_tanh_bounded_transform():
    """Test that the bounded transform stays inside its interval and rejects an empty one."""
    values = tanh_bounded(0.5, 2.0)(np.array([-50.0, 0.0, 50.0]))
    assert np.all((values >= 0.5) & (values <= 2.0))
    assert values[1] == pytest.approx(1.25)
    mesh = StructuredMesh(0.0, 0.0, 0.5, 0.5, 2, 2)
    model = FieldModel(mean_field=lambda x, y: np.zeros(np.shape(x)), transform=tanh_bounded(2.0, 1.0))
    with pytest.raises(EllipticityError):
        model.check_ellipticity(mesh)


def test_local_counts_stay_below_global_counts():
    """Test that a patch needs fewer KL terms than the whole domain at every variance fraction."""
    kernel = CovarianceKernel("gaussian_anisotropic", lengths=(1.0, 1.0 / 64.0))
    h = 1.0 / 256
    fractions = [0.95, 0.99, 0.999]
    local = build_local_kl(kernel, CellSet.from_mesh(StructuredMesh(0.5, 0.5, h, h, 8, 8)), keep_count(0))
    domain = build_local_kl(kernel, CellSet.from_mesh(StructuredMesh(0.0, 0.0, h, h, 256, 256)), keep_count(0))
    local_counts = captured_counts(local.eigenvalues, fractions)
    global_counts = captured_counts(domain.eigenvalues, fractions)
    assert all(a < b for a, b in zip(local_counts, global_counts))
    assert local_counts == sorted(local_counts)
