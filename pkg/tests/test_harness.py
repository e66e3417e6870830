import json
import os
import sys
import tempfile
import unittest
from unittest.mock import patch

import numpy as np

# Add the project root to the Python path
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from stomsfem import artifact_store  # noqa: E402
from stomsfem.exceptions import EllipticityError, GridMismatchError, MissingArtifactError  # noqa: E402
from stomsfem.harness import Experiment, compare, online_sample, predicted_online_ratio, run, study  # noqa: E402
from stomsfem.models import (  # noqa: E402
    EstimatorSpec,
    ExperimentConfig,
    FieldSpec,
    GridSpec,
    StudySpec,
    SurrogateSpec,
)
from stomsfem.presets import get_preset  # noqa: E402
from stomsfem.surrogate import SurrogateBank  # noqa: E402

GEOMETRY = {
    "name": "two_modes",
    "mean": {"base": 1.0, "amplitude": 0.0},
    "inclusions": [],
    "modes": [
        {"kind": "channel", "box": [0.0, 1.0, 0.40, 0.45], "value": 1.0,
         "distribution": {"kind": "uniform", "low": 0.0, "high": 1.0}},
        {"kind": "inclusion", "box": [0.1, 0.2, 0.7, 0.8], "value": 1.0,
         "distribution": {"kind": "uniform", "low": 0.0, "high": 1.0}},
    ],
}


ONE_MODE = {
    "name": "one_channel",
    "mean": {"base": 1.0, "amplitude": 0.0},
    "inclusions": [],
    "modes": [
        {"kind": "channel", "box": [0.0, 1.0, 0.40, 0.45], "value": 1.0,
         "distribution": {"kind": "uniform", "low": 0.0, "high": 1.0}},
    ],
}


def write_geometry(directory, geometry=None):
    geometry = geometry or GEOMETRY
    path = os.path.join(directory, f"{geometry['name']}.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(geometry, f)
    return path


def small_config(directory, coarse=4, refine=4, eta=1.0, surrogate=None, estimator=None,
                 method="stomsfem_interp", artifact_dir=None, geometry=None, study=None):
    """Two uniform parameters (or `geometry`) on a small grid with outputs under `directory`."""
    return ExperimentConfig(
        name="two_modes",
        grid=GridSpec(coarse_nx=coarse, coarse_ny=coarse, refine=refine, oversample_ratio=eta),
        field=FieldSpec(preset="custom", geometry_file=write_geometry(directory, geometry)),
        study=study or StudySpec(),
        surrogate=surrogate or SurrogateSpec(grid_kind="tensor_chebyshev", nodes_per_dim=9),
        estimator=estimator or EstimatorSpec(kind="mc", n_samples=4, seed=11),
        method=method,
        output_dir=os.path.join(directory, "results"),
        artifact_dir=artifact_dir or os.path.join(directory, "artifacts"),
    )


class TestExperiment(unittest.TestCase):

    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.dir = self.directory.name

    def tearDown(self):
        self.directory.cleanup()

    def test_local_dimension_is_at_most_one(self):
        """Test that the fixture geometry gives each patch at most one parameter."""
        experiment = Experiment(small_config(self.dir))
        self.assertEqual(experiment.model.n_params, 2)
        self.assertEqual(max(experiment.local_dimensions()), 1)
        self.assertEqual(sum(experiment.k_m_histogram().values()), 16)

    def test_interpolated_solution_matches_direct_msfem(self):
        """Test that surrogate local matrices reproduce the direct coarse solution."""
        experiment = Experiment(small_config(self.dir))
        experiment.offline()
        for index in range(3):
            sample = experiment.sampler(index)
            U = experiment.solve_stomsfem(sample)
            reference = experiment.solve_msfem_direct(sample).values
            self.assertEqual(U.n_fallback, 0)
            self.assertLess(np.max(np.abs(U.values - reference)), 1e-5 * np.max(np.abs(reference)))

    def test_out_of_range_falls_back_to_direct_solves(self):
        """Test that every refused surrogate evaluation is replaced by a cell solve."""
        experiment = Experiment(small_config(self.dir))
        experiment.offline()
        sample = experiment.sampler(0)
        def refuse_all(key, xi):
            return np.full((len(xi), 20), np.nan), np.zeros(len(xi), dtype=bool)

        with patch.object(SurrogateBank, "evaluate_many", side_effect=refuse_all):
            result = experiment.solve_stomsfem(sample)
        self.assertEqual(result.n_fallback, 16)
        np.testing.assert_allclose(result.values, experiment.solve_msfem_direct(sample).values, rtol=1e-10)

    def test_negative_coefficient_geometry_is_rejected(self):
        """Test that a mode able to push kappa below zero fails at construction."""
        geometry = dict(ONE_MODE, name="negative_channel")
        geometry["modes"] = [dict(ONE_MODE["modes"][0], value=-2.0)]
        with self.assertRaises(EllipticityError):
            Experiment(small_config(self.dir, geometry=geometry))

    def test_surrogate_error_is_negligible_against_upscaling_error(self):
        """Test that interpolated and direct MsFEM differ far less than MsFEM and the fine solution."""
        experiment = Experiment(small_config(self.dir, refine=8))
        experiment.offline()
        for index in range(3):
            sample = experiment.sampler(index)
            direct = experiment.solve_msfem_direct(sample).values
            surrogate_error = np.max(np.abs(experiment.solve_stomsfem(sample).values - direct))
            upscaling_error = np.max(np.abs(direct - experiment.solve_fine(sample).values))
            self.assertLess(surrogate_error, 1e-3 * upscaling_error)

    def test_one_fine_cell_per_element_matches_fine_fem(self):
        """Test that direct MsFEM equals the fine solution when refine is one."""
        experiment = Experiment(small_config(self.dir, coarse=8, refine=1, method="msfem_direct"))
        sample = experiment.sampler(2)
        np.testing.assert_allclose(experiment.solve_msfem_direct(sample).values,
                                   experiment.solve_fine(sample).values, rtol=1e-10, atol=1e-14)

    def test_two_level_correction_vanishes_without_scale_gap(self):
        """Test that the correction level has no variance when both levels coincide."""
        config = small_config(self.dir, coarse=8, refine=1, method="msfem_direct",
                              estimator=EstimatorSpec(kind="two_level_mc", n_samples=5, n_fine_samples=3))
        report = Experiment(config).estimate()
        self.assertLess(report.level_variances["correction"], 1e-20)
        self.assertEqual(report.n_fine_samples, 3)

    def test_two_level_correction_variance_is_small_with_scale_gap(self):
        """Test that the correction level varies far less than the fine level when H / h = 4."""
        config = small_config(self.dir, coarse=8, refine=4, method="msfem_direct",
                              estimator=EstimatorSpec(kind="two_level_mc", n_samples=5, n_fine_samples=12))
        variances = Experiment(config).estimate().level_variances
        self.assertGreater(variances["fine"], 0.0)
        self.assertLess(variances["correction"], 0.1 * variances["fine"])

    def test_collocation_reuses_surrogate_nodes(self):
        """Test that collocation with nested surrogates reads node values without interpolation."""
        config = small_config(self.dir, surrogate=SurrogateSpec(grid_kind="sparse_clenshaw_curtis", level=2),
                              estimator=EstimatorSpec(kind="sc", level=2))
        experiment = Experiment(config)
        interp = experiment.estimate()
        direct = experiment.estimate(method="msfem_direct")
        np.testing.assert_allclose(interp.mean, direct.mean, rtol=1e-10, atol=1e-14)
        self.assertEqual(interp.n_samples, direct.n_samples)

    def test_collocation_with_chebyshev_surrogates_is_a_grid_mismatch(self):
        """Test that collocation keys missing from the offline grids are refused."""
        config = small_config(self.dir, estimator=EstimatorSpec(kind="sc", level=2))
        with self.assertRaises(GridMismatchError):
            Experiment(config).estimate()


class TestRun(unittest.TestCase):

    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.dir = self.directory.name

    def tearDown(self):
        self.directory.cleanup()

    def test_outputs_and_artifact_reuse(self):
        """Test that a second run loads the stored surrogates and writes identical means."""
        config = small_config(self.dir)
        report, ledger, outputs = run(config, "first")
        self.assertEqual(set(outputs), {"mean", "std", "cost", "summary"})
        self.assertGreater(ledger.counts["offline_cell_solves"], 0)
        with open(outputs["mean"], "rb") as f:
            first = f.read()
        _, ledger, outputs = run(config, "second")
        self.assertEqual(ledger.counts.get("offline_cell_solves", 0), 0)
        with open(outputs["mean"], "rb") as f:
            self.assertEqual(f.read(), first)
        with open(outputs["summary"], "r", encoding="utf-8") as f:
            summary = json.load(f)
        self.assertEqual(summary["n_samples"], 4)
        self.assertEqual(summary["config"], "two_modes")

    def test_online_only_offline_stage_reads_through_require_artifact(self):
        """Test that the offline stage uses the strict artifact lookup when artifacts are required."""
        config = small_config(self.dir, artifact_dir=os.path.join(self.dir, "empty"))
        with patch.object(artifact_store, "require_artifact", wraps=artifact_store.require_artifact) as required:
            with self.assertRaises(MissingArtifactError):
                Experiment(config).offline(require_artifacts=True)
        required.assert_called_once()

    def test_online_only_run_needs_artifacts(self):
        """Test that requiring artifacts in an empty directory fails."""
        config = small_config(self.dir, artifact_dir=os.path.join(self.dir, "empty"))
        with self.assertRaises(MissingArtifactError):
            run(config, require_artifacts=True, write=False)
        with self.assertRaises(MissingArtifactError):
            online_sample(config, 0, write=False)

    def test_compare_against_direct_msfem(self):
        """Test that the surrogate error against direct MsFEM is small and tabulated."""
        config = small_config(self.dir)
        report, reference, rows, _, outputs = compare(config, against="msfem_direct")
        method, n, error = rows[0]
        self.assertEqual((method, n), ("stomsfem_interp", 4))
        self.assertLess(error, 1e-5)
        self.assertTrue(os.path.exists(outputs["errors"]))

    def test_reduced_basis_method(self):
        """Test the reduced-basis pipeline against direct MsFEM on the same samples."""
        config = small_config(self.dir, method="stomsfem_rb",
                              surrogate=SurrogateSpec(grid_kind="tensor_chebyshev", nodes_per_dim=9, rb_threshold=1e-8))
        _, _, rows, _, _ = compare(config, against="msfem_direct", write=False)
        self.assertLess(rows[0][2], 1e-4)


class TestTranslationReuse(unittest.TestCase):

    def test_stationary_field_shares_surrogates_by_geometry(self):
        """Test that translated oversampled patches share one surrogate per geometry class."""
        with tempfile.TemporaryDirectory() as directory:
            base = get_preset("gaussian_short_corr")
            config = base.model_copy(update={
                "grid": GridSpec(coarse_nx=8, coarse_ny=8, refine=4, oversample_ratio=2.0),
                "field": base.field.model_copy(update={"correlation_lengths": (1.0, 0.125)}),
                "surrogate": SurrogateSpec(grid_kind="sparse_clenshaw_curtis", level=1),
                "artifact_dir": directory,
            })
            experiment = Experiment(config)
            self.assertTrue(experiment.reuses_translations)
            bank = experiment.offline()
            self.assertEqual(len(bank), 9)
            self.assertEqual(len(bank.patch_keys), 64)
            result = experiment.solve_stomsfem(experiment.sampler(0))
            self.assertTrue(np.all(np.isfinite(result.values)))

    def test_batched_projection_matches_per_patch_projection(self):
        """Test that one projection per shared KL basis equals projecting patch by patch."""
        with tempfile.TemporaryDirectory() as directory:
            base = get_preset("gaussian_short_corr")
            config = base.model_copy(update={
                "grid": GridSpec(coarse_nx=8, coarse_ny=8, refine=4, oversample_ratio=2.0),
                "field": base.field.model_copy(update={"correlation_lengths": (1.0, 0.125)}),
                "artifact_dir": directory,
            })
            experiment = Experiment(config)
            sample = experiment.sampler(1)
            batched = experiment.local_parameters(sample)
            for param, xi in zip(experiment.parametrizations(), batched):
                np.testing.assert_allclose(xi, param.local_params(sample), rtol=1e-12, atol=1e-12)
            self.assertLess(len(experiment.projection_classes()), len(batched))


class TestStudy(unittest.TestCase):

    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.dir = self.directory.name

    def tearDown(self):
        self.directory.cleanup()

    def test_collocation_rates_beat_monte_carlo(self):
        """Test the rate ordering Clenshaw-Curtis > trapezoidal > MC on a one-parameter problem."""
        config = small_config(self.dir, refine=2, method="msfem_direct", geometry=ONE_MODE,
                              study=StudySpec(mc_samples=(8, 32, 128), replicates=8, levels=(0, 1, 2, 3),
                                              reference_level=6, refines=()))
        rows, rates, table, outputs = study(config, "rates", parts=("rates",))
        self.assertEqual(table, [])
        self.assertEqual(len(rows), 3 + 4 + 4)
        self.assertEqual([n for method, n, _ in rows if method == "sc_trapezoidal"], [1, 3, 5, 9])
        self.assertGreater(rates["sc_clenshaw_curtis"]["rate"], rates["sc_trapezoidal"]["rate"])
        self.assertGreater(rates["sc_trapezoidal"]["rate"], rates["mc"]["rate"])
        self.assertGreater(rates["mc"]["rate"], 0.2)
        self.assertLess(rates["mc"]["rate"], 0.9)
        with open(outputs["errors"], "r", encoding="utf-8") as f:
            self.assertEqual(len(f.read().splitlines()), 1 + len(rows))
        with open(outputs["rates"], "r", encoding="utf-8") as f:
            self.assertEqual(set(json.load(f)), {"mc", "sc_clenshaw_curtis", "sc_trapezoidal"})

    def test_online_cost_ratio_grows_with_refine(self):
        """Test that interpolated samples get relatively cheaper than direct MsFEM as H / h grows."""
        config = small_config(self.dir, geometry=ONE_MODE,
                              surrogate=SurrogateSpec(grid_kind="tensor_chebyshev", nodes_per_dim=5),
                              study=StudySpec(refines=(4, 16), timing_samples=3))
        _, _, table, outputs = study(config, "cost", parts=("cost",))
        self.assertEqual([row["refine"] for row in table], [4, 16])
        self.assertGreater(table[1]["ratio"], table[0]["ratio"])
        self.assertGreater(table[1]["ratio"], 1.0)
        self.assertTrue(os.path.exists(outputs["cost_table"]))
        self.assertNotIn("errors", outputs)

    def test_unknown_part_raises(self):
        """Test that only the rate and cost sweeps can be requested."""
        with self.assertRaises(ValueError):
            study(small_config(self.dir), parts=("plots",))


def test_patch_study_local_dimensions_are_small():
    """Test that most patches of the patch study see two or three parameters."""
    histogram = Experiment(get_preset("patch_study")).k_m_histogram()
    assert sum(histogram.values()) == 256
    assert (histogram.get(2, 0) + histogram.get(3, 0)) / 256 >= 0.7


def test_predicted_online_ratio_decreases_with_scale_ratio():
    """Test that a larger scale gap makes the online stage relatively cheaper."""
    for method in ("stomsfem_interp", "stomsfem_rb"):
        ratios = [predicted_online_ratio(method, r, 2, 1.2) for r in (4.0, 8.0, 16.0)]
        assert ratios[0] > ratios[1] > ratios[2]
