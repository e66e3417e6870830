"""
Experiment orchestration: offline surrogate construction, per-sample coarse
solvers for every method, the stochastic estimators and cost accounting.
"""
from __future__ import annotations

import logging
import math
import time
import uuid
from collections import Counter
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import artifact_store
from .exceptions import UnsupportedModelError
from .fem_core import EllipticProblem, solve_problem
from .mesh import Meshes, StructuredMesh, attach_active_params, build_meshes, coarse_to_fine_nodes
from .models import CostLedger, EstimatorReport, ExperimentConfig
from .msfem import LocalUpscaled, MsFEMSolver
from .presets import build_boundary, build_field_model, build_source
from .random_field import (
    FieldSample,
    LocalParametrization,
    affine_parametrization,
    draw_sample,
    keep_fraction,
    kl_parametrization,
    project_many,
    sample_rng,
)
from .reduced_basis import ReducedBasisLocal, build_reduced_basis
from .reporting import (
    write_cost_json,
    write_cost_table_csv,
    write_errors_csv,
    write_field_csv,
    write_summary_json,
)
from .sparse_grid import make_grid
from .stochastic import (
    SampleResult,
    convergence_rate,
    l2_difference,
    run_mc,
    run_sc,
    run_two_level_mc,
)
from .surrogate import InterpolantLocal, SurrogateBank, build_interpolant, from_unit

logger = logging.getLogger(__name__)

ESTIMATOR_ALIASES = {"mc": "mc", "mc2": "two_level_mc", "sc": "sc",
                     "two_level_mc": "two_level_mc"}
SURROGATE_METHODS = ("stomsfem_interp", "stomsfem_rb")


def predicted_online_ratio(method: str, scale_ratio: float, k_m: int, gamma: float,
                           n_modes: Optional[int] = None, d: int = 2) -> float:
    """Online cost per sample relative to a fine solve: (log(H/h))^K_m / (H/h)^(gamma d), or K_m Q^2 / (H/h)^(gamma d)."""
    denominator = scale_ratio ** (gamma * d)
    if method == "stomsfem_rb":
        q = n_modes if n_modes is not None else 3 * k_m
        return k_m * q * q / denominator
    return math.log(scale_ratio) ** k_m / denominator


def measure_gamma(domain_width: float = 1.0, sizes: Sequence[int] = (32, 64, 128), repeats: int = 1) -> float:
    """Fitted exponent of fine-solve time against the number of unknowns."""
    dofs, times = [], []
    for n in sizes:
        mesh = StructuredMesh(0.0, 0.0, domain_width / n, domain_width / n, n, n)
        best = float("inf")
        for _ in range(repeats):
            start = time.perf_counter()
            solve_problem(EllipticProblem(mesh, np.ones(mesh.n_cells), 1.0))
            best = min(best, time.perf_counter() - start)
        dofs.append(mesh.n_nodes)
        times.append(max(best, 1e-9))
    slope, _ = np.polyfit(np.log(dofs), np.log(times), 1)
    return float(slope)


class Experiment:
    """One configured problem: meshes, field model and the per-method sample solvers."""

    def __init__(self, config: ExperimentConfig, correlation_id: Optional[str] = None,
                 artifact_dir: Optional[str] = None):
        self.config = config
        self.correlation_id = correlation_id
        self.log_prefix = f"[{correlation_id}] " if correlation_id else ""
        self.artifact_dir = artifact_dir or config.artifact_dir
        self.ledger = CostLedger()

        start = time.perf_counter()
        meshes = build_meshes(config.domain, config.grid)
        self.model, self.kernel = build_field_model(config, meshes.fine)
        self.kappa_lower = self.model.check_ellipticity(meshes.fine)
        patches = meshes.patches if self.kernel is not None else attach_active_params(meshes.patches, self.model)
        self.meshes = Meshes(meshes.coarse, meshes.fine, patches)
        self.source = build_source(config.problem)
        self.boundary = build_boundary(config.problem)
        self.formulation = config.formulation
        self.solver = MsFEMSolver(self.meshes, self.boundary, self.source,
                                  config.msfem.boundary_kind, self.formulation)
        self.node_weights = self.meshes.coarse.node_quadrature_weights()
        self.coarse_in_fine = coarse_to_fine_nodes(self.meshes.coarse, self.meshes.fine)
        self._params: Optional[List[LocalParametrization]] = None
        self._bank: Optional[SurrogateBank] = None
        self._projection_classes: Optional[List[Tuple[List[int], np.ndarray, np.ndarray, object]]] = None
        self._fixed_loads: Optional[List[np.ndarray]] = None
        self.ledger.add_time("setup", time.perf_counter() - start)
        logger.info("%sexperiment '%s': %dx%d coarse, refine %d, eta %.1f, %s, %d parameters",
                    self.log_prefix, config.name, config.grid.coarse_nx, config.grid.coarse_ny,
                    config.grid.refine, config.grid.oversample_ratio, self.formulation, self.model.n_params)

    @property
    def fine(self) -> StructuredMesh:
        return self.meshes.fine

    @property
    def coarse(self) -> StructuredMesh:
        return self.meshes.coarse

    @property
    def reuses_translations(self) -> bool:
        return self.model.stationary and self.formulation == "petrov_galerkin"

    def share_key(self, patch_index: int) -> Tuple:
        patch = self.meshes.patches[patch_index]
        if self.reuses_translations:
            return ("geometry",) + patch.geometry_key()
        return ("patch",) + tuple(patch.patch_id)

    def parametrizations(self) -> List[LocalParametrization]:
        if self._params is not None:
            return self._params
        field = self.config.field
        params = []
        shared_kl: Dict[Tuple, object] = {}
        mean_beta = self.model.mean_values(self.fine) if self.kernel is not None else None
        for m, patch in enumerate(self.meshes.patches):
            if self.kernel is None:
                params.append(affine_parametrization(patch, self.model, self.fine, field.gaussian_box))
                continue
            key = self.share_key(m)
            param = kl_parametrization(patch, self.kernel, self.fine, keep_fraction(field.keep_fraction),
                                       self.model.transform, mean_beta, field.gaussian_box,
                                       local_kl=shared_kl.get(key))
            shared_kl[key] = param.local_kl
            params.append(param)
        self._params = params
        return params

    def local_dimensions(self) -> List[int]:
        return [p.dim for p in self.parametrizations()]

    def k_m_histogram(self) -> Dict[int, int]:
        return dict(sorted(Counter(self.local_dimensions()).items()))

    # offline

    def fingerprint(self) -> str:
        payload = self.config.model_dump(include={"domain", "grid", "field", "msfem", "surrogate"}, mode="json")
        payload["method"] = self.config.method
        payload["formulation"] = self.formulation
        if self.formulation == "galerkin":
            payload["source"] = self.config.problem.source
        return artifact_store.fingerprint(payload)

    def _artifact_key(self, share_key: Tuple) -> str:
        kind = "rb" if self.config.method == "stomsfem_rb" else "interp"
        return f"{kind}_{self.fingerprint()[:16]}_" + "_".join(str(v) for v in share_key)

    def _build_surrogate(self, m: int):
        param = self.parametrizations()[m]
        upscaler = self.solver.upscalers[m]
        spec = self.config.surrogate
        if self.config.method == "stomsfem_rb":
            grid_kind = spec.grid_kind if spec.grid_kind != "adaptive_clenshaw_curtis" else "sparse_clenshaw_curtis"
            training = make_grid(grid_kind, param.dim, spec.nodes_per_dim, spec.level)
            self.ledger.count("offline_cell_solves", len(training))
            return build_reduced_basis(param, upscaler, training, spec.rb_threshold, spec.rb_modes)
        surrogate = build_interpolant(param, upscaler, spec)
        self.ledger.count("offline_cell_solves", len(surrogate.grid))
        return surrogate

    def offline(self, require_artifacts: bool = False) -> SurrogateBank:
        if self.config.method not in SURROGATE_METHODS:
            raise UnsupportedModelError(f"method '{self.config.method}' has no offline stage")
        if self._bank is not None:
            return self._bank
        start = time.perf_counter()
        bank = SurrogateBank()
        fp = self.fingerprint()
        hits = 0
        surrogate_cls = ReducedBasisLocal if self.config.method == "stomsfem_rb" else InterpolantLocal
        logger.info("%soffline stage: %d patches", self.log_prefix, len(self.meshes.patches))
        for m in range(len(self.meshes.patches)):
            key = self.share_key(m)
            bank.patch_keys.append(key)
            if key in bank.surrogates:
                continue
            artifact_key = self._artifact_key(key)
            if require_artifacts:
                loaded = artifact_store.require_artifact(artifact_key, fp, self.artifact_dir)
            else:
                loaded = artifact_store.load_artifact(artifact_key, fp, self.artifact_dir)
            if loaded is not None:
                bank.surrogates[key] = surrogate_cls.from_arrays(*loaded)
                hits += 1
                continue
            surrogate = self._build_surrogate(m)
            arrays, metadata = surrogate.to_arrays()
            artifact_store.save_artifact(artifact_key, arrays, fp, metadata, self.artifact_dir)
            bank.surrogates[key] = surrogate
        elapsed = time.perf_counter() - start
        self.ledger.add_time("offline", elapsed)
        self.ledger.count("surrogates", len(bank))
        logger.info("%soffline stage done: %d surrogates (%d from cache) in %.2fs",
                    self.log_prefix, len(bank), hits, elapsed)
        self._bank = bank
        return bank

    # online

    def sampler(self, index: int, stream: int = 0) -> FieldSample:
        return draw_sample(self.model, self.fine, sample_rng(self.config.estimator.seed, index, stream))

    def replicate_sampler(self, replicate: int) -> Callable[[int, int], FieldSample]:
        """Sampler of an independent estimator replicate; replicate 0 is `sampler`."""
        seed = self.config.estimator.seed + replicate
        return lambda index, stream=0: draw_sample(self.model, self.fine, sample_rng(seed, index, stream))

    def _fixed_load(self, m: int) -> np.ndarray:
        if self._fixed_loads is None:
            self._fixed_loads = [u.test_shapes @ u.load for u in self.solver.upscalers]
        return self._fixed_loads[m]

    def _with_fixed_load(self, m: int, local: LocalUpscaled) -> LocalUpscaled:
        if self.formulation == "petrov_galerkin":
            return LocalUpscaled(local.S, self._fixed_load(m))
        return local

    def _direct_local(self, m: int, xi_m: np.ndarray) -> LocalUpscaled:
        param = self.parametrizations()[m]
        return self.solver.upscalers[m].upscale(param.kappa(xi_m))

    def projection_classes(self) -> List[Tuple[List[int], np.ndarray, np.ndarray, object]]:
        """(patch indices, stacked sample-box cells, stacked mean, shared local KL) per KL basis."""
        if self._projection_classes is None:
            params = self.parametrizations()
            members: Dict[int, List[int]] = {}
            for m, param in enumerate(params):
                members.setdefault(id(param.local_kl), []).append(m)
            self._projection_classes = [
                (ids, np.array([params[m].cells for m in ids]), np.array([params[m].mean for m in ids]),
                 params[ids[0]].local_kl)
                for ids in members.values()
            ]
        return self._projection_classes

    def local_parameters(self, sample: FieldSample) -> List[np.ndarray]:
        """xi_m for every patch; KL projections run as one product per shared basis."""
        params = self.parametrizations()
        if self.kernel is None:
            return [param.local_params(sample) for param in params]
        xi: List[np.ndarray] = [np.zeros(0)] * len(params)
        for ids, cells, mean, local_kl in self.projection_classes():
            rows = project_many(sample.beta[cells] - mean, local_kl)
            for r, m in enumerate(ids):
                xi[m] = rows[r]
        return xi

    def surrogate_locals(self, sample: FieldSample) -> Tuple[List[LocalUpscaled], int]:
        bank = self.offline()
        xi = self.local_parameters(sample)
        locals_: List[Optional[LocalUpscaled]] = [None] * len(xi)
        fallbacks = 0
        for key, ids in bank.groups().items():
            points = np.array([xi[m] for m in ids]).reshape(len(ids), len(xi[ids[0]]))
            rows, inside = bank.evaluate_many(key, points)
            for r, m in enumerate(ids):
                if inside[r]:
                    local = LocalUpscaled.from_vector(rows[r])
                else:
                    logger.debug("%spatch %s: parameters outside the surrogate box; falling back to a direct cell solve",
                                 self.log_prefix, self.meshes.patches[m].patch_id)
                    local = self._direct_local(m, xi[m])
                    fallbacks += 1
                locals_[m] = self._with_fixed_load(m, local)
        return locals_, fallbacks

    def solve_fine(self, sample: FieldSample) -> SampleResult:
        u = solve_problem(EllipticProblem(self.fine, sample.kappa, self.source, self.boundary))
        return SampleResult(u[self.coarse_in_fine])

    def solve_msfem_direct(self, sample: FieldSample) -> SampleResult:
        U, _ = self.solver.direct(sample.kappa)
        return SampleResult(U)

    def solve_stomsfem(self, sample: FieldSample) -> SampleResult:
        locals_, fallbacks = self.surrogate_locals(sample)
        U, _ = self.solver.coarse_solve(locals_)
        return SampleResult(U, fallbacks)

    def sample_solver(self, method: Optional[str] = None) -> Callable[[FieldSample], SampleResult]:
        method = method or self.config.method
        if method == "fine_fem":
            return self.solve_fine
        if method == "msfem_direct":
            return self.solve_msfem_direct
        return self.solve_stomsfem

    # collocation

    def _global_box(self) -> Tuple[np.ndarray, np.ndarray]:
        if any(not mode.distribution.bounded for mode in self.model.modes):
            raise UnsupportedModelError("stochastic collocation needs bounded (uniform) parameters")
        boxes = np.array([mode.distribution.box() for mode in self.model.modes]).reshape(self.model.n_params, 2)
        return boxes[:, 0], boxes[:, 1]

    def collocation_node_solver(self, method: Optional[str] = None, lookup: bool = True):
        """Solver at collocation nodes; with `lookup` the interpolation method reads offline node values."""
        method = method or self.config.method
        lower, upper = self._global_box()
        params = self.parametrizations()

        def node_solver(t: np.ndarray, key: Tuple[int, ...]) -> SampleResult:
            xi = from_unit(t, lower, upper) if len(t) else np.zeros(0)
            if method == "stomsfem_interp" and lookup:
                bank = self.offline()
                locals_ = []
                for m, param in enumerate(params):
                    local_key = tuple(key[k] for k in param.param_ids)
                    locals_.append(self._with_fixed_load(m, bank.lookup(m, local_key)))
                U, _ = self.solver.coarse_solve(locals_)
                return SampleResult(U)
            beta = self.model.beta(self.fine, xi)
            sample = FieldSample(xi, beta, self.model.transform(beta))
            return self.sample_solver(method)(sample)

        return node_solver

    # estimators

    def functional(self) -> Callable[[np.ndarray], float]:
        weights = self.node_weights
        return lambda field: float(np.sqrt(np.sum(weights * field ** 2)))

    def estimate(self, kind: Optional[str] = None, method: Optional[str] = None) -> EstimatorReport:
        spec = self.config.estimator
        requested = kind or spec.kind
        kind = ESTIMATOR_ALIASES.get(requested)
        if kind is None:
            raise ValueError(f"unknown estimator '{requested}'")
        method = method or self.config.method
        functional = self.functional() if spec.quantity == "functional" else None
        if method in SURROGATE_METHODS:
            if method != self.config.method:
                raise UnsupportedModelError(f"surrogates were configured for '{self.config.method}', not '{method}'")
            self.offline()
        common = dict(workers=self.config.workers, node_weights=self.node_weights,
                      functional=functional, method=method, log_prefix=self.log_prefix)
        if kind == "sc":
            grid = make_grid("sparse_trapezoidal" if spec.rule == "trapezoidal" else "sparse_clenshaw_curtis",
                             self.model.n_params, level=spec.level)
            report = run_sc(spec, grid, self.collocation_node_solver(method), **common)
        elif kind == "two_level_mc":
            report = run_two_level_mc(spec, self.sampler, self.sample_solver(method), self.solve_fine, **common)
        else:
            report = run_mc(spec, self.sampler, self.sample_solver(method), **common)
        self.ledger.add_time("online", report.timings.get("online", 0.0))
        self.ledger.count("samples", report.n_samples)
        self.ledger.count("fallback_solves", report.n_fallback)
        if report.n_samples:
            self.ledger.online_per_sample = report.timings.get("online", 0.0) / report.n_samples
        return report

    # cost

    def measure_fine_solve(self, repeats: int = 1) -> float:
        kappa = self.model.kappa(self.fine, self.model.mean_parameters())
        best = float("inf")
        for _ in range(repeats):
            start = time.perf_counter()
            solve_problem(EllipticProblem(self.fine, kappa, self.source, self.boundary))
            best = min(best, time.perf_counter() - start)
        self.ledger.mu = best
        return best

    def finalize_ledger(self, measure_gamma_sizes: Optional[Sequence[int]] = None) -> CostLedger:
        ledger = self.ledger
        if ledger.mu is None:
            self.measure_fine_solve()
        if "offline" in ledger.stages:
            ledger.n_off = ledger.stages["offline"] / ledger.mu
        if ledger.online_per_sample is not None:
            ledger.R = ledger.online_per_sample / ledger.mu
        if measure_gamma_sizes:
            ledger.gamma = measure_gamma(self.config.domain.width, measure_gamma_sizes)
        return ledger

    def predicted_ratio(self) -> Optional[float]:
        if self.ledger.gamma is None or self._params is None:
            return None
        k_m = int(round(np.mean(self.local_dimensions()))) if self._params else 0
        n_modes = self.config.surrogate.rb_modes
        return predicted_online_ratio(self.config.method, float(self.config.grid.refine), k_m,
                                      self.ledger.gamma, n_modes)


def _write_outputs(experiment: Experiment, report: EstimatorReport, output_dir: Path,
                   extra: Optional[Dict] = None) -> Dict[str, str]:
    output_dir.mkdir(parents=True, exist_ok=True)
    coords = experiment.coarse.node_coordinates()
    outputs = {
        "mean": str(write_field_csv(output_dir / "mean.csv", coords, report.mean)),
        "std": str(write_field_csv(output_dir / "std.csv", coords, np.sqrt(np.clip(report.variance, 0.0, None)))),
        "cost": str(write_cost_json(output_dir / "cost.json", experiment.ledger, experiment.predicted_ratio())),
    }
    summary = report.summary()
    summary["config"] = experiment.config.name
    summary["k_m_histogram"] = {str(k): v for k, v in experiment.k_m_histogram().items()}
    summary.update(extra or {})
    outputs["summary"] = str(write_summary_json(output_dir / "summary.json", summary))
    return outputs


def run(config: ExperimentConfig, correlation_id: Optional[str] = None, estimator: Optional[str] = None,
        require_artifacts: bool = False, write: bool = True,
        measure_gamma_sizes: Optional[Sequence[int]] = None):
    """Offline stage (when the method has one), then the estimator; returns (report, ledger, outputs)."""
    correlation_id = correlation_id or uuid.uuid4().hex[:8]
    experiment = Experiment(config, correlation_id)
    if config.method in SURROGATE_METHODS:
        experiment.offline(require_artifacts=require_artifacts)
    report = experiment.estimate(estimator)
    ledger = experiment.finalize_ledger(measure_gamma_sizes)
    outputs = _write_outputs(experiment, report, Path(config.output_dir)) if write else {}
    return report, ledger, outputs


def compare(config: ExperimentConfig, against: str = "fine_fem", correlation_id: Optional[str] = None,
            estimator: Optional[str] = None, write: bool = True):
    """Runs config.method and `against` on the same samples; errors are relative L2 differences of the means."""
    correlation_id = correlation_id or uuid.uuid4().hex[:8]
    experiment = Experiment(config, correlation_id)
    report = experiment.estimate(estimator)
    reference = experiment.estimate(estimator, method=against)
    weights = experiment.node_weights
    norm = l2_difference(reference.mean, np.zeros_like(reference.mean), weights)
    error = l2_difference(report.mean, reference.mean, weights) / (norm if norm > 0 else 1.0)
    rows = [(config.method, report.n_samples, error)]
    ledger = experiment.finalize_ledger()
    outputs = {}
    if write:
        output_dir = Path(config.output_dir)
        outputs = _write_outputs(experiment, report, output_dir, {"against": against, "relative_error": error})
        outputs["errors"] = str(write_errors_csv(output_dir / "errors.csv", rows))
    logger.info("[%s] %s vs %s: relative mean error %.3e", correlation_id, config.method, against, error)
    return report, reference, rows, ledger, outputs


def online_sample(config: ExperimentConfig, index: int = 0, correlation_id: Optional[str] = None,
                  require_artifacts: bool = True, write: bool = True):
    """One coarse sample solution for sample `index` of stream 0."""
    experiment = Experiment(config, correlation_id)
    if config.method in SURROGATE_METHODS:
        experiment.offline(require_artifacts=require_artifacts)
    start = time.perf_counter()
    result = experiment.sample_solver()(experiment.sampler(index))
    experiment.ledger.add_time("online", time.perf_counter() - start)
    path = None
    if write:
        output_dir = Path(config.output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        path = write_field_csv(output_dir / f"sample_{index}.csv", experiment.coarse.node_coordinates(), result.values)
    return result, path


STUDY_RULES = (("sc_clenshaw_curtis", "sparse_clenshaw_curtis"), ("sc_trapezoidal", "sparse_trapezoidal"))


def _best_time_per_sample(solver: Callable[[FieldSample], SampleResult], samples: Sequence[FieldSample]) -> float:
    solver(samples[0])
    best = float("inf")
    for sample in samples:
        start = time.perf_counter()
        solver(sample)
        best = min(best, time.perf_counter() - start)
    return best


def _rate_sweep(config: ExperimentConfig, correlation_id: str):
    """Mean-field errors of MC and both sparse-grid rules against a high-level Clenshaw-Curtis reference."""
    spec = config.study
    experiment = Experiment(config.model_copy(update={"method": spec.rate_method}), correlation_id)
    weights = experiment.node_weights
    dim = experiment.model.n_params
    common = dict(workers=config.workers, node_weights=weights, log_prefix=experiment.log_prefix)
    node_solver = experiment.collocation_node_solver(spec.rate_method, lookup=False)
    reference_grid = make_grid("sparse_clenshaw_curtis", dim, level=spec.reference_level)
    reference = run_sc(config.estimator, reference_grid, node_solver, method="reference", **common).mean
    norm = l2_difference(reference, np.zeros_like(reference), weights) or 1.0

    def relative(mean: np.ndarray) -> float:
        return l2_difference(mean, reference, weights) / norm

    rows: List[Tuple[str, int, float]] = []
    solver = experiment.sample_solver(spec.rate_method)
    for n in spec.mc_samples:
        estimator = config.estimator.model_copy(update={"n_samples": n})
        squared = []
        for r in range(spec.replicates):
            report = run_mc(estimator, experiment.replicate_sampler(r), solver, method="mc", **common)
            squared.append(relative(report.mean) ** 2)
        rows.append(("mc", n, float(np.sqrt(np.mean(squared)))))
    for name, kind in STUDY_RULES:
        for level in spec.levels:
            grid = make_grid(kind, dim, level=level)
            report = run_sc(config.estimator, grid, node_solver, method=name, **common)
            rows.append((name, len(grid), relative(report.mean)))

    rates: Dict[str, Dict[str, float]] = {}
    for name in ("mc",) + tuple(name for name, _ in STUDY_RULES):
        ns = [n for method, n, _ in rows if method == name]
        errors = [max(error, np.finfo(float).tiny) for method, _, error in rows if method == name]
        rate, r2 = convergence_rate(ns, errors)
        rates[name] = {"rate": rate, "r2": r2}
        logger.info("[%s] %s: rate %.3f (R^2 %.3f) over N = %s", correlation_id, name, rate, r2, ns)
    return rows, rates


def _cost_sweep(config: ExperimentConfig, correlation_id: str) -> List[Dict[str, float]]:
    """Best per-sample online time of direct MsFEM and interpolated StoMsFEM for each refine level."""
    spec = config.study
    table = []
    for refine in spec.refines:
        sweep = config.model_copy(update={"grid": config.grid.model_copy(update={"refine": refine}),
                                          "method": "stomsfem_interp"})
        experiment = Experiment(sweep, correlation_id)
        experiment.offline()
        samples = [experiment.sampler(i) for i in range(spec.timing_samples)]
        direct = _best_time_per_sample(experiment.solve_msfem_direct, samples)
        interp = _best_time_per_sample(experiment.solve_stomsfem, samples)
        row = {"refine": refine, "msfem_direct": direct, "stomsfem_interp": interp,
               "ratio": direct / max(interp, 1e-12)}
        logger.info("[%s] refine %d: direct %.3es, interpolated %.3es, ratio %.1f",
                    correlation_id, refine, direct, interp, row["ratio"])
        table.append(row)
    return table


def study(config: ExperimentConfig, correlation_id: Optional[str] = None, parts: Sequence[str] = ("rates", "cost"),
          write: bool = True):
    """
    Estimator convergence rates (MC against Clenshaw-Curtis and trapezoidal
    collocation) and the direct/interpolated online cost ratio across refine
    levels. Returns (error rows, fitted rates, cost table, outputs).
    """
    unknown = set(parts) - {"rates", "cost"}
    if unknown:
        raise ValueError(f"unknown study parts {sorted(unknown)}")
    correlation_id = correlation_id or uuid.uuid4().hex[:8]
    rows, rates, table = [], {}, []
    if "rates" in parts:
        rows, rates = _rate_sweep(config, correlation_id)
    if "cost" in parts:
        table = _cost_sweep(config, correlation_id)
    outputs: Dict[str, str] = {}
    if write:
        output_dir = Path(config.output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        if rows:
            outputs["errors"] = str(write_errors_csv(output_dir / "errors.csv", rows))
            outputs["rates"] = str(write_summary_json(output_dir / "rates.json", rates))
        if table:
            outputs["cost_table"] = str(write_cost_table_csv(output_dir / "cost_table.csv", table))
    return rows, rates, table, outputs
