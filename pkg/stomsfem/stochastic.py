"""
Stochastic drivers over a per-sample coarse solver: Monte Carlo, two-level
Monte Carlo and sparse-grid stochastic collocation.

Samples are evaluated by an optional thread pool, but results are always
accumulated in index order, so estimates do not depend on the worker count.
Field variances use the biased 1/N moment formula.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple, TypeVar

import numpy as np

from .exceptions import EllipticityError, NotSPDError, SolverNotConverged
from .models import EstimatorReport, EstimatorSpec
from .sparse_grid import CollocationGrid

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


@dataclass
class SampleResult:
    values: np.ndarray
    n_fallback: int = 0


Sampler = Callable[[int, int], object]
Solver = Callable[[object], SampleResult]


def ordered_map(func: Callable[[T], R], items: Iterable[T], workers: int = 1) -> Iterator[R]:
    if workers <= 1:
        for item in items:
            yield func(item)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(func, items)


class MomentAccumulator:
    """Running mean and biased variance (Welford), fed in a fixed order."""

    def __init__(self):
        self.n = 0
        self.mean: Optional[np.ndarray] = None
        self._m2: Optional[np.ndarray] = None

    def add(self, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        self.n += 1
        if self.mean is None:
            self.mean = values.copy()
            self._m2 = np.zeros_like(values)
            return
        delta = values - self.mean
        self.mean = self.mean + delta / self.n
        self._m2 = self._m2 + delta * (values - self.mean)

    @property
    def variance(self) -> np.ndarray:
        if self.n == 0:
            return np.zeros(0)
        return self._m2 / self.n


def _integrate(field: np.ndarray, weights: Optional[np.ndarray]) -> float:
    if weights is None:
        return float(np.mean(field))
    return float(np.sum(weights * field))


def _functional_value(functional: Optional[Callable], mean: np.ndarray) -> Optional[float]:
    return None if functional is None else float(functional(mean))


def run_mc(spec: EstimatorSpec, sampler: Sampler, solver: Solver, workers: int = 1,
           node_weights: Optional[np.ndarray] = None, functional: Optional[Callable] = None,
           method: str = "", log_prefix: str = "") -> EstimatorReport:
    start = time.perf_counter()
    acc = MomentAccumulator()
    n_fallback = 0

    def one(index: int) -> SampleResult:
        return solver(sampler(index, 0))

    for result in ordered_map(one, range(spec.n_samples), workers):
        acc.add(result.values)
        n_fallback += result.n_fallback
    elapsed = time.perf_counter() - start
    variance = acc.variance
    logger.info("%sMC: %d samples, %d fallback solves, %.2fs", log_prefix, acc.n, n_fallback, elapsed)
    return EstimatorReport(
        kind="mc",
        method=method,
        mean=acc.mean,
        variance=variance,
        n_samples=acc.n,
        n_fallback=n_fallback,
        timings={"online": elapsed, "online_per_sample": elapsed / max(acc.n, 1)},
        mse_terms={"sampling": _integrate(variance, node_weights) / acc.n, "discretization": None},
        level_variances={"coarse": _integrate(variance, node_weights)},
        functional=_functional_value(functional, acc.mean),
    )


def run_two_level_mc(spec: EstimatorSpec, sampler: Sampler, coarse_solver: Solver, fine_solver: Solver,
                     workers: int = 1, node_weights: Optional[np.ndarray] = None,
                     functional: Optional[Callable] = None, method: str = "",
                     log_prefix: str = "") -> EstimatorReport:
    """M(u_H) on stream 0 plus M(u_h - u_H) on an independent stream 1."""
    coarse = run_mc(spec, sampler, coarse_solver, workers, node_weights, None, method, log_prefix)
    start = time.perf_counter()
    correction = MomentAccumulator()
    fine_level = MomentAccumulator()
    failed: List[int] = []
    n_fallback = coarse.n_fallback

    def one(index: int):
        sample = sampler(index, 1)
        try:
            fine = fine_solver(sample)
        except (SolverNotConverged, EllipticityError, NotSPDError) as e:
            logger.warning("%sfine solve for correction sample %d failed: %s", log_prefix, index, e)
            return index, None, None
        return index, fine, coarse_solver(sample)

    for index, fine, approx in ordered_map(one, range(spec.n_fine_samples), workers):
        if fine is None:
            failed.append(index)
            continue
        correction.add(fine.values - approx.values)
        fine_level.add(fine.values)
        n_fallback += approx.n_fallback
    elapsed = time.perf_counter() - start

    mean = coarse.mean if correction.n == 0 else coarse.mean + correction.mean
    coarse_var = _integrate(coarse.variance, node_weights)
    level_variances = {"coarse": coarse_var}
    mse_terms = {"discretization": None, "coarse_sampling": coarse_var / coarse.n_samples}
    if correction.n:
        corr_var = _integrate(correction.variance, node_weights)
        level_variances["correction"] = corr_var
        level_variances["fine"] = _integrate(fine_level.variance, node_weights)
        mse_terms["correction_sampling"] = corr_var / correction.n
    logger.info("%stwo-level MC: %d coarse + %d correction samples (%d failed)",
                log_prefix, coarse.n_samples, correction.n, len(failed))
    return EstimatorReport(
        kind="two_level_mc",
        method=method,
        mean=mean,
        variance=coarse.variance,
        n_samples=coarse.n_samples,
        n_fine_samples=correction.n,
        n_fallback=n_fallback,
        failed_samples=failed,
        timings={**coarse.timings, "correction": elapsed},
        mse_terms=mse_terms,
        level_variances=level_variances,
        functional=_functional_value(functional, mean),
    )


def run_sc(spec: EstimatorSpec, grid: CollocationGrid, node_solver: Callable[[np.ndarray, Tuple[int, ...]], SampleResult],
           workers: int = 1, node_weights: Optional[np.ndarray] = None, functional: Optional[Callable] = None,
           method: str = "", log_prefix: str = "") -> EstimatorReport:
    """I[u] = sum_c w_c u(xi_c); node_solver receives the unit-box point and its grid key."""
    start = time.perf_counter()
    weights = grid.quadrature_weights()
    first = None
    second = None
    n_fallback = 0

    def one(c: int) -> SampleResult:
        return node_solver(grid.points[c], grid.keys[c])

    for c, result in enumerate(ordered_map(one, range(len(grid)), workers)):
        u = np.asarray(result.values, dtype=float)
        first = weights[c] * u if first is None else first + weights[c] * u
        second = weights[c] * u * u if second is None else second + weights[c] * u * u
        n_fallback += result.n_fallback
    variance = second - first * first
    scale = max(float(np.max(np.abs(second))), 1e-300)
    if np.any(variance < -1e-12 * scale):
        logger.warning("%sSC variance has negative entries down to %.3e; clamped to zero",
                       log_prefix, float(variance.min()))
    variance = np.clip(variance, 0.0, None)
    elapsed = time.perf_counter() - start
    logger.info("%sSC: %d nodes, %.2fs", log_prefix, len(grid), elapsed)
    return EstimatorReport(
        kind="sc",
        method=method,
        mean=first,
        variance=variance,
        n_samples=len(grid),
        n_fallback=n_fallback,
        timings={"online": elapsed, "online_per_sample": elapsed / max(len(grid), 1)},
        mse_terms={"discretization": None},
        level_variances={"coarse": _integrate(variance, node_weights)},
        functional=_functional_value(functional, first),
    )


def balance_budget(H: float, h: Optional[float], beta: float, zeta: Optional[float] = None,
                   target_error: Optional[float] = None, method: str = "mc") -> int:
    """
    Sample count that balances sampling error against the H**beta discretization
    error: H**-beta for Monte Carlo, H**(-beta / zeta) for collocation. A target
    error replaces H**beta when given. Unit constants; advisory only.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    if method == "sc" and (zeta is None or zeta <= 0):
        raise ValueError("collocation needs a positive zeta")
    level = H ** beta if target_error is None else target_error
    if target_error is not None and target_error < H ** beta:
        logger.warning("target error %.3e is below the coarse discretization error %.3e; "
                       "use a two-level estimator", target_error, H ** beta)
    if target_error is not None and h is not None and target_error < h ** beta:
        logger.warning("target error %.3e is below the fine discretization error %.3e", target_error, h ** beta)
    value = level ** -1.0 if method == "mc" else level ** (-1.0 / zeta)
    return max(1, math.ceil(value * (1.0 - 1e-12)))


def convergence_rate(ns: Sequence[float], errors: Sequence[float]) -> Tuple[float, float]:
    """(rate, R^2) of the least-squares fit log(error) = c - rate * log(n)."""
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(errors, dtype=float))
    slope, intercept = np.polyfit(x, y, 1)
    fitted = slope * x + intercept
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(-slope), r2


def l2_difference(a: np.ndarray, b: np.ndarray, weights: Optional[np.ndarray] = None) -> float:
    diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if weights is None:
        return float(np.sqrt(np.mean(diff ** 2)))
    return float(np.sqrt(np.sum(weights * diff ** 2)))
