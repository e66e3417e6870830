"""
Offline interpolation of local upscaled matrices over local parameters, and
the bank that serves every patch's surrogate during the online stage.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Tuple

import numpy as np

from .exceptions import GridMismatchError, OutOfRangeError, SolverNotConverged
from .models import SurrogateSpec
from .msfem import LocalUpscaled, LocalUpscaler
from .random_field import LocalParametrization
from .sparse_grid import ClenshawCurtisRule, CollocationGrid, adaptive_grid, make_grid

logger = logging.getLogger(__name__)

RANGE_TOLERANCE = 1e-12


def to_unit(xi: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    return 2.0 * (np.asarray(xi, dtype=float) - lower) / (upper - lower) - 1.0


def from_unit(t: np.ndarray, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    return lower + 0.5 * (np.asarray(t, dtype=float) + 1.0) * (upper - lower)


@dataclass(eq=False)
class InterpolantLocal:
    patch_id: Tuple[int, int]
    grid_kind: str
    grid: CollocationGrid
    values: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @property
    def dim(self) -> int:
        return self.grid.dim

    @property
    def nodes(self) -> np.ndarray:
        return self.grid.points

    def unit_point(self, xi: np.ndarray) -> np.ndarray:
        t = to_unit(xi, self.lower, self.upper)
        if np.any(np.abs(t) > 1.0 + RANGE_TOLERANCE):
            raise OutOfRangeError(f"patch {self.patch_id}: parameter outside the interpolation box",
                                  patch_id=self.patch_id, point=np.asarray(xi))
        return np.clip(t, -1.0, 1.0)

    def evaluate(self, xi: np.ndarray) -> LocalUpscaled:
        if self.dim == 0:
            return LocalUpscaled.from_vector(self.values[0])
        return LocalUpscaled.from_vector(self.grid.interpolate(self.values, self.unit_point(xi)))

    def evaluate_many(self, xi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Flattened (S, b) rows for each row of `xi`, and the mask of rows inside the box."""
        xi = np.asarray(xi, dtype=float)
        xi = xi.reshape(len(xi), self.dim)
        if self.dim == 0:
            return np.repeat(self.values[:1], len(xi), axis=0), np.ones(len(xi), dtype=bool)
        t = to_unit(xi, self.lower, self.upper)
        inside = np.all(np.abs(t) <= 1.0 + RANGE_TOLERANCE, axis=1)
        rows = np.full((len(xi), self.values.shape[1]), np.nan)
        if inside.any():
            rows[inside] = self.grid.interpolate_many(self.values, np.clip(t[inside], -1.0, 1.0))
        return rows, inside

    def at_key(self, key: Tuple[int, ...]) -> LocalUpscaled:
        try:
            return LocalUpscaled.from_vector(self.values[self.grid.lookup(key)])
        except KeyError:
            raise GridMismatchError(f"patch {self.patch_id}: no offline node with key {key}") from None

    def to_arrays(self) -> Tuple[Dict[str, np.ndarray], Dict]:
        coefficients, levels = self.grid.term_arrays()
        arrays = {
            "values": self.values,
            "lower": self.lower,
            "upper": self.upper,
            "term_coefficients": coefficients,
            "term_levels": levels,
        }
        metadata = {
            "surrogate": "interpolant",
            "patch_id": list(self.patch_id),
            "grid_kind": self.grid_kind,
            "rule": self.grid.rule.name,
            "dim": self.dim,
            "grid_type": self.grid.kind,
            "level": self.grid.level,
        }
        return arrays, metadata

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], metadata: Dict) -> "InterpolantLocal":
        grid = CollocationGrid.from_arrays(metadata["rule"], int(metadata["dim"]), arrays["term_coefficients"],
                                           arrays["term_levels"], metadata.get("grid_type", "sparse"),
                                           metadata.get("level"))
        values = np.asarray(arrays["values"], dtype=float)
        if len(values) != len(grid):
            raise GridMismatchError(f"stored interpolant has {len(values)} rows for a {len(grid)}-node grid")
        return cls(tuple(metadata["patch_id"]), metadata["grid_kind"], grid, values,
                   np.asarray(arrays["lower"], dtype=float), np.asarray(arrays["upper"], dtype=float))


def build_interpolant(param: LocalParametrization, upscaler: LocalUpscaler, spec: SurrogateSpec) -> InterpolantLocal:
    dim = param.dim

    def evaluate_nodes(points: np.ndarray) -> np.ndarray:
        rows = []
        for c, t in enumerate(points):
            xi = from_unit(t, param.lower, param.upper)
            try:
                rows.append(upscaler.upscale(param.kappa(xi)).to_vector())
            except SolverNotConverged as e:
                raise SolverNotConverged(
                    f"patch {param.patch.patch_id}: cell solve failed at node {c} (xi={xi.tolist()}): {e}",
                    e.residual,
                ) from e
        return np.array(rows).reshape(len(points), 20)

    if spec.grid_kind == "adaptive_clenshaw_curtis":
        grid, values = adaptive_grid(ClenshawCurtisRule(), dim, evaluate_nodes, spec.max_nodes, spec.adaptive_degree)
    else:
        grid = make_grid(spec.grid_kind, dim, spec.nodes_per_dim, spec.level)
        values = evaluate_nodes(grid.points)
    logger.debug("patch %s: interpolant on %d nodes (K_m=%d)", param.patch.patch_id, len(grid), dim)
    return InterpolantLocal(param.patch.patch_id, spec.grid_kind, grid, values,
                            np.asarray(param.lower, dtype=float), np.asarray(param.upper, dtype=float))


def eval_interpolant(interp: InterpolantLocal, xi: np.ndarray) -> LocalUpscaled:
    return interp.evaluate(xi)


@dataclass
class SurrogateBank:
    """Surrogates keyed by a shareable key, plus the patch -> key map."""

    patch_keys: List[Hashable] = field(default_factory=list)
    surrogates: Dict[Hashable, object] = field(default_factory=dict)

    def surrogate_for(self, patch_index: int):
        return self.surrogates[self.patch_keys[patch_index]]

    def evaluate(self, patch_index: int, xi: np.ndarray) -> LocalUpscaled:
        return self.surrogate_for(patch_index).evaluate(xi)

    def groups(self) -> Dict[Hashable, List[int]]:
        """Patch indices per shared surrogate, in patch order."""
        members: Dict[Hashable, List[int]] = {}
        for m, key in enumerate(self.patch_keys):
            members.setdefault(key, []).append(m)
        return members

    def evaluate_many(self, key: Hashable, xi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """One batched evaluation of surrogate `key`; returns (flattened rows, inside mask)."""
        surrogate = self.surrogates[key]
        if hasattr(surrogate, "evaluate_many"):
            return surrogate.evaluate_many(xi)
        xi = np.asarray(xi, dtype=float)
        xi = xi.reshape(len(xi), surrogate.dim)
        rows = np.full((len(xi), 20), np.nan)
        inside = np.zeros(len(xi), dtype=bool)
        for r, point in enumerate(xi):
            try:
                rows[r] = surrogate.evaluate(point).to_vector()
                inside[r] = True
            except OutOfRangeError:
                pass
        return rows, inside

    def lookup(self, patch_index: int, key: Tuple[int, ...]) -> LocalUpscaled:
        surrogate = self.surrogate_for(patch_index)
        if not hasattr(surrogate, "at_key"):
            raise GridMismatchError("collocation lookup needs interpolation surrogates")
        return surrogate.at_key(key)

    def __len__(self) -> int:
        return len(self.surrogates)
