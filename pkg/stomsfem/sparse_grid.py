"""
Collocation grids on [-1, 1]^d: tensor grids of Chebyshev zeros, and Smolyak
combinations of nested one-dimensional rules (Clenshaw-Curtis or trapezoidal).

Nested rules share an integer key scale, so a node has the same key on every
level, and the projection of a Smolyak grid onto a subset of its coordinates is
the Smolyak grid of the same level in fewer dimensions.
"""
from __future__ import annotations

import itertools
import logging
from functools import lru_cache
from math import comb
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

KEY_LEVELS = 24


def _barycentric_matrix(nodes: np.ndarray, weights: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Lagrange basis values at each point of `x`, one row per point."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if len(nodes) == 1:
        return np.ones((len(x), 1))
    diff = x[:, None] - nodes[None, :]
    exact = diff == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = weights / diff
        out = t / t.sum(axis=1, keepdims=True)
    hits = exact.any(axis=1)
    if hits.any():
        out[hits] = exact[hits].astype(float)
    return out


@lru_cache(maxsize=None)
def _cached_axis(rule_name: str, level: int) -> Tuple[np.ndarray, np.ndarray]:
    """(nodes, barycentric weights) of one level; arrays are read-only."""
    rule = get_rule(rule_name)
    nodes = rule.nodes(level)
    weights = rule._bary_weights(level) if hasattr(rule, "_bary_weights") else np.zeros(0)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


class ClenshawCurtisRule:
    """Nested Gauss-Lobatto Chebyshev points, 2**(level-1) + 1 of them (one at level 1)."""

    name = "clenshaw_curtis"
    nested = True

    def size(self, level: int) -> int:
        return 1 if level == 1 else 2 ** (level - 1) + 1

    def nodes(self, level: int) -> np.ndarray:
        m = self.size(level)
        if m == 1:
            return np.zeros(1)
        n = m - 1
        return np.sin(np.pi * (2 * np.arange(m) - n) / (2 * n))

    def keys(self, level: int) -> np.ndarray:
        if level == 1:
            return np.array([2 ** (KEY_LEVELS - 1)])
        return np.arange(self.size(level)) * 2 ** (KEY_LEVELS - level + 1)

    def weights(self, level: int) -> np.ndarray:
        """Quadrature weights for the uniform density on [-1, 1] (sum 1)."""
        m = self.size(level)
        if m == 1:
            return np.ones(1)
        n = m - 1
        theta = np.pi * np.arange(m) / n
        w = np.ones(m)
        for k in range(1, n // 2 + 1):
            b = 1.0 if 2 * k == n else 2.0
            w -= b * np.cos(2 * k * theta) / (4 * k * k - 1)
        c = np.full(m, 2.0)
        c[[0, -1]] = 1.0
        return 0.5 * c * w / n

    def _bary_weights(self, level: int) -> np.ndarray:
        m = self.size(level)
        w = (-1.0) ** np.arange(m)
        w[[0, -1]] *= 0.5
        return w

    def basis_matrix(self, level: int, x: np.ndarray) -> np.ndarray:
        return _barycentric_matrix(*_cached_axis(self.name, level), x)

    def basis(self, level: int, x: float) -> np.ndarray:
        return self.basis_matrix(level, np.array([x]))[0]


class TrapezoidalRule:
    """Nested equidistant points with piecewise-linear interpolation."""

    name = "trapezoidal"
    nested = True

    size = ClenshawCurtisRule.size
    keys = ClenshawCurtisRule.keys
    basis = ClenshawCurtisRule.basis

    def nodes(self, level: int) -> np.ndarray:
        m = self.size(level)
        if m == 1:
            return np.zeros(1)
        n = m - 1
        return (2 * np.arange(m) - n) / n

    def weights(self, level: int) -> np.ndarray:
        m = self.size(level)
        if m == 1:
            return np.ones(1)
        w = np.full(m, 1.0 / (m - 1))
        w[[0, -1]] *= 0.5
        return w

    def basis_matrix(self, level: int, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        m = self.size(level)
        if m == 1:
            return np.ones((len(x), 1))
        h = 2.0 / (m - 1)
        pos = (np.clip(x, -1.0, 1.0) + 1.0) / h
        k = np.minimum(np.floor(pos).astype(np.int64), m - 2)
        frac = pos - k
        rows = np.arange(len(x))
        out = np.zeros((len(x), m))
        out[rows, k] = 1.0 - frac
        out[rows, k + 1] = frac
        return out


class ChebyshevZerosRule:
    """Zeros of the Chebyshev polynomial of degree n; `level` is the node count n."""

    name = "chebyshev"
    nested = False

    basis = ClenshawCurtisRule.basis
    basis_matrix = ClenshawCurtisRule.basis_matrix

    def size(self, level: int) -> int:
        return level

    def nodes(self, level: int) -> np.ndarray:
        n = level
        return np.sin(np.pi * (n - 1 - 2 * np.arange(n)) / (2 * n))

    def keys(self, level: int) -> np.ndarray:
        return np.arange(level)

    def weights(self, level: int) -> np.ndarray:
        """Fejer's first rule for the uniform density (sum 1)."""
        n = level
        theta = (2 * np.arange(n) + 1) * np.pi / (2 * n)
        w = np.ones(n)
        for k in range(1, n // 2 + 1):
            w -= 2.0 * np.cos(2 * k * theta) / (4 * k * k - 1)
        return w / n

    def _bary_weights(self, level: int) -> np.ndarray:
        n = level
        return (-1.0) ** np.arange(n) * np.sin((2 * np.arange(n) + 1) * np.pi / (2 * n))


RULES = {
    "clenshaw_curtis": ClenshawCurtisRule,
    "trapezoidal": TrapezoidalRule,
    "chebyshev": ChebyshevZerosRule,
}


def get_rule(name: str):
    try:
        return RULES[name]()
    except KeyError:
        raise ValueError(f"unknown collocation rule '{name}'") from None


def _compositions(dim: int, low: int, high: int) -> Iterator[Tuple[int, ...]]:
    """Multi-indices with entries >= 1 and low <= sum <= high."""
    def rec(prefix, remaining_dims, budget):
        if remaining_dims == 0:
            if sum(prefix) >= low:
                yield tuple(prefix)
            return
        for v in range(1, budget - (remaining_dims - 1) + 1):
            yield from rec(prefix + [v], remaining_dims - 1, budget - v)
    yield from rec([], dim, high)


def smolyak_terms(dim: int, level: int) -> List[Tuple[float, Tuple[int, ...]]]:
    q = dim + level
    terms = []
    for index in _compositions(dim, max(dim, q - dim + 1), q):
        s = sum(index)
        coef = (-1) ** (q - s) * comb(dim - 1, q - s)
        if coef:
            terms.append((float(coef), index))
    return terms


def combination_terms(index_set: Sequence[Tuple[int, ...]]) -> List[Tuple[float, Tuple[int, ...]]]:
    """Combination-technique coefficients for a downward-closed index set."""
    members = set(map(tuple, index_set))
    dim = len(next(iter(members))) if members else 0
    terms = []
    for index in sorted(members):
        coef = 0
        for e in itertools.product((0, 1), repeat=dim):
            if tuple(i + d for i, d in zip(index, e)) in members:
                coef += (-1) ** sum(e)
        if coef:
            terms.append((float(coef), index))
    return terms


class CollocationGrid:
    def __init__(self, rule, dim: int, terms: List[Tuple[float, Tuple[int, ...]]], kind: str = "sparse",
                 level: Optional[int] = None):
        self.rule = rule
        self.dim = dim
        self.kind = kind
        self.level = level
        self.terms = terms if dim > 0 else [(1.0, ())]
        self.keys: List[Tuple[int, ...]] = []
        self.index: Dict[Tuple[int, ...], int] = {}
        points = []
        self.term_ids: List[np.ndarray] = []
        for _, levels in self.terms:
            if dim == 0:
                key_grid = np.zeros((1, 0), dtype=np.int64)
                node_grid = np.zeros((1, 0))
                shape: Tuple[int, ...] = ()
            else:
                key_axes = [rule.keys(lv) for lv in levels]
                node_axes = [rule.nodes(lv) for lv in levels]
                shape = tuple(len(k) for k in key_axes)
                key_grid = np.stack([g.ravel() for g in np.meshgrid(*key_axes, indexing="ij")], axis=1)
                node_grid = np.stack([g.ravel() for g in np.meshgrid(*node_axes, indexing="ij")], axis=1)
            ids = np.empty(len(key_grid), dtype=np.int64)
            for p, key in enumerate(map(tuple, key_grid.tolist())):
                found = self.index.get(key)
                if found is None:
                    found = len(self.keys)
                    self.index[key] = found
                    self.keys.append(key)
                    points.append(node_grid[p])
                ids[p] = found
            self.term_ids.append(ids.reshape(shape))
        self.points = np.array(points).reshape(len(self.keys), dim)

    @classmethod
    def tensor(cls, rule, counts: Sequence[int]) -> "CollocationGrid":
        return cls(rule, len(counts), [(1.0, tuple(int(c) for c in counts))], kind="tensor")

    @classmethod
    def smolyak(cls, rule, dim: int, level: int) -> "CollocationGrid":
        return cls(rule, dim, smolyak_terms(dim, level), kind="sparse", level=level)

    @classmethod
    def from_index_set(cls, rule, index_set: Sequence[Tuple[int, ...]], dim: int) -> "CollocationGrid":
        return cls(rule, dim, combination_terms(index_set) if dim else [], kind="adaptive")

    @classmethod
    def from_arrays(cls, rule_name: str, dim: int, coefficients: np.ndarray, levels: np.ndarray,
                    kind: str = "sparse", level: Optional[int] = None) -> "CollocationGrid":
        levels = np.asarray(levels, dtype=np.int64).reshape(len(coefficients), dim)
        terms = [(float(c), tuple(int(v) for v in row)) for c, row in zip(coefficients, levels)] if dim else []
        return cls(get_rule(rule_name), dim, terms, kind=kind, level=level)

    def term_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """(coefficients, levels) of the combination, enough to rebuild the grid."""
        coefficients = np.array([c for c, _ in self.terms], dtype=float)
        levels = np.array([lv for _, lv in self.terms], dtype=np.int64).reshape(len(self.terms), self.dim)
        return coefficients, levels

    def __len__(self) -> int:
        return len(self.keys)

    def quadrature_weights(self) -> np.ndarray:
        w = np.zeros(len(self))
        for (coef, levels), ids in zip(self.terms, self.term_ids):
            if self.dim == 0:
                w[ids] += coef
                continue
            tensor = self.rule.weights(levels[0])
            for lv in levels[1:]:
                tensor = np.multiply.outer(tensor, self.rule.weights(lv))
            np.add.at(w, ids.ravel(), coef * tensor.ravel())
        return w

    def interpolate(self, values: np.ndarray, x: Sequence[float]) -> np.ndarray:
        """Combination of tensor Lagrange interpolants of `values` (one row per node) at x."""
        return self.interpolate_many(values, np.asarray(x, dtype=float).reshape(1, self.dim))[0]

    def interpolate_many(self, values: np.ndarray, points: np.ndarray) -> np.ndarray:
        """`interpolate` at every row of `points`; one output row per point."""
        values = np.asarray(values)
        points = np.asarray(points, dtype=float)
        n = len(points)
        if self.dim == 0:
            return np.repeat(values[:1], n, axis=0)
        points = points.reshape(n, self.dim)
        bases: Dict[Tuple[int, int], np.ndarray] = {}
        result = np.zeros((n,) + values.shape[1:])
        for (coef, levels), ids in zip(self.terms, self.term_ids):
            out = None
            for d, lv in enumerate(levels):
                B = bases.get((d, lv))
                if B is None:
                    B = bases[(d, lv)] = self.rule.basis_matrix(lv, points[:, d])
                if out is None:
                    out = np.tensordot(B, values[ids], axes=(1, 0))
                else:
                    out = np.einsum("pi,pi...->p...", B, out)
            result += coef * out
        return result

    def lookup(self, key: Tuple[int, ...]) -> int:
        return self.index[tuple(key)]


def make_grid(kind: str, dim: int, nodes_per_dim: int = 9, level: int = 3) -> CollocationGrid:
    if kind == "tensor_chebyshev":
        return CollocationGrid.tensor(ChebyshevZerosRule(), [nodes_per_dim] * dim)
    if kind == "sparse_clenshaw_curtis":
        return CollocationGrid.smolyak(ClenshawCurtisRule(), dim, level)
    if kind == "sparse_trapezoidal":
        return CollocationGrid.smolyak(TrapezoidalRule(), dim, level)
    raise ValueError(f"grid kind '{kind}' needs a function to adapt to; use adaptive_grid")


def adaptive_grid(rule, dim: int, func: Callable[[np.ndarray], np.ndarray], max_nodes: int,
                  degree: float = 0.6) -> Tuple[CollocationGrid, np.ndarray]:
    """
    Dimension-adaptive Smolyak grid (Gerstner-Griebel).

    Indices are refined by the indicator max(degree * |delta_i| / |delta_1|,
    (1 - degree) * n_1 / n_i) where delta_i is the hierarchical quadrature surplus
    and n_i the tensor node count. `func` maps an (n, dim) array of points to an
    (n, p) array of values. Returns the grid and its node values.
    """
    if dim == 0:
        grid = CollocationGrid(rule, 0, [])
        return grid, np.atleast_2d(func(np.zeros((1, 0))))

    cache: Dict[Tuple[int, ...], np.ndarray] = {}

    def tensor_values(levels):
        key_axes = [rule.keys(lv) for lv in levels]
        node_axes = [rule.nodes(lv) for lv in levels]
        keys = list(map(tuple, np.stack([g.ravel() for g in np.meshgrid(*key_axes, indexing="ij")], 1).tolist()))
        pts = np.stack([g.ravel() for g in np.meshgrid(*node_axes, indexing="ij")], 1)
        missing = [p for p, k in enumerate(keys) if k not in cache]
        if missing:
            new = np.atleast_2d(func(pts[missing]))
            for row, p in enumerate(missing):
                cache[keys[p]] = new[row]
        return np.array([cache[k] for k in keys])

    def tensor_quadrature(levels):
        w = rule.weights(levels[0])
        for lv in levels[1:]:
            w = np.multiply.outer(w, rule.weights(lv))
        return w.ravel() @ tensor_values(levels)

    def surplus(index):
        total = 0.0
        for e in itertools.product((0, 1), repeat=dim):
            lower = tuple(i - d for i, d in zip(index, e))
            if min(lower) >= 1:
                total = total + (-1) ** sum(e) * tensor_quadrature(lower)
        return np.linalg.norm(np.atleast_1d(total))

    def work(index):
        return int(np.prod([rule.size(lv) for lv in index]))

    root = (1,) * dim
    old = set()
    active = {root: surplus(root)}
    root_surplus = max(active[root], 1e-300)
    root_work = work(root)

    def indicator(index):
        return max(degree * active[index] / root_surplus, (1.0 - degree) * root_work / work(index))

    while active and len(cache) < max_nodes:
        best = max(sorted(active), key=indicator)
        active.pop(best)
        old.add(best)
        for k in range(dim):
            candidate = tuple(v + (1 if d == k else 0) for d, v in enumerate(best))
            backward_ok = all(
                tuple(v - (1 if d == m else 0) for d, v in enumerate(candidate)) in old
                for m in range(dim) if candidate[m] > 1
            )
            if backward_ok and candidate not in active:
                active[candidate] = surplus(candidate)
    index_set = sorted(old | set(active))
    grid = CollocationGrid.from_index_set(rule, index_set, dim)
    for key in grid.keys:
        if key not in cache:
            raise RuntimeError("adaptive grid node was never evaluated")
    values = np.array([cache[k] for k in grid.keys])
    logger.debug("adaptive grid: %d indices, %d nodes", len(index_set), len(grid))
    return grid, values
