"""
Parametrized random media.

A FieldModel is kappa(x, xi) = transform(mean(x) + sum_k g_k(x) xi_k), evaluated
at fine-cell centers. Local Karhunen-Loeve bases are computed by the Nystrom
method on cell centers with cell-area weights. For a separable Gaussian kernel
on a tensor cell set the eigenproblem factorizes into two 1-D problems.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Literal, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import EllipticityError, NonPSDKernelError
from .mesh import Box, CoarsePatch, StructuredMesh, Window

logger = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-10
MIN_PROJECTION_EIGENVALUE = 1e-14

Seed = Union[int, Sequence[int], np.random.SeedSequence]


def sample_rng(seed: int, index: Optional[int] = None, stream: int = 0) -> np.random.Generator:
    """Generator for sample `index` of stream `stream`; independent of evaluation order."""
    if index is None:
        return np.random.default_rng(seed)
    key = [int(seed), int(index)] if stream == 0 else [int(seed), int(index), int(stream)]
    return np.random.default_rng(key)


@dataclass(frozen=True)
class Uniform:
    low: float = 0.0
    high: float = 1.0

    bounded = True

    @property
    def mean(self) -> float:
        return 0.5 * (self.low + self.high)

    def box(self, gaussian_box: float = 3.0) -> Tuple[float, float]:
        return (self.low, self.high)

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.low, self.high))


@dataclass(frozen=True)
class StandardNormal:
    bounded = False

    @property
    def mean(self) -> float:
        return 0.0

    def box(self, gaussian_box: float = 3.0) -> Tuple[float, float]:
        return (-gaussian_box, gaussian_box)

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.standard_normal())


Distribution = Union[Uniform, StandardNormal]


@dataclass(frozen=True)
class Transform:
    kind: Literal["identity", "exp_shift", "tanh_bounded"] = "identity"
    kappa_min: float = 0.0
    kappa_max: float = 0.0

    @property
    def is_affine(self) -> bool:
        return self.kind == "identity"

    def __call__(self, beta: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return beta
        if self.kind == "exp_shift":
            return self.kappa_min + np.exp(beta)
        half_sum = 0.5 * (self.kappa_max + self.kappa_min)
        half_gap = 0.5 * (self.kappa_max - self.kappa_min)
        return half_sum + half_gap * np.tanh(beta)


IDENTITY = Transform()


def exp_shift(kappa_min: float) -> Transform:
    return Transform("exp_shift", kappa_min=kappa_min)


def tanh_bounded(kappa_min: float, kappa_max: float) -> Transform:
    return Transform("tanh_bounded", kappa_min=kappa_min, kappa_max=kappa_max)


class GridFunction:
    """Piecewise-constant function given by its values on the cells of a mesh."""

    def __init__(self, mesh: StructuredMesh, values: np.ndarray):
        self.mesh = mesh
        self.values = np.asarray(values, dtype=float)

    def __call__(self, x, y):
        m = self.mesh
        i = np.clip(np.floor((np.asarray(x) - m.x0) / m.hx).astype(int), 0, m.nx - 1)
        j = np.clip(np.floor((np.asarray(y) - m.y0) / m.hy).astype(int), 0, m.ny - 1)
        return self.values[j * m.nx + i]


def indicator(box: Box, value: float = 1.0) -> Callable:
    x0, x1, y0, y1 = box

    def _indicator(x, y):
        inside = (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
        return np.where(inside, value, 0.0)

    return _indicator


@dataclass(frozen=True)
class FieldMode:
    function: Callable
    support: Box
    distribution: Distribution = field(default_factory=Uniform)


@dataclass(frozen=True, eq=False)
class FieldModel:
    mean_field: Callable
    modes: Tuple[FieldMode, ...] = ()
    transform: Transform = IDENTITY
    stationary: bool = False
    name: str = "custom"
    _cache: Dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_params(self) -> int:
        return len(self.modes)

    def mean_values(self, mesh: StructuredMesh) -> np.ndarray:
        key = ("mean", mesh)
        if key not in self._cache:
            c = mesh.cell_centers()
            self._cache[key] = np.broadcast_to(
                np.asarray(self.mean_field(c[:, 0], c[:, 1]), dtype=float), (mesh.n_cells,)
            ).copy()
        return self._cache[key]

    def mode_matrix(self, mesh: StructuredMesh) -> np.ndarray:
        key = ("modes", mesh)
        if key not in self._cache:
            c = mesh.cell_centers()
            rows = []
            for mode in self.modes:
                if isinstance(mode.function, GridFunction) and mode.function.mesh == mesh:
                    rows.append(mode.function.values)
                else:
                    rows.append(np.broadcast_to(
                        np.asarray(mode.function(c[:, 0], c[:, 1]), dtype=float), (mesh.n_cells,)
                    ))
            self._cache[key] = np.array(rows).reshape(len(self.modes), mesh.n_cells)
        return self._cache[key]

    def mean_parameters(self) -> np.ndarray:
        return np.array([m.distribution.mean for m in self.modes])

    def kappa(self, mesh: StructuredMesh, xi: np.ndarray) -> np.ndarray:
        return self.transform(self.beta(mesh, xi))

    def beta(self, mesh: StructuredMesh, xi: np.ndarray) -> np.ndarray:
        beta = self.mean_values(mesh)
        if self.modes:
            beta = beta + np.asarray(xi, dtype=float) @ self.mode_matrix(mesh)
        return beta

    def check_ellipticity(self, mesh: StructuredMesh, alpha: float = 0.0) -> float:
        """Smallest coefficient value over all parameters in range; raises if not above alpha."""
        t = self.transform
        if t.kind == "exp_shift":
            lowest = t.kappa_min
        elif t.kind == "tanh_bounded":
            if t.kappa_max <= t.kappa_min:
                raise EllipticityError("tanh_bounded needs kappa_max > kappa_min")
            lowest = t.kappa_min
        else:
            if any(not m.distribution.bounded for m in self.modes):
                raise EllipticityError("unbounded parameters need a positive transform")
            low = self.mean_values(mesh).copy()
            G = self.mode_matrix(mesh)
            for k, mode in enumerate(self.modes):
                a, b = mode.distribution.box()
                low += np.minimum(G[k] * a, G[k] * b)
            lowest = float(low.min())
        if lowest <= alpha:
            raise EllipticityError(f"coefficient lower bound {lowest:.3e} is not above {alpha:.3e}")
        return lowest


class FieldSample(NamedTuple):
    xi: np.ndarray
    beta: np.ndarray
    kappa: np.ndarray


def draw_sample(model: FieldModel, mesh: StructuredMesh, rng: Union[np.random.Generator, Seed]) -> FieldSample:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    xi = np.array([mode.distribution.sample(rng) for mode in model.modes], dtype=float)
    beta = model.beta(mesh, xi)
    return FieldSample(xi, beta, model.transform(beta))


def sample_field(model: FieldModel, mesh: StructuredMesh, seed: Union[np.random.Generator, Seed]):
    """(xi, kappa at fine-cell centers); deterministic given the seed."""
    sample = draw_sample(model, mesh, seed)
    return sample.xi, sample.kappa


@dataclass(frozen=True, eq=False)
class CovarianceKernel:
    kind: Literal["gaussian_anisotropic", "explicit_matrix"] = "gaussian_anisotropic"
    lengths: Tuple[float, float] = (1.0, 1.0)
    variance: float = 1.0
    matrix: Optional[np.ndarray] = None

    def gram(self, cells: "CellSet") -> np.ndarray:
        if self.kind == "explicit_matrix":
            if self.matrix is None:
                raise ValueError("explicit_matrix kernel needs a matrix")
            return np.asarray(self.matrix)[np.ix_(cells.ids, cells.ids)]
        p = cells.centers
        dx = (p[:, None, 0] - p[None, :, 0]) / self.lengths[0]
        dy = (p[:, None, 1] - p[None, :, 1]) / self.lengths[1]
        return self.variance * np.exp(-dx ** 2 - dy ** 2)

    def diagonal(self, cells: "CellSet") -> np.ndarray:
        if self.kind == "explicit_matrix":
            return np.diag(np.asarray(self.matrix))[cells.ids]
        return np.full(len(cells.ids), self.variance)


@dataclass(frozen=True, eq=False)
class CellSet:
    centers: np.ndarray
    weights: np.ndarray
    ids: np.ndarray
    shape: Optional[Tuple[int, int]] = None

    @classmethod
    def from_window(cls, mesh: StructuredMesh, window: Window) -> "CellSet":
        sub = mesh.submesh(window)
        return cls(
            centers=sub.cell_centers(),
            weights=np.full(sub.n_cells, sub.cell_area),
            ids=mesh.window_cells(window),
            shape=(sub.nx, sub.ny),
        )

    @classmethod
    def from_mesh(cls, mesh: StructuredMesh) -> "CellSet":
        return cls.from_window(mesh, (0, mesh.nx, 0, mesh.ny))


@dataclass(frozen=True)
class TruncationRule:
    kind: Literal["keep_fraction", "keep_count"]
    value: float

    def count(self, eigenvalues: np.ndarray) -> int:
        n = len(eigenvalues)
        if self.kind == "keep_count":
            return int(min(max(int(self.value), 0), n))
        total = eigenvalues.sum()
        if total <= 0:
            return 0
        cumulative = np.cumsum(eigenvalues) / total
        return int(min(np.searchsorted(cumulative, self.value - 1e-12) + 1, n))


def keep_fraction(p: float) -> TruncationRule:
    return TruncationRule("keep_fraction", float(p))


def keep_count(k: int) -> TruncationRule:
    return TruncationRule("keep_count", int(k))


@dataclass(frozen=True, eq=False)
class LocalKL:
    patch_id: Optional[Tuple[int, int]]
    eigenvalues: np.ndarray
    modes: np.ndarray
    weights: np.ndarray
    truncation: int
    captured_fraction: float
    total_variance: float

    @property
    def retained_eigenvalues(self) -> np.ndarray:
        return self.eigenvalues[:self.truncation]

    def synthesize(self, xi: np.ndarray) -> np.ndarray:
        lam = self.retained_eigenvalues
        return (np.sqrt(lam) * np.asarray(xi, dtype=float)) @ self.modes

    def scaled_modes(self) -> np.ndarray:
        return np.sqrt(self.retained_eigenvalues)[:, None] * self.modes


def _clamp_spectrum(values: np.ndarray) -> np.ndarray:
    lam_max = float(values.max()) if values.size else 0.0
    floor = -PSD_TOLERANCE * max(lam_max, 0.0)
    if values.size and values.min() < floor:
        raise NonPSDKernelError(
            f"covariance eigenvalue {values.min():.3e} below tolerance {floor:.3e}"
        )
    return np.clip(values, 0.0, None)


def _fix_signs(modes: np.ndarray) -> np.ndarray:
    if modes.size == 0:
        return modes
    pivot = np.argmax(np.abs(modes), axis=1)
    signs = np.sign(modes[np.arange(len(modes)), pivot])
    signs[signs == 0] = 1.0
    return modes * signs[:, None]


def _nystrom_1d(points: np.ndarray, length: float, weight: float, variance: float = 1.0):
    gram = variance * np.exp(-((points[:, None] - points[None, :]) / length) ** 2)
    lam, vec = np.linalg.eigh(weight * gram)
    order = np.argsort(lam)[::-1]
    return _clamp_spectrum(lam[order]), vec[:, order] / np.sqrt(weight)


def _separable_kl(kernel: CovarianceKernel, cells: CellSet, rule: TruncationRule):
    nx, ny = cells.shape
    xs = cells.centers[:nx, 0]
    ys = cells.centers[::nx, 1]
    hx = xs[1] - xs[0] if nx > 1 else np.sqrt(cells.weights[0])
    hy = cells.weights[0] / hx
    lam_x, fx = _nystrom_1d(xs, kernel.lengths[0], hx, kernel.variance)
    lam_y, fy = _nystrom_1d(ys, kernel.lengths[1], hy)
    products = np.outer(lam_y, lam_x).ravel()
    order = np.argsort(products, kind="stable")[::-1]
    eigenvalues = products[order]
    K = rule.count(eigenvalues)
    b, a = np.unravel_index(order[:K], (ny, nx))
    modes = np.array([np.outer(fy[:, bb], fx[:, aa]).ravel() for aa, bb in zip(a, b)]).reshape(K, nx * ny)
    return eigenvalues, modes, K


def _dense_kl(kernel: CovarianceKernel, cells: CellSet, rule: TruncationRule):
    root_w = np.sqrt(cells.weights)
    gram = kernel.gram(cells)
    if not np.allclose(gram, gram.T, rtol=0, atol=1e-12 * max(1.0, np.abs(gram).max())):
        raise NonPSDKernelError("covariance Gram matrix is not symmetric")
    lam, vec = np.linalg.eigh(root_w[:, None] * gram * root_w[None, :])
    order = np.argsort(lam)[::-1]
    eigenvalues = _clamp_spectrum(lam[order])
    K = rule.count(eigenvalues)
    modes = (vec[:, order[:K]] / root_w[:, None]).T
    return eigenvalues, modes, K


def build_local_kl(kernel: CovarianceKernel, cells: CellSet, criterion: TruncationRule,
                   patch_id: Optional[Tuple[int, int]] = None) -> LocalKL:
    if kernel.kind == "gaussian_anisotropic" and cells.shape is not None:
        eigenvalues, modes, K = _separable_kl(kernel, cells, criterion)
    else:
        eigenvalues, modes, K = _dense_kl(kernel, cells, criterion)
    total = float(eigenvalues.sum())
    captured = float(eigenvalues[:K].sum() / total) if total > 0 else 1.0
    logger.debug("local KL %s: %d of %d modes, captured %.6f", patch_id, K, len(eigenvalues), captured)
    return LocalKL(
        patch_id=patch_id,
        eigenvalues=eigenvalues,
        modes=_fix_signs(np.asarray(modes, dtype=float)),
        weights=np.asarray(cells.weights, dtype=float),
        truncation=K,
        captured_fraction=captured,
        total_variance=float(np.sum(kernel.diagonal(cells) * cells.weights)),
    )


class Projection(NamedTuple):
    xi: np.ndarray
    skipped: List[int]


def project_many(deltas: np.ndarray, local_kl: LocalKL) -> np.ndarray:
    """`project_to_local` for every row of `deltas` (translated copies of one sample box) in one product."""
    deltas = np.asarray(deltas, dtype=float).reshape(-1, local_kl.modes.shape[1])
    lam = local_kl.retained_eigenvalues
    keep = lam >= MIN_PROJECTION_EIGENVALUE
    coefficients = deltas @ (local_kl.modes * local_kl.weights).T
    xi = np.zeros((len(deltas), len(lam)))
    xi[:, keep] = coefficients[:, keep] / np.sqrt(lam[keep])
    return xi


def project_to_local(delta: np.ndarray, local_kl: LocalKL) -> Projection:
    """xi_k = (1 / sqrt(lambda_k)) * sum_i w_i delta_i f_k(x_i) over the retained modes."""
    lam = local_kl.retained_eigenvalues
    xi = project_many(delta, local_kl)[0]
    skipped = [k for k in range(len(lam)) if lam[k] < MIN_PROJECTION_EIGENVALUE]
    if skipped:
        logger.warning("patch %s: skipped %d KL modes with eigenvalue below %.0e",
                       local_kl.patch_id, len(skipped), MIN_PROJECTION_EIGENVALUE)
    return Projection(xi, skipped)


def kl_truncation_errors(delta: np.ndarray, local_kl: LocalKL, k_max: Optional[int] = None) -> np.ndarray:
    """Relative weighted-L2 reconstruction error of `delta` using the first K modes, K = 1..k_max."""
    k_max = local_kl.truncation if k_max is None else min(k_max, local_kl.truncation)
    w = local_kl.weights
    norm = np.sqrt(np.sum(w * delta ** 2))
    coefficients = local_kl.modes[:k_max] @ (w * delta)
    errors = []
    reconstruction = np.zeros_like(delta, dtype=float)
    for k in range(k_max):
        reconstruction = reconstruction + coefficients[k] * local_kl.modes[k]
        residual = delta - reconstruction
        errors.append(np.sqrt(np.sum(w * residual ** 2)) / norm if norm > 0 else 0.0)
    return np.array(errors)


def captured_counts(eigenvalues: np.ndarray, fractions: Sequence[float]) -> List[int]:
    return [keep_fraction(p).count(np.asarray(eigenvalues)) for p in fractions]


def kl_field_model(kernel: CovarianceKernel, mesh: StructuredMesh, fraction: float,
                   transform: Transform, mean: float = 0.0, name: str = "kl") -> Tuple[FieldModel, LocalKL]:
    """Global truncated KL as an affine mode list in standard normal parameters."""
    global_kl = build_local_kl(kernel, CellSet.from_mesh(mesh), keep_fraction(fraction))
    box = mesh.box
    modes = tuple(
        FieldMode(GridFunction(mesh, values), box, StandardNormal())
        for values in global_kl.scaled_modes()
    )
    logger.info("global KL sampler: %d modes capture %.4f of the variance",
                global_kl.truncation, global_kl.captured_fraction)
    model = FieldModel(
        mean_field=lambda x, y: np.full(np.shape(x), mean, dtype=float),
        modes=modes,
        transform=transform,
        stationary=True,
        name=name,
    )
    return model, global_kl


@dataclass(eq=False)
class LocalParametrization:
    """Maps local parameters xi_m to the coefficient on one patch's sample box."""

    patch: CoarsePatch
    cells: np.ndarray
    mean: np.ndarray
    modes: np.ndarray
    transform: Transform
    lower: np.ndarray
    upper: np.ndarray
    center: np.ndarray
    param_ids: Optional[Tuple[int, ...]] = None
    local_kl: Optional[LocalKL] = None

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def is_affine(self) -> bool:
        return self.transform.is_affine

    @property
    def affine_terms(self) -> np.ndarray:
        """Rows: mean, then one spatial term per parameter (coefficients 1, xi_1, ...)."""
        return np.vstack([self.mean[None, :], self.modes])

    def theta(self, xi: np.ndarray) -> np.ndarray:
        return np.concatenate([[1.0], np.asarray(xi, dtype=float)])

    def beta(self, xi: np.ndarray) -> np.ndarray:
        if self.dim == 0:
            return self.mean.copy()
        return self.mean + np.asarray(xi, dtype=float) @ self.modes

    def kappa(self, xi: np.ndarray) -> np.ndarray:
        return self.transform(self.beta(xi))

    def local_params(self, sample: FieldSample) -> np.ndarray:
        if self.local_kl is None:
            return np.asarray(sample.xi, dtype=float)[list(self.param_ids or ())]
        return project_to_local(sample.beta[self.cells] - self.mean, self.local_kl).xi


def affine_parametrization(patch: CoarsePatch, model: FieldModel, fine: StructuredMesh,
                           gaussian_box: float = 3.0) -> LocalParametrization:
    ids = tuple(patch.active_params)
    cells = fine.window_cells(patch.sample_cells)
    boxes = np.array([model.modes[k].distribution.box(gaussian_box) for k in ids]).reshape(len(ids), 2)
    return LocalParametrization(
        patch=patch,
        cells=cells,
        mean=model.mean_values(fine)[cells],
        modes=model.mode_matrix(fine)[list(ids)][:, cells].reshape(len(ids), len(cells)),
        transform=model.transform,
        lower=boxes[:, 0],
        upper=boxes[:, 1],
        center=np.array([model.modes[k].distribution.mean for k in ids]),
        param_ids=ids,
    )


def kl_parametrization(patch: CoarsePatch, kernel: CovarianceKernel, fine: StructuredMesh,
                       criterion: TruncationRule, transform: Transform, mean_beta: np.ndarray,
                       gaussian_box: float = 3.0, local_kl: Optional[LocalKL] = None) -> LocalParametrization:
    cells = fine.window_cells(patch.sample_cells)
    if local_kl is None:
        local_kl = build_local_kl(kernel, CellSet.from_window(fine, patch.sample_cells), criterion, patch.patch_id)
    K = local_kl.truncation
    return LocalParametrization(
        patch=patch,
        cells=cells,
        mean=np.asarray(mean_beta, dtype=float)[cells],
        modes=local_kl.scaled_modes(),
        transform=transform,
        lower=np.full(K, -gaussian_box),
        upper=np.full(K, gaussian_box),
        center=np.zeros(K),
        local_kl=local_kl,
    )
