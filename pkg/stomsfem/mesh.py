"""
Structured quadrilateral meshes on a rectangle.

Nodes are numbered row-major with x running fastest (node = j * (nx + 1) + i),
cells likewise (cell = j * nx + i). Cell corners are listed counter-clockwise
starting from the lower-left corner, which is also the local order of the four
coarse basis functions.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from functools import cached_property
from typing import List, NamedTuple, Sequence, Tuple

import numpy as np

from .exceptions import InvalidGridError
from .models import Domain2D, GridSpec

Box = Tuple[float, float, float, float]
Window = Tuple[int, int, int, int]

EDGES = ("left", "right", "bottom", "top")


def boxes_overlap(a: Box, b: Box) -> bool:
    """Positive-area intersection of two (x0, x1, y0, y1) boxes."""
    return max(a[0], b[0]) < min(a[1], b[1]) and max(a[2], b[2]) < min(a[3], b[3])


def box_contains(outer: Box, inner: Box) -> bool:
    return outer[0] <= inner[0] and inner[1] <= outer[1] and outer[2] <= inner[2] and inner[3] <= outer[3]


@dataclass(frozen=True)
class StructuredMesh:
    x0: float
    y0: float
    hx: float
    hy: float
    nx: int
    ny: int

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @property
    def box(self) -> Box:
        return (self.x0, self.x0 + self.nx * self.hx, self.y0, self.y0 + self.ny * self.hy)

    def node_index(self, i, j):
        return np.asarray(j) * (self.nx + 1) + np.asarray(i)

    @cached_property
    def node_x(self) -> np.ndarray:
        return self.x0 + self.hx * np.arange(self.nx + 1)

    @cached_property
    def node_y(self) -> np.ndarray:
        return self.y0 + self.hy * np.arange(self.ny + 1)

    def node_coordinates(self) -> np.ndarray:
        xx, yy = np.meshgrid(self.node_x, self.node_y)
        return np.column_stack([xx.ravel(), yy.ravel()])

    def cell_centers(self) -> np.ndarray:
        xc = self.x0 + self.hx * (np.arange(self.nx) + 0.5)
        yc = self.y0 + self.hy * (np.arange(self.ny) + 0.5)
        xx, yy = np.meshgrid(xc, yc)
        return np.column_stack([xx.ravel(), yy.ravel()])

    @cached_property
    def cell_nodes(self) -> np.ndarray:
        i, j = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        i = i.ravel()
        j = j.ravel()
        return np.column_stack([
            self.node_index(i, j),
            self.node_index(i + 1, j),
            self.node_index(i + 1, j + 1),
            self.node_index(i, j + 1),
        ])

    def boundary_nodes(self, edges: Sequence[str] = EDGES) -> np.ndarray:
        nodes = []
        for edge in edges:
            if edge == "left":
                nodes.append(self.node_index(0, np.arange(self.ny + 1)))
            elif edge == "right":
                nodes.append(self.node_index(self.nx, np.arange(self.ny + 1)))
            elif edge == "bottom":
                nodes.append(self.node_index(np.arange(self.nx + 1), 0))
            elif edge == "top":
                nodes.append(self.node_index(np.arange(self.nx + 1), self.ny))
            else:
                raise ValueError(f"unknown edge '{edge}'")
        if not nodes:
            return np.zeros(0, dtype=int)
        return np.unique(np.concatenate(nodes))

    def node_quadrature_weights(self) -> np.ndarray:
        """Tensor trapezoidal weights on the nodes."""
        wx = np.full(self.nx + 1, self.hx)
        wx[[0, -1]] *= 0.5
        wy = np.full(self.ny + 1, self.hy)
        wy[[0, -1]] *= 0.5
        return np.outer(wy, wx).ravel()

    def submesh(self, window: Window) -> "StructuredMesh":
        i0, i1, j0, j1 = window
        return StructuredMesh(self.x0 + i0 * self.hx, self.y0 + j0 * self.hy, self.hx, self.hy, i1 - i0, j1 - j0)

    def window_cells(self, window: Window) -> np.ndarray:
        i0, i1, j0, j1 = window
        i, j = np.meshgrid(np.arange(i0, i1), np.arange(j0, j1))
        return (j * self.nx + i).ravel()

    def window_nodes(self, window: Window) -> np.ndarray:
        i0, i1, j0, j1 = window
        i, j = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1))
        return self.node_index(i, j).ravel()


@dataclass(frozen=True)
class CoarsePatch:
    patch_id: Tuple[int, int]
    index: int
    element_box: Box
    sample_box: Box
    element_cells: Window
    sample_cells: Window
    corner_nodes: Tuple[int, int, int, int]
    active_params: Tuple[int, ...] = ()

    @property
    def oversampled(self) -> bool:
        return self.element_cells != self.sample_cells

    @property
    def element_offset(self) -> Tuple[int, int]:
        return (self.element_cells[0] - self.sample_cells[0], self.element_cells[2] - self.sample_cells[2])

    @property
    def refine(self) -> int:
        return self.element_cells[1] - self.element_cells[0]

    @property
    def sample_shape(self) -> Tuple[int, int]:
        return (self.sample_cells[1] - self.sample_cells[0], self.sample_cells[3] - self.sample_cells[2])

    @property
    def element_window_in_sample(self) -> Window:
        oi, oj = self.element_offset
        r = self.refine
        return (oi, oi + r, oj, oj + r)

    def geometry_key(self) -> Tuple[int, ...]:
        """Identical for patches whose sample boxes differ only by a translation."""
        return (*self.sample_shape, *self.element_offset, self.refine)

    def fine_nodes(self, fine: StructuredMesh) -> np.ndarray:
        return fine.window_nodes(self.sample_cells)

    def sample_mesh(self, fine: StructuredMesh) -> StructuredMesh:
        return fine.submesh(self.sample_cells)

    def element_mesh(self, fine: StructuredMesh) -> StructuredMesh:
        return fine.submesh(self.element_cells)

    def with_active_params(self, params: Sequence[int]) -> "CoarsePatch":
        return dataclasses.replace(self, active_params=tuple(int(p) for p in params))


class Meshes(NamedTuple):
    coarse: StructuredMesh
    fine: StructuredMesh
    patches: List[CoarsePatch]


def _validate(domain: Domain2D, spec: GridSpec):
    if spec.coarse_nx < 1 or spec.coarse_ny < 1:
        raise InvalidGridError(f"coarse counts must be positive, got {spec.coarse_nx}x{spec.coarse_ny}")
    if spec.refine < 1:
        raise InvalidGridError(f"refine must be at least 1, got {spec.refine}")
    if spec.oversample_ratio < 1.0:
        raise InvalidGridError(f"oversample ratio must be >= 1, got {spec.oversample_ratio}")
    if domain.width <= 0 or domain.height <= 0:
        raise InvalidGridError("domain intervals must have strictly positive length")


def _window_box(mesh: StructuredMesh, window: Window) -> Box:
    i0, i1, j0, j1 = window
    return (float(mesh.node_x[i0]), float(mesh.node_x[i1]), float(mesh.node_y[j0]), float(mesh.node_y[j1]))


def build_meshes(domain: Domain2D, spec: GridSpec) -> Meshes:
    _validate(domain, spec)
    cnx, cny, r = spec.coarse_nx, spec.coarse_ny, spec.refine
    Hx = domain.width / cnx
    Hy = domain.height / cny
    coarse = StructuredMesh(domain.x_range[0], domain.y_range[0], Hx, Hy, cnx, cny)
    fine = StructuredMesh(domain.x_range[0], domain.y_range[0], Hx / r, Hy / r, cnx * r, cny * r)
    halo = spec.halo_cells

    patches = []
    for j in range(cny):
        for i in range(cnx):
            element = (i * r, (i + 1) * r, j * r, (j + 1) * r)
            sample = (
                max(0, element[0] - halo),
                min(fine.nx, element[1] + halo),
                max(0, element[2] - halo),
                min(fine.ny, element[3] + halo),
            )
            corners = tuple(int(n) for n in coarse.cell_nodes[j * cnx + i])
            patches.append(CoarsePatch(
                patch_id=(i, j),
                index=j * cnx + i,
                element_box=_window_box(fine, element),
                sample_box=_window_box(fine, sample),
                element_cells=element,
                sample_cells=sample,
                corner_nodes=corners,
            ))
    return Meshes(coarse, fine, patches)


def coarse_to_fine_nodes(coarse: StructuredMesh, fine: StructuredMesh) -> np.ndarray:
    """Fine-node index of every coarse node (nested refinement)."""
    r = fine.nx // coarse.nx
    i, j = np.meshgrid(np.arange(coarse.nx + 1), np.arange(coarse.ny + 1))
    return fine.node_index(i.ravel() * r, j.ravel() * r)


def locate_active_params(patch: CoarsePatch, model) -> List[int]:
    return [k for k, mode in enumerate(model.modes) if boxes_overlap(mode.support, patch.sample_box)]


def attach_active_params(patches: Sequence[CoarsePatch], model) -> List[CoarsePatch]:
    return [p.with_active_params(locate_active_params(p, model)) for p in patches]
