"""Closed-form P1 finite-element quantities on triangle meshes.

All per-cell integrals have exact closed forms for the piecewise-linear hat
basis: the local mass matrix is area/6 on the diagonal and area/12 off it,
the load values <1, phi_i> are area/3, and the convection inner products
<grad phi_j, phi_i> equal the (cell-constant) gradient of phi_j times area/3.
A Gauss quadrature rule on the reference triangle is provided as an
independent check; production code never integrates numerically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable

import numpy as np

from .errors import DegenerateCell, IsolatedNode, ShapeMismatch

if TYPE_CHECKING:  # pragma: no cover
    from .mesh import Mesh

_AREA_TOL = 1e-12

# Gauss points on the reference triangle in barycentric coordinates.
# Weights sum to 1 and are multiplied by the cell area on use.
_SQRT15 = np.sqrt(15.0)
_QUADRATURE = {
    1: (np.array([[1 / 3, 1 / 3, 1 / 3]]), np.array([1.0])),
    3: (
        np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]),
        np.array([1 / 3, 1 / 3, 1 / 3]),
    ),
    7: (
        np.array(
            [
                [1 / 3, 1 / 3, 1 / 3],
                [(6 + _SQRT15) / 21, (6 + _SQRT15) / 21, (9 - 2 * _SQRT15) / 21],
                [(6 + _SQRT15) / 21, (9 - 2 * _SQRT15) / 21, (6 + _SQRT15) / 21],
                [(9 - 2 * _SQRT15) / 21, (6 + _SQRT15) / 21, (6 + _SQRT15) / 21],
                [(6 - _SQRT15) / 21, (6 - _SQRT15) / 21, (9 + 2 * _SQRT15) / 21],
                [(6 - _SQRT15) / 21, (9 + 2 * _SQRT15) / 21, (6 - _SQRT15) / 21],
                [(9 + 2 * _SQRT15) / 21, (6 - _SQRT15) / 21, (6 - _SQRT15) / 21],
            ]
        ),
        np.array(
            [9 / 40]
            + [(155 + _SQRT15) / 1200] * 3
            + [(155 - _SQRT15) / 1200] * 3
        ),
    ),
}


def signed_area2(vertices: np.ndarray) -> np.ndarray:
    """Twice the signed area; works on (3, 2) or batched (T, 3, 2) input."""
    v = np.asarray(vertices, dtype=np.float64)
    d1 = v[..., 1, :] - v[..., 0, :]
    d2 = v[..., 2, :] - v[..., 0, :]
    return d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]


def cell_area(vertices: np.ndarray) -> np.ndarray:
    return np.abs(signed_area2(vertices)) / 2.0


def local_mass(area: float) -> np.ndarray:
    """3x3 Gram matrix of the hat functions restricted to one cell."""
    if area <= 0:
        raise DegenerateCell(f"cell area must be positive, got {area}")
    m = np.full((3, 3), area / 12.0)
    np.fill_diagonal(m, area / 6.0)
    return m


def load_vector(area: float) -> np.ndarray:
    """<1, phi_i> for the three vertices; each equals area/3."""
    if area <= 0:
        raise DegenerateCell(f"cell area must be positive, got {area}")
    return np.full(3, area / 3.0)


def basis_gradients(vertices: np.ndarray) -> np.ndarray:
    """Constant gradients of the three hat functions on one cell.

    The last gradient is computed as minus the sum of the first two so the
    zero-sum identity holds bitwise.
    """
    v = np.asarray(vertices, dtype=np.float64)
    if v.shape != (3, 2):
        raise ShapeMismatch(f"expected (3, 2) vertices, got {v.shape}")
    two_a = signed_area2(v)
    if abs(two_a) / 2.0 < _AREA_TOL:
        raise DegenerateCell("cell area below tolerance")
    g0 = np.array([v[1, 1] - v[2, 1], v[2, 0] - v[1, 0]]) / two_a
    g1 = np.array([v[2, 1] - v[0, 1], v[0, 0] - v[2, 0]]) / two_a
    return np.stack([g0, g1, -g0 - g1])


def convection_products(vertices: np.ndarray) -> np.ndarray:
    """C[j][i] = <grad phi_j, phi_i> as a (3, 3, 2) array."""
    grads = basis_gradients(vertices)
    load = load_vector(cell_area(vertices))
    return grads[:, None, :] * load[None, :, None]


def quadrature_integrate(fn: Callable[[np.ndarray], float], vertices: np.ndarray,
                         order: int = 7) -> float:
    """Integrate a scalar function over one cell with a Gauss rule.

    Exact for polynomials up to the rule's degree (1, 2 and 5 for orders
    1, 3 and 7). Used only for verification.
    """
    if order not in _QUADRATURE:
        raise ValueError(f"order must be one of {sorted(_QUADRATURE)}, got {order}")
    bary, weights = _QUADRATURE[order]
    v = np.asarray(vertices, dtype=np.float64)
    points = bary @ v
    area = cell_area(v)
    return float(area * sum(w * fn(p) for w, p in zip(weights, points)))


@dataclass(frozen=True)
class LumpedMass:
    """Diagonal of the row-sum lumped mass matrix."""

    diag: np.ndarray  # (N,) positive

    @property
    def total(self) -> float:
        return float(self.diag.sum())


def _geometry_arrays(coords: np.ndarray, cells: np.ndarray) -> dict:
    """Vectorized per-cell geometry in the cells' stored vertex order.

    Local coordinates are built from vertex differences only, so meshes that
    differ by an exactly representable translation produce bit-identical
    shape quantities.
    """
    v = coords[cells]  # (T, 3, 2)
    d1 = v[:, 1, :] - v[:, 0, :]
    d2 = v[:, 2, :] - v[:, 0, :]
    two_a = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    areas = np.abs(two_a) / 2.0
    if np.any(areas < _AREA_TOL):
        bad = int(np.argmin(areas))
        raise DegenerateCell(f"cell {bad} has area {areas[bad]:.3e}")

    lc0 = -(d1 + d2) / 3.0
    local = np.stack([lc0, d1 + lc0, d2 + lc0], axis=1)  # (T, 3, 2)
    centers = v[:, 0, :] - lc0

    g0 = np.stack([v[:, 1, 1] - v[:, 2, 1], v[:, 2, 0] - v[:, 1, 0]], axis=1)
    g0 = g0 / two_a[:, None]
    g1 = np.stack([v[:, 2, 1] - v[:, 0, 1], v[:, 0, 0] - v[:, 2, 0]], axis=1)
    g1 = g1 / two_a[:, None]
    grads = np.stack([g0, g1, -g0 - g1], axis=1)  # (T, 3, 2)

    load = np.repeat(areas[:, None] / 3.0, 3, axis=1)  # (T, 3)
    conv = grads[:, :, None, :] * load[:, None, :, None]  # (T, j, i, 2)

    angles = np.arctan2(local[:, :, 1], local[:, :, 0])
    # Cells store vertices in ascending index order, so a stable sort on the
    # angle breaks exact ties by vertex index.
    order = np.argsort(angles, axis=1, kind="stable")
    return {
        "areas": areas,
        "centers": centers,
        "local_coords": local,
        "basis_grads": grads,
        "load": load,
        "conv": conv,
        "sorted_order": order,
    }


def lumped_mass(mesh: "Mesh", geometry: dict | None = None) -> LumpedMass:
    """Row-sum lumping: node i accumulates area/3 from each adjacent cell."""
    if geometry is None:
        geometry = _geometry_arrays(mesh.points.coords, mesh.cells)
    n = mesh.points.coords.shape[0]
    diag = np.zeros(n)
    np.add.at(diag, mesh.cells.ravel(), geometry["load"].ravel())
    if np.any(diag <= 0.0):
        orphan = int(np.argmin(diag))
        raise IsolatedNode(f"node {orphan} belongs to no cell")
    return LumpedMass(diag=diag)


@dataclass
class MeshArtifacts:
    """Everything the dynamics need, packed as arrays in sorted-vertex order."""

    mesh: "Mesh"
    cells_sorted: np.ndarray   # (T, 3) global vertex ids, polar-angle order
    centers: np.ndarray        # (T, 2)
    local_coords: np.ndarray   # (T, 3, 2) aligned with cells_sorted
    areas: np.ndarray          # (T,)
    load: np.ndarray           # (T, 3)
    basis_grads: np.ndarray    # (T, 3, 2)
    conv: np.ndarray           # (T, 3, 3, 2), C[j][i] in sorted order
    lumped: LumpedMass
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def build(cls, mesh: "Mesh") -> "MeshArtifacts":
        geo = _geometry_arrays(mesh.points.coords, mesh.cells)
        order = geo["sorted_order"]
        cells_sorted = np.take_along_axis(mesh.cells, order, axis=1)
        conv = np.take_along_axis(geo["conv"], order[:, :, None, None], axis=1)
        conv = np.take_along_axis(conv, order[:, None, :, None], axis=2)
        return cls(
            mesh=mesh,
            cells_sorted=cells_sorted,
            centers=geo["centers"],
            local_coords=np.take_along_axis(geo["local_coords"], order[:, :, None], axis=1),
            areas=geo["areas"],
            load=np.take_along_axis(geo["load"], order, axis=1),
            basis_grads=np.take_along_axis(geo["basis_grads"], order[:, :, None], axis=1),
            conv=conv,
            lumped=lumped_mass(mesh, geo),
        )

    @property
    def n_nodes(self) -> int:
        return self.mesh.points.coords.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells_sorted.shape[0]
