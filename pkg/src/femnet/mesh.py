"""Triangulated domains: Delaunay meshing, sliver filtering, cell geometry.

The triangulation is built with incremental Bowyer-Watson insertion into a
huge enclosing triangle.  The in-circle decision is a 3x3 determinant on
coordinates rescaled to unit span, taken as "inside" only beyond a 1e-10
margin, so exactly cocircular configurations (regular grids) resolve to an
arbitrary but valid diagonal.  A Lawson flip pass cleans up any residual
non-Delaunay interior edges once the enclosing triangle is discarded.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fem
from .errors import DegenerateInput, EmptyMesh, ShapeMismatch

DEFAULT_SLIVER_ANGLE = 10.0 * np.pi / 180.0

_INCIRCLE_TOL = 1e-10
_SUPER_SCALE = 1e6
_MIN_POINT_SEP = 1e-12


@dataclass(frozen=True)
class PointCloud:
    """Scattered sample locations in the plane, dimensionless after normalization."""

    coords: np.ndarray  # (N, 2) float64

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ShapeMismatch(f"points must be (N, 2), got {coords.shape}")
        if coords.shape[0] < 3:
            raise DegenerateInput(f"need at least 3 points, got {coords.shape[0]}")
        if not np.isfinite(coords).all():
            raise DegenerateInput("point coordinates must be finite")
        object.__setattr__(self, "coords", coords)
        # pairwise separation check, chunked to bound memory
        n = coords.shape[0]
        for start in range(0, n, 512):
            block = coords[start:start + 512]
            d2 = np.sum((block[:, None, :] - coords[None, :, :]) ** 2, axis=2)
            rows = np.arange(block.shape[0])
            d2[rows, start + rows] = np.inf
            if d2.min() <= _MIN_POINT_SEP ** 2:
                i, j = np.unravel_index(np.argmin(d2), d2.shape)
                raise DegenerateInput(f"points {start + i} and {j} coincide")

    def __len__(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class Mesh:
    """A triangulation: points, cells as vertex triples, and boundary edges.

    Cell rows are stored with ascending vertex ids and rows sorted
    lexicographically, so meshes compare canonically.
    """

    points: PointCloud
    cells: np.ndarray           # (N_T, 3) int64
    boundary_faces: np.ndarray  # (N_B, 2) int64

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]


def _canonical_cells(cells: np.ndarray) -> np.ndarray:
    cells = np.sort(np.asarray(cells, dtype=np.int64), axis=1)
    order = np.lexsort((cells[:, 2], cells[:, 1], cells[:, 0]))
    return cells[order]


def _canonical_faces(faces: np.ndarray) -> np.ndarray:
    faces = np.sort(np.asarray(faces, dtype=np.int64).reshape(-1, 2), axis=1)
    if faces.shape[0] == 0:
        return faces
    order = np.lexsort((faces[:, 1], faces[:, 0]))
    return faces[order]


def _face_counts(cells: np.ndarray) -> dict[tuple[int, int], int]:
    counts: dict[tuple[int, int], int] = {}
    for a, b, c in cells:
        for e in ((a, b), (a, c), (b, c)):
            counts[e] = counts.get(e, 0) + 1
    return counts


def boundary_faces_of(cells: np.ndarray) -> np.ndarray:
    """Edges that belong to exactly one cell."""
    counts = _face_counts(_canonical_cells(cells))
    edges = [e for e, c in counts.items() if c == 1]
    return _canonical_faces(np.array(edges, dtype=np.int64).reshape(-1, 2))


def make_mesh(points: PointCloud, cells: np.ndarray,
              boundary_faces: np.ndarray | None = None,
              validate: bool = True) -> Mesh:
    cells = _canonical_cells(cells)
    if boundary_faces is None:
        boundary_faces = boundary_faces_of(cells)
    else:
        boundary_faces = _canonical_faces(boundary_faces)
    mesh = Mesh(points=points, cells=cells, boundary_faces=boundary_faces)
    if validate:
        validate_mesh(mesh)
    return mesh


def validate_mesh(mesh: Mesh) -> None:
    """Check the structural mesh invariants, raising on violation."""
    n = len(mesh.points)
    cells = mesh.cells
    if cells.ndim != 2 or cells.shape[1] != 3:
        raise ShapeMismatch(f"cells must be (N_T, 3), got {cells.shape}")
    if cells.shape[0] == 0:
        raise EmptyMesh("mesh has no cells")
    if cells.min() < 0 or cells.max() >= n:
        raise DegenerateInput("cell vertex index out of range")
    if np.any(np.diff(np.sort(cells, axis=1), axis=1) == 0):
        raise DegenerateInput("cell with repeated vertex")
    # positive areas (raises DegenerateCell on slivers below tolerance)
    fem._geometry_arrays(mesh.points.coords, cells)
    counts = _face_counts(cells)
    if any(c > 2 for c in counts.values()):
        raise DegenerateInput("a face belongs to more than two cells")
    expected = {tuple(f) for f in boundary_faces_of(cells)}
    actual = {tuple(f) for f in mesh.boundary_faces}
    if expected != actual:
        raise DegenerateInput("boundary_faces disagree with cell incidence")


# ---------------------------------------------------------------------------
# Delaunay triangulation


def _incircle(tri_pts: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Positive where p is strictly inside the circumcircle of each triangle.

    tri_pts has shape (T, 3, 2); the determinant is orientation-corrected.
    """
    rel = tri_pts - p  # (T, 3, 2)
    sq = np.sum(rel ** 2, axis=2)
    det = (
        rel[:, 0, 0] * (rel[:, 1, 1] * sq[:, 2] - rel[:, 2, 1] * sq[:, 1])
        - rel[:, 0, 1] * (rel[:, 1, 0] * sq[:, 2] - rel[:, 2, 0] * sq[:, 1])
        + sq[:, 0] * (rel[:, 1, 0] * rel[:, 2, 1] - rel[:, 2, 0] * rel[:, 1, 1])
    )
    orient = np.sign(fem.signed_area2(tri_pts))
    return det * orient


def delaunay_triangulate(points: PointCloud) -> Mesh:
    """Delaunay triangulation of the convex hull by Bowyer-Watson insertion."""
    raw = points.coords
    n = raw.shape[0]
    center = raw.mean(axis=0)
    span = float(np.ptp(raw, axis=0).max())
    if span <= 0:
        raise DegenerateInput("all points coincide")
    pts = (raw - center) / span  # unit-span working copy
    # collinearity check via second singular value
    sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    if sv[1] < 1e-12:
        raise DegenerateInput("points are collinear")

    s = _SUPER_SCALE
    super_pts = np.array([[-s, -s], [s, -s], [0.0, s]])
    work = np.vstack([pts, super_pts])

    capacity = 4 * n + 16
    tri_v = np.empty((capacity, 3), dtype=np.int64)
    tri_xy = np.empty((capacity, 3, 2))
    alive = np.zeros(capacity, dtype=bool)
    tri_v[0] = (n, n + 1, n + 2)
    tri_xy[0] = work[tri_v[0]]
    alive[0] = True
    count = 1

    def push(a: int, b: int, c: int) -> None:
        nonlocal count, capacity, tri_v, tri_xy, alive
        if count == capacity:
            capacity *= 2
            tri_v = np.resize(tri_v, (capacity, 3))
            tri_xy = np.resize(tri_xy, (capacity, 3, 2))
            alive = np.resize(alive, capacity)
            alive[count:] = False
        tri_v[count] = (a, b, c)
        tri_xy[count] = work[[a, b, c]]
        alive[count] = True
        count += 1

    for ip in range(n):
        p = work[ip]
        inside = np.zeros(count, dtype=bool)
        mask = alive[:count]
        inside[mask] = _incircle(tri_xy[:count][mask], p) > _INCIRCLE_TOL
        bad = np.nonzero(inside)[0]
        if bad.size == 0:
            raise DegenerateInput(f"insertion of point {ip} found no cavity")
        # cavity boundary: edges used exactly once among the bad triangles
        edge_count: dict[tuple[int, int], int] = {}
        for ti in bad:
            a, b, c = tri_v[ti]
            for e in ((a, b), (b, c), (a, c)):
                e = (e[0], e[1]) if e[0] < e[1] else (e[1], e[0])
                edge_count[e] = edge_count.get(e, 0) + 1
            alive[ti] = False
        for (a, b), cnt in edge_count.items():
            if cnt != 1:
                continue
            area2 = fem.signed_area2(work[[a, b, ip]][None])[0]
            if abs(area2) < 1e-14:
                continue  # point exactly on this boundary edge
            push(int(a), int(b), ip)

    cells = [tuple(tri_v[i]) for i in range(count)
             if alive[i] and tri_v[i].max() < n]
    if not cells:
        raise DegenerateInput("triangulation is empty")
    cells = _lawson_flips(pts, np.array(cells, dtype=np.int64))
    return make_mesh(points, cells)


def _lawson_flips(pts: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """Flip interior edges until the local Delaunay criterion holds."""
    cell_set = {tuple(sorted(c)) for c in map(tuple, cells)}

    def edges_of(c):
        a, b, d = sorted(c)
        return ((a, b), (a, d), (b, d))

    def rebuild_edge_map():
        m: dict[tuple[int, int], list[tuple[int, int, int]]] = {}
        for c in cell_set:
            for e in edges_of(c):
                m.setdefault(e, []).append(c)
        return m

    edge_map = rebuild_edge_map()
    queue = [e for e, cs in edge_map.items() if len(cs) == 2]
    budget = 20 * len(cells) + 100
    while queue and budget > 0:
        budget -= 1
        e = queue.pop()
        cs = edge_map.get(e)
        if cs is None or len(cs) != 2 or cs[0] not in cell_set or cs[1] not in cell_set:
            continue
        a, b = e
        c = next(v for v in cs[0] if v not in e)
        d = next(v for v in cs[1] if v not in e)
        check = _incircle(pts[[list(cs[0])]], pts[d])[0]
        if check <= _INCIRCLE_TOL:
            continue
        new1 = tuple(sorted((c, d, a)))
        new2 = tuple(sorted((c, d, b)))
        if abs(fem.signed_area2(pts[list(new1)][None])[0]) < 1e-14:
            continue
        if abs(fem.signed_area2(pts[list(new2)][None])[0]) < 1e-14:
            continue
        for old in cs:
            cell_set.discard(old)
            for oe in edges_of(old):
                if oe in edge_map and old in edge_map[oe]:
                    edge_map[oe].remove(old)
        for new in (new1, new2):
            cell_set.add(new)
            for ne in edges_of(new):
                edge_map.setdefault(ne, []).append(new)
                if len(edge_map[ne]) == 2:
                    queue.append(ne)
    return np.array(sorted(cell_set), dtype=np.int64)


# ---------------------------------------------------------------------------
# Sliver filtering (boundary cells with a tiny interior angle)


def min_boundary_angle(cell, boundary_face, points: PointCloud) -> float:
    """Smallest angle at the face endpoints between the face line and the apex.

    The apex (the cell vertex not on the face) is projected onto the line
    through the face; the result is the smaller of the two angles between
    segment A->projection and segment A->apex over the face endpoints A.
    """
    face = set(boundary_face)
    if not face < set(cell):
        raise ShapeMismatch("boundary face must be a subset of the cell")
    (apex,) = set(cell) - face
    coords = points.coords
    a, b = (coords[v] for v in sorted(face))
    xi = coords[apex]
    direction = b - a
    norm2 = float(direction @ direction)
    t = float((xi - a) @ direction) / norm2
    proj = a + t * direction
    gamma = np.pi
    for anchor in (a, b):
        u = proj - anchor
        v = xi - anchor
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu < 1e-300 or nv < 1e-300:
            ang = np.pi / 2.0  # apex directly above an endpoint
        else:
            ang = np.arccos(np.clip((u @ v) / (nu * nv), -1.0, 1.0))
        gamma = min(gamma, ang)
    return float(gamma)


def filter_sliver_cells(mesh: Mesh, threshold: float = DEFAULT_SLIVER_ANGLE) -> Mesh:
    """Iteratively remove boundary cells whose interior angle at the boundary
    face is below the threshold.

    Only cells with exactly one boundary face are candidates; cells at corners
    (two or more boundary faces) are never removed, so the final cell always
    survives and the mesh cannot empty out. Removing a cell exposes its other
    two edges as boundary faces and requeues their cells.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    cells = [tuple(c) for c in map(tuple, mesh.cells)]
    cell_alive = [True] * len(cells)
    face_map: dict[tuple[int, int], list[int]] = {}
    for idx, (a, b, c) in enumerate(cells):
        for e in ((a, b), (a, c), (b, c)):
            face_map.setdefault(e, []).append(idx)
    boundary: set[tuple[int, int]] = {tuple(f) for f in mesh.boundary_faces}
    counts = [sum(1 for e in _cell_edges(c) if e in boundary) for c in cells]

    queue = [i for i, c in enumerate(counts) if c == 1]
    while queue:
        idx = queue.pop(0)
        if not cell_alive[idx] or counts[idx] != 1:
            continue
        cell = cells[idx]
        face = next(e for e in _cell_edges(cell) if e in boundary)
        if min_boundary_angle(cell, face, mesh.points) >= threshold:
            continue
        cell_alive[idx] = False
        (apex,) = set(cell) - set(face)
        for vertex in face:
            new_face = (vertex, apex) if vertex < apex else (apex, vertex)
            boundary.add(new_face)
            for other in face_map.get(new_face, []):
                if other != idx and cell_alive[other]:
                    counts[other] += 1
                    queue.append(other)

    kept = [c for c, ok in zip(cells, cell_alive) if ok]
    if not kept:
        raise EmptyMesh("sliver filtering removed every cell")
    return make_mesh(mesh.points, np.array(kept, dtype=np.int64))


def _cell_edges(cell: tuple[int, int, int]):
    a, b, c = cell
    return ((a, b), (a, c), (b, c))


# ---------------------------------------------------------------------------
# Per-cell geometry


@dataclass(frozen=True)
class CellGeometry:
    """Precomputed geometric quantities for one cell.

    Vertex-indexed arrays follow the cell's stored (ascending) vertex order;
    sorted_order is the permutation into polar-angle order around the center,
    ties broken by vertex index.
    """

    center: np.ndarray        # (2,)
    local_coords: np.ndarray  # (3, 2)
    area: float
    sorted_order: np.ndarray  # (3,) permutation
    load: np.ndarray          # (3,)
    conv: np.ndarray          # (3, 3, 2), conv[j][i] = <grad phi_j, phi_i>
    basis_grads: np.ndarray   # (3, 2)


def compute_geometry(mesh: Mesh) -> list[CellGeometry]:
    geo = fem._geometry_arrays(mesh.points.coords, mesh.cells)
    out = []
    for i in range(mesh.n_cells):
        out.append(CellGeometry(
            center=geo["centers"][i],
            local_coords=geo["local_coords"][i],
            area=float(geo["areas"][i]),
            sorted_order=geo["sorted_order"][i],
            load=geo["load"][i],
            conv=geo["conv"][i],
            basis_grads=geo["basis_grads"][i],
        ))
    return out


# ---------------------------------------------------------------------------
# Mesh files


def save_mesh(mesh: Mesh, path: str | Path) -> None:
    payload = {
        "points": mesh.points.coords.tolist(),
        "cells": mesh.cells.tolist(),
        "boundary_faces": mesh.boundary_faces.tolist(),
    }
    Path(path).write_text(json.dumps(payload))


def load_mesh(path: str | Path) -> Mesh:
    payload = json.loads(Path(path).read_text())
    points = PointCloud(np.array(payload["points"], dtype=np.float64))
    faces = payload.get("boundary_faces")
    return make_mesh(
        points,
        np.array(payload["cells"], dtype=np.int64),
        None if faces is None else np.array(faces, dtype=np.int64),
    )
