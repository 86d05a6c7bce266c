import numpy as np
import pytest

from femnet import fem
from femnet.errors import DegenerateInput, ShapeMismatch
from femnet.mesh import (
    DEFAULT_SLIVER_ANGLE,
    CellGeometry,
    Mesh,
    PointCloud,
    compute_geometry,
    delaunay_triangulate,
    filter_sliver_cells,
    load_mesh,
    make_mesh,
    min_boundary_angle,
    save_mesh,
    validate_mesh,
)

from helpers import circumcircle, convex_hull_area, hat_function


def grid_points(n):
    xs = np.linspace(0.0, 1.0, n)
    gx, gy = np.meshgrid(xs, xs)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def assert_delaunay(mesh: Mesh, tol=1e-10):
    """Brute force: no point lies strictly inside any cell's circumcircle."""
    pts = mesh.points.coords
    for cell in mesh.cells:
        center, r2 = circumcircle(pts[cell])
        d2 = np.sum((pts - center) ** 2, axis=1)
        d2[cell] = np.inf
        assert np.all(d2 >= r2 * (1.0 - tol)), (
            f"cell {cell} violates the empty-circumcircle property"
        )


class TestPointCloud:
    def test_rejects_duplicates(self):
        with pytest.raises(DegenerateInput):
            PointCloud(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]]))

    def test_rejects_too_few(self):
        with pytest.raises(DegenerateInput):
            PointCloud(np.array([[0.0, 0.0], [1.0, 0.0]]))

    def test_rejects_bad_shape(self):
        with pytest.raises(ShapeMismatch):
            PointCloud(np.zeros((4, 3)))


class TestDelaunay:
    def test_minimal_simplex(self):
        mesh = delaunay_triangulate(PointCloud(np.array([[0.0, 0.0], [1.0, 0.0], [0.3, 0.8]])))
        assert mesh.n_cells == 1
        assert mesh.boundary_faces.shape[0] == 3

    def test_unit_square(self):
        pts = PointCloud(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]))
        mesh = delaunay_triangulate(pts)
        assert mesh.n_cells == 2
        assert mesh.boundary_faces.shape[0] == 4
        areas = fem.cell_area(pts.coords[mesh.cells])
        assert areas.sum() == pytest.approx(1.0, rel=1e-12)

    def test_collinear_raises(self):
        pts = np.stack([np.linspace(0, 1, 5), np.linspace(0, 2, 5)], axis=1)
        with pytest.raises(DegenerateInput):
            delaunay_triangulate(PointCloud(pts))

    def test_empty_circumcircle_random(self):
        rng = np.random.default_rng(42)
        pts = PointCloud(rng.uniform(0, 1, size=(50, 2)))
        mesh = delaunay_triangulate(pts)
        validate_mesh(mesh)
        assert_delaunay(mesh)

    def test_empty_circumcircle_more_seeds(self):
        for seed in (7, 99, 1234):
            rng = np.random.default_rng(seed)
            pts = PointCloud(rng.uniform(-3, 5, size=(80, 2)))
            mesh = delaunay_triangulate(pts)
            validate_mesh(mesh)
            assert_delaunay(mesh)

    def test_regular_grid(self):
        mesh = delaunay_triangulate(PointCloud(grid_points(5)))
        validate_mesh(mesh)
        # 4x4 squares, two triangles each
        assert mesh.n_cells == 32
        assert_delaunay(mesh)

    def test_partition_of_unity(self):
        rng = np.random.default_rng(3)
        pts = PointCloud(rng.uniform(0, 2, size=(60, 2)))
        mesh = delaunay_triangulate(pts)
        total = fem.cell_area(pts.coords[mesh.cells]).sum()
        assert total == pytest.approx(convex_hull_area(pts.coords), rel=1e-9)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(11)
        coords = rng.uniform(0, 1, size=(30, 2))
        perm = rng.permutation(30)
        mesh_a = delaunay_triangulate(PointCloud(coords))
        mesh_b = delaunay_triangulate(PointCloud(coords[perm]))
        inv = np.argsort(perm)
        relabeled = {tuple(sorted(perm[list(c)])) for c in mesh_b.cells}
        del inv
        original = {tuple(sorted(c)) for c in mesh_a.cells}
        assert relabeled == original


class TestMinBoundaryAngle:
    def test_right_isoceles(self):
        pts = PointCloud(np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 0.5]]))
        ang = min_boundary_angle((0, 1, 2), (0, 1), pts)
        assert ang == pytest.approx(np.pi / 4.0, rel=1e-12)

    def test_monotone_in_apex_height(self):
        prev = 0.0
        for h in (0.1, 0.5, 1.0, 5.0, 50.0, 5000.0):
            pts = PointCloud(np.array([[0.0, 0.0], [1.0, 0.0], [0.5, h]]))
            ang = min_boundary_angle((0, 1, 2), (0, 1), pts)
            assert ang > prev
            prev = ang
        assert prev < np.pi / 2.0
        assert prev == pytest.approx(np.pi / 2.0, abs=1e-3)

    def test_near_degenerate_sliver(self):
        pts = PointCloud(np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 1e-3]]))
        ang = min_boundary_angle((0, 1, 2), (0, 1), pts)
        assert ang == pytest.approx(np.arctan(1e-3 / 0.5), rel=1e-9)
        assert ang < DEFAULT_SLIVER_ANGLE

    def test_face_must_be_subset(self):
        pts = PointCloud(np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 0.5], [2.0, 2.0]]))
        with pytest.raises(ShapeMismatch):
            min_boundary_angle((0, 1, 2), (0, 3), pts)


def cascading_sliver_mesh():
    """A near-collinear boundary chain: removing the boundary sliver exposes a
    previously-interior cell that is itself below the angle threshold."""
    pts = PointCloud(np.array([
        [0.0, 0.0],    # 0: A
        [4.0, 0.0],    # 1: B
        [2.0, 0.01],   # 2: xi1 (sliver apex, nearly on AB)
        [1.0, 0.03],   # 3: xi2 (nearly on A-xi1)
        [2.0, 3.0],    # 4: D (far apex)
    ]))
    cells = np.array([
        [0, 1, 2],  # boundary sliver
        [0, 2, 3],  # interior cell, becomes a sliver after the removal
        [2, 3, 4],
        [1, 2, 4],
        [0, 3, 4],
    ])
    return make_mesh(pts, cells)


class TestSliverFilter:
    def test_cascading_removal(self):
        mesh = cascading_sliver_mesh()
        filtered = filter_sliver_cells(mesh)
        kept = {tuple(c) for c in filtered.cells}
        assert (0, 1, 2) not in kept
        assert (0, 2, 3) not in kept
        assert kept == {(2, 3, 4), (1, 2, 4), (0, 3, 4)}
        validate_mesh(filtered)

    def test_interior_edges_still_shared(self):
        filtered = filter_sliver_cells(cascading_sliver_mesh())
        counts = {}
        for a, b, c in filtered.cells:
            for e in ((a, b), (a, c), (b, c)):
                counts[e] = counts.get(e, 0) + 1
        boundary = {tuple(f) for f in filtered.boundary_faces}
        for e, cnt in counts.items():
            assert cnt == (1 if e in boundary else 2)

    def test_grid_unchanged(self):
        mesh = delaunay_triangulate(PointCloud(grid_points(4)))
        filtered = filter_sliver_cells(mesh)
        assert np.array_equal(filtered.cells, mesh.cells)

    def test_single_cell_unchanged(self):
        # a single cell has three boundary faces, so the corner guard keeps it
        pts = PointCloud(np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 1e-4]]))
        mesh = make_mesh(pts, np.array([[0, 1, 2]]))
        filtered = filter_sliver_cells(mesh)
        assert np.array_equal(filtered.cells, mesh.cells)

    def test_idempotent(self):
        mesh = cascading_sliver_mesh()
        once = filter_sliver_cells(mesh)
        twice = filter_sliver_cells(once)
        assert np.array_equal(once.cells, twice.cells)

    def test_random_mesh_idempotent(self):
        rng = np.random.default_rng(17)
        pts = PointCloud(rng.uniform(0, 1, size=(60, 2)))
        once = filter_sliver_cells(delaunay_triangulate(pts))
        twice = filter_sliver_cells(once)
        assert np.array_equal(once.cells, twice.cells)


class TestComputeGeometry:
    def test_unit_right_triangle(self):
        pts = PointCloud(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
        mesh = make_mesh(pts, np.array([[0, 1, 2]]))
        (geo,) = compute_geometry(mesh)
        assert isinstance(geo, CellGeometry)
        assert geo.area == pytest.approx(0.5, rel=1e-14)
        assert np.allclose(geo.center, [1.0 / 3.0, 1.0 / 3.0])

    def test_local_coords_sum_to_zero(self):
        rng = np.random.default_rng(20)
        pts = PointCloud(rng.uniform(0, 1, size=(25, 2)))
        mesh = delaunay_triangulate(pts)
        for geo in compute_geometry(mesh):
            assert np.all(np.abs(geo.local_coords.sum(axis=0)) < 1e-12)

    def test_partition_of_unity_load(self):
        rng = np.random.default_rng(21)
        pts = PointCloud(rng.uniform(0, 1, size=(25, 2)))
        mesh = delaunay_triangulate(pts)
        for geo in compute_geometry(mesh):
            assert geo.load.sum() == pytest.approx(geo.area, rel=1e-12)

    def test_load_and_conv_match_quadrature(self):
        rng = np.random.default_rng(22)
        pts = PointCloud(rng.uniform(-1, 1, size=(12, 2)))
        mesh = delaunay_triangulate(pts)
        for cell, geo in zip(mesh.cells, compute_geometry(mesh)):
            v = pts.coords[cell]
            for i in range(3):
                phi_i, _ = hat_function(v, i)
                ref = fem.quadrature_integrate(phi_i, v, 7)
                assert geo.load[i] == pytest.approx(ref, rel=1e-12)
                for j in range(3):
                    _, grad_j = hat_function(v, j)
                    for axis in range(2):
                        ref = fem.quadrature_integrate(
                            lambda x: grad_j[axis] * phi_i(x), v, 7)
                        assert geo.conv[j, i, axis] == pytest.approx(ref, rel=1e-12, abs=1e-15)

    def test_sorted_order_deterministic(self):
        pts = PointCloud(np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 1.5]]))
        mesh = make_mesh(pts, np.array([[0, 1, 2]]))
        (geo,) = compute_geometry(mesh)
        angles = np.arctan2(geo.local_coords[:, 1], geo.local_coords[:, 0])
        sorted_angles = angles[geo.sorted_order]
        assert np.all(np.diff(sorted_angles) >= 0)


class TestMeshIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(30)
        pts = PointCloud(rng.uniform(0, 1, size=(20, 2)))
        mesh = delaunay_triangulate(pts)
        path = tmp_path / "mesh.json"
        save_mesh(mesh, path)
        loaded = load_mesh(path)
        assert np.array_equal(loaded.cells, mesh.cells)
        assert np.array_equal(loaded.boundary_faces, mesh.boundary_faces)
        assert np.array_equal(loaded.points.coords, mesh.points.coords)

    def test_import_validates(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"points": [[0,0],[1,0],[0,1]], "cells": [[0,1,5]]}')
        with pytest.raises(DegenerateInput):
            load_mesh(path)
