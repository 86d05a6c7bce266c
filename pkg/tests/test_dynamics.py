import numpy as np
import pytest

from femnet import autodiff as ad
from femnet import dynamics, fem, nn
from femnet.data import oracle_fem_rhs
from femnet.dynamics import (
    DirichletMask,
    build_model,
    cell_velocities,
    freeform_messages,
    time_derivative,
    time_derivative_terms,
    time_embed,
    transport_messages,
)
from femnet.errors import TransportAbsent
from femnet.fem import MeshArtifacts
from femnet.mesh import PointCloud, delaunay_triangulate, make_mesh

from helpers import assert_gradients_close, finite_difference_gradient, hat_function


def small_mesh(seed=0, n=12):
    rng = np.random.default_rng(seed)
    pts = PointCloud(rng.uniform(0, 1, size=(n, 2)))
    return MeshArtifacts.build(delaunay_triangulate(pts))


def single_cell_art(vertices):
    mesh = make_mesh(PointCloud(np.asarray(vertices)), np.array([[0, 1, 2]]))
    return MeshArtifacts.build(mesh)


def force_constant_output(params: nn.MlpParams, values):
    """With zero last-layer weights the MLP output equals the last bias."""
    params.biases[-1].data = np.asarray(values, dtype=np.float64)


class TestTimeEmbed:
    def test_without_period(self):
        assert time_embed(1.7) == (1.7,)

    def test_quarter_period(self):
        s, c = time_embed(0.25, period=1.0)
        assert s == pytest.approx(1.0)
        assert c == pytest.approx(0.0, abs=1e-15)

    def test_zero(self):
        assert time_embed(0.0, period=1.0) == (0.0, 1.0)

    def test_continuous_across_period_boundary(self):
        before = np.array(time_embed(1.0 - 1e-9, period=1.0))
        after = np.array(time_embed(1.0 + 1e-9, period=1.0))
        assert np.abs(before - after).max() < 1e-7


class TestModelShapes:
    def test_input_dim_autonomous_stationary(self):
        model = build_model("fen", m=1, seed=0, hidden_width=8)
        assert model.input_dim() == 9  # 3 * (1 + 2)
        assert model.freeform.in_dim == 9
        assert model.freeform.out_dim == 3

    def test_input_dim_full(self):
        model = build_model("fen", m=1, seed=0, hidden_width=8,
                            autonomous=False, stationary=False)
        assert model.input_dim() == 12  # 1 + 2 + 9

    def test_input_dim_with_period(self):
        model = build_model("tfen", m=2, seed=0, hidden_width=8,
                            autonomous=False, stationary=False, time_period=1.0)
        assert model.input_dim() == 2 + 2 + 3 * (2 + 2)
        assert model.transport.out_dim == 4  # m * d

    def test_default_widths(self):
        assert build_model("fen", m=1, seed=0).freeform.weights[0].data.shape[0] == 128
        assert build_model("tfen", m=1, seed=0).freeform.weights[0].data.shape[0] == 96


class TestAssembly:
    def test_vertex_storage_order_irrelevant(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.1], [0.4, 0.9], [1.2, 1.1]])
        cells_a = np.array([[0, 1, 2], [1, 2, 3]])
        cells_b = np.array([[2, 0, 1], [3, 1, 2]])
        model = build_model("fen", m=1, seed=1, hidden_width=8)
        rng = np.random.default_rng(2)
        y = rng.uniform(-1, 1, (4, 1))
        arts = [MeshArtifacts.build(make_mesh(PointCloud(pts), c))
                for c in (cells_a, cells_b)]
        inputs = [dynamics.assemble_cell_input(model, 0.0, a, ad.constant(y)).data
                  for a in arts]
        assert np.array_equal(inputs[0], inputs[1])

    def test_time_features_included_when_not_autonomous(self):
        art = small_mesh()
        model = build_model("fen", m=1, seed=0, hidden_width=8, autonomous=False)
        y = np.zeros((art.n_nodes, 1))
        inp = dynamics.assemble_cell_input(model, 2.5, art, ad.constant(y))
        assert inp.data.shape == (art.n_cells, 10)
        assert np.all(inp.data[:, 0] == 2.5)


class TestFreeformMessages:
    def test_zero_init_gives_zero(self):
        art = small_mesh()
        model = build_model("fen", m=2, seed=3, hidden_width=8)
        y = np.random.default_rng(0).uniform(-1, 1, (art.n_nodes, 2))
        msgs = freeform_messages(model, 0.0, y, art)
        assert np.array_equal(msgs, np.zeros_like(y))

    def test_forced_constant_one_single_cell(self):
        art = single_cell_art([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        model = build_model("fen", m=1, seed=4, hidden_width=8)
        force_constant_output(model.freeform, np.ones(3))
        y = np.zeros((3, 1))
        msgs = freeform_messages(model, 0.0, y, art)
        assert np.allclose(msgs, 0.5 / 3.0)  # load value area/3 at each vertex

    def test_messages_scale_with_area(self):
        verts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        model = build_model("fen", m=1, seed=5, hidden_width=8)
        force_constant_output(model.freeform, np.array([0.3, -0.7, 1.1]))
        y = np.zeros((3, 1))
        m1 = freeform_messages(model, 0.0, y, single_cell_art(verts))
        m2 = freeform_messages(model, 0.0, y, single_cell_art(verts * np.sqrt(2.0)))
        assert np.allclose(m2, 2.0 * m1)


class TestTransportMessages:
    def test_requires_transport(self):
        art = small_mesh()
        model = build_model("fen", m=1, seed=6, hidden_width=8)
        with pytest.raises(TransportAbsent):
            transport_messages(model, 0.0, np.zeros((art.n_nodes, 1)), art)

    def test_constant_field_is_fixed_point(self):
        art = small_mesh(seed=8, n=20)
        model = build_model("tfen", m=1, seed=7, hidden_width=8)
        force_constant_output(model.transport, np.array([0.31, -0.12]))
        y = np.full((art.n_nodes, 1), 2.7)
        msgs = transport_messages(model, 0.0, y, art)
        assert np.abs(msgs).max() < 1e-14

    def test_zero_velocity_gives_exact_zero(self):
        art = small_mesh(seed=9)
        model = build_model("tfen", m=1, seed=8, hidden_width=8)  # zero init
        y = np.random.default_rng(1).uniform(-1, 1, (art.n_nodes, 1))
        msgs = transport_messages(model, 0.0, y, art)
        assert np.array_equal(msgs, np.zeros_like(y))

    def test_linear_field_single_cell_analytic(self):
        verts = np.array([[0.1, 0.2], [1.0, 0.3], [0.4, 1.1]])
        art = single_cell_art(verts)
        a_vec = np.array([0.8, -0.5])
        v = np.array([0.3, 0.9])
        model = build_model("tfen", m=1, seed=9, hidden_width=8)
        force_constant_output(model.transport, v)
        y = (verts @ a_vec)[:, None]  # linear field a . x at the nodes
        msgs = transport_messages(model, 0.0, y, art)
        area = float(fem.cell_area(verts))
        expected = -(v @ a_vec) * area / 3.0
        assert np.allclose(msgs, expected, rtol=1e-12)
        # cross-check against quadrature of -(v . grad u) phi_i
        for local, node in enumerate(art.cells_sorted[0]):
            phi, _ = hat_function(verts, local_index_of(art, local))
            ref = fem.quadrature_integrate(
                lambda x: -(v @ a_vec) * phi(x), verts, 7)
            assert msgs[node, 0] == pytest.approx(ref, rel=1e-12)


def local_index_of(art, sorted_slot):
    """Map a sorted-vertex slot back to the cell's stored vertex position."""
    mesh_cell = art.mesh.cells[0]
    node = art.cells_sorted[0][sorted_slot]
    return int(np.nonzero(mesh_cell == node)[0][0])


class TestTimeDerivative:
    def test_zero_init_constant_dynamics(self):
        art = small_mesh(seed=10)
        for variant in ("fen", "tfen"):
            model = build_model(variant, m=1, seed=11, hidden_width=8)
            y = np.random.default_rng(2).uniform(-1, 1, (art.n_nodes, 1))
            dy = time_derivative(model, 0.0, y, art)
            assert np.array_equal(dy, np.zeros_like(y))

    def test_matches_classical_convection_oracle(self):
        art = small_mesh(seed=12, n=25)
        v = np.array([0.4, -0.2])
        model = build_model("tfen", m=1, seed=13, hidden_width=8)
        force_constant_output(model.transport, v)  # freeform stays zero
        y = np.random.default_rng(3).uniform(-1, 1, (art.n_nodes, 1))
        dy = time_derivative(model, 0.0, y, art)
        vel = np.broadcast_to(v, (art.n_cells, 1, 2)).copy()
        ref = oracle_fem_rhs(y, art, vel)
        assert np.abs(dy - ref).max() < 1e-10

    def test_fully_masked_state_is_frozen(self):
        art = small_mesh(seed=14)
        model = build_model("tfen", m=1, seed=15, hidden_width=8)
        force_constant_output(model.freeform, np.array([1.0, 2.0, 3.0]))
        force_constant_output(model.transport, np.array([0.5, 0.5]))
        y = np.random.default_rng(4).uniform(-1, 1, (art.n_nodes, 1))
        mask = DirichletMask(mask=np.ones_like(y, dtype=bool), fixed_values=y.copy())
        dy = time_derivative(model, 0.0, y, art, mask)
        assert np.array_equal(dy, np.zeros_like(y))

    def test_partial_mask(self):
        art = small_mesh(seed=16)
        model = build_model("fen", m=1, seed=17, hidden_width=8)
        force_constant_output(model.freeform, np.array([1.0, 1.0, 1.0]))
        y = np.zeros((art.n_nodes, 1))
        mask = np.zeros_like(y, dtype=bool)
        mask[:3] = True
        dy = time_derivative(model, 0.0, y, art,
                             DirichletMask(mask=mask, fixed_values=y))
        assert np.array_equal(dy[:3], np.zeros((3, 1)))
        assert np.all(dy[3:] != 0.0)

    def test_single_message_passing_step_locality(self):
        # one evaluation only propagates across shared cells, not further
        art = small_mesh(seed=18, n=30)
        model = build_model("tfen", m=1, seed=19, hidden_width=8)
        rng = np.random.default_rng(5)
        for p in model.parameters():
            p.data = rng.uniform(-0.3, 0.3, p.data.shape)
        y = rng.uniform(-1, 1, (art.n_nodes, 1))
        base = time_derivative(model, 0.0, y, art)

        cells = art.cells_sorted
        node = 0
        adjacent = {int(v) for c in cells if node in c for v in c}
        far = next(i for i in range(art.n_nodes) if i not in adjacent)
        y2 = y.copy()
        y2[far, 0] += 0.537
        bumped = time_derivative(model, 0.0, y2, art)
        assert bumped[node, 0] == base[node, 0]

    def test_stationary_translation_bitwise(self):
        # dyadic coordinates and a power-of-two translation stay exact in fp
        rng = np.random.default_rng(6)
        coords = np.round(rng.uniform(0, 1, (15, 2)) * 1024) / 1024
        coords = np.unique(coords, axis=0)
        mesh = delaunay_triangulate(PointCloud(coords))
        art1 = MeshArtifacts.build(mesh)
        shifted = make_mesh(PointCloud(coords + np.array([0.5, 0.25])), mesh.cells)
        art2 = MeshArtifacts.build(shifted)
        model = build_model("tfen", m=1, seed=20, hidden_width=8)
        for p in model.parameters():
            p.data = rng.uniform(-0.3, 0.3, p.data.shape)
        y = rng.uniform(-1, 1, (len(coords), 1))
        d1 = time_derivative(model, 0.0, y, art1)
        d2 = time_derivative(model, 0.0, y, art2)
        assert np.array_equal(d1, d2)

    def test_autonomous_ignores_time(self):
        art = small_mesh(seed=21)
        model = build_model("fen", m=1, seed=22, hidden_width=8)
        rng = np.random.default_rng(7)
        for p in model.parameters():
            p.data = rng.uniform(-0.3, 0.3, p.data.shape)
        y = rng.uniform(-1, 1, (art.n_nodes, 1))
        assert np.array_equal(time_derivative(model, 0.0, y, art),
                              time_derivative(model, 123.4, y, art))

    def test_terms_sum_to_total(self):
        art = small_mesh(seed=23)
        model = build_model("tfen", m=2, seed=24, hidden_width=8)
        rng = np.random.default_rng(8)
        for p in model.parameters():
            p.data = rng.uniform(-0.3, 0.3, p.data.shape)
        y = rng.uniform(-1, 1, (art.n_nodes, 2))
        total, ff, tr = time_derivative_terms(model, 0.0, y, art)
        assert np.allclose(total, ff + tr)

    def test_transport_mass_conservation_constant_field(self):
        art = small_mesh(seed=25, n=25)
        model = build_model("tfen", m=1, seed=26, hidden_width=8)
        rng = np.random.default_rng(9)
        for p in model.parameters():
            p.data = rng.uniform(-0.5, 0.5, p.data.shape)
        y = np.full((art.n_nodes, 1), -1.3)
        _, _, tr = time_derivative_terms(model, 0.0, y, art)
        weighted = float(np.sum(art.lumped.diag[:, None] * tr))
        assert abs(weighted) < 1e-12


class TestCellVelocities:
    def test_shape_and_forced_value(self):
        art = small_mesh(seed=27)
        model = build_model("tfen", m=2, seed=28, hidden_width=8)
        force_constant_output(model.transport, np.array([0.1, 0.2, 0.3, 0.4]))
        vel = cell_velocities(model, 0.0, np.zeros((art.n_nodes, 2)), art)
        assert vel.shape == (art.n_cells, 2, 2)
        assert np.allclose(vel[:, 0], [0.1, 0.2])
        assert np.allclose(vel[:, 1], [0.3, 0.4])


class TestGradientIntegrity:
    def test_derivative_matches_finite_differences(self):
        # composite FEN derivative on a 4-node mesh
        pts = PointCloud(np.array([[0.0, 0.0], [1.0, 0.05], [0.9, 1.0], [0.05, 0.9]]))
        art = MeshArtifacts.build(delaunay_triangulate(pts))
        model = build_model("tfen", m=1, seed=29, hidden_width=6, hidden_layers=2)
        rng = np.random.default_rng(10)
        for p in model.parameters():
            p.data = rng.uniform(-0.5, 0.5, p.data.shape)
        y = rng.uniform(-1, 1, (4, 1))

        out = time_derivative(model, 0.3, ad.constant(y), art)
        loss = ad.sum_all(ad.absolute(out[0] if isinstance(out, tuple) else out))
        ad.backward(loss)

        for p in model.parameters():
            def scalar(arr, p=p):
                saved = p.data
                p.data = arr
                val = float(np.abs(time_derivative(model, 0.3, y, art)).sum())
                p.data = saved
                return val

            numeric = finite_difference_gradient(scalar, p.data.copy())
            assert_gradients_close(p.grad, numeric)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = build_model("tfen", m=3, seed=31, hidden_width=8,
                            autonomous=False, stationary=False, time_period=2.0)
        rng = np.random.default_rng(11)
        for p in model.parameters():
            p.data = rng.uniform(-1, 1, p.data.shape)
        dynamics.save_model(tmp_path / "model", model, {"note": "test"})
        loaded, meta = dynamics.load_model(tmp_path / "model")
        assert meta["variant"] == "tfen"
        assert meta["note"] == "test"
        assert loaded.m == 3 and loaded.time_period == 2.0
        assert not loaded.autonomous and not loaded.stationary
        for p1, p2 in zip(model.parameters(), loaded.parameters()):
            assert np.array_equal(p1.data, p2.data)

    def test_fen_round_trip_has_no_transport(self, tmp_path):
        model = build_model("fen", m=1, seed=32, hidden_width=8)
        dynamics.save_model(tmp_path / "model", model)
        loaded, _ = dynamics.load_model(tmp_path / "model")
        assert loaded.transport is None
