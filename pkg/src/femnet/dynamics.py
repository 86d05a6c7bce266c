"""The learned continuous-time dynamics on a meshed domain.

Each mesh cell is a hyperedge between its vertices.  One evaluation of the
time derivative performs exactly one message-passing step: a free-form MLP
estimates per-vertex dynamics coefficients on every cell (scaled by the
precomputed load values <1, phi_i>), an optional transport MLP estimates one
velocity vector per cell and feature (contracted against the convection
inner products <grad phi_j, phi_i> with the sign that makes the velocity
physical), messages are scatter-added over cells, and the aggregate is
divided by the lumped mass diagonal.

MLP inputs are the concatenation of optional time features, the optional
cell center, and per vertex (in polar-angle order around the center) its
local coordinate and current features.  Omitting the time features makes
the dynamics autonomous; omitting the center makes them stationary.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ShapeMismatch, TransportAbsent
from .fem import MeshArtifacts

DEFAULT_WIDTH = {"fen": 128, "tfen": 96}
DEFAULT_HIDDEN_LAYERS = 4


@dataclass
class FenModel:
    freeform: nn.MlpParams
    transport: nn.MlpParams | None
    m: int
    d: int = 2
    autonomous: bool = True
    stationary: bool = True
    time_period: float | None = None

    @property
    def variant(self) -> str:
        return "fen" if self.transport is None else "tfen"

    @property
    def n_time_features(self) -> int:
        if self.autonomous:
            return 0
        return 2 if self.time_period is not None else 1

    def input_dim(self) -> int:
        d, m = self.d, self.m
        return self.n_time_features + (0 if self.stationary else d) + (d + 1) * (m + d)

    def parameters(self) -> list[Tensor]:
        params = nn.mlp_parameters(self.freeform)
        if self.transport is not None:
            params += nn.mlp_parameters(self.transport)
        return params


def build_model(variant: str, m: int, seed: int, hidden_width: int | None = None,
                hidden_layers: int = DEFAULT_HIDDEN_LAYERS, autonomous: bool = True,
                stationary: bool = True, time_period: float | None = None,
                d: int = 2) -> FenModel:
    if variant not in ("fen", "tfen"):
        raise ValueError(f"variant must be 'fen' or 'tfen', got {variant!r}")
    if time_period is not None and time_period <= 0:
        raise ValueError("time_period must be positive")
    width = DEFAULT_WIDTH[variant] if hidden_width is None else hidden_width
    t_feats = 0 if autonomous else (2 if time_period is not None else 1)
    in_dim = t_feats + (0 if stationary else d) + (d + 1) * (m + d)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    freeform = nn.init_mlp(in_dim, (d + 1) * m, width, hidden_layers, rng)
    transport = None
    if variant == "tfen":
        transport = nn.init_mlp(in_dim, m * d, width, hidden_layers, rng)
    return FenModel(freeform=freeform, transport=transport, m=m, d=d,
                    autonomous=autonomous, stationary=stationary,
                    time_period=time_period)


def time_embed(t: float, period: float | None = None) -> tuple[float, ...]:
    """Raw time, or a continuous (sin, cos) embedding when a period is set."""
    if period is None:
        return (float(t),)
    if period <= 0:
        raise ValueError("period must be positive")
    phase = 2.0 * np.pi * t / period
    return (float(np.sin(phase)), float(np.cos(phase)))


@dataclass
class DirichletMask:
    """Marks node features whose values are held fixed during integration."""

    mask: np.ndarray          # (N, m) bool
    fixed_values: np.ndarray  # (N, m), used where mask is True

    def apply_to_state(self, state: np.ndarray) -> np.ndarray:
        return np.where(self.mask, self.fixed_values, state)


# ---------------------------------------------------------------------------
# cached constant tensors per mesh


def _const(art: MeshArtifacts, key, build) -> Tensor:
    cached = art._cache.get(key)
    if cached is None:
        cached = ad.constant(build())
        art._cache[key] = cached
    return cached


def _load_tile(art: MeshArtifacts, i: int, m: int) -> Tensor:
    return _const(art, ("load", i, m),
                  lambda: np.repeat(art.load[:, i:i + 1], m, axis=1))


def _conv_tile(art: MeshArtifacts, j: int, i: int, axis: int, m: int) -> Tensor:
    return _const(art, ("conv", j, i, axis, m),
                  lambda: np.repeat(art.conv[:, j, i, axis:axis + 1], m, axis=1))


def _inv_lumped_tile(art: MeshArtifacts, m: int) -> Tensor:
    return _const(art, ("invmass", m),
                  lambda: np.repeat(1.0 / art.lumped.diag[:, None], m, axis=1))


def _local_coord(art: MeshArtifacts, i: int) -> Tensor:
    return _const(art, ("lc", i), lambda: art.local_coords[:, i, :])


def _centers(art: MeshArtifacts) -> Tensor:
    return _const(art, "centers", lambda: art.centers)


# ---------------------------------------------------------------------------
# forward evaluation


def _check_state(model: FenModel, art: MeshArtifacts, Y: Tensor) -> None:
    if Y.data.shape != (art.n_nodes, model.m):
        raise ShapeMismatch(
            f"state must be ({art.n_nodes}, {model.m}), got {Y.data.shape}")


def _gather_features(art: MeshArtifacts, Y: Tensor) -> list[Tensor]:
    return [ad.gather(Y, art.cells_sorted[:, i]) for i in range(3)]


def assemble_cell_input(model: FenModel, t: float, art: MeshArtifacts,
                        Y, cell_features: list[Tensor] | None = None) -> Tensor:
    """Per-cell MLP input: [time features] ++ [center] ++ per sorted vertex
    [local coordinate, features]."""
    Y = ad.constant(Y)
    _check_state(model, art, Y)
    if cell_features is None:
        cell_features = _gather_features(art, Y)
    parts: list[Tensor] = []
    if not model.autonomous:
        feats = time_embed(t, model.time_period)
        parts.append(ad.constant(
            np.broadcast_to(np.asarray(feats), (art.n_cells, len(feats))).copy()))
    if not model.stationary:
        parts.append(_centers(art))
    for i in range(3):
        parts.append(_local_coord(art, i))
        parts.append(cell_features[i])
    return ad.concat(parts, axis=1)


def freeform_messages(model: FenModel, t: float, Y, art: MeshArtifacts,
                      cell_features=None, cell_input=None):
    """Aggregated free-form messages per node, before the mass update."""
    tensor_in = isinstance(Y, Tensor)
    Y = ad.constant(Y)
    if cell_features is None:
        cell_features = _gather_features(art, Y)
    if cell_input is None:
        cell_input = assemble_cell_input(model, t, art, Y, cell_features)
    coeffs = nn.mlp_forward(model.freeform, cell_input)  # (T, 3m)
    m = model.m
    total = None
    for i in range(3):
        coeff_i = ad.gather(coeffs, np.arange(i * m, (i + 1) * m), axis=1)
        msg_i = ad.mul(coeff_i, _load_tile(art, i, m))
        scattered = ad.scatter_add(msg_i, art.cells_sorted[:, i], art.n_nodes)
        total = scattered if total is None else ad.add(total, scattered)
    return total if tensor_in else total.data


def transport_messages(model: FenModel, t: float, Y, art: MeshArtifacts,
                       cell_features=None, cell_input=None):
    """Aggregated transport messages per node, before the mass update.

    Message to vertex i for feature k on one cell:
        -sum_j Y[j,k] * (v_k . C[j][i])
    with one velocity v_k shared by all vertices of the cell.
    """
    if model.transport is None:
        raise TransportAbsent("model has no transport term")
    tensor_in = isinstance(Y, Tensor)
    Y = ad.constant(Y)
    if cell_features is None:
        cell_features = _gather_features(art, Y)
    if cell_input is None:
        cell_input = assemble_cell_input(model, t, art, Y, cell_features)
    velocities = nn.mlp_forward(model.transport, cell_input)  # (T, m*d)
    m, d = model.m, model.d
    v_comp = [ad.gather(velocities, np.arange(m) * d + a, axis=1) for a in range(d)]
    total = None
    for i in range(3):
        acc = None
        for j in range(3):
            dot = None
            for a in range(d):
                term = ad.mul(v_comp[a], _conv_tile(art, j, i, a, m))
                dot = term if dot is None else ad.add(dot, term)
            contrib = ad.mul(cell_features[j], dot)
            acc = contrib if acc is None else ad.add(acc, contrib)
        msg_i = ad.scale(acc, -1.0)
        scattered = ad.scatter_add(msg_i, art.cells_sorted[:, i], art.n_nodes)
        total = scattered if total is None else ad.add(total, scattered)
    return total if tensor_in else total.data


def time_derivative(model: FenModel, t: float, Y, art: MeshArtifacts,
                    mask: DirichletMask | None = None):
    """dY/dt at one instant; exactly one message-passing step."""
    out, _, _ = time_derivative_terms(model, t, Y, art, mask)
    return out


def time_derivative_terms(model: FenModel, t: float, Y, art: MeshArtifacts,
                          mask: DirichletMask | None = None):
    """dY/dt plus the separate free-form and transport contributions.

    The parts expose how the learned dynamics decompose (the transport part
    is None for a plain free-form model); both are already divided by the
    lumped mass and masked like the total.
    """
    tensor_in = isinstance(Y, Tensor)
    Y = ad.constant(Y)
    _check_state(model, art, Y)
    cell_features = _gather_features(art, Y)
    cell_input = assemble_cell_input(model, t, art, Y, cell_features)

    inv_mass = _inv_lumped_tile(art, model.m)
    keep = None
    if mask is not None:
        if mask.mask.shape != Y.data.shape:
            raise ShapeMismatch("mask shape must match the state")
        keep = ad.constant(1.0 - mask.mask.astype(np.float64))

    def finalize(msgs):
        part = ad.mul(msgs, inv_mass)
        return ad.mul(part, keep) if keep is not None else part

    ff = finalize(freeform_messages(model, t, Y, art, cell_features, cell_input))
    if model.transport is not None:
        tr = finalize(transport_messages(model, t, Y, art, cell_features, cell_input))
        total = ad.add(ff, tr)
    else:
        tr = None
        total = ff
    if tensor_in:
        return total, ff, tr
    return total.data, ff.data, (None if tr is None else tr.data)


def cell_velocities(model: FenModel, t: float, Y, art: MeshArtifacts) -> np.ndarray:
    """Transport-term velocity estimates, one (m, d) block per cell."""
    if model.transport is None:
        raise TransportAbsent("model has no transport term")
    Y = ad.constant(Y)
    _check_state(model, art, Y)
    cell_input = assemble_cell_input(model, t, art, Y)
    velocities = nn.mlp_forward(model.transport, cell_input)
    return velocities.data.reshape(art.n_cells, model.m, model.d)


def derivative_fn(model: FenModel, art: MeshArtifacts,
                  mask: DirichletMask | None = None):
    """Bind model and mesh into a (t, Y) -> dY/dt callable for the solver."""

    def f(t, Y):
        return time_derivative(model, t, Y, art, mask)

    return f


# ---------------------------------------------------------------------------
# checkpoints


def _mlp_tensor_dict(prefix: str, params: nn.MlpParams) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        out[f"{prefix}.w{i}"] = w
        out[f"{prefix}.b{i}"] = b
    return out


def save_model(path: str | Path, model: FenModel, extra_meta: dict | None = None) -> None:
    tensors = _mlp_tensor_dict("freeform", model.freeform)
    if model.transport is not None:
        tensors.update(_mlp_tensor_dict("transport", model.transport))
    meta = {
        "variant": model.variant,
        "m": model.m,
        "d": model.d,
        "autonomous": model.autonomous,
        "stationary": model.stationary,
        "time_period": model.time_period,
        "n_layers": len(model.freeform.weights),
    }
    meta.update(extra_meta or {})
    nn.save_params(path, tensors, meta)


def load_model(path: str | Path) -> tuple[FenModel, dict]:
    tensors, meta = nn.load_params(path)

    def collect(prefix: str) -> nn.MlpParams | None:
        weights, biases = [], []
        for i in range(int(meta["n_layers"])):
            key = f"{prefix}.w{i}"
            if key not in tensors:
                return None if i == 0 else _bad()
            weights.append(tensors[key])
            biases.append(tensors[f"{prefix}.b{i}"])
        return nn.MlpParams(weights=weights, biases=biases)

    def _bad():
        raise ShapeMismatch("checkpoint manifest is missing layers")

    model = FenModel(
        freeform=collect("freeform"),
        transport=collect("transport"),
        m=int(meta["m"]),
        d=int(meta["d"]),
        autonomous=bool(meta["autonomous"]),
        stationary=bool(meta["stationary"]),
        time_period=None if meta["time_period"] is None else float(meta["time_period"]),
    )
    return model, meta
