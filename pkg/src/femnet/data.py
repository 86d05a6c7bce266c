"""Synthetic transport datasets with a classical FEM oracle.

The real measurement campaigns this models are replaced by a dense-to-sparse
pipeline on the unit square: initial conditions are sums of Gaussian bumps
(truncated at four standard deviations so their support stays clear of the
boundary), advected by a divergence-free velocity field (a constant vector
or a rigid rotation), optionally fed by a fixed Gaussian source.  For a
constant velocity with no source the states are the exact analytic
translate; otherwise they come from integrating the classical lumped
Galerkin convection right-hand side on a dense grid mesh at tight
tolerance.  Sparse node sets are chosen by k-medoids over the dense points,
meshed by Delaunay triangulation plus sliver filtering, and share the
training split's normalization statistics across resolutions.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidSpec, KTooLarge, ShapeMismatch, ZeroVariance
from .fem import MeshArtifacts
from .mesh import Mesh, PointCloud, delaunay_triangulate, filter_sliver_cells, \
    load_mesh, make_mesh, save_mesh
from .odeint import SolverConfig, Trajectory, dopri5_solve

_MAGIC = b"FENDATA1"
_BUMP_FLOOR = float(np.exp(-8.0))  # value of exp(-r^2/(2 s^2)) at r = 4 s


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for one synthetic dataset family."""

    n_dense: int                       # dense grid resolution per side
    velocity: dict                     # {"type": "constant", "value": [vx, vy]}
                                       # or {"type": "rotation", "omega": w, "center": [cx, cy]}
    n_bumps: int
    bump_sigma: tuple[float, float]    # (lo, hi)
    bump_amplitude: tuple[float, float]
    bump_center_x: tuple[float, float]
    bump_center_y: tuple[float, float]
    dt: float
    n_steps: int
    n_sequences: int
    n_nodes: int
    seed: int
    split: tuple[int, int, int]        # train/val/test sequence counts
    source: dict | None = None         # {"center": [x, y], "sigma": s, "rate": r}
    normalize: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        d = dict(d)
        for key in ("bump_sigma", "bump_amplitude", "bump_center_x",
                    "bump_center_y", "split"):
            d[key] = tuple(d[key])
        return cls(**d)


def validate_spec(spec: SyntheticSpec) -> None:
    if spec.n_dense < 2:
        raise InvalidSpec("n_dense must be at least 2")
    if spec.dt <= 0:
        raise InvalidSpec("dt must be positive")
    if spec.n_steps < 1 or spec.n_sequences < 1:
        raise InvalidSpec("n_steps and n_sequences must be positive")
    if spec.bump_sigma[0] <= 0:
        raise InvalidSpec("bump widths must be positive")
    if sum(spec.split) != spec.n_sequences:
        raise InvalidSpec(
            f"split {spec.split} must sum to n_sequences={spec.n_sequences}")
    if spec.n_nodes < 3:
        raise InvalidSpec("n_nodes must be at least 3")
    vel = spec.velocity
    if vel.get("type") not in ("constant", "rotation"):
        raise InvalidSpec(f"unknown velocity type {vel.get('type')!r}")
    if spec.source is not None:
        if spec.source.get("sigma", 0.0) <= 0:
            raise InvalidSpec("source sigma must be positive")


def velocity_at(velocity: dict, points: np.ndarray) -> np.ndarray:
    """Evaluate the divergence-free velocity field at the given points."""
    pts = np.atleast_2d(points)
    if velocity["type"] == "constant":
        return np.broadcast_to(np.asarray(velocity["value"], dtype=np.float64),
                               (pts.shape[0], 2)).copy()
    if velocity["type"] == "rotation":
        center = np.asarray(velocity["center"], dtype=np.float64)
        rel = pts - center
        return velocity["omega"] * np.stack([-rel[:, 1], rel[:, 0]], axis=1)
    raise InvalidSpec(f"unknown velocity type {velocity['type']!r}")


def gaussian_bumps(points: np.ndarray, centers: np.ndarray,
                   sigmas: np.ndarray, amplitudes: np.ndarray) -> np.ndarray:
    """Sum of Gaussian bumps, cut off at 4 sigma to give compact support."""
    out = np.zeros(points.shape[0])
    for c, s, a in zip(centers, sigmas, amplitudes):
        r2 = np.sum((points - c) ** 2, axis=1)
        out += a * np.maximum(np.exp(-r2 / (2.0 * s * s)) - _BUMP_FLOOR, 0.0)
    return out


def source_rates(points: np.ndarray, source: dict | None) -> np.ndarray:
    if source is None:
        return np.zeros(points.shape[0])
    center = np.asarray(source["center"], dtype=np.float64)
    r2 = np.sum((points - center) ** 2, axis=1)
    return source["rate"] * np.exp(-r2 / (2.0 * source["sigma"] ** 2))


def oracle_fem_rhs(Y: np.ndarray, art: MeshArtifacts,
                   cell_velocities: np.ndarray) -> np.ndarray:
    """Classical lumped Galerkin convection right-hand side.

    dY[i,k]/dt = -(1/A_ii) sum_cells sum_j Y[j,k] (v_k . C[j][i]) with one
    velocity per cell and feature.  This is the ground-truth counterpart of
    the learned transport term when the velocities are known.
    """
    Y = np.asarray(Y, dtype=np.float64)
    vel = np.asarray(cell_velocities, dtype=np.float64)
    if Y.shape[0] != art.n_nodes:
        raise ShapeMismatch(f"state has {Y.shape[0]} rows for {art.n_nodes} nodes")
    if vel.shape != (art.n_cells, Y.shape[1], 2):
        raise ShapeMismatch(
            f"velocities must be ({art.n_cells}, {Y.shape[1]}, 2), got {vel.shape}")
    y_cells = Y[art.cells_sorted]                       # (T, 3, m)
    dots = np.einsum("cka,cjia->cjik", vel, art.conv)   # (T, 3, 3, m)
    msgs = -np.einsum("cjk,cjik->cik", y_cells, dots)   # (T, 3, m)
    out = np.zeros_like(Y)
    for i in range(3):
        np.add.at(out, art.cells_sorted[:, i], msgs[:, i, :])
    return out / art.lumped.diag[:, None]


def kmedoids_subsample(points, k: int, seed: int, max_iter: int = 100) -> np.ndarray:
    """k-medoids by alternating assignment and per-cluster medoid updates.

    Starts from a seeded random choice of distinct points and stops when the
    assignment stabilizes; returned indices always reference actual input
    points and come back sorted.
    """
    coords = points.coords if isinstance(points, PointCloud) else np.asarray(points)
    n = coords.shape[0]
    if k > n:
        raise KTooLarge(f"requested {k} medoids from {n} points")
    if k == n:
        return np.arange(n, dtype=np.int64)
    rng = np.random.default_rng(seed)
    medoids = np.sort(rng.choice(n, size=k, replace=False))
    assign = None
    for _ in range(max_iter):
        d2 = np.sum((coords[:, None, :] - coords[medoids][None, :, :]) ** 2, axis=2)
        new_assign = np.argmin(d2, axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for ci in range(k):
            members = np.nonzero(assign == ci)[0]
            inner = np.sum(
                np.linalg.norm(coords[members][:, None, :] - coords[members][None, :, :],
                               axis=2), axis=1)
            medoids[ci] = members[np.argmin(inner)]
    return np.sort(medoids)


@dataclass
class NormalizationStats:
    feature_mean: np.ndarray  # (m,)
    feature_std: np.ndarray   # (m,)
    coord_mean: np.ndarray    # (2,)
    coord_std: float          # single scale so geometry keeps its aspect ratio

    def to_dict(self) -> dict:
        return {
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "coord_mean": self.coord_mean.tolist(),
            "coord_std": self.coord_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(
            feature_mean=np.asarray(d["feature_mean"], dtype=np.float64),
            feature_std=np.asarray(d["feature_std"], dtype=np.float64),
            coord_mean=np.asarray(d["coord_mean"], dtype=np.float64),
            coord_std=float(d["coord_std"]),
        )


@dataclass
class Dataset:
    mesh: Mesh
    m: int
    sequences: list[Trajectory]
    split: dict[str, list[int]]
    normalization: NormalizationStats | None = None
    meta: dict = field(default_factory=dict)
    _artifacts: MeshArtifacts | None = field(default=None, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return len(self.mesh.points)

    def artifacts(self) -> MeshArtifacts:
        if self._artifacts is None:
            self._artifacts = MeshArtifacts.build(self.mesh)
        return self._artifacts

    def split_sequences(self, split: str) -> list[Trajectory]:
        return [self.sequences[i] for i in self.split[split]]


def compute_stats(dataset: Dataset) -> NormalizationStats:
    """Mean/std of features and coordinates over the training split only."""
    train = dataset.split_sequences("train")
    if not train:
        raise InvalidSpec("dataset has no training sequences")
    stacked = np.concatenate([seq.values().reshape(-1, dataset.m) for seq in train])
    fmean = stacked.mean(axis=0)
    fstd = stacked.std(axis=0)
    if np.any(fstd < 1e-12):
        raise ZeroVariance("a feature is constant over the training split")
    coords = dataset.mesh.points.coords
    cmean = coords.mean(axis=0)
    cstd = float(coords.std(axis=0).mean())
    if cstd < 1e-12:
        raise ZeroVariance("coordinates are degenerate")
    return NormalizationStats(fmean, fstd, cmean, cstd)


def normalize(dataset: Dataset,
              stats: NormalizationStats | None = None) -> tuple[Dataset, NormalizationStats]:
    """Shift and scale features and coordinates by training-split statistics."""
    if stats is None:
        stats = compute_stats(dataset)
    coords = (dataset.mesh.points.coords - stats.coord_mean) / stats.coord_std
    mesh = make_mesh(PointCloud(coords), dataset.mesh.cells,
                     dataset.mesh.boundary_faces, validate=False)
    sequences = [
        Trajectory(times=seq.times.copy(),
                   states=list((seq.values() - stats.feature_mean) / stats.feature_std),
                   nfe=seq.nfe)
        for seq in dataset.sequences
    ]
    out = Dataset(mesh=mesh, m=dataset.m, sequences=sequences,
                  split={k: list(v) for k, v in dataset.split.items()},
                  normalization=stats, meta=dict(dataset.meta))
    return out, stats


def denormalize(trajectory: Trajectory, stats: NormalizationStats) -> Trajectory:
    values = trajectory.values() * stats.feature_std + stats.feature_mean
    return Trajectory(times=trajectory.times.copy(), states=list(values),
                      nfe=trajectory.nfe)


# ---------------------------------------------------------------------------
# generation


def _dense_grid(n: int) -> np.ndarray:
    xs = np.linspace(0.0, 1.0, n)
    gx, gy = np.meshgrid(xs, xs)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _draw_bumps(spec: SyntheticSpec, rng: np.random.Generator):
    centers = np.stack([
        rng.uniform(*spec.bump_center_x, size=spec.n_bumps),
        rng.uniform(*spec.bump_center_y, size=spec.n_bumps),
    ], axis=1)
    sigmas = rng.uniform(*spec.bump_sigma, size=spec.n_bumps)
    amps = rng.uniform(*spec.bump_amplitude, size=spec.n_bumps)
    return centers, sigmas, amps


def _needs_fem_integration(spec: SyntheticSpec) -> bool:
    return spec.velocity["type"] != "constant" or spec.source is not None


def _dense_states(spec: SyntheticSpec, dense: np.ndarray, times: np.ndarray,
                  bumps, dense_art: MeshArtifacts | None) -> np.ndarray:
    centers, sigmas, amps = bumps
    if not _needs_fem_integration(spec):
        v = np.asarray(spec.velocity["value"], dtype=np.float64)
        return np.stack([
            gaussian_bumps(dense - v * t, centers, sigmas, amps)[:, None]
            for t in times
        ])
    y0 = gaussian_bumps(dense, centers, sigmas, amps)[:, None]
    cell_vel = velocity_at(spec.velocity, dense_art.centers)[:, None, :]
    src = source_rates(dense, spec.source)[:, None]

    def rhs(t, y):
        return oracle_fem_rhs(y, dense_art, cell_vel) + src

    traj = dopri5_solve(rhs, y0, times,
                        SolverConfig(atol=1e-8, rtol=1e-8, max_nfe=500_000))
    return traj.values()


def _drop_isolated_nodes(coords: np.ndarray, mesh: Mesh) -> Mesh:
    """Re-index away nodes that sliver filtering left without any cell."""
    used = np.unique(mesh.cells)
    if used.size == coords.shape[0]:
        return mesh
    remap = -np.ones(coords.shape[0], dtype=np.int64)
    remap[used] = np.arange(used.size)
    return make_mesh(PointCloud(coords[used]), remap[mesh.cells])


def generate_resolution_family(spec: SyntheticSpec,
                               resolutions: list[int]) -> list[Dataset]:
    """Datasets at several node counts sharing one dense generator output.

    Normalization statistics come from the first (primary) resolution's
    training split and are shared by every resolution so a model trained on
    the primary mesh sees consistently scaled inputs everywhere.
    """
    validate_spec(spec)
    root = np.random.SeedSequence(spec.seed)
    seq_seeds, res_seeds = root.spawn(2)
    dense = _dense_grid(spec.n_dense)
    times = spec.dt * np.arange(spec.n_steps + 1)

    dense_art = None
    if _needs_fem_integration(spec):
        dense_mesh = filter_sliver_cells(delaunay_triangulate(PointCloud(dense)))
        dense_art = MeshArtifacts.build(dense_mesh)

    all_states = []
    for child in seq_seeds.spawn(spec.n_sequences):
        rng = np.random.default_rng(child)
        bumps = _draw_bumps(spec, rng)
        all_states.append(_dense_states(spec, dense, times, bumps, dense_art))

    n_train, n_val, n_test = spec.split
    split = {
        "train": list(range(n_train)),
        "val": list(range(n_train, n_train + n_val)),
        "test": list(range(n_train + n_val, spec.n_sequences)),
    }

    datasets = []
    shared_stats: NormalizationStats | None = None
    for k, child in zip(resolutions, res_seeds.spawn(len(resolutions))):
        idx = kmedoids_subsample(dense, k, seed=child)
        mesh = filter_sliver_cells(delaunay_triangulate(PointCloud(dense[idx])))
        used = np.unique(mesh.cells)
        if used.size < idx.size:
            mesh = _drop_isolated_nodes(dense[idx], mesh)
            idx = idx[used]
        sequences = [
            Trajectory(times=times.copy(), states=list(states[:, idx, :]))
            for states in all_states
        ]
        ds = Dataset(
            mesh=mesh, m=1, sequences=sequences,
            split={key: list(v) for key, v in split.items()},
            meta={
                "seed": spec.seed,
                "spec": spec.to_dict(),
                "n_nodes": int(idx.size),
                "medoid_indices": idx.tolist(),
                "kmedoids": "alternating",
            },
        )
        if spec.normalize:
            ds, stats = normalize(ds, shared_stats)
            if shared_stats is None:
                shared_stats = stats
        datasets.append(ds)
    return datasets


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Generate the dataset at the spec's primary node count."""
    return generate_resolution_family(spec, [spec.n_nodes])[0]


# ---------------------------------------------------------------------------
# dataset files


def _write_sequence(path: Path, seq: Trajectory) -> None:
    states = seq.values()
    t, n, m = states.shape
    header = _MAGIC + struct.pack("<QQQ", n, m, t)
    payload = np.concatenate(
        [seq.times[:, None], states.reshape(t, -1)], axis=1).astype("<f8")
    path.write_bytes(header + payload.tobytes())


def _read_sequence(path: Path) -> Trajectory:
    raw = path.read_bytes()
    if raw[:8] != _MAGIC:
        raise InvalidSpec(f"{path} is not a femnet sequence file")
    n, m, t = struct.unpack("<QQQ", raw[8:32])
    expected = 32 + t * (1 + n * m) * 8
    if len(raw) != expected:
        raise InvalidSpec(f"{path} has {len(raw)} bytes, expected {expected}")
    flat = np.frombuffer(raw, dtype="<f8", offset=32).reshape(t, 1 + n * m)
    times = flat[:, 0].copy()
    states = flat[:, 1:].reshape(t, n, m).copy()
    return Trajectory(times=times, states=list(states))


def write_dataset(dataset: Dataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_mesh(dataset.mesh, directory / "mesh.json")
    entries = []
    for i, seq in enumerate(dataset.sequences):
        name = f"seq{i:03d}.bin"
        _write_sequence(directory / name, seq)
        entries.append({"file": name, "n_steps": len(seq.times) - 1})
    manifest = {
        "format": _MAGIC.decode(),
        "mesh_file": "mesh.json",
        "m": dataset.m,
        "n_nodes": dataset.n_nodes,
        "sequences": entries,
        "split": dataset.split,
        "normalization": (None if dataset.normalization is None
                          else dataset.normalization.to_dict()),
        "meta": dataset.meta,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, sort_keys=True))


def read_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != _MAGIC.decode():
        raise InvalidSpec(f"{directory} is not a femnet dataset")
    mesh = load_mesh(directory / manifest["mesh_file"])
    sequences = [_read_sequence(directory / e["file"]) for e in manifest["sequences"]]
    norm = manifest.get("normalization")
    return Dataset(
        mesh=mesh,
        m=int(manifest["m"]),
        sequences=sequences,
        split={k: list(v) for k, v in manifest["split"].items()},
        normalization=None if norm is None else NormalizationStats.from_dict(norm),
        meta=manifest.get("meta", {}),
    )
