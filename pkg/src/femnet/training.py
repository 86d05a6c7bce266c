"""Multi-step L1 training with a curriculum, and forecast evaluation.

Training backpropagates through the concrete steps of the adaptive solver
(one subsequence per optimizer step).  Epoch e draws all training
subsequences of length min(curriculum_start + e, horizon); early stopping
watches the validation MAE and the best checkpoint is restored at the end.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .data import Dataset
from .dynamics import FenModel, derivative_fn
from .errors import MaxNfeExceeded, ShapeMismatch
from .odeint import SolverConfig, Trajectory, dopri5_solve, solve_with_gradients

DEFAULT_TEST_SKIP = 12  # initial test timesteps excluded from evaluation


@dataclass
class TrainConfig:
    horizon: int = 10
    lr: float = 1e-3
    max_epochs: int = 50
    patience: int = 5
    curriculum_start: int = 3
    seed: int = 0
    solver: SolverConfig = field(default_factory=SolverConfig)
    train_stride: int = 1     # subsequence start stride during training
    val_stride: int = 1       # subsequence start stride for validation
    shuffle: bool = True

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if not 1 <= self.curriculum_start <= self.horizon:
            raise ValueError("curriculum_start must lie in [1, horizon]")


@dataclass
class EvalReport:
    mae: float
    nfe_mean: float
    nfe_std: float
    per_step_mae: list[float]
    n_sequences: int
    persistence_mae: float
    n_nodes: int

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "nfe_mean": self.nfe_mean,
            "nfe_std": self.nfe_std,
            "per_step_mae": self.per_step_mae,
            "n_sequences": self.n_sequences,
            "persistence_mae": self.persistence_mae,
            "n_nodes": self.n_nodes,
        }


def l1_loss(predicted: Trajectory, target: Trajectory):
    """Mean L1 distance over the prediction steps, excluding the shared
    initial state: (1 / (N T)) sum_steps sum_nodes |pred - target|_1."""
    if len(predicted.states) != len(target.states):
        raise ShapeMismatch("prediction and target lengths differ")
    if not np.array_equal(predicted.times, target.times):
        raise ShapeMismatch("prediction and target times differ")
    n_steps = len(predicted.states) - 1
    if n_steps < 1:
        raise ShapeMismatch("need at least one prediction step")
    n_nodes = np.shape(predicted.states[0] if not isinstance(predicted.states[0], Tensor)
                       else predicted.states[0].data)[0]
    tape = isinstance(predicted.states[1], Tensor)
    if tape:
        total = None
        for pred, tgt in zip(predicted.states[1:], target.states[1:]):
            diff = ad.add(pred, ad.scale(ad.constant(np.asarray(tgt)), -1.0))
            term = ad.sum_all(ad.absolute(diff))
            total = term if total is None else ad.add(total, term)
        return ad.scale(total, 1.0 / (n_nodes * n_steps))
    total = 0.0
    for pred, tgt in zip(predicted.states[1:], target.states[1:]):
        total += np.abs(np.asarray(pred) - np.asarray(tgt)).sum()
    return total / (n_nodes * n_steps)


def subsequence_starts(seq: Trajectory, length: int, stride: int = 1,
                       skip: int = 0) -> list[int]:
    last_start = len(seq.times) - 1 - length
    return list(range(skip, last_start + 1, stride))


def _snapshot(params: list[Tensor]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def _restore(params: list[Tensor], snapshot: list[np.ndarray]) -> None:
    for p, s in zip(params, snapshot):
        p.data = s.copy()


def train(model: FenModel, dataset: Dataset, config: TrainConfig) -> tuple[FenModel, list[dict]]:
    """Curriculum training; returns the model restored to its best-validation
    parameters plus one history record per epoch."""
    art = dataset.artifacts()
    f = derivative_fn(model, art)
    params = model.parameters()
    adam = nn.init_adam(params, lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))

    history: list[dict] = []
    best_val = np.inf
    best_epoch = -1
    best_params = _snapshot(params)

    train_seqs = [(i, dataset.sequences[i]) for i in dataset.split["train"]]
    for epoch in range(config.max_epochs):
        epoch_start = time.monotonic()
        s = min(config.curriculum_start + epoch, config.horizon)
        tasks = [(i, seq, start)
                 for i, seq in train_seqs
                 for start in subsequence_starts(seq, s, config.train_stride)]
        if config.shuffle:
            rng.shuffle(tasks)

        losses, nfes = [], []
        for seq_idx, seq, start in tasks:
            ad.zero_grads(params)
            times = seq.times[start:start + s + 1]
            target = Trajectory(times=times,
                                states=[np.asarray(x) for x in seq.states[start:start + s + 1]])
            y0 = ad.constant(np.asarray(seq.states[start]))
            try:
                traj = solve_with_gradients(f, y0, times, config.solver)
            except MaxNfeExceeded as err:
                raise MaxNfeExceeded(
                    f"epoch {epoch}, sequence {seq_idx}, start {start}: {err}"
                ) from err
            loss = l1_loss(traj, target)
            ad.backward(loss)
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                     for p in params]
            nn.adam_step(params, grads, adam)
            losses.append(float(loss.data))
            nfes.append(traj.nfe)

        val = evaluate(model, dataset, "val", config.horizon, config.solver,
                       stride=config.val_stride, skip=0)
        record = {
            "epoch": epoch,
            "s": s,
            "train_loss": float(np.mean(losses)),
            "val_mae": val.mae,
            "nfe_mean": float(np.mean(nfes)),
            "nfe_std": float(np.std(nfes)),
            "wall_time_s": time.monotonic() - epoch_start,
        }
        history.append(record)

        if val.mae < best_val:
            best_val = val.mae
            best_epoch = epoch
            best_params = _snapshot(params)
        elif epoch - best_epoch >= config.patience:
            break

    _restore(params, best_params)
    return model, history


def evaluate(model: FenModel, dataset: Dataset, split: str, horizon: int,
             solver: SolverConfig | None = None, stride: int = 1,
             skip: int | None = None) -> EvalReport:
    """MAE over every length-`horizon` subsequence of the split.

    MAE is the mean absolute error per scalar entry (node, step and feature);
    for a single feature it coincides with the training loss.  The first
    DEFAULT_TEST_SKIP timesteps of the test split are skipped unless `skip`
    says otherwise.  The persistence baseline (initial state carried forward)
    is reported alongside.
    """
    solver = solver or SolverConfig()
    if skip is None:
        skip = DEFAULT_TEST_SKIP if split == "test" else 0
    art = dataset.artifacts()
    f = derivative_fn(model, art)

    step_abs = np.zeros(horizon)
    persist_abs = 0.0
    n_solves = 0
    n_entries_per_step = 0
    nfes = []
    for seq in dataset.split_sequences(split):
        values = seq.values()
        for start in subsequence_starts(seq, horizon, stride, skip):
            times = seq.times[start:start + horizon + 1]
            traj = dopri5_solve(f, values[start], times, solver)
            pred = traj.values()[1:]
            target = values[start + 1:start + horizon + 1]
            step_abs += np.abs(pred - target).sum(axis=(1, 2))
            persist_abs += np.abs(values[start][None] - target).sum()
            nfes.append(traj.nfe)
            n_solves += 1
            n_entries_per_step = target.shape[1] * target.shape[2]
    if n_solves == 0:
        raise ValueError(f"split {split!r} has no subsequences of length {horizon}"
                         f" after skipping {skip} steps")
    denom = n_solves * n_entries_per_step
    per_step = step_abs / denom
    return EvalReport(
        mae=float(step_abs.sum() / (denom * horizon)),
        nfe_mean=float(np.mean(nfes)),
        nfe_std=float(np.std(nfes)),
        per_step_mae=[float(x) for x in per_step],
        n_sequences=n_solves,
        persistence_mae=float(persist_abs / (denom * horizon)),
        n_nodes=dataset.n_nodes,
    )


def super_resolution_eval(model: FenModel, fine_datasets: list[Dataset],
                          horizon: int, solver: SolverConfig | None = None,
                          split: str = "test", stride: int = 1,
                          skip: int | None = None) -> list[EvalReport]:
    """Evaluate one trained model across meshes of increasing resolution.

    The parameters are untouched; only the mesh artifacts (inner products,
    lumped mass) change with each dataset.
    """
    return [evaluate(model, ds, split, horizon, solver, stride, skip)
            for ds in fine_datasets]
