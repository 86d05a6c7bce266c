"""Adaptive Dormand-Prince 5(4) integration with NFE accounting.

The stepping loop is written against the minimal arithmetic surface that
both numpy arrays and autodiff tensors provide (state + state, scalar *
state), so the same code integrates plainly for evaluation and records a
computation graph when the initial state and derivative are tape-backed.
Backpropagating through the recorded steps is the discretize-then-optimize
approach: step-size decisions are made on detached values and treated as
constants.

Requested output times are hit exactly by clamping the step at each output
boundary; there is no dense-output interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import MaxNfeExceeded, ShapeMismatch, StepUnderflow

# classic DOPRI5 tableau; the 7th stage is the FSAL evaluation at (t+h, y_new)
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B = _A[6]  # 5th-order weights; a7j == b5j makes the scheme FSAL
_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)
_ORDER_EXP = -1.0 / 5.0


@dataclass
class SolverConfig:
    atol: float = 1e-6
    rtol: float = 1e-6
    max_nfe: int = 10_000
    initial_step: float | None = None
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 10.0

    def __post_init__(self):
        if self.atol <= 0 or self.rtol <= 0:
            raise ValueError("atol and rtol must be positive")


@dataclass
class Trajectory:
    """Solution states at the requested times plus the evaluation count."""

    times: np.ndarray
    states: list  # each (N, m); numpy arrays or Tensors
    nfe: int = 0

    def values(self) -> np.ndarray:
        """Detached (T, N, m) array of the states."""
        return np.stack([_val(s) for s in self.states])


def _val(state) -> np.ndarray:
    return state.data if isinstance(state, Tensor) else np.asarray(state)


def _combine(base, h: float, coeffs, stages):
    """base + h * sum(c_i * k_i), skipping zero coefficients."""
    out = base
    for c, k in zip(coeffs, stages):
        if c != 0.0:
            out = out + (h * c) * k
    return out


def _error_norm(err: np.ndarray, y0: np.ndarray, y1: np.ndarray,
                atol: float, rtol: float) -> float:
    scale = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def _initial_step(f, t0: float, y0, f0, span: float,
                  atol: float, rtol: float) -> float:
    """Hairer-Norsett-Wanner starting-step heuristic.

    For numerically zero dynamics any step is exact, so the full span is
    returned immediately; this keeps constant dynamics at one accepted step
    per output interval.
    """
    y = _val(y0)
    fv = _val(f0)
    scale = atol + rtol * np.abs(y)
    d0 = float(np.sqrt(np.mean((y / scale) ** 2)))
    d1 = float(np.sqrt(np.mean((fv / scale) ** 2)))
    if d1 <= 1e-14:
        return span
    h0 = 1e-6 * span if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = _val(f(t0 + h0, y0 + h0 * f0))
    d2 = float(np.sqrt(np.mean(((f1 - fv) / scale) ** 2))) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6 * span, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100.0 * h0, h1, span)


def dopri5_solve(derivative_fn, y0, times, config: SolverConfig | None = None) -> Trajectory:
    """Integrate dy/dt = derivative_fn(t, y) through the given output times.

    `y0` may be a numpy array (plain solve) or a Tensor built from autodiff
    ops (recorded solve whose outputs support backward()).  The returned
    trajectory's times are the requested times, bit for bit.
    """
    config = config or SolverConfig()
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1 or times.size < 1:
        raise ShapeMismatch("times must be a non-empty 1D array")
    if times.size > 1 and not np.all(np.diff(times) > 0):
        raise ValueError("times must be strictly increasing")

    nfe = 0

    def f(t, y):
        nonlocal nfe
        nfe += 1
        if nfe > config.max_nfe:
            raise MaxNfeExceeded(
                f"exceeded {config.max_nfe} derivative evaluations at t={t:.6g}")
        return derivative_fn(t, y)

    states = [y0]
    if times.size == 1:
        return Trajectory(times=times.copy(), states=states, nfe=0)

    span = float(times[-1] - times[0])
    t = float(times[0])
    y = y0
    k1 = f(t, y)
    if config.initial_step is not None:
        h = float(config.initial_step)
    else:
        h = _initial_step(f, t, y, k1, span, config.atol, config.rtol)

    for t_target in times[1:]:
        t_target = float(t_target)
        while t < t_target:
            h_step = min(h, t_target - t)
            if h_step < 1e-12 * span:
                raise StepUnderflow(f"step {h_step:.3e} underflowed at t={t:.6g}")
            stages = [k1]
            for i in range(1, 7):
                y_stage = _combine(y, h_step, _A[i], stages)
                stages.append(f(t + _C[i] * h_step, y_stage))
            y_new = _combine(y, h_step, _B, stages)
            err = h_step * sum(e * _val(k) for e, k in zip(_E, stages) if e != 0.0)
            norm = _error_norm(err, _val(y), _val(y_new), config.atol, config.rtol)

            if norm == 0.0:
                factor = config.max_factor
            else:
                factor = min(config.max_factor,
                             max(config.min_factor, config.safety * norm ** _ORDER_EXP))
            if norm <= 1.0:
                hit_boundary = h_step >= t_target - t
                t = t_target if hit_boundary else t + h_step
                y = y_new
                k1 = stages[6]  # FSAL: last stage was evaluated at (t+h, y_new)
                h = h_step * factor
            else:
                h = h_step * min(1.0, factor)
        states.append(y)
    return Trajectory(times=times.copy(), states=states, nfe=nfe)


def solve_with_gradients(derivative_fn, y0: Tensor, times,
                         config: SolverConfig | None = None) -> Trajectory:
    """dopri5_solve with the computation recorded for backward().

    The derivative must be built from autodiff ops and y0 must be a Tensor;
    every stage combination then lands on the tape, while accept/reject and
    step-size choices are made on detached values.
    """
    if not isinstance(y0, Tensor):
        raise ShapeMismatch("solve_with_gradients expects a Tensor initial state")
    return dopri5_solve(derivative_fn, y0, times, config)
