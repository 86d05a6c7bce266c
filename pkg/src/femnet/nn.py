"""MLPs with tanh non-linearities, the Adam optimizer, and parameter files.

Hidden layers are initialized uniformly in +-sqrt(1/fan_in); the final
layer's weights and bias start at exactly zero so a fresh network is the
constant-zero function and the induced dynamics are constant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatch
from .autodiff import Tensor


@dataclass
class MlpParams:
    weights: list[Tensor]  # each (out, in)
    biases: list[Tensor]   # each (out,)

    @property
    def in_dim(self) -> int:
        return self.weights[0].data.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].data.shape[0]


def init_mlp(in_dim: int, out_dim: int, hidden_width: int,
             hidden_layers: int, rng: np.random.Generator) -> MlpParams:
    dims = [in_dim] + [hidden_width] * hidden_layers + [out_dim]
    weights, biases = [], []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        if i == len(dims) - 2:
            w = np.zeros((d_out, d_in))
            b = np.zeros(d_out)
        else:
            bound = np.sqrt(1.0 / d_in)
            w = rng.uniform(-bound, bound, size=(d_out, d_in))
            b = rng.uniform(-bound, bound, size=d_out)
        weights.append(ad.parameter(w))
        biases.append(ad.parameter(b))
    return MlpParams(weights=weights, biases=biases)


def mlp_forward(params: MlpParams, x: Tensor) -> Tensor:
    """Affine -> tanh for each hidden layer, final affine with no activation."""
    if x.data.ndim != 2 or x.data.shape[1] != params.in_dim:
        raise ShapeMismatch(
            f"mlp input must be (B, {params.in_dim}), got {x.data.shape}")
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = ad.affine(h, w, b)
        if i != last:
            h = ad.tanh(h)
    return h


def mlp_parameters(params: MlpParams) -> list[Tensor]:
    out = []
    for w, b in zip(params.weights, params.biases):
        out.append(w)
        out.append(b)
    return out


@dataclass
class AdamState:
    lr: float
    beta1: float
    beta2: float
    eps: float
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]


def init_adam(params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        lr=lr, beta1=beta1, beta2=beta2, eps=eps, step=0,
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
    )


def adam_step(params: list[Tensor], grads: list[np.ndarray],
              state: AdamState) -> AdamState:
    """One Adam update with bias correction; parameters change in place."""
    if len(params) != len(grads):
        raise ShapeMismatch("one gradient per parameter required")
    state.step += 1
    t = state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != param {p.data.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / (1.0 - state.beta1 ** t)
        v_hat = state.v[i] / (1.0 - state.beta2 ** t)
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


# ---------------------------------------------------------------------------
# Parameter files: a JSON manifest plus a little-endian float64 blob whose
# layout follows the manifest's tensor order.


def save_params(path: str | Path, tensors: dict[str, Tensor], meta: dict) -> None:
    path = Path(path)
    manifest = {
        "meta": meta,
        "tensors": [{"name": k, "shape": list(v.data.shape)}
                    for k, v in tensors.items()],
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, sort_keys=True))
    blob = b"".join(np.ascontiguousarray(v.data, dtype="<f8").tobytes()
                    for v in tensors.values())
    path.with_suffix(".bin").write_bytes(blob)


def load_params(path: str | Path) -> tuple[dict[str, Tensor], dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    blob = path.with_suffix(".bin").read_bytes()
    tensors: dict[str, Tensor] = {}
    offset = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
        offset += size * 8
        tensors[entry["name"]] = ad.parameter(arr.reshape(shape))
    if offset != len(blob):
        raise ShapeMismatch("parameter blob length disagrees with manifest")
    return tensors, manifest["meta"]
