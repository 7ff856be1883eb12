"""
Small fully-connected network with hand-written reverse-mode gradients.

Used for the twin critics.  Parameters are plain numpy arrays; every function
is pure and returns new arrays, so callers own all mutation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "gctc-mlp"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = {
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, h: (z > 0).astype(float)),
    "tanh": (np.tanh, lambda z, h: 1.0 - h * h),
    "linear": (lambda z: z, lambda z, h: np.ones_like(z)),
}


@dataclass(frozen=True)
class MlpParams:
    layer_dims: tuple
    weights: tuple  # weights[k] has shape (layer_dims[k], layer_dims[k+1])
    biases: tuple
    activations: tuple  # one tag per hidden layer

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or min(dims) < 1:
            raise ValueError(f"invalid layer dims {dims}")
        if dims[-1] != 1:
            raise ValueError("the network output must be scalar")
        n = len(dims) - 1
        if len(self.weights) != n or len(self.biases) != n or len(self.activations) != n - 1:
            raise ValueError("weights/biases/activations do not match layer_dims")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (dims[k], dims[k + 1]) or b.shape != (dims[k + 1],):
                raise ValueError(f"layer {k}: expected {(dims[k], dims[k + 1])}, got {W.shape}/{b.shape}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {k} has non-finite entries")
        for tag in self.activations:
            if tag not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {tag!r}")
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "weights", tuple(self.weights))
        object.__setattr__(self, "biases", tuple(self.biases))
        object.__setattr__(self, "activations", tuple(self.activations))

    def arrays(self) -> list:
        """All parameter arrays, interleaved ``[W0, b0, W1, b1, ...]``."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def with_arrays(self, arrays) -> "MlpParams":
        arrays = list(arrays)
        return MlpParams(self.layer_dims, tuple(arrays[0::2]), tuple(arrays[1::2]), self.activations)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())


def init(seed: int, layer_dims=(18, 64, 64, 1), activation: str = "relu",
         final_bound: float = 1e-3) -> MlpParams:
    """Fan-in scaled uniform initialisation; the output layer uses ``final_bound``."""
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in layer_dims)
    weights, biases = [], []
    for k in range(len(dims) - 1):
        bound = final_bound if k == len(dims) - 2 else 1.0 / np.sqrt(dims[k])
        weights.append(rng.uniform(-bound, bound, size=(dims[k], dims[k + 1])))
        biases.append(rng.uniform(-bound, bound, size=dims[k + 1]))
    return MlpParams(dims, tuple(weights), tuple(biases), (activation,) * (len(dims) - 2))


def _check_input(p: MlpParams, X: np.ndarray):
    if X.shape[-1] != p.layer_dims[0]:
        raise ValueError(f"input has {X.shape[-1]} features, network expects {p.layer_dims[0]}")


def forward_batch(p: MlpParams, X) -> tuple[np.ndarray, list]:
    """Outputs of shape ``(N,)`` plus the cache needed by :func:`backward_batch`."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _check_input(p, X)
    h = X
    cache = []
    last = len(p.weights) - 1
    for k, (W, b) in enumerate(zip(p.weights, p.biases)):
        z = h @ W + b
        if k < last:
            out = _ACTIVATIONS[p.activations[k]][0](z)
        else:
            out = z
        cache.append((h, z, out))
        h = out
    return h[:, 0], cache


def backward_batch(p: MlpParams, cache: list, dout) -> tuple[MlpParams, np.ndarray]:
    """Backpropagate ``dout`` (shape ``(N,)``); parameter gradients are summed over the batch."""
    g = np.asarray(dout, dtype=float).reshape(-1, 1)
    dW, db = [None] * len(p.weights), [None] * len(p.weights)
    for k in range(len(p.weights) - 1, -1, -1):
        h_in, z, out = cache[k]
        if k < len(p.weights) - 1:
            g = g * _ACTIVATIONS[p.activations[k]][1](z, out)
        dW[k] = h_in.T @ g
        db[k] = g.sum(axis=0)
        g = g @ p.weights[k].T
    grads = MlpParams(p.layer_dims, tuple(dW), tuple(db), p.activations)
    return grads, g


def forward(p: MlpParams, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("forward expects a single input vector")
    return float(forward_batch(p, x)[0][0])


def grad(p: MlpParams, x) -> tuple[MlpParams, np.ndarray]:
    """Gradients of the scalar output w.r.t. the parameters and the input."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("grad expects a single input vector")
    _, cache = forward_batch(p, x)
    grads, dx = backward_batch(p, cache, np.ones(1))
    return grads, dx[0]


def to_dict(p: MlpParams) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layer_dims": list(p.layer_dims),
        "activations": list(p.activations),
        "weights": [W.tolist() for W in p.weights],
        "biases": [b.tolist() for b in p.biases],
    }


def from_dict(data: dict) -> MlpParams:
    if data.get("format") != CHECKPOINT_FORMAT or data.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not a gctc-mlp v1 checkpoint")
    dims = tuple(data["layer_dims"])
    weights = tuple(np.asarray(W, dtype=float).reshape(dims[k], dims[k + 1]) for k, W in enumerate(data["weights"]))
    biases = tuple(np.asarray(b, dtype=float).reshape(dims[k + 1]) for k, b in enumerate(data["biases"]))
    return MlpParams(dims, weights, biases, tuple(data["activations"]))


def save(p: MlpParams, path) -> None:
    Path(path).write_text(json.dumps(to_dict(p)))


def load(path) -> MlpParams:
    return from_dict(json.loads(Path(path).read_text()))
