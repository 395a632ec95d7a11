"""Small fully connected networks over flat parameter vectors.

Networks are described by their layer sizes; parameters live in one flat
vector laid out layer by layer as row-major ``W`` (in x out) followed by
``b``. Keeping parameters flat is what lets a hypernetwork emit them.
The functional forward accepts any number of leading batch dimensions on
the parameter vector, so a stack of sampled weight vectors is evaluated in
one pass.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor

ACTIVATIONS = ("tanh", "relu", "identity")
OUTPUTS = ("sigmoid", "identity")


def n_params(sizes) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def layer_slices(sizes) -> list[tuple[slice, tuple, slice, int]]:
    """(weight slice, weight shape, bias slice, width) per layer."""
    out = []
    pos = 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        w = slice(pos, pos + a * b)
        pos += a * b
        out.append((w, (a, b), slice(pos, pos + b), b))
        pos += b
    return out


def _activate(h: Tensor, kind: str) -> Tensor:
    if kind == "tanh":
        return h.tanh()
    if kind == "relu":
        return h.relu()
    if kind == "identity":
        return h
    raise ValueError(f"unknown activation {kind!r}")


def apply_flat(theta, sizes, x, hidden: str = "tanh") -> Tensor:
    """Pre-activation output of the last layer.

    ``theta`` has shape ``batch + (P,)``; ``x`` must broadcast against
    ``batch + (n, in)``. Returns ``batch + (n, out)``.
    """
    theta = as_tensor(theta)
    h = as_tensor(x)
    if theta.shape[-1] != n_params(sizes):
        raise ShapeError(f"expected {n_params(sizes)} parameters, got {theta.shape[-1]}")
    if h.shape[-1] != sizes[0]:
        raise ShapeError(f"expected inputs of width {sizes[0]}, got {h.shape[-1]}")
    batch = theta.shape[:-1]
    layers = layer_slices(sizes)
    for i, (ws, wshape, bs, width) in enumerate(layers):
        W = theta[..., ws].reshape(batch + wshape)
        b = theta[..., bs].reshape(batch + (1, width))
        h = h @ W + b
        if i < len(layers) - 1:
            h = _activate(h, hidden)
    return h


@dataclass
class MlpParams:
    """Per-layer weights and biases of a fully connected network."""

    weights: list
    biases: list
    hidden: str = "tanh"
    output: str = "sigmoid"

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i} input {w.shape[0]} != previous output")
        if self.hidden not in ACTIVATIONS or self.output not in OUTPUTS:
            raise ValueError("unknown activation")

    @property
    def sizes(self) -> tuple:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    @classmethod
    def from_flat(cls, theta, sizes, hidden="tanh", output="sigmoid") -> "MlpParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (n_params(sizes),):
            raise ShapeError(f"expected {n_params(sizes)} parameters, got {theta.shape}")
        ws, bs = [], []
        for wsl, wshape, bsl, _ in layer_slices(sizes):
            ws.append(theta[wsl].reshape(wshape))
            bs.append(theta[bsl].copy())
        return cls(ws, bs, hidden, output)

    @classmethod
    def init(cls, sizes, rng, hidden="tanh", output="sigmoid", scale: float = 1.0) -> "MlpParams":
        ws = [rng.normal(0.0, scale / np.sqrt(a), size=(a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
        bs = [np.zeros(b) for b in sizes[1:]]
        return cls(ws, bs, hidden, output)

    @classmethod
    def zeros(cls, sizes, hidden="tanh", output="sigmoid") -> "MlpParams":
        return cls.from_flat(np.zeros(n_params(sizes)), sizes, hidden, output)

    def to_json(self) -> dict:
        return {
            "layer_sizes": list(self.sizes),
            "activation": self.hidden,
            "output": self.output,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MlpParams":
        sizes = obj["layer_sizes"]
        ws = [np.asarray(w, dtype=float).reshape(a, b) for w, a, b in zip(obj["weights"], sizes[:-1], sizes[1:])]
        return cls(ws, obj["biases"], obj.get("activation", "tanh"), obj.get("output", "sigmoid"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "MlpParams":
        return cls.from_json(json.loads(Path(path).read_text()))


def mlp_forward(params: MlpParams, x) -> Tensor:
    """Outputs for a batch of inputs, shape (n,) for single-output nets."""
    x = as_tensor(x)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[-1] != params.sizes[0]:
        raise ShapeError(f"input width {x.shape[-1]} does not match {params.sizes[0]}")
    out = apply_flat(params.flat(), params.sizes, x, params.hidden)
    if params.output == "sigmoid":
        out = out.sigmoid()
    return out[..., 0] if params.sizes[-1] == 1 else out


def weight_features(params) -> tuple[float, float, float]:
    """(l1 norm, l2 norm, path-norm) of a network.

    Norms run over all weights and biases; the path-norm sums, over every
    input-to-output path, the product of squared weights and takes the root.
    """
    if not isinstance(params, MlpParams):
        raise TypeError("expected MlpParams")
    flat = params.flat()
    l1 = float(np.abs(flat).sum())
    l2 = float(np.sqrt((flat * flat).sum()))
    acc = np.ones((1, params.sizes[0]))
    for w in params.weights:
        acc = acc @ (w * w)
    return l1, l2, float(np.sqrt(acc.sum()))


def weight_features_batch(theta, sizes) -> np.ndarray:
    """Vectorized (l1, l2, path-norm) for flat parameters of shape (B, P)."""
    theta = np.asarray(theta, dtype=float)
    l1 = np.abs(theta).sum(-1)
    l2 = np.sqrt((theta * theta).sum(-1))
    batch = theta.shape[:-1]
    acc = np.ones(batch + (1, sizes[0]))
    for ws, wshape, _, _ in layer_slices(sizes):
        W = theta[..., ws].reshape(batch + wshape)
        acc = acc @ (W * W)
    return np.stack([l1, l2, np.sqrt(acc.sum(axis=(-2, -1)))], axis=-1)


def path_norm_tensor(theta: Tensor, sizes) -> Tensor:
    """Differentiable path-norm for flat parameters with leading batch dims."""
    batch = theta.shape[:-1]
    acc = Tensor(np.ones(batch + (1, sizes[0])))
    for ws, wshape, _, _ in layer_slices(sizes):
        W = theta[..., ws].reshape(batch + wshape)
        acc = acc @ (W * W)
    return acc.sum(axis=-1).sum(axis=-1).sqrt()
