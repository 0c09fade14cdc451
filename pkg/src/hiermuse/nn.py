"""Shared network building blocks on top of the autograd tape.

Parameters live in a flat name -> Tensor mapping so checkpoints, the
optimizer, and gradient checks all see one namespace. Initialization is
fan-in scaled uniform with an explicit seed; identical seeds give
bit-identical weights.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autograd import Tensor

CHECKPOINT_FORMAT = "hiermuse-weights"
CHECKPOINT_VERSION = 1

LAYER_NORM_EPS = 1e-5


class ParameterStore(dict):
    """name -> Tensor map with creation, grad, and serialization helpers."""

    def __init__(self, seed: int = 0):
        super().__init__()
        self.rng = np.random.default_rng(seed)

    def create(self, name: str, shape: tuple, fan_in: int | None = None) -> Tensor:
        if name in self:
            return self[name]
        if fan_in is None:
            fan_in = shape[0] if len(shape) > 1 else max(shape[0], 1)
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        data = self.rng.uniform(-bound, bound, size=shape)
        t = Tensor(data, requires_grad=True, name=name)
        self[name] = t
        return t

    def create_const(self, name: str, value: np.ndarray) -> Tensor:
        if name in self:
            return self[name]
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self[name] = t
        return t

    def zero_grad(self):
        for t in self.values():
            t.zero_grad()

    def copy_values(self) -> dict:
        return {k: v.data.copy() for k, v in self.items()}

    def load_values(self, values: dict):
        for k, arr in values.items():
            if k in self:
                if self[k].data.shape != arr.shape:
                    raise ValueError(f"shape mismatch for {k}: {self[k].data.shape} vs {arr.shape}")
                self[k].data = arr.copy()
            else:
                self[k] = Tensor(arr.copy(), requires_grad=True, name=k)


def save_checkpoint(path, params: ParameterStore, meta: dict | None = None):
    """Write weights as a versioned JSON map name -> {shape, values}."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "weights": {
            name: {"shape": list(t.data.shape), "values": t.data.reshape(-1).tolist()}
            for name, t in sorted(params.items())
        },
    }
    Path(path).write_text(json.dumps(payload))


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read a checkpoint; returns (name -> ndarray, meta)."""
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a weight checkpoint: {path}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    weights = {
        name: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["weights"].items()
    }
    return weights, payload.get("meta", {})


# -- functional layers --------------------------------------------------------


def linear(params: ParameterStore, prefix: str, x: Tensor, in_dim: int, out_dim: int,
           bias: bool = True) -> Tensor:
    w = params.create(f"{prefix}.weight", (in_dim, out_dim), fan_in=in_dim)
    out = x @ w
    if bias:
        b = params.create(f"{prefix}.bias", (out_dim,), fan_in=in_dim)
        out = out + b
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize each row of ``x`` to zero mean / unit variance, then affine."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered / (var + eps).sqrt()
    return normed * gain + bias


def ffn(params: ParameterStore, prefix: str, x: Tensor, dim: int, hidden: int | None = None) -> Tensor:
    """Position-wise feed-forward: relu(x W1 + b1) W2 + b2."""
    hidden = hidden if hidden is not None else 4 * dim
    h = linear(params, f"{prefix}.fc1", x, dim, hidden).relu()
    return linear(params, f"{prefix}.fc2", h, hidden, dim)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when p == 0 or rng is None (eval mode)."""
    if p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return x * Tensor(keep)


class AdamW:
    """Adaptive-moment optimizer with decoupled weight decay.

    With zero gradient and decay d the update is w <- w * (1 - lr * d);
    with zero decay and zero gradient parameters are untouched.
    """

    def __init__(self, params: ParameterStore, learning_rate: float = 1e-3,
                 weight_decay: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {}
        self._v = {}

    def step(self):
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self._m.setdefault(name, np.zeros_like(p.data))
            v = self._v.setdefault(name, np.zeros_like(p.data))
            m += (1 - self.beta1) * (g - m)
            v += (1 - self.beta2) * (g * g - v)
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                p.data -= self.learning_rate * self.weight_decay * p.data

    def zero_grad(self):
        self.params.zero_grad()
