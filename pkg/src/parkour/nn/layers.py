"""Network building blocks: dense, conv2d, GRU cell, single-head attention.

Initialization: scaled-uniform fan-in for dense/conv kernels, orthogonal
for recurrent kernels, zeros for biases. Every layer takes an explicit rng
so construction is deterministic per seed.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def uniform_fanin(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def orthogonal(rng: np.random.Generator, shape) -> np.ndarray:
    a = rng.standard_normal(shape)
    q, r = np.linalg.qr(a if shape[0] >= shape[1] else a.T)
    q = q * np.sign(np.diag(r))
    return q if shape[0] >= shape[1] else q.T


class Module:
    """Base with a named-parameter registry (recurses into sub-modules)."""

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for attr, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                params[attr] = value
            elif isinstance(value, Module):
                for name, p in value.parameters().items():
                    params[f"{attr}.{name}"] = p
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for name, p in item.parameters().items():
                            params[f"{attr}.{i}.{name}"] = p
        return params

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters().values())


class Dense(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 name: str = "dense"):
        self.name = name
        self.w = T.parameter(uniform_fanin(rng, (in_dim, out_dim), in_dim), f"{name}.w")
        self.b = T.parameter(np.zeros(out_dim), f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.w.data.shape[0]:
            raise T.ShapeError(
                f"{self.name}: input width {x.data.shape[-1]} != {self.w.data.shape[0]}")
        return T.matmul(x, self.w, name=self.name) + self.b


class MLP(Module):
    def __init__(self, dims: tuple[int, ...], rng: np.random.Generator,
                 activation: str = "tanh", name: str = "mlp"):
        self.layers = [Dense(dims[i], dims[i + 1], rng, f"{name}.{i}")
                       for i in range(len(dims) - 1)]
        self.act = {"tanh": T.tanh, "relu": T.relu}[activation]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = self.act(layer(x))
        return self.layers[-1](x)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, name: str = "conv"):
        fan_in = in_ch * kernel * kernel
        self.name = name
        self.stride = stride
        self.padding = padding
        self.w = T.parameter(uniform_fanin(rng, (out_ch, in_ch, kernel, kernel), fan_in),
                             f"{name}.w")
        self.b = T.parameter(np.zeros(out_ch), f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, self.stride, self.padding, name=self.name)


class GRUCell(Module):
    """Single gated recurrent cell.

    r = sigmoid(x Wr + h Ur + br), z = sigmoid(x Wz + h Uz + bz),
    n = tanh(x Wn + bn + r * (h Un)), h' = (1 - z) * n + z * h.
    """

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator,
                 name: str = "gru"):
        self.name = name
        self.hidden = hidden

        def w(tag):
            return T.parameter(uniform_fanin(rng, (in_dim, hidden), in_dim), f"{name}.w{tag}")

        def u(tag):
            return T.parameter(orthogonal(rng, (hidden, hidden)), f"{name}.u{tag}")

        self.wr, self.wz, self.wn = w("r"), w("z"), w("n")
        self.ur, self.uz, self.un = u("r"), u("z"), u("n")
        self.br = T.parameter(np.zeros(hidden), f"{name}.br")
        self.bz = T.parameter(np.zeros(hidden), f"{name}.bz")
        self.bn = T.parameter(np.zeros(hidden), f"{name}.bn")

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        if h.data.shape[-1] != self.hidden:
            raise T.ShapeError(f"{self.name}: hidden width {h.data.shape[-1]} != {self.hidden}")
        r = T.sigmoid(T.matmul(x, self.wr, name=self.name) + T.matmul(h, self.ur) + self.br)
        z = T.sigmoid(T.matmul(x, self.wz, name=self.name) + T.matmul(h, self.uz) + self.bz)
        n = T.tanh(T.matmul(x, self.wn, name=self.name) + self.bn + r * T.matmul(h, self.un))
        return (1.0 - z) * n + z * h


class CrossAttention(Module):
    """Single-head scaled dot-product attention over a token sequence.

    Queries, keys and values all come from the same (batch, tokens, dim)
    sequence, so proprioceptive and visual tokens attend to each other.
    """

    def __init__(self, dim: int, rng: np.random.Generator, name: str = "attn"):
        self.name = name
        self.dim = dim
        self.wq = T.parameter(uniform_fanin(rng, (dim, dim), dim), f"{name}.wq")
        self.wk = T.parameter(uniform_fanin(rng, (dim, dim), dim), f"{name}.wk")
        self.wv = T.parameter(uniform_fanin(rng, (dim, dim), dim), f"{name}.wv")
        self.wo = T.parameter(uniform_fanin(rng, (dim, dim), dim), f"{name}.wo")

    def __call__(self, tokens: Tensor) -> Tensor:
        if tokens.data.ndim != 3 or tokens.data.shape[-1] != self.dim:
            raise T.ShapeError(
                f"{self.name}: expected (batch, tokens, {self.dim}), got {tokens.data.shape}")
        q = T.matmul(tokens, self.wq, name=self.name)
        k = T.matmul(tokens, self.wk, name=self.name)
        v = T.matmul(tokens, self.wv, name=self.name)
        scores = T.matmul(q, T.swap_last(k)) * (1.0 / np.sqrt(self.dim))
        attn = T.softmax(scores, axis=-1)
        out = T.matmul(attn, v)
        return T.matmul(out, self.wo, name=self.name) + tokens
