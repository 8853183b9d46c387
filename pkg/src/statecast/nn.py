"""Parameterized layers: linear/MLP blocks, a GRU cell, embeddings, init.

Parameters are long-lived autodiff leaves collected in a ParamRegistry, the
unit of checkpointing and optimization. Layers are immutable during forward
passes and safe for concurrent read-only evaluation.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Node


class Parameter(Node):
    """A named, persistent leaf tensor with an accumulating gradient."""

    __slots__ = ("name", "kind")

    def __init__(self, name: str, value: np.ndarray, kind: str):
        super().__init__(value, (), True)
        self.name = name
        self.kind = kind  # "weight" | "bias" | "embedding"
        self.grad = np.zeros_like(value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


class ParamRegistry:
    """Named, shaped parameter tensors; declaration order is deterministic."""

    def __init__(self):
        self._params: dict[str, Parameter] = {}

    def declare(self, name: str, shape, kind: str = "weight") -> Parameter:
        if name in self._params:
            raise ContractError(f"parameter {name!r} declared twice")
        p = Parameter(name, np.zeros(tuple(shape), dtype=ad.default_dtype()), kind)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def total_size(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def tensors(self) -> dict[str, np.ndarray]:
        """Copies of all parameter values, keyed by name."""
        return {name: p.value.copy() for name, p in self._params.items()}

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values; shapes must match declarations."""
        for name, p in self._params.items():
            if name not in tensors:
                raise ContractError(f"missing tensor {name!r}")
            arr = np.asarray(tensors[name], dtype=p.value.dtype)
            if arr.shape != p.value.shape:
                raise ContractError(
                    f"tensor {name!r} has shape {arr.shape}, expected {p.value.shape}"
                )
            p.value = arr.copy()

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.zero_grad()


def zero_grads(registry: ParamRegistry) -> None:
    registry.zero_grads()


def init_params(registry: ParamRegistry, seed: int) -> None:
    """Fill declared parameters: Xavier-uniform weights, zero biases,
    N(0, 0.02) embedding rows. Reproducible from the seed alone."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    for name in sorted(registry.names()):
        p = registry[name]
        if p.kind == "bias":
            p.value = np.zeros_like(p.value)
        elif p.kind == "embedding":
            p.value = (0.02 * rng.standard_normal(p.value.shape)).astype(p.value.dtype)
        else:
            if p.value.ndim == 2:
                fan_out, fan_in = p.value.shape
            else:
                fan_out = fan_in = p.value.shape[0]
            a = float(np.sqrt(6.0 / (fan_in + fan_out)))
            p.value = rng.uniform(-a, a, size=p.value.shape).astype(p.value.dtype)
        p.zero_grad()


class Linear:
    """Affine map W x + b with W stored as [out x in]."""

    def __init__(self, registry: ParamRegistry, name: str, n_in: int, n_out: int):
        self.n_in = n_in
        self.n_out = n_out
        self.w = registry.declare(f"{name}.w", (n_out, n_in), "weight")
        self.b = registry.declare(f"{name}.b", (n_out,), "bias")

    def __call__(self, x: Node) -> Node:
        if x.value.ndim == 1:
            if x.value.shape[0] != self.n_in:
                raise ContractError(
                    f"linear: input has {x.value.shape[0]} features, expected {self.n_in}"
                )
            return ad.add(ad.matmul(self.w, x), self.b)
        if x.value.ndim == 2:
            if x.value.shape[1] != self.n_in:
                raise ContractError(
                    f"linear: input has {x.value.shape[1]} features, expected {self.n_in}"
                )
            return ad.add(ad.matmul(x, ad.transpose(self.w)), self.b)
        raise ContractError(f"linear: unsupported input shape {x.value.shape}")


class MLP:
    """Stack of Linear layers with an activation between them (none after the
    last). A single layer degenerates to the bare affine map."""

    def __init__(self, registry: ParamRegistry, name: str, dims: list[int],
                 activation=ad.tanh):
        if len(dims) < 2:
            raise ContractError("mlp: need at least input and output dims")
        self.layers = [
            Linear(registry, f"{name}.l{i}", dims[i], dims[i + 1])
            for i in range(len(dims) - 1)
        ]
        self.activation = activation

    def __call__(self, x: Node) -> Node:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.activation(x)
        return x


class GRUCell:
    """Single-layer GRU. With zero weights the update gate is 0.5 and the
    candidate is 0, so a step halves the hidden state; with h0 in (-1, 1)
    every later hidden stays in (-1, 1) because the output is a convex mix
    of the previous hidden and a tanh candidate."""

    def __init__(self, registry: ParamRegistry, name: str, n_in: int, n_hidden: int):
        self.n_in = n_in
        self.n_hidden = n_hidden
        decl = registry.declare
        self.wx_z = decl(f"{name}.wx_z", (n_hidden, n_in))
        self.wh_z = decl(f"{name}.wh_z", (n_hidden, n_hidden))
        self.b_z = decl(f"{name}.b_z", (n_hidden,), "bias")
        self.wx_r = decl(f"{name}.wx_r", (n_hidden, n_in))
        self.wh_r = decl(f"{name}.wh_r", (n_hidden, n_hidden))
        self.b_r = decl(f"{name}.b_r", (n_hidden,), "bias")
        self.wx_n = decl(f"{name}.wx_n", (n_hidden, n_in))
        self.wh_n = decl(f"{name}.wh_n", (n_hidden, n_hidden))
        self.b_n = decl(f"{name}.b_n", (n_hidden,), "bias")

    def step(self, x: Node, h_prev: Node) -> Node:
        if x.value.shape != (self.n_in,) or h_prev.value.shape != (self.n_hidden,):
            raise ContractError(
                f"gru: input shapes {x.value.shape}, {h_prev.value.shape} do not "
                f"match ({self.n_in},), ({self.n_hidden},)"
            )
        z = ad.sigmoid(ad.add(ad.add(ad.matmul(self.wx_z, x), ad.matmul(self.wh_z, h_prev)), self.b_z))
        r = ad.sigmoid(ad.add(ad.add(ad.matmul(self.wx_r, x), ad.matmul(self.wh_r, h_prev)), self.b_r))
        n = ad.tanh(ad.add(ad.add(ad.matmul(self.wx_n, x), ad.mul(r, ad.matmul(self.wh_n, h_prev))), self.b_n))
        one_minus_z = ad.add_const(ad.neg(z), 1.0)
        return ad.add(ad.mul(one_minus_z, n), ad.mul(z, h_prev))


class EmbeddingTable:
    """Learned vector per vocabulary row."""

    def __init__(self, registry: ParamRegistry, name: str, n_rows: int, dim: int):
        self.rows = registry.declare(f"{name}.rows", (n_rows, dim), "embedding")

    def lookup(self, ids) -> Node:
        return ad.gather_rows(self.rows, ids)
