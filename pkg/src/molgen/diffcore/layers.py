"""Layers for the sequence model: embeddings, GRU stacks, two-layer MLPs.

Weight matrices start uniform in (-1/sqrt(fan_in), +1/sqrt(fan_in)), biases
at zero. Every layer exposes its parameters through `named_parameters` so
the optimizer and checkpoints see one flat name -> Tensor mapping.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def uniform_init(rng: np.random.Generator, fan_in: int, shape, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return T.parameter(rng.uniform(-bound, bound, size=shape), dtype=dtype)


class Module:
    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                out[name] = value
            elif isinstance(value, Module):
                for sub, t in value.named_parameters().items():
                    out[f"{name}.{sub}"] = t
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, t in item.named_parameters().items():
                            out[f"{name}.{i}.{sub}"] = t
                    elif isinstance(item, Tensor):
                        out[f"{name}.{i}"] = item
        return out


class Embedding(Module):
    def __init__(self, rng, count: int, dim: int, dtype=np.float32):
        self.table = uniform_init(rng, dim, (count, dim), dtype)

    def __call__(self, indices) -> Tensor:
        return T.embedding(self.table, indices)


class Affine(Module):
    def __init__(self, rng, in_dim: int, out_dim: int, dtype=np.float32):
        self.weight = uniform_init(rng, in_dim, (in_dim, out_dim), dtype)
        self.bias = T.parameter(np.zeros(out_dim), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class Mlp(Module):
    """Two affine layers with a ReLU between; logits come out raw."""

    def __init__(self, rng, in_dim: int, hidden: int, out_dim: int, dtype=np.float32):
        self.lin1 = Affine(rng, in_dim, hidden, dtype)
        self.lin2 = Affine(rng, hidden, out_dim, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(T.relu(self.lin1(x)))


class GruLayer(Module):
    """Single GRU layer; gates fused into one 3H-wide matmul pair.

    Update rule (reset applied to the projected hidden state):
        r = sigmoid(x Wi[:, :H] + h Wh[:, :H] + bi_r + bh_r)
        z = sigmoid(x Wi[:, H:2H] + h Wh[:, H:2H] + bi_z + bh_z)
        n = tanh(x Wi[:, 2H:] + r * (h Wh[:, 2H:] + bh_n) + bi_n)
        h' = (1 - z) * n + z * h
    """

    def __init__(self, rng, in_dim: int, hidden: int, dtype=np.float32):
        self.hidden = hidden
        self.w_input = uniform_init(rng, in_dim, (in_dim, 3 * hidden), dtype)
        self.w_hidden = uniform_init(rng, hidden, (hidden, 3 * hidden), dtype)
        self.b_input = T.parameter(np.zeros(3 * hidden), dtype=dtype)
        self.b_hidden = T.parameter(np.zeros(3 * hidden), dtype=dtype)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        H = self.hidden
        gi = T.matmul(x, self.w_input) + self.b_input
        gh = T.matmul(h, self.w_hidden) + self.b_hidden
        r = T.sigmoid(T.slice_cols(gi, 0, H) + T.slice_cols(gh, 0, H))
        z = T.sigmoid(T.slice_cols(gi, H, 2 * H) + T.slice_cols(gh, H, 2 * H))
        n = T.tanh(T.slice_cols(gi, 2 * H, 3 * H) + r * T.slice_cols(gh, 2 * H, 3 * H))
        return (1.0 - z) * n + z * h


class GruStack(Module):
    """Stacked GRU layers; layer l consumes layer l-1's output."""

    def __init__(self, rng, in_dim: int, hidden: int, layers: int, dtype=np.float32):
        self.hidden = hidden
        self.layers = [GruLayer(rng, in_dim if l == 0 else hidden, hidden, dtype)
                       for l in range(layers)]

    def __call__(self, x: Tensor, states: list[Tensor]) -> tuple[list[Tensor], Tensor]:
        if len(states) != len(self.layers):
            raise ValueError(f"expected {len(self.layers)} hidden states, got {len(states)}")
        new_states = []
        inp = x
        for layer, h in zip(self.layers, states):
            if h.data.shape[-1] != layer.hidden:
                raise ValueError("hidden state width mismatch")
            h_next = layer(inp, h)
            new_states.append(h_next)
            inp = h_next
        return new_states, inp

    def zero_state(self, batch: int, dtype=np.float32) -> list[Tensor]:
        return [Tensor(np.zeros((batch, self.hidden), dtype=dtype)) for _ in self.layers]
