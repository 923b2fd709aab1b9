"""Adam with optional stepped learning-rate decay and global-norm clipping."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm.
    """
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for t in params.values():
            if t.grad is not None:
                t.grad *= scale
    return norm


class Adam:
    """Standard Adam; the learning rate is multiplied by `decay` every
    `decay_every` steps and floored at `lr_min`."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, decay: float = 1.0, decay_every: int = 1,
                 lr_min: float = 0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.decay = decay
        self.decay_every = max(1, int(decay_every))
        self.lr_min = lr_min
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def current_lr(self) -> float:
        drops = self.step_count // self.decay_every
        return max(self.lr * self.decay ** drops, self.lr_min)

    def step(self, params: dict[str, Tensor]) -> None:
        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self, params: dict[str, Tensor]) -> None:
        for p in params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "hyper": {
                "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "decay": self.decay,
                "decay_every": self.decay_every, "lr_min": self.lr_min,
                "step_count": self.step_count,
            },
            "m": dict(self.m),
            "v": dict(self.v),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "Adam":
        hyper = dict(state["hyper"])
        step_count = hyper.pop("step_count")
        opt = cls(**hyper)
        opt.step_count = step_count
        opt.m = {k: np.array(v) for k, v in state["m"].items()}
        opt.v = {k: np.array(v) for k, v in state["v"].items()}
        return opt
