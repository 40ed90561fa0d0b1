"""Optimization utilities: decoupled-weight-decay Adam, clipping, schedule."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor

__all__ = ["AdamW", "clip_gradients", "clip_gradients_", "lr_schedule"]


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Scale all gradients jointly so their global l2 norm is at most
    ``max_norm``; below the bound they pass through unchanged."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if total > max_norm:
        scale = max_norm / total
        return [g * scale for g in grads]
    return list(grads)


def clip_gradients_(params: Mapping[str, Tensor], max_norm: float) -> float:
    """In-place global-norm clipping over ``.grad`` buffers; returns the
    pre-clip norm."""
    named = [p for p in params.values() if p.grad is not None]
    grads = [p.grad for p in named]
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if total > max_norm:
        scale = max_norm / total
        for p in named:
            p.grad = p.grad * scale
    return total


def lr_schedule(step: int | float, total_steps: int, warmup_ratio: float,
                base_lr: float) -> float:
    """Linear ramp from 0 to ``base_lr`` over the warmup span, then linear
    decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError("step outside [0, total_steps]")
    if total_steps == 0:
        return 0.0
    warmup_steps = warmup_ratio * total_steps
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr * (total_steps - step) / (total_steps - warmup_steps)


class AdamW:
    """Adam with decoupled weight decay and per-group learning rates.

    Decay is skipped for one-dimensional parameters (biases, norm gains) and
    for any parameter without a gradient this step.
    """

    def __init__(self, params: Mapping[str, Tensor], groups: Mapping[str, Sequence[str]],
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        grouped = sorted(n for names in groups.values() for n in names)
        if grouped != sorted(params):
            raise ValueError("groups must partition the parameter set")
        self.params = dict(params)
        self.groups = {g: list(names) for g, names in groups.items()}
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lrs: Mapping[str, float]) -> None:
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for group, names in self.groups.items():
            lr = lrs[group]
            for name in names:
                p = self.params[name]
                g = p.grad
                if g is None:
                    continue
                self.m[name] = b1 * self.m[name] + (1 - b1) * g
                self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
                m_hat = self.m[name] / bc1
                v_hat = self.v[name] / bc2
                if self.weight_decay and p.data.ndim > 1:
                    p.data = p.data - lr * self.weight_decay * p.data
                p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)

    # checkpoint support -------------------------------------------------
    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def restore_tensors(self, tensors: Mapping[str, np.ndarray], t: int) -> None:
        for name in self.params:
            self.m[name] = np.array(tensors[f"opt.m.{name}"])
            self.v[name] = np.array(tensors[f"opt.v.{name}"])
        self.t = int(t)
