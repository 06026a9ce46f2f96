"""AdamW with decoupled weight decay and the warmup/linear-decay schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


def lr_at(step: int, total_steps: int, peak_lr: float, warmup_frac: float) -> float:
    """Linear ramp 0 -> peak over the warmup steps, then linear decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = warmup_steps(total_steps, warmup_frac)
    if step <= warmup:
        return peak_lr * step / warmup
    return peak_lr * (total_steps - step) / (total_steps - warmup)


def warmup_steps(total_steps: int, warmup_frac: float) -> int:
    if not 0.0 < warmup_frac < 1.0:
        raise ValueError(f"warmup fraction must be in (0,1), got {warmup_frac}")
    if total_steps < 2:
        raise ValueError("schedule needs at least 2 total steps")
    return min(max(1, math.ceil(warmup_frac * total_steps)), total_steps - 1)


def adamw_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
               lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One AdamW update; returns new (param, m, v).

    The decay term ``lr * weight_decay * param`` is applied to the
    pre-update parameter and is independent of the gradient moments.
    """
    if step < 1:
        raise ValueError("AdamW step counter starts at 1")
    if not np.isfinite(grad).all():
        bad = int(np.size(grad) - np.isfinite(grad).sum())
        raise NonFiniteGradientError(f"{bad} non-finite gradient entries")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    new = param - lr * weight_decay * param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new.astype(param.dtype, copy=False), m.astype(param.dtype, copy=False), v.astype(param.dtype, copy=False)


def decays(name: str, p: Tensor) -> bool:
    """Biases and layer-norm gains/shifts (all 1-d parameters) are not decayed."""
    return p.ndim > 1


@dataclass
class AdamW:
    named_params: list[tuple[str, Tensor]]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self):
        self.m = {n: np.zeros_like(p.data) for n, p in self.named_params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.named_params}
        self.step_count = 0

    def step(self, lr: float) -> None:
        grads = []
        for name, p in self.named_params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NonFiniteGradientError(f"non-finite gradient in {name}")
            grads.append(g)
        self.step_count += 1
        for (name, p), g in zip(self.named_params, grads):
            wd = self.weight_decay if decays(name, p) else 0.0
            p.data, self.m[name], self.v[name] = adamw_step(
                p.data, g.astype(p.dtype, copy=False), self.m[name], self.v[name], self.step_count, lr,
                self.beta1, self.beta2, self.eps, wd)

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def reset_rows(self, name: str, rows: np.ndarray) -> None:
        self.m[name][rows] = 0.0
        self.v[name][rows] = 0.0

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for n, _ in self.named_params:
            out[f"m.{n}"] = self.m[n]
            out[f"v.{n}"] = self.v[n]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], step_count: int) -> None:
        for n, p in self.named_params:
            self.m[n] = np.asarray(state[f"m.{n}"], dtype=p.dtype).copy()
            self.v[n] = np.asarray(state[f"v.{n}"], dtype=p.dtype).copy()
        self.step_count = step_count
