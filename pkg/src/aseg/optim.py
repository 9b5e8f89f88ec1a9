"""AdamW with decoupled weight decay and a reduce-on-plateau learning-rate rule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core.tensor import Parameter


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: list[Parameter], state: AdamWState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """One in-place update of every unfrozen parameter that holds a gradient.

    Follows the usual decoupled form: p <- p - lr*wd*p, then the
    bias-corrected Adam step. Moments are kept in float32 like the weights.
    """
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for p in params:
        if p.frozen or p.grad is None:
            continue
        g = p.grad.astype(p.dtype, copy=False)
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[p.name], state.v[p.name] = m.astype(p.dtype), v.astype(p.dtype)
        data = p.data * (1.0 - lr * weight_decay) if weight_decay else p.data
        denom = np.sqrt(v / bc2) + eps
        p.data = (data - lr * (m / bc1) / denom).astype(p.dtype)


class AdamW:
    def __init__(self, params: list[Parameter], lr: float = 5e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamWState()

    def step(self) -> None:
        adamw_step(self.params, self.state, self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class PlateauScheduler:
    """Multiply the lr by ``factor`` once ``patience`` epochs pass without improvement.

    Mode is "max": an epoch improves when metric > best + min_delta.
    """

    lr: float
    factor: float = 0.9
    patience: int = 5
    cooldown: int = 0
    min_delta: float = 1e-6
    mode: str = "max"
    best: float | None = None
    num_bad: int = 0
    cooldown_left: int = 0

    def __post_init__(self):
        if self.mode not in ("max", "min"):
            raise ValueError(f"mode must be 'max' or 'min', got {self.mode!r}")
        if not 0.0 < self.factor < 1.0:
            raise ValueError("factor must lie in (0, 1)")

    def _improved(self, metric: float) -> bool:
        if self.best is None:
            return True
        if self.mode == "max":
            return metric > self.best + self.min_delta
        return metric < self.best - self.min_delta

    def step(self, metric: float) -> float:
        if not np.isfinite(metric):
            raise ValueError(f"plateau metric must be finite, got {metric}")
        if self._improved(metric):
            self.best = float(metric)
            self.num_bad = 0
        else:
            self.num_bad += 1
        if self.cooldown_left > 0:
            self.cooldown_left -= 1
            self.num_bad = 0
        if self.num_bad >= self.patience:
            self.lr *= self.factor
            self.num_bad = 0
            self.cooldown_left = self.cooldown
        return self.lr

    def state_dict(self) -> dict:
        return {"lr": self.lr, "best": self.best, "num_bad": self.num_bad, "cooldown_left": self.cooldown_left}

    def load_state_dict(self, d: dict) -> None:
        self.lr = float(d["lr"])
        self.best = None if d["best"] is None else float(d["best"])
        self.num_bad = int(d["num_bad"])
        self.cooldown_left = int(d["cooldown_left"])
