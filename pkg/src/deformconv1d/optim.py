"""Adam with per-parameter-group learning-rate multipliers and inverse-sqrt
warmup."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError


def warmup_lr(step: int, peak: float, warmup_steps: int) -> float:
    """Inverse-square-root schedule peaking at ``warmup_steps``.

    lr(s) = peak * sqrt(warmup) * min(s^-1.5 * ... ) rises linearly in
    s/warmup^1.5 and decays as s^-0.5 afterwards; lr(warmup) == peak.
    """
    if step < 1:
        raise ConfigError("schedule steps start at 1")
    s = float(step)
    w = float(warmup_steps)
    return peak * np.sqrt(w) * min(s * w ** -1.5, s ** -0.5)


class Adam:
    """Standard Adam with bias correction.

    ``lr_mult`` maps parameter names to a per-group multiplier on the
    scheduled learning rate (1.0 when absent). ``step`` returns the applied
    update per parameter; with a multiplier of 0.5 every update is exactly
    half the multiplier-1.0 update, since the multiplier scales the final
    product only.
    """

    def __init__(self, params: dict, peak_lr: float = 0.005,
                 warmup_steps: int = 30000, betas=(0.9, 0.98),
                 eps: float = 1e-9, lr_mult: dict | None = None,
                 schedule: str = "inverse_sqrt"):
        if schedule not in ("inverse_sqrt", "constant"):
            raise ConfigError(f"unknown schedule {schedule!r}")
        self.params = params
        self.peak_lr = peak_lr
        self.warmup_steps = warmup_steps
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.lr_mult = dict(lr_mult or {})
        self.schedule = schedule
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def learning_rate(self, step: int) -> float:
        if self.schedule == "constant":
            return self.peak_lr
        return warmup_lr(step, self.peak_lr, self.warmup_steps)

    def step(self, grads: dict) -> dict:
        """Apply one update in place; returns the per-parameter deltas."""
        self.step_count += 1
        t = self.step_count
        lr = self.learning_rate(t)
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        updates = {}
        for name, p in self.params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ConfigError(
                    f"grad for {name} has shape {g.shape}, expected {p.shape}")
            m = self.m[name]
            v = self.v[name]
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            scale = p.dtype.type(lr * self.lr_mult.get(name, 1.0))
            update = scale * (m_hat / (np.sqrt(v_hat) + p.dtype.type(self.eps)))
            p -= update
            updates[name] = update
        return updates
