"""First-order optimizers over named parameter dictionaries."""
from typing import Dict, Optional

import numpy as np

from .config import OptimConfig
from .errors import NumericError
from .model import ModelParams


def learning_rate(cfg: OptimConfig, step: int, total_steps: int) -> float:
    total = max(1, total_steps)
    if cfg.schedule == 'multistep':
        passed = sum(1 for m in cfg.milestones if step >= m * total)
        return cfg.lr * cfg.gamma ** passed
    if cfg.schedule == 'poly':
        return cfg.lr * max(0.0, 1.0 - step / total) ** cfg.power
    return cfg.lr


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


class Optimizer:
    """Momentum SGD (coupled weight decay) or AdamW (decoupled), with optional global-norm clipping."""

    def __init__(self, cfg: OptimConfig, total_steps: int):
        self.cfg = cfg
        self.total_steps = total_steps
        self.step_count = 0
        self._m: Dict[str, np.ndarray] = {}
        self._v: Dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: Dict[str, np.ndarray]) -> float:
        """Update ``params`` in place; returns the pre-clipping gradient norm."""
        cfg = self.cfg
        norm = global_norm(grads)
        if not np.isfinite(norm):
            raise NumericError(f'non-finite gradient norm at step {self.step_count}')
        scale = 1.0
        if cfg.grad_clip is not None and norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
        lr = learning_rate(cfg, self.step_count, self.total_steps)
        self.step_count += 1

        for name, value in params.tensors.items():
            g = grads.get(name)
            if g is None:
                continue
            g = g * scale
            if cfg.name == 'sgd':
                if cfg.weight_decay:
                    g = g + cfg.weight_decay * value
                buf = self._m.get(name)
                buf = g.copy() if buf is None else cfg.momentum * buf + g
                self._m[name] = buf
                value -= lr * buf
            else:
                beta1, beta2 = cfg.betas
                m = beta1 * self._m.get(name, np.zeros_like(value)) + (1.0 - beta1) * g
                v = beta2 * self._v.get(name, np.zeros_like(value)) + (1.0 - beta2) * g * g
                self._m[name], self._v[name] = m, v
                m_hat = m / (1.0 - beta1 ** self.step_count)
                v_hat = v / (1.0 - beta2 ** self.step_count)
                if cfg.weight_decay:
                    value -= lr * cfg.weight_decay * value
                value -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        return norm

    def state(self) -> Dict[str, Optional[int]]:
        return {'name': self.cfg.name, 'step': self.step_count}
