"""Adam with decoupled weight decay, plus gradient-norm utilities.

Weight decay is applied directly to the parameters (scaled by the current
learning rate) rather than folded into the gradient, so the adaptive
moments only ever see the data gradient.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamConfig:
    learning_rate: float = 5e-5
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_decay_per_epoch: float = 0.99


class Adam:
    def __init__(self, store, config=None):
        self.store = store
        self.config = config or AdamConfig()
        self.learning_rate = self.config.learning_rate
        self.step_count = 0
        self._m = {name: np.zeros_like(p.values) for name, p in store.items()}
        self._v = {name: np.zeros_like(p.values) for name, p in store.items()}

    def step(self):
        """Apply one update from the gradients currently in the store.

        Parameters with no gradient are skipped entirely, including their
        weight decay.
        """
        cfg = self.config
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        lr = self.learning_rate
        for name, p in self.store.items():
            g = p.grad
            if g is None:
                continue
            m = cfg.beta1 * self._m[name] + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * self._v[name] + (1.0 - cfg.beta2) * (g * g)
            self._m[name] = m
            self._v[name] = v
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            new_values = p.values - lr * update
            if cfg.weight_decay:
                new_values = new_values - lr * cfg.weight_decay * p.values
            p.values = new_values

    def end_epoch(self):
        self.learning_rate *= self.config.lr_decay_per_epoch

    def state_dict(self):
        return {
            "learning_rate": self.learning_rate,
            "step_count": self.step_count,
            "m": {k: v.tolist() for k, v in self._m.items()},
            "v": {k: v.tolist() for k, v in self._v.items()},
        }

    def load_state_dict(self, state):
        self.learning_rate = float(state["learning_rate"])
        self.step_count = int(state["step_count"])
        self._m = {k: np.asarray(v, dtype=np.float64) for k, v in state["m"].items()}
        self._v = {k: np.asarray(v, dtype=np.float64) for k, v in state["v"].items()}


def global_grad_norm(store):
    """L2 norm over all gradients in the store (missing grads count as 0)."""
    total = 0.0
    for _, p in store.items():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))


def clip_gradients(store, max_norm):
    """Scale all gradients so their global norm is at most max_norm.

    Returns the pre-clip norm. Gradients are rebound, never mutated, so
    aliased gradient arrays stay consistent.
    """
    norm = global_grad_norm(store)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for _, p in store.items():
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm
