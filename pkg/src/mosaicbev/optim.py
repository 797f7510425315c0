"""Adam with the standard single bias correction.

Update per step t (after t is incremented):
  m = beta1*m + (1-beta1)*g        v = beta2*v + (1-beta2)*g^2
  m_hat = m/(1-beta1^t)            v_hat = v/(1-beta2^t)
  theta -= lr * m_hat / (sqrt(v_hat) + epsilon)
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .numcore import ContractError, Tensor


class Adam:
    """Owns first/second moment buffers for a named parameter dict."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"lr must be positive, got {lr}")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        """One in-place update over all parameters; every grad must be set."""
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"adam step: parameter {name} has no gradient")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)

    def state_dict(self) -> dict:
        return {
            "t": self.t, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
            "epsilon": self.epsilon,
            "m": {k: a.copy() for k, a in self.m.items()},
            "v": {k: a.copy() for k, a in self.v.items()},
        }

    @staticmethod
    def from_state(params: dict[str, Tensor], state: dict) -> "Adam":
        opt = Adam(params, lr=state["lr"], beta1=state["beta1"],
                   beta2=state["beta2"], epsilon=state["epsilon"])
        opt.t = int(state["t"])
        for k in params:
            if state["m"][k].shape != params[k].shape:
                raise ContractError(f"adam state shape mismatch on {k}")
            opt.m[k] = state["m"][k].copy()
            opt.v[k] = state["v"][k].copy()
        return opt
