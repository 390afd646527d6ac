"""SGD and Adam, mutating network parameters in place."""
from __future__ import annotations

import numpy as np

from ..geo import ValidationError
from .network import Gradients, Network


class DivergenceError(ValidationError):
    """Training produced a non-finite gradient."""


def _checked(grads: Gradients, net: Network) -> dict[str, np.ndarray]:
    out = {}
    for name, param in net.parameters():
        g = grads.params.get(name)
        if g is None:
            raise ValidationError(f"missing gradient for {name}")
        if g.shape != param.shape:
            raise ValidationError(f"gradient shape mismatch for {name}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}")
        out[name] = g
    return out


class SGD:
    def __init__(self, net: Network, lr: float, momentum: float = 0.0):
        if lr < 0 or not 0.0 <= momentum < 1.0:
            raise ValidationError("SGD: need lr >= 0 and momentum in [0, 1)")
        self.net = net
        self.lr = lr
        self.momentum = momentum
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, grads: Gradients) -> None:
        checked = _checked(grads, self.net)
        for name, param in self.net.parameters():
            g = checked[name]
            if self.momentum:
                v = self._velocity.get(name)
                v = self.momentum * v + g if v is not None else g.copy()
                self._velocity[name] = v
                g = v
            param -= self.lr * g
        self.net.bump_version()


class Adam:
    def __init__(
        self,
        net: Network,
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        if lr < 0 or not 0 <= beta1 < 1 or not 0 <= beta2 < 1 or eps <= 0:
            raise ValidationError("Adam: bad hyperparameters")
        self.net = net
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, grads: Gradients) -> None:
        checked = _checked(grads, self.net)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, param in self.net.parameters():
            g = checked[name]
            m = self._m.get(name, np.zeros_like(param))
            v = self._v.get(name, np.zeros_like(param))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self._m[name], self._v[name] = m, v
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            param -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.net.bump_version()
