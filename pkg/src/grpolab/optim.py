"""AdamW over autodiff leaf tensors."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class AdamW:
    """Decoupled weight decay Adam. With weight_decay=0 a zero gradient leaves
    parameters bit-identical, which the no-op-at-degeneracy contract relies on."""

    def __init__(
        self,
        params: list[Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m = {p.uid: np.zeros_like(p.data) for p in self.params}
        self._v = {p.uid: np.zeros_like(p.data) for p in self.params}

    def step(self, grads: dict[int, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = grads.get(p.uid)
            if g is None:
                continue
            m = self._m[p.uid]
            v = self._v[p.uid]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= self.lr * update
