"""
Plain SGD and the polynomial learning-rate schedule.

Parameters are updated in place, so references held elsewhere (snapshots,
layer objects) always see the current values.
"""

import logging
from typing import Iterable, Optional

import numpy as np

from .exceptions import SadaValidationError
from .tensor import Tensor

logger = logging.getLogger(__name__)

POLY_POWER = 0.9


class SGD:
    """Stochastic gradient descent with optional momentum and L2 weight decay.

    Attributes:
        params: Tensors updated by :meth:`step`
        lr: Current learning rate (see :meth:`set_lr`)
        momentum: Heavy-ball coefficient, 0 for plain SGD
        weight_decay: L2 coefficient added to every gradient
    """

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float,
        momentum: float = 0.0,
        weight_decay: float = 0.0,
    ) -> None:
        if lr <= 0:
            raise SadaValidationError(f"learning rate must be positive, got {lr}", parameter="lr")
        if not 0.0 <= momentum < 1.0:
            raise SadaValidationError(f"momentum must lie in [0, 1), got {momentum}", parameter="momentum")
        if weight_decay < 0:
            raise SadaValidationError(f"weight_decay must be >= 0, got {weight_decay}", parameter="weight_decay")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self._velocity: list[Optional[np.ndarray]] = [None] * len(self.params)

    def set_lr(self, lr: float) -> None:
        self.lr = float(lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        lr = np.float32(self.lr)
        wd = np.float32(self.weight_decay)
        mu = np.float32(self.momentum)
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + wd * p.data
            if self.momentum:
                v = self._velocity[i]
                v = g.copy() if v is None else mu * v + g
                self._velocity[i] = v
                g = v
            p.data -= lr * g


def poly_lr(base_lr: float, progress: float, power: float = POLY_POWER) -> float:
    """Polynomially decayed rate ``base_lr * (1 - progress) ** power``.

    Example:
        >>> round(poly_lr(0.01, 0.5), 6)  # 0.01 * 0.5 ** 0.9
        0.005359
    """
    progress = min(max(progress, 0.0), 1.0)
    return base_lr * (1.0 - progress) ** power
