"""SGD with heavy-ball momentum."""

from __future__ import annotations

from typing import Dict, Iterable, Optional

import numpy as np

from .tensor import ShapeError, Tensor


def sgd_step(params: Iterable[Tensor], grads: Iterable[Optional[np.ndarray]], lr: float,
             momentum: float, velocity: Dict[int, np.ndarray]) -> None:
    """In-place update ``v <- momentum*v + g; p <- p - lr*v``.

    ``velocity`` maps ``id(param)`` to its buffer and is updated in place.
    A ``None`` gradient is treated as zero.
    """
    if lr <= 0:
        raise ValueError("lr must be positive")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must be in [0, 1)")
    for p, g in zip(params, grads):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
        v = velocity.get(id(p))
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + g
        velocity[id(p)] = v.astype(p.dtype, copy=False)
        p.data = (p.data - lr * v).astype(p.dtype, copy=False)


class SGD:
    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9):
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity: Dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        sgd_step(self.params, [p.grad for p in self.params], self.lr, self.momentum, self.velocity)
