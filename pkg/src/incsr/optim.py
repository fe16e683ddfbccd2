"""Adam optimizer with bias correction.

Update rule:

    m <- b1*m + (1-b1)*g
    v <- b2*v + (1-b2)*g^2
    theta <- theta - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
"""

from __future__ import annotations

import numpy as np


class Adam:
    """Adam over a named parameter dict.

    Moment buffers are created for exactly the registered parameter set;
    ``step()`` raises if any registered parameter is missing its gradient.
    """

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.first_moment = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.second_moment = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        """Explicitly drop accumulated gradients before the next backward."""
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                raise ValueError(f"parameter {name!r} has no gradient")
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(
                p.data.dtype, copy=False)
