"""Plain SGD with global gradient-norm clipping."""

import numpy as np


class SGD:
    def __init__(self, params, lr=0.1, clip_norm=5.0):
        self.params = list(params)
        self.lr = lr
        self.clip_norm = clip_norm

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def grad_norm(self):
        return float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in self.params if p.grad is not None)))

    def step(self):
        """Apply one update; returns the gradient norm before clipping."""
        norm = self.grad_norm()
        scale = self.lr
        if self.clip_norm and norm > self.clip_norm:
            scale *= self.clip_norm / norm
        for p in self.params:
            if p.grad is None:
                continue
            new = p.data - scale * p.grad
            new.flags.writeable = False
            p.data = new
        return norm
