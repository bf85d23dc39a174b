import numpy as np

from . import _kernels


class Adam:
    """Adam with bias correction, updating each ``Tensor.data`` in place.

    Parameters whose gradient is ``None`` after backward are skipped, moments
    included.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.data.size) for p in self.params]
        self.v = [np.zeros(p.data.size) for p in self.params]
        for p in self.params:
            # in-place updates go through a flat view; ascontiguousarray would turn 0-d into (1,)
            p.data = np.require(p.data, requirements="C")

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            flat = p.data.reshape(-1)
            _kernels.adam_update(flat, p.grad.reshape(-1), m, v, self.lr, self.beta1, self.beta2, c1, c2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
