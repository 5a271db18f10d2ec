import numpy as np


class Adam:
    """Adam over a dict of named numpy parameters, updated in place.

    Moments and step counts are kept per parameter name so one entry can be
    reset (e.g. when its shape changes) without disturbing the others.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {}
        self.v = {}
        self.t = {}

    def reset(self, *names):
        for name in names:
            self.m.pop(name, None)
            self.v.pop(name, None)
            self.t.pop(name, None)

    def step(self, params, grads, lr=None):
        """``lr`` may be a float or a dict of per-parameter rates."""
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
                self.t[k] = 0
            self.t[k] += 1
            t = self.t[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            rate = self.lr if lr is None else (lr[k] if isinstance(lr, dict) else lr)
            bc1 = 1.0 - self.beta1 ** t
            bc2 = 1.0 - self.beta2 ** t
            p -= (rate / bc1) * m / (np.sqrt(v / bc2) + self.eps)
