"""Adam on flat parameter vectors."""

import numpy as np


class Adam:
    def __init__(self, size, betas=(0.9, 0.999), eps=1e-8, dtype=np.float64):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)
        self.t = 0

    def step(self, theta, grad, lr):
        """Update ``theta`` in place."""
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grad
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        theta -= (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(theta.dtype)

    def state(self):
        return {"m": self.m, "v": self.v, "t": np.array(self.t, dtype=np.int64)}

    def load_state(self, state):
        self.m = np.array(state["m"], dtype=self.m.dtype)
        self.v = np.array(state["v"], dtype=self.v.dtype)
        self.t = int(np.asarray(state["t"]).reshape(-1)[0])


def clip_grad_norm(grad, max_norm):
    n = float(np.linalg.norm(grad))
    if n > max_norm:
        grad = grad * (max_norm / n)
    return grad, n
