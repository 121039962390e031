"""Adam with bias correction, operating in place on named parameter tensors."""

import numpy as np

from dkdm.errors import ShapeError


class Adam:
    """Adam optimizer state for a fixed set of named parameters.

    ``m`` and ``v`` hold the first and second moment estimates with the same
    shape as the parameters, always in float64: squared float32 gradients
    overflow above ~1.8e19, which the t = 1 variance term can reach.
    ``step`` counts completed updates. With ``clip_norm`` set, gradients whose
    global L2 norm exceeds it are rescaled to that norm before the moments see
    them.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
        if clip_norm is not None and not clip_norm > 0:
            raise ValueError(f"clip_norm must be positive, got {clip_norm}")
        self.lr = lr
        self.clip_norm = clip_norm
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {k: np.zeros(p.data.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.data.shape) for k, p in params.items()}

    def update(self, params, grads):
        """Apply one Adam step to ``params`` (dict of Tensors) given ``grads`` (dict of arrays)."""
        if set(params) != set(self.m):
            raise ShapeError(f"parameter names {sorted(params)} differ from optimizer state {sorted(self.m)}")
        self.step += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        scale = 1.0
        if self.clip_norm is not None:
            norm = global_norm(grads.values())
            if norm > self.clip_norm:
                scale = self.clip_norm / norm
        for name, p in params.items():
            g = grads.get(name)
            m, v = self.m[name], self.v[name]
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape or m.shape != p.data.shape:
                raise ShapeError(f"{name}: grad {g.shape}, param {p.data.shape}, moment {m.shape}")
            g = g.astype(np.float64) * scale
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            step = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= step.astype(p.data.dtype)

    def state_arrays(self):
        out = {}
        for k in self.m:
            out[f"{k}.m"] = self.m[k]
            out[f"{k}.v"] = self.v[k]
        return out

    def load_state_arrays(self, arrays, step):
        for k in self.m:
            self.m[k] = np.array(arrays[f"{k}.m"], dtype=np.float64, copy=True)
            self.v[k] = np.array(arrays[f"{k}.v"], dtype=np.float64, copy=True)
        self.step = int(step)


def global_norm(grads):
    """L2 norm over every entry of an iterable of arrays, accumulated in float64."""
    total = 0.0
    for g in grads:
        if g is not None:
            g = np.asarray(g, dtype=np.float64)
            total += float(np.dot(g.ravel(), g.ravel()))
    return float(np.sqrt(total))


def adam_update(params, grads, state):
    """Functional spelling of :meth:`Adam.update`; returns ``(params, state)``."""
    state.update(params, grads)
    return params, state
