"""Dense networks with hand-written reverse-mode differentiation, and Adam."""

from __future__ import annotations

import numba
import numpy as np
from scipy.special import expit


def softplus(a):
    return np.logaddexp(0.0, a)


ACTIVATIONS = {
    # name: (f, f')
    "softplus": (softplus, expit),
    "tanh": (np.tanh, lambda a: 1.0 - np.tanh(a) ** 2),
    "identity": (lambda a: a, np.ones_like),
}


class MLP:
    """Fully connected network ``x -> act(x W1 + b1) -> ... -> x WL + bL``.

    All weights live in one flat float64 vector (``params``); ``weights`` and
    ``biases`` are views into it. Weight matrices are stored ``(fan_in, fan_out)``.
    """

    def __init__(self, sizes, activation="softplus", params=None):
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        self._act, self._dact = ACTIVATIONS[activation]
        n = sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))
        if params is None:
            self.params = np.zeros(n)
        else:
            params = np.asarray(params, dtype=np.float64)
            if params.shape != (n,):
                raise ValueError(f"expected {n} parameters, got {params.shape}")
            self.params = params.copy()
        self._bind()

    def _bind(self):
        self.weights, self.biases = [], []
        pos = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(self.params[pos : pos + a * b].reshape(a, b))
            pos += a * b
            self.biases.append(self.params[pos : pos + b])
            pos += b

    @property
    def n_params(self):
        return self.params.size

    def copy(self):
        return MLP(self.sizes, self.activation, self.params)

    def init_uniform(self, rng: np.random.Generator):
        """Uniform fan-in scaling: ``W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, zero bias."""
        for w in self.weights:
            bound = 1.0 / np.sqrt(w.shape[0])
            w[...] = rng.uniform(-bound, bound, size=w.shape)
        for b in self.biases:
            b[...] = 0.0
        return self

    def forward(self, x, keep=False):
        """Batch forward pass on ``x`` of shape (batch, n_in).

        With ``keep=True`` also returns the cache needed by ``backward``.
        """
        h = np.asarray(x, dtype=np.float64)
        cache = [h]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w + b
            if i < last:
                h = self._act(a)
                cache.append((a, h))
            else:
                h = a
        return (h, cache) if keep else h

    def backward(self, cache, grad_out, want_input=False):
        """Reverse pass. Returns the flat parameter gradient (and d/dx if asked)."""
        grad = np.empty_like(self.params)
        gw, gb = [], []
        pos = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            gw.append(grad[pos : pos + a * b].reshape(a, b))
            pos += a * b
            gb.append(grad[pos : pos + b])
            pos += b
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            h_in = cache[0] if i == 0 else cache[i][1]
            np.matmul(h_in.T, g, out=gw[i])
            gb[i][...] = g.sum(axis=0)
            if i > 0 or want_input:
                g = g @ self.weights[i].T
                if i > 0:
                    g = g * self._dact(cache[i][0])
        return (grad, g) if want_input else grad

    def input_jacobian(self, x, rows=None, cols=None):
        """Jacobian d out[rows] / d x[cols] at a single input, by reverse accumulation.

        All selected output rows are propagated together as a block of
        cotangents, so the cost is one batched reverse pass.
        """
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        _, cache = self.forward(x, keep=True)
        w_last = self.weights[-1]
        g = (w_last if rows is None else w_last[:, rows]).T
        for i in range(len(self.weights) - 1, 0, -1):
            g = g * self._dact(cache[i][0])
            w = self.weights[i - 1]
            g = g @ (w if cols is None or i > 1 else w[cols]).T
        if len(self.weights) == 1 and cols is not None:
            g = g[:, cols]
        return g


@numba.njit(cache=True)
def _adam_update(p, g, m, v, b1, b2, lr, eps, decay):
    for i in range(p.size):
        gi = g[i]
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * mi / (np.sqrt(vi) + eps) + decay * p[i]


class Adam:
    """Adam on a flat parameter vector, updated in place (one fused pass).

    ``weight_decay`` is decoupled: each step also shrinks the parameters by
    ``step_size * weight_decay``.
    """

    def __init__(self, n, step_size=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.step_size = step_size
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params, grad):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        # bias correction folded into the step size
        lr = self.step_size * np.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        eps = self.eps * np.sqrt(1 - b2**self.t)
        _adam_update(params, grad, self.m, self.v, b1, b2, lr, eps, self.step_size * self.weight_decay)
