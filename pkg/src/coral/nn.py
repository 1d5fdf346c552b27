"""Small numpy feed-forward nets with hand-written backprop, Adam and gradient checks.

Everything here runs in float64 so finite-difference checks stay meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    # split by sign so large |x| never overflows exp
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam descent step, updating ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    step = lr / (1.0 - beta1 ** state.t)
    root_bc2 = np.sqrt(1.0 - beta2 ** state.t)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        denom = np.sqrt(v)
        denom /= root_bc2
        denom += eps
        p -= step * (m / denom)


class FeedForwardNet:
    """ReLU hidden layers, linear output. Weights stored as (fan_in, fan_out).

    With ``skip=True`` the input is added to the output (widths must agree), so a net
    with a near-zero last layer starts out close to the identity map.
    """

    def __init__(self, sizes, seed=0, out_scale=None, skip=False):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        if skip and self.sizes[0] != self.sizes[-1]:
            raise ValueError("skip connection needs equal input and output widths")
        self.skip = bool(skip)
        self.flat = np.empty(sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:])))
        self._bind()
        rng = np.random.default_rng(seed)
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            bound = 1.0 / np.sqrt(W.shape[0])
            if out_scale is not None and k == last:
                bound = out_scale
            W[...] = rng.uniform(-bound, bound, size=W.shape)
            b[...] = rng.uniform(-bound, bound, size=b.shape)
        self.adam = AdamState()

    def _bind(self):
        # weights and biases are views into one flat buffer
        self.weights, self.biases = [], []
        pos = 0
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(self.flat[pos : pos + n_in * n_out].reshape(n_in, n_out))
            pos += n_in * n_out
            self.biases.append(self.flat[pos : pos + n_out])
            pos += n_out

    @property
    def params(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    @property
    def n_params(self):
        return self.flat.size

    def copy(self):
        new = object.__new__(FeedForwardNet)
        new.sizes = self.sizes
        new.skip = self.skip
        new.flat = self.flat.copy()
        new._bind()
        new.adam = AdamState([m.copy() for m in self.adam.m], [v.copy() for v in self.adam.v], self.adam.t)
        return new

    def __deepcopy__(self, memo):
        return self.copy()

    def __getstate__(self):
        return {"sizes": self.sizes, "skip": self.skip, "flat": self.flat, "adam": self.adam}

    def __setstate__(self, state):
        self.sizes = state["sizes"]
        self.skip = state["skip"]
        self.flat = state["flat"]
        self.adam = state["adam"]
        self._bind()

    def forward(self, x, return_cache=False):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.sizes[0]:
            raise ValueError(f"expected input width {self.sizes[0]}, got {x.shape[1]}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W + b
            h = z if k == last else relu(z)
            acts.append(h)
        if self.skip:
            h = h + x
        out = h[0] if squeeze else h
        if return_cache:
            return out, acts
        return out

    def backward(self, acts, grad_out):
        """Return (param grads in ``params`` order, grad w.r.t. the input)."""
        g = np.asarray(grad_out, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        g_skip = g if self.skip else 0.0
        grads_W = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        last = len(self.weights) - 1
        for k in range(last, -1, -1):
            if k != last:
                g = g * (acts[k + 1] > 0)
            grads_W[k] = acts[k].T @ g
            grads_b[k] = g.sum(axis=0)
            g = g @ self.weights[k].T
        flat = []
        for gW, gb in zip(grads_W, grads_b):
            flat.extend((gW, gb))
        return flat, g + g_skip

    def flatten(self, grads):
        return np.concatenate([g.reshape(-1) for g in grads])

    def step(self, grads, lr):
        """Adam step from grads in ``params`` order (or already flattened)."""
        g = grads if isinstance(grads, np.ndarray) else self.flatten(grads)
        adam_step([self.flat], [g], self.adam, lr)

    def all_finite(self):
        return bool(np.all(np.isfinite(self.flat)))


def soft_update(target, online, tau):
    """target <- tau * online + (1 - tau) * target, parameter by parameter."""
    if target.sizes != online.sizes:
        raise ValueError(f"shape mismatch {target.sizes} vs {online.sizes}")
    target.flat *= 1.0 - tau
    target.flat += tau * online.flat


def relative_error(g_a, g_n):
    return np.abs(g_a - g_n) / np.maximum(1e-8, np.abs(g_a) + np.abs(g_n))


def grad_check(loss_fn, params, analytic, h=1e-4):
    """Max relative error between analytic grads and central differences.

    ``loss_fn()`` must read ``params`` (mutated in place here) and return a scalar.
    """
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            f_plus = loss_fn()
            flat[j] = orig - h
            f_minus = loss_fn()
            flat[j] = orig
            g_num = (f_plus - f_minus) / (2 * h)
            worst = max(worst, float(relative_error(gflat[j], g_num)))
    return worst
