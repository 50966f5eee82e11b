"""Minimal numerical substrate: MLP forward/backward, Adam, gradient checking.

Everything is float64 and deterministic given the input Rng.  No autodiff:
each operation carries its own exact backward pass, validated against
central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DivergenceError, ShapeError


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    return x * _sigmoid(x)


def silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


_ACTIVATIONS = {
    "silu": (silu, silu_grad),
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "identity": (lambda x: x, lambda x: np.ones_like(x)),
}


@dataclass
class Layer:
    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray    # (out_dim,)
    act: str


class Mlp:
    """Fully-connected net; layers chain and the final activation is identity."""

    def __init__(self, layers: list[Layer]):
        for a, b in zip(layers, layers[1:]):
            if a.weight.shape[0] != b.weight.shape[1]:
                raise ShapeError("consecutive layer dimensions do not chain")
        if layers and layers[-1].act != "identity":
            raise ContractError("final activation must be identity")
        self.layers = layers

    @classmethod
    def create(cls, dims: list[int], rng, hidden_act: str = "silu") -> "Mlp":
        layers = []
        for li, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
            act = hidden_act if li < len(dims) - 2 else "identity"
            layers.append(Layer(
                weight=rng.uniform_init((d_out, d_in), d_in),
                bias=rng.uniform_init(d_out, d_in),
                act=act,
            ))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def forward(self, x: np.ndarray):
        """Batch forward; returns (output, tape).  x is (n, in_dim)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"input dim {x.shape[1]} != expected {self.in_dim}")
        if not np.all(np.isfinite(x)):
            raise ContractError("non-finite input to forward pass")
        tape = [x]
        h = x
        for layer in self.layers:
            pre = h @ layer.weight.T + layer.bias
            h = _ACTIVATIONS[layer.act][0](pre)
            tape.extend([pre, h])
        return h, tape

    def backward(self, tape, grad_out: np.ndarray):
        """Gradients of <grad_out, output> wrt params and input.

        Returns (param_grads, grad_input) with param_grads ordered like params().
        """
        if len(tape) != 2 * len(self.layers) + 1:
            raise ContractError("tape does not match network depth")
        g = np.atleast_2d(np.asarray(grad_out, dtype=np.float64))
        param_grads = [None] * (2 * len(self.layers))
        for li in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[li]
            pre = tape[2 * li + 1]
            inp = tape[2 * li]
            g = g * _ACTIVATIONS[layer.act][1](pre)
            param_grads[2 * li] = g.T @ inp
            param_grads[2 * li + 1] = g.sum(axis=0)
            g = g @ layer.weight
        return param_grads, g


class Adam:
    """Bias-corrected Adam with decoupled weight decay."""

    def __init__(self, params: list[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray],
             decay_masks: list[np.ndarray] | None = None) -> None:
        """Update params in place.  decay_masks limits weight decay to the
        marked entries (used for sparsely-touched embedding rows)."""
        self.step_count += 1
        t = self.step_count
        for i, (p, g) in enumerate(zip(params, grads)):
            if p.shape != g.shape:
                raise ShapeError("parameter/gradient shape mismatch")
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in parameter block {i}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / (1.0 - self.beta1 ** t)
            v_hat = self.v[i] / (1.0 - self.beta2 ** t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                decay = self.lr * self.weight_decay * p
                if decay_masks is not None and decay_masks[i] is not None:
                    decay = decay * decay_masks[i]
                p -= decay


def finite_diff_check(loss_fn, params: list[np.ndarray],
                      analytic_grads: list[np.ndarray],
                      h: float = 1e-5) -> dict:
    """Compare analytic gradients with central differences.

    loss_fn takes no arguments and reads the (mutated) params.  Returns a
    report with the max relative error per block and overall.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ContractError("h outside [1e-7, 1e-3]")
    block_errs = []
    for p, g in zip(params, analytic_grads):
        fd = np.zeros_like(p)
        flat_p, flat_fd = p.ravel(), fd.ravel()
        for j in range(flat_p.size):
            orig = flat_p[j]
            flat_p[j] = orig + h
            lp = loss_fn()
            flat_p[j] = orig - h
            lm = loss_fn()
            flat_p[j] = orig
            flat_fd[j] = (lp - lm) / (2.0 * h)
        scale = np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-6)
        block_errs.append(float(np.max(np.abs(g - fd) / scale)) if p.size else 0.0)
    return {
        "per_block": block_errs,
        "max_rel_err": max(block_errs) if block_errs else 0.0,
    }
