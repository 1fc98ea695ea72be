"""Independent reference computations used by the test-suite.

Nothing here imports the autodiff engine's backward machinery; gradients come
from central differences and losses from plain numpy/math.
"""

from __future__ import annotations

import math

import numpy as np

from forgelab import tensorcore as tc


def central_difference(fn, arrays: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """d fn / d arrays[k] for every k by central differences; ``fn`` reads the arrays in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = fn()
            flat[i] = old - h
            fm = fn()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    # floor sits well above central-difference rounding noise (~1e-11 at h=1e-5)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


class RandomGraph:
    """Random small network built from the engine's ops, evaluated in float64."""

    ACTS = ("tanh", "gelu", "softplus", "none")
    HEADS = ("ce", "kl", "sq", "logsm")

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.n_layers = int(rng.integers(1, 4))
        dims = [int(d) for d in rng.integers(2, 9, size=self.n_layers + 1)]
        self.rows = int(rng.integers(1, 5))
        self.x = rng.standard_normal((self.rows, dims[0]))
        self.params: list[np.ndarray] = []
        self.layers = []
        for i in range(self.n_layers):
            W = rng.standard_normal((dims[i + 1], dims[i])) * 0.7
            b = rng.standard_normal(dims[i + 1]) * 0.3
            act = self.ACTS[int(rng.integers(len(self.ACTS)))]
            norm = bool(rng.integers(2)) and dims[i + 1] > 2
            entry = {"W": len(self.params), "b": len(self.params) + 1, "act": act, "norm": norm}
            self.params += [W, b]
            if norm:
                entry["g"] = len(self.params)
                entry["beta"] = len(self.params) + 1
                self.params += [1.0 + 0.2 * rng.standard_normal(dims[i + 1]), 0.2 * rng.standard_normal(dims[i + 1])]
            self.layers.append(entry)
        self.mixer = bool(rng.integers(2))
        if self.mixer:
            self.params.append(rng.standard_normal((self.rows, self.rows)) * 0.5)
        self.head = self.HEADS[int(rng.integers(len(self.HEADS)))]
        self.V = dims[-1]
        self.targets = rng.integers(0, self.V, size=self.rows)
        self.other = rng.standard_normal((self.rows, self.V))

    def loss(self, leaves: list[tc.Tensor]) -> tc.Tensor:
        h = tc.Tensor(self.x)
        for e in self.layers:
            h = tc.linear(h, leaves[e["W"]], leaves[e["b"]])
            if e["norm"]:
                h = tc.layer_norm(h, leaves[e["g"]], leaves[e["beta"]])
            if e["act"] == "tanh":
                h = tc.tanh(h)
            elif e["act"] == "gelu":
                h = tc.gelu(h)
            elif e["act"] == "softplus":
                h = tc.softplus(h)
        if self.mixer:
            h = tc.matmul(leaves[-1], h)
        if self.head == "ce":
            return tc.cross_entropy_logits(h, self.targets)
        if self.head == "kl":
            return tc.kl_divergence(h, tc.Tensor(self.other))
        if self.head == "logsm":
            return tc.mean(tc.mul(tc.log_softmax(h), tc.Tensor(self.other)))
        att = tc.softmax(h)
        return tc.mean(tc.mul(att, att)) + tc.mean(tc.mul(h, h))

    def value(self) -> float:
        return float(self.loss([tc.Tensor(p) for p in self.params]).data)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    out = []
    for row in np.atleast_2d(x):
        m = max(row)
        e = [math.exp(v - m) for v in row]
        s = sum(e)
        out.append([v / s for v in e])
    return np.array(out)


def ce_scalar(logits_rows, targets) -> float:
    total = 0.0
    for row, t in zip(logits_rows, targets):
        p = softmax_rows(np.asarray(row))[0]
        total += -math.log(p[t])
    return total / len(targets)


def kl_scalar(p_rows, q_rows) -> float:
    total = 0.0
    for pr, qr in zip(p_rows, q_rows):
        p = softmax_rows(np.asarray(pr))[0]
        q = softmax_rows(np.asarray(qr))[0]
        total += sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
    return total / len(p_rows)


def graph_gradient_error(seed: int) -> float:
    """Largest per-tensor relative error between engine gradients and central differences."""
    g = RandomGraph(np.random.default_rng(seed))
    leaves = [tc.Tensor(p.copy(), requires_grad=True) for p in g.params]
    tc.backward(g.loss(leaves))
    numeric = central_difference(g.value, g.params)
    return max(rel_err(leaf.grad, num) for leaf, num in zip(leaves, numeric))
