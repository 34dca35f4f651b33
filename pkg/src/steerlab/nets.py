"""Minimal reverse-mode-differentiable MLPs and an adaptive-moment optimizer.

Parameters live in one flat float64 vector with a per-layer layout table so
checkpoints and optimizers stay trivial. Forward/backward accept single
vectors or (B, d) batches.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity", "softmax")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "identity":
        return z
    if name == "softmax":
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    raise ValueError(f"unknown activation {name!r}")


def _act_backward(name: str, out: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    if name == "relu":
        return grad_out * (out > 0.0)
    if name == "tanh":
        return grad_out * (1.0 - out * out)
    if name == "identity":
        return grad_out
    if name == "softmax":
        dot = (grad_out * out).sum(axis=-1, keepdims=True)
        return out * (grad_out - dot)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Mlp:
    """Fully-connected net over a flat parameter vector."""

    layer_dims: list[int]
    activations: list[str]
    params: np.ndarray = field(default=None)
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.activations) != len(self.layer_dims) - 1:
            raise ValueError("need one activation per layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if "softmax" in self.activations[:-1]:
            raise ValueError("softmax is only supported on the output layer")
        self.layout = []
        off = 0
        for din, dout in zip(self.layer_dims, self.layer_dims[1:]):
            self.layout.append((off, off + din * dout, din, dout))
            off += (din + 1) * dout
        self.n_params = off
        if self.params is None:
            rng = np.random.default_rng(self.seed)
            self.params = np.zeros(off)
            for (w0, b0, din, dout) in self.layout:
                self.params[w0:b0] = rng.normal(0.0, np.sqrt(2.0 / din), size=din * dout)
        self.params = np.asarray(self.params, dtype=np.float64)
        if len(self.params) != off:
            raise ValueError(f"params length {len(self.params)} != layout size {off}")

    @property
    def in_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def out_dim(self) -> int:
        return self.layer_dims[-1]

    def _weights(self, li: int) -> tuple[np.ndarray, np.ndarray]:
        w0, b0, din, dout = self.layout[li]
        w = self.params[w0:b0].reshape(din, dout)
        b = self.params[b0 : b0 + dout]
        return w, b

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.shape[1] != self.in_dim:
            raise ValueError(f"input dim {h.shape[1]} != {self.in_dim}")
        cache = [h]
        for li, act in enumerate(self.activations):
            w, b = self._weights(li)
            h = _act(act, h @ w + b)
            cache.append(h)
        out = cache[-1]
        return (out[0] if squeeze else out), cache

    def backward(self, x: np.ndarray, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Exact reverse-mode gradients: (d loss / d params, d loss / d input).

        `upstream` is d loss / d output; batched inputs sum the parameter
        gradient over the batch and return per-sample input gradients.
        """
        _, cache = self.forward_cached(x)
        return self.backward_from_cache(cache, upstream, squeeze=np.asarray(x).ndim == 1)

    def backward_from_cache(self, cache, upstream, squeeze=False, logit_extra=None):
        """Reverse pass from d loss / d output; `logit_extra` adds a gradient
        directly on the last pre-activation (the stable route for
        softmax-cross-entropy terms, where dL/dz = probs - onehot)."""
        g = np.asarray(upstream, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape[1] != self.out_dim:
            raise ValueError(f"upstream dim {g.shape[1]} != {self.out_dim}")
        pgrad = np.zeros_like(self.params)
        for li in reversed(range(len(self.activations))):
            act = self.activations[li]
            out = cache[li + 1]
            g = _act_backward(act, out, g)
            if li == len(self.activations) - 1 and logit_extra is not None:
                g = g + np.atleast_2d(np.asarray(logit_extra, dtype=np.float64))
            w0, b0, din, dout = self.layout[li]
            w = self.params[w0:b0].reshape(din, dout)
            h_in = cache[li]
            pgrad[w0:b0] += (h_in.T @ g).ravel()
            pgrad[b0 : b0 + dout] += g.sum(axis=0)
            g = g @ w.T
        return pgrad, (g[0] if squeeze else g)

    # --- checkpoints ----------------------------------------------------

    def to_checkpoint(self) -> dict:
        return {
            "layerDims": self.layer_dims,
            "activations": self.activations,
            "seed": self.seed,
            "meta": self.meta,
            "params_b64": base64.b64encode(self.params.astype("<f8").tobytes()).decode(),
        }

    @staticmethod
    def from_checkpoint(d: dict) -> "Mlp":
        params = np.frombuffer(base64.b64decode(d["params_b64"]), dtype="<f8").copy()
        return Mlp(
            layer_dims=list(d["layerDims"]),
            activations=list(d["activations"]),
            params=params,
            seed=int(d.get("seed", 0)),
            meta=dict(d.get("meta", {})),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_checkpoint(), f)

    @staticmethod
    def load(path) -> "Mlp":
        with open(path) as f:
            return Mlp.from_checkpoint(json.load(f))


@dataclass
class Adam:
    """Adaptive-moment estimation with bias correction."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: np.ndarray = None
    v: np.ndarray = None

    def step(self, net: Mlp, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != net.params.shape:
            raise ValueError("gradient shape mismatch")
        bad = np.flatnonzero(~np.isfinite(grad))
        if len(bad):
            raise FloatingPointError(f"non-finite gradient at index {int(bad[0])}")
        if self.m is None:
            self.m = np.zeros_like(net.params)
            self.v = np.zeros_like(net.params)
        self.step_count += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.step_count)
        vhat = self.v / (1 - self.beta2**self.step_count)
        net.params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def finite_difference_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function; the gradient oracle."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g
