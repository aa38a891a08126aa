"""Small dense networks in float64 numpy: forward, backprop, Adam, gradient checks.

Batches are row-major (``N x dim``). A network is a list of ``(W, b)`` layers
with tanh between them and either a softmax or a linear head.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"TJNN"


class StaleCacheError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class ForwardCache:
    activations: list          # input to each layer, in order
    logits: np.ndarray
    output: np.ndarray
    version: int


class Mlp:
    """input -> hidden... -> output, tanh hidden activations."""

    def __init__(self, sizes: Sequence[int], head: str = "linear", rng: Optional[np.random.Generator] = None,
                 init: str = "uniform", zero: bool = False):
        if head not in ("linear", "softmax"):
            raise ValueError(f"unknown head {head!r}")
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = list(sizes)
        self.head = head
        self.version = 0
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            if zero:
                W = np.zeros((fan_in, fan_out))
            elif init == "orthogonal":
                q, r = np.linalg.qr(rng.normal(size=(max(fan_in, fan_out), min(fan_in, fan_out))))
                q = q * np.sign(np.diag(r))
                W = q if fan_in >= fan_out else q.T
                W = np.ascontiguousarray(W[:fan_in, :fan_out])
            else:
                lim = math.sqrt(6.0 / (fan_in + fan_out))
                W = rng.uniform(-lim, lim, size=(fan_in, fan_out))
            self.params += [W, np.zeros(fan_out)]

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def touch(self):
        """Mark parameters as changed; caches from earlier forwards become stale."""
        self.version += 1

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.sizes[0]:
            raise ValueError(f"input dim {h.shape[1]} != {self.sizes[0]}")
        acts = []
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            acts.append(h)
            z = h @ W + b
            h = np.tanh(z) if i < self.n_layers - 1 else z
        out = softmax(h) if self.head == "softmax" else h
        cache = ForwardCache(acts, h, out, self.version)
        return (out[0] if single else out), cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward_logits(self, cache: ForwardCache, grad_logits: np.ndarray) -> list[np.ndarray]:
        """Gradients of a scalar loss w.r.t. every parameter, given dL/dlogits."""
        if cache.version != self.version:
            raise StaleCacheError("parameters changed since this forward pass")
        g = np.asarray(grad_logits, dtype=np.float64).reshape(cache.logits.shape)
        grads: list[np.ndarray] = [None] * len(self.params)
        for i in reversed(range(self.n_layers)):
            W = self.params[2 * i]
            a = cache.activations[i]
            grads[2 * i] = a.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                # a is tanh output of the previous layer
                g = (g @ W.T) * (1.0 - a * a)
        return grads

    def backward(self, cache: ForwardCache, grad_output: np.ndarray) -> list[np.ndarray]:
        """Gradients given dL/d(output); for a softmax head output means probabilities."""
        g = np.asarray(grad_output, dtype=np.float64).reshape(cache.output.shape)
        if self.head == "softmax":
            p = cache.output
            g = p * (g - np.sum(g * p, axis=-1, keepdims=True))
        return self.backward_logits(cache, g)

    # flat views for checkpoints and gradient checks
    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise ValueError(f"expected {self.n_params} values, got {flat.size}")
        k = 0
        for p in self.params:
            p[...] = flat[k : k + p.size].reshape(p.shape)
            k += p.size
        self.touch()

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "Mlp":
        new = Mlp.__new__(Mlp)
        new.sizes, new.head, new.version = list(self.sizes), self.head, 0
        new.params = [p.copy() for p in self.params]
        return new


def mlp_forward(net: Mlp, x):
    return net.forward(x)


def mlp_backward(net: Mlp, cache: ForwardCache, grad_output):
    return net.backward(cache, grad_output)


@dataclass
class Adam:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]):
        """In-place bias-corrected Adam update of ``params``."""
        if len(params) != len(grads):
            raise ValueError("params/grads length mismatch")
        for i, g in enumerate(grads):
            if g.shape != params[i].shape:
                raise ValueError(f"gradient {i} shape {g.shape} != parameter shape {params[i].shape}")
            if not np.all(np.isfinite(g)):
                bad = int(np.sum(~np.isfinite(g)))
                raise NonFiniteGradientError(f"{bad} non-finite entries in gradient {i} at step {self.step_count}")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(state: Adam, net: Mlp, grads):
    state.step(net.params, grads)
    net.touch()
    return net, state


def relative_error(a, b, floor: float = 1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _forward_from(net: Mlp, layer: int, z: np.ndarray) -> np.ndarray:
    """Finish a forward pass given the pre-activation of ``layer`` (any leading batch dims)."""
    h = z
    for i in range(layer, net.n_layers):
        if i > layer:
            h = h @ net.params[2 * i] + net.params[2 * i + 1]
        if i < net.n_layers - 1:
            h = np.tanh(h)
    return softmax(h) if net.head == "softmax" else h


def finite_diff_check(net: Mlp, x: np.ndarray, loss: Callable[[np.ndarray], tuple[float, np.ndarray]],
                      h: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference parameter gradients.

    ``loss(output) -> (value, dvalue/doutput)``. Nudging one weight of a layer only
    shifts one column of that layer's pre-activation, so all nudges of a layer are
    pushed through the rest of the network as a single batch.
    """
    out, cache = net.forward(x)
    _, g_out = loss(out)
    analytic = np.concatenate([g.ravel() for g in net.backward(cache, g_out)])
    single = np.asarray(x).ndim == 1
    numeric = []
    for i in range(net.n_layers):
        W, b = net.params[2 * i], net.params[2 * i + 1]
        a = cache.activations[i]                        # N x in
        z = a @ W + b                                   # N x out
        n_in, n_out = W.shape
        # weight (j, k) moves column k by h * a[:, j]; bias k moves it by h
        shifts = [(j, k, a[:, j]) for j in range(n_in) for k in range(n_out)]
        shifts += [(None, k, np.ones(a.shape[0])) for k in range(n_out)]
        Z = np.repeat(z[None], 2 * len(shifts), axis=0)
        for p, (_, k, col) in enumerate(shifts):
            Z[2 * p, :, k] += h * col
            Z[2 * p + 1, :, k] -= h * col
        outs = _forward_from(net, i, Z)
        vals = np.array([loss(o[0] if single else o)[0] for o in outs])
        numeric.append((vals[0::2] - vals[1::2]) / (2 * h))
    if not numeric:
        return 0.0
    return float(np.max(relative_error(analytic, np.concatenate(numeric))))


# --- checkpoints --------------------------------------------------------------------------

def save_checkpoint(path, nets: dict[str, Mlp], header: Optional[dict] = None):
    """Write ``magic | u32 header length | JSON header | float64 LE parameters``."""
    head = dict(header or {})
    head["networks"] = [{"name": k, "sizes": n.sizes, "head": n.head, "n_params": n.n_params}
                        for k, n in nets.items()]
    blob = json.dumps(head, sort_keys=True).encode()
    flat = np.concatenate([n.get_flat() for n in nets.values()]).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(flat.tobytes())


def load_checkpoint(path) -> tuple[dict[str, Mlp], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + n])
    flat = np.frombuffer(data[8 + n :], dtype="<f8")
    nets, k = {}, 0
    for spec in header["networks"]:
        net = Mlp(spec["sizes"], spec["head"], zero=True)
        net.set_flat(flat[k : k + spec["n_params"]])
        k += spec["n_params"]
        nets[spec["name"]] = net
    if k != flat.size:
        raise ValueError(f"{path}: payload has {flat.size} values, header describes {k}")
    return nets, header
