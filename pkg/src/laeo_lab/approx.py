"""Small float64 MLPs with hand-written reverse mode, Adam, and gradient checking."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a loss or activation stops being finite."""


class Mlp:
    """ReLU multilayer perceptron with an identity output layer.

    ``params`` is a flat list ``[W0, b0, W1, b1, ...]`` with ``W_i`` of
    shape ``(fan_in, fan_out)``.
    """

    def __init__(self, sizes: Sequence[int], params: list[np.ndarray] | None = None):
        if len(sizes) < 2 or any(int(n) < 1 for n in sizes):
            raise ValueError(f"invalid layer sizes {sizes!r}")
        self.sizes = [int(n) for n in sizes]
        if params is None:
            params = []
            for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
                params += [np.zeros((fan_in, fan_out)), np.zeros(fan_out)]
        self.params = [np.asarray(p, dtype=np.float64) for p in params]
        self._check_shapes()

    def _check_shapes(self):
        expected = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            expected += [(fan_in, fan_out), (fan_out,)]
        if [p.shape for p in self.params] != expected:
            raise ValueError(f"parameter shapes {[p.shape for p in self.params]} do not match sizes {self.sizes}")

    @classmethod
    def initialized(cls, sizes: Sequence[int], rng: np.random.Generator) -> "Mlp":
        net = cls(sizes)
        init_params(net, rng)
        return net

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, [p.copy() for p in self.params])

    def forward(self, x: np.ndarray, return_cache: bool = False):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input of shape (batch, {self.in_dim}), got {x.shape}")
        cache = [x]
        h = x
        n_layers = len(self.params) // 2
        for i in range(n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            h = h @ W + b
            if i < n_layers - 1:
                h = np.maximum(h, 0.0)
                cache.append(h)
        if return_cache:
            return h, cache
        return h

    __call__ = forward

    def backward(self, cache: list[np.ndarray], grad_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Return ``(param_grads, grad_input)`` for upstream gradient ``grad_out``."""
        n_layers = len(self.params) // 2
        grads: list[np.ndarray] = [None] * len(self.params)  # type: ignore[list-item]
        g = grad_out
        for i in reversed(range(n_layers)):
            h_in = cache[i]
            W = self.params[2 * i]
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ W.T
            if i > 0:
                g = g * (h_in > 0.0)
        return grads, g


def init_params(net: Mlp, rng: np.random.Generator) -> list[np.ndarray]:
    """He-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases; in place."""
    for i in range(0, len(net.params), 2):
        fan_in, fan_out = net.params[i].shape
        bound = np.sqrt(6.0 / fan_in)
        net.params[i] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        net.params[i + 1] = np.zeros(fan_out)
    return net.params


def grad(loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]], mlp: Mlp, batch: np.ndarray):
    """Gradient of ``loss_fn(mlp(batch))`` w.r.t. the parameters.

    ``loss_fn`` maps the network output to ``(loss, dloss/doutput)``.
    """
    out, cache = mlp.forward(batch, return_cache=True)
    loss, g_out = loss_fn(out)
    if not np.isfinite(loss):
        raise NonFiniteError(f"non-finite loss {loss!r}")
    grads, _ = mlp.backward(cache, g_out)
    return float(loss), grads


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        """Apply one bias-corrected Adam update in place and return ``params``."""
        if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
            raise ValueError("gradient shapes do not match parameters")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return params


def adam_step(state: Adam, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
    return state.step(params, grads)


# --- flat views & gradient checking -------------------------------------------


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)


def unflatten_into(arrays: Sequence[np.ndarray], flat: np.ndarray) -> None:
    i = 0
    for a in arrays:
        a[...] = flat[i : i + a.size].reshape(a.shape)
        i += a.size


def finite_difference(loss: Callable[[], float], params: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of ``loss()`` w.r.t. each entry of ``params`` (perturbed in place)."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + h
            up = loss()
            p[idx] = orig - h
            down = loss()
            p[idx] = orig
            g[idx] = (up - down) / (2.0 * h)
        out.append(g)
    return out


def relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray]) -> float:
    a, n = flatten(analytic), flatten(numeric)
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


# --- checkpoints ----------------------------------------------------------------

_MAGIC = b"LAEOCKPT"


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write a shape-manifest header line followed by raw little-endian float64 data."""
    manifest = {
        "tensors": [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()],
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC + b"\n")
        fh.write(json.dumps(manifest).encode() + b"\n")
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    magic, rest = data.split(b"\n", 1)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    header, payload = rest.split(b"\n", 1)
    manifest = json.loads(header)
    tensors = {}
    offset = 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * n
        tensors[entry["name"]] = arr
    if offset != len(payload):
        raise ValueError(f"{path}: payload size does not match manifest")
    return tensors, manifest["meta"]


def mlp_tensors(prefix: str, net: Mlp) -> dict[str, np.ndarray]:
    return {f"{prefix}.{i}": p for i, p in enumerate(net.params)}


def mlp_from_tensors(prefix: str, sizes: Sequence[int], tensors: dict[str, np.ndarray]) -> Mlp:
    n = 2 * (len(sizes) - 1)
    return Mlp(sizes, [tensors[f"{prefix}.{i}"].copy() for i in range(n)])
