"""Small numpy function approximators with hand-written reverse-mode gradients.

Two backends share one interface (``params``, ``forward``, ``backward``):

* :class:`Mlp` - ELU hidden layers, identity output, float64.
* :class:`Table` - a lookup table indexed by integer state ids.

:class:`Adam` updates either in place.
"""

from __future__ import annotations

import json
from typing import Callable, List, Optional, Sequence

import numpy as np

CHECKPOINT_VERSION = 1


class NumericError(FloatingPointError):
    """Non-finite values reached an optimizer step or a loss."""


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


class Mlp:
    """Fully connected network: ELU on hidden layers, identity on the output."""

    kind = "mlp"

    def __init__(self, sizes: Sequence[int], rng: Optional[np.random.Generator] = None):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"invalid layer sizes {sizes}")
        self.sizes = sizes
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: List[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.params.append(rng.uniform(-bound, bound, size=(fan_out,)))
        self._cache = None

    @classmethod
    def from_params(cls, sizes: Sequence[int], params: Sequence[np.ndarray]) -> "Mlp":
        net = cls.__new__(cls)
        net.sizes = [int(s) for s in sizes]
        net.params = [np.array(p, dtype=np.float64) for p in params]
        net._cache = None
        expected = [(a, b) for a, b in zip(net.sizes[:-1], net.sizes[1:])]
        for k, (fan_in, fan_out) in enumerate(expected):
            if net.params[2 * k].shape != (fan_in, fan_out) or net.params[2 * k + 1].shape != (fan_out,):
                raise ValueError(f"parameter shapes do not match layer sizes {net.sizes}")
        return net

    @classmethod
    def identity(cls, n: int) -> "Mlp":
        return cls.from_params([n, n], [np.eye(n), np.zeros(n)])

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    @property
    def n_in(self) -> int:
        return self.sizes[0]

    @property
    def n_out(self) -> int:
        return self.sizes[-1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"input has {x.shape[-1]} features, expected {self.sizes[0]}")
        inputs, pre = [], []
        h = x
        n_layers = len(self.sizes) - 1
        for k in range(n_layers):
            W, b = self.params[2 * k], self.params[2 * k + 1]
            inputs.append(h)
            z = h @ W + b
            if k < n_layers - 1:
                pre.append(z)
                h = elu(z)
            else:
                h = z
        self._cache = (inputs, pre)
        return h[0] if squeeze else h

    def backward(self, grad_out: np.ndarray) -> List[np.ndarray]:
        """Parameter gradients for the most recent ``forward`` call."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        inputs, pre = self._cache
        g = np.asarray(grad_out, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        n_layers = len(self.sizes) - 1
        grads: List[np.ndarray] = [None] * len(self.params)
        for k in reversed(range(n_layers)):
            W = self.params[2 * k]
            grads[2 * k] = inputs[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            if k > 0:
                g = (g @ W.T) * elu_grad(pre[k - 1])
        return grads

    def copy(self) -> "Mlp":
        return Mlp.from_params(self.sizes, self.params)

    def meta(self) -> dict:
        return {"kind": self.kind, "sizes": self.sizes}


class RowGrad(np.ndarray):
    """Dense gradient array that also records which rows can be non-zero."""

    rows = None

    def __array_finalize__(self, obj):
        self.rows = getattr(obj, "rows", None)


class Table:
    """Lookup table ``(n_rows, n_out)``; inputs are integer row ids."""

    kind = "table"

    def __init__(self, n_rows: int, n_out: int, init: float = 0.0):
        self.params = [np.full((int(n_rows), int(n_out)), float(init))]
        self._ids = None

    @classmethod
    def from_params(cls, params: Sequence[np.ndarray]) -> "Table":
        t = cls.__new__(cls)
        t.params = [np.array(params[0], dtype=np.float64)]
        t._ids = None
        return t

    @property
    def n_rows(self) -> int:
        return self.params[0].shape[0]

    @property
    def n_out(self) -> int:
        return self.params[0].shape[1]

    @property
    def n_params(self) -> int:
        return self.params[0].size

    def forward(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        self._ids = ids
        return self.params[0][ids]

    def backward(self, grad_out: np.ndarray) -> List[np.ndarray]:
        if self._ids is None:
            raise RuntimeError("backward called before forward")
        g = np.zeros(self.params[0].shape)  # calloc: untouched pages cost nothing
        np.add.at(g, self._ids, grad_out)
        g = g.view(RowGrad)
        g.rows = np.unique(self._ids)
        return [g]

    def copy(self) -> "Table":
        return Table.from_params(self.params)

    def meta(self) -> dict:
        return {"kind": self.kind, "shape": list(self.params[0].shape)}


def net_from_meta(meta: dict, params: Sequence[np.ndarray]):
    if meta["kind"] == "mlp":
        return Mlp.from_params(meta["sizes"], params)
    if meta["kind"] == "table":
        return Table.from_params(params)
    raise ValueError(f"unknown network kind {meta['kind']!r}")


class Adam:
    """Adaptive-moment optimizer operating in place on a list of arrays.

    With ``lazy=True`` only rows that received a non-zero gradient are
    touched (moments and parameters); untouched rows keep stale moments.
    This is the usual treatment for lookup tables, where a dense update
    would cost time proportional to the whole table.
    """

    def __init__(self, params: Sequence[np.ndarray], lr: float = 3e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8, lazy: bool = False):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.lazy = bool(lazy)
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(params):
            raise ValueError("gradient list does not match parameters")
        for g, p in zip(grads, params):
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            rows = getattr(g, "rows", None)
            if not np.all(np.isfinite(g if rows is None else g[rows])):
                raise NumericError("non-finite gradient")
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if self.lazy and p.ndim == 2:
                rows = getattr(g, "rows", None)
                if rows is None:
                    rows = np.flatnonzero(np.any(g != 0.0, axis=1))
                gr = np.asarray(g[rows])
                m[rows] = self.beta1 * m[rows] + (1.0 - self.beta1) * gr
                v[rows] = self.beta2 * v[rows] + (1.0 - self.beta2) * gr * gr
                p[rows] -= self.lr * (m[rows] / c1) / (np.sqrt(v[rows] / c2) + self.eps)
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> List[np.ndarray]:
        return list(self.m) + list(self.v)

    def load_state(self, t: int, arrays: Sequence[np.ndarray]) -> None:
        k = len(self.m)
        self.t = int(t)
        self.m = [np.array(a) for a in arrays[:k]]
        self.v = [np.array(a) for a in arrays[k:]]


def polyak_update(target: Sequence[np.ndarray], source: Sequence[np.ndarray], tau: float) -> None:
    for t, s in zip(target, source):
        t *= 1.0 - tau
        t += tau * s


def numeric_gradient(loss_fn: Callable[[], float], params: Sequence[np.ndarray],
                     eps: float = 1e-5) -> List[np.ndarray]:
    """Central finite differences of ``loss_fn`` w.r.t. every parameter entry."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + eps
            up = loss_fn()
            flat[k] = old - eps
            down = loss_fn()
            flat[k] = old
            gflat[k] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    va = np.concatenate([np.ravel(x) for x in a])
    vb = np.concatenate([np.ravel(x) for x in b])
    denom = max(np.linalg.norm(va), np.linalg.norm(vb), 1e-12)
    return float(np.linalg.norm(va - vb) / denom)


def save_nets(path, nets: dict, extra: Optional[dict] = None) -> None:
    """Write named networks to a single ``.npz`` with a JSON header."""
    arrays = {}
    header = {"version": CHECKPOINT_VERSION, "nets": {}, "extra": extra or {}}
    for name, net in nets.items():
        header["nets"][name] = {**net.meta(), "n": len(net.params)}
        for k, p in enumerate(net.params):
            arrays[f"{name}/{k}"] = p
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_nets(path):
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        nets = {}
        for name, meta in header["nets"].items():
            params = [data[f"{name}/{k}"] for k in range(meta["n"])]
            nets[name] = net_from_meta(meta, params)
    return nets, header["extra"]
