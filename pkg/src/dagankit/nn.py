"""Parameter containers, small convolutional building blocks and Adam."""
from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Holds named parameters and child modules.

    Parameters are immutable tensors; optimizers swap in new ones through
    :meth:`assign`.
    """

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, key, value):
        if isinstance(value, Module):
            self._children[key] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[key] = value
        object.__setattr__(self, key, value)

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        p = T.parameter(value, name=name)
        setattr(self, name, p)
        return p

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def assign(self, name: str, value: np.ndarray) -> None:
        owner: Module = self
        *path, leaf = name.split(".")
        for part in path:
            owner = owner._children[part]
        if leaf not in owner._params:
            raise KeyError(name)
        old = owner._params[leaf]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != old.shape:
            raise ValueError(f"{name}: shape {value.shape} does not match {old.shape}")
        setattr(owner, leaf, T.parameter(value, name=leaf))

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        unknown = set(state) - set(own)
        if unknown:
            raise KeyError(f"unknown parameter names: {sorted(unknown)}")
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameter names: {sorted(missing)}")
        for name, value in state.items():
            self.assign(name, value)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 padding: int | None = None, gain: float = np.sqrt(2.0), bias: float = 0.0):
        super().__init__()
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        std = gain / np.sqrt(cin * k * k)
        self.add_param("weight", rng.normal(0.0, std, size=(cout, cin, k, k)))
        self.add_param("bias", np.full(cout, float(bias)))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class DownBlock(Module):
    """3x3 conv, ReLU, then average pooling by 2."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv(cin, cout, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return T.avg_pool(T.relu(self.conv(x)), 2)


class UpBlock(Module):
    """Bilinear x2 upsampling, 3x3 conv, ReLU."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv(cin, cout, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.conv(T.upsample_bilinear(x, 2)))


class ResBlock(Module):
    def __init__(self, ch: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv(ch, ch, 3, rng)
        self.conv2 = Conv(ch, ch, 3, rng, gain=0.5)

    def forward(self, x: Tensor) -> Tensor:
        return T.add(x, self.conv2(T.relu(self.conv1(x))))


def expand_channels(mask: Tensor, channels: int) -> Tensor:
    """(N, 1, H, W) -> (N, C, H, W)."""
    n, _, h, w = mask.shape
    return T.broadcast_to(mask, (n, channels, h, w))


def identity_grid(h: int, w: int) -> np.ndarray:
    """(H, W, 2) normalized pixel-center coordinates, x first."""
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx, gy], axis=-1)


class Adam:
    """Adam over a fixed set of named parameters of one module."""

    def __init__(self, module: Module, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.module = module
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for name, p in list(self.module.named_parameters()):
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            self.module.assign(name, p.data - update)


def named_grads(loss: Tensor, *modules: Module) -> list[dict[str, np.ndarray]] | dict[str, np.ndarray]:
    """Per-module {name: gradient} maps from a single backward pass."""
    named = [list(m.named_parameters()) for m in modules]
    g = T.backward(loss, [p for group in named for _, p in group])
    out = [{name: g[p.node_id] for name, p in group} for group in named]
    return out[0] if len(out) == 1 else out
