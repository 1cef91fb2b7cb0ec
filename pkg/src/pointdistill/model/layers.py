"""Parameter containers and transformer layers on top of ``numerics``."""
from __future__ import annotations

import hashlib
from typing import Iterator

import numpy as np

from .. import numerics as nx
from ..numerics import Tensor


def _param(*shape, fill=0.0) -> Tensor:
    return Tensor(np.full(shape, fill, dtype=np.float32), requires_grad=True)


class Module:
    """Minimal parameter tree.

    Parameters are the ``Tensor`` attributes with ``requires_grad``; children are
    ``Module`` attributes or lists of modules. Names are dotted attribute paths,
    list entries contribute their index (``encoder.blocks.3.attn.q.weight``).
    """

    training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            yield key, val

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, nx.BatchNormStats):
                yield f"{name}.running_mean", val.mean
                yield f"{name}.running_var", val.var
            elif isinstance(val, Module):
                yield from val.named_buffers(name + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def _stats_modules(self, prefix: str = "") -> Iterator[tuple[str, nx.BatchNormStats]]:
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, nx.BatchNormStats):
                yield name, val
            elif isinstance(val, Module):
                yield from val._stats_modules(name + ".")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item._stats_modules(f"{name}.{i}.")

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        stats = dict(self._stats_modules())
        base, _, field = name.rpartition(".")
        target = stats[base]
        if field == "running_mean":
            target.mean = np.array(value, dtype=target.mean.dtype)
        else:
            target.var = np.array(value, dtype=target.var.dtype)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, list):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def to(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, st in self._stats_modules():
            st.mean = st.mean.astype(dtype)
            st.var = st.var.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def name_seed(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, parameter name), independent of build order."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def initialize(module: Module, seed: int, prefix: str = "", std: float = 0.02) -> None:
    """Truncated-normal weights and tokens, zero biases, unit norm gains."""
    for name, p in module.named_parameters(prefix):
        role = name.rsplit(".", 1)[-1]
        if role == "bias":
            p.data[...] = 0.0
        elif role == "gain":
            p.data[...] = 1.0
        else:
            p.data[...] = trunc_normal(name_seed(seed, name), p.shape, std).astype(p.dtype)


# --- layers -------------------------------------------------------------------

class Linear(Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        self.weight = _param(d_in, d_out)
        self.bias = _param(d_out) if bias else None

    def __call__(self, x):
        return nx.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = _param(d, fill=1.0)
        self.bias = _param(d)
        self._eps = eps

    def __call__(self, x):
        return nx.layer_norm(x, self.gain, self.bias, self._eps)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1):
        self.gain = _param(channels, fill=1.0)
        self.bias = _param(channels)
        self.stats = nx.BatchNormStats(channels, momentum)

    def __call__(self, x):
        return nx.batch_norm_1d(x, self.gain, self.bias, self.stats, train=self.training)


def activation(name: str):
    if name == "gelu":
        return nx.gelu
    if name == "relu":
        return nx.relu
    raise ValueError(f"unknown activation {name!r}")


class MLP(Module):
    """Linear -> activation -> Linear."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, act: str = "gelu"):
        self.fc1 = Linear(d_in, d_hidden)
        self.fc2 = Linear(d_hidden, d_out)
        self._act = activation(act)

    def __call__(self, x):
        return self.fc2(self._act(self.fc1(x)))


class Attention(Module):
    """Multi-head scaled dot-product attention; queries and keys/values may differ."""

    def __init__(self, dim: int, heads: int):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.q = Linear(dim, dim)
        self.k = Linear(dim, dim)
        self.v = Linear(dim, dim)
        self.proj = Linear(dim, dim)
        self._heads = heads
        self._scale = (dim // heads) ** -0.5

    def _split(self, x):
        *lead, n, d = x.shape
        h = self._heads
        x = nx.reshape(x, (*lead, n, h, d // h))
        order = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return nx.transpose(x, order)

    def __call__(self, xq, xkv=None):
        xkv = xq if xkv is None else xkv
        q = self._split(self.q(xq))
        k = self._split(self.k(xkv))
        v = self._split(self.v(xkv))
        kd = k.ndim
        kt = nx.transpose(k, tuple(range(kd - 2)) + (kd - 1, kd - 2))
        att = nx.softmax(nx.mul(nx.matmul(q, kt), self._scale), axis=-1)
        out = nx.matmul(att, v)                       # (..., h, n, dh)
        nd = out.ndim
        order = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        out = nx.transpose(out, order)                # (..., n, h, dh)
        *lead, n, h, dh = out.shape
        return self.proj(nx.reshape(out, (*lead, n, h * dh)))


class Block(Module):
    """Pre-norm transformer block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4, act: str = "gelu"):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, dim, act)

    def __call__(self, x):
        x = nx.add(x, self.attn(self.norm1(x)))
        return nx.add(x, self.mlp(self.norm2(x)))


class CrossBlock(Module):
    """Pre-norm cross-attention block: queries attend to a separate token set."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4, act: str = "gelu"):
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, dim, act)

    def __call__(self, c, f):
        c = nx.add(c, self.attn(self.norm_q(c), self.norm_kv(f)))
        return nx.add(c, self.mlp(self.norm2(c)))
