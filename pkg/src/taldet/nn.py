"""Parameter containers and the attention/convolution blocks built on autograd.

The same masked multi-head attention core serves both the subject aggregation
stack (mask = token validity) and the temporal pyramid (mask = locality band),
so it lives here once.
"""

from __future__ import annotations

import math

import numpy as np

from .autograd import (DimensionError, Parameter, Tensor, conv1d,
                       depthwise_conv1d, layer_norm, linear, softmax)


class Module:
    """Minimal container: any attribute that is a Parameter, Module, or a
    list of those is discovered by named_parameters() in insertion order."""

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Parameter):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Parameter):
                        yield f"{full}.{i}", item
                    elif isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def uniform_init(rng: np.random.Generator, shape, fan_in: int, fan_out: int):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def make_linear(rng, d_in, d_out, name):
    w = Parameter(uniform_init(rng, (d_in, d_out), d_in, d_out), name + ".w")
    b = Parameter(np.zeros(d_out), name + ".b")
    return w, b


class Linear(Module):
    def __init__(self, rng, d_in, d_out, name=""):
        self.w, self.b = make_linear(rng, d_in, d_out, name)

    def __call__(self, x):
        return linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gamma = Parameter(np.ones(dim), "ln.gamma")
        self.beta = Parameter(np.zeros(dim), "ln.beta")
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    """linear -> ReLU -> linear."""

    def __init__(self, rng, dim, hidden, name="ffn"):
        self.fc1 = Linear(rng, dim, hidden, name + ".fc1")
        self.fc2 = Linear(rng, hidden, dim, name + ".fc2")

    def __call__(self, x):
        return self.fc2(self.fc1(x).relu())


class MultiHeadSelfAttention(Module):
    """Masked multi-head self-attention over the second-to-last axis.

    Input z may be [N, D] or batched [B, N, D]. `allowed[i, j]` (broadcastable
    over batch) permits position i to attend to position j; scores at
    disallowed pairs receive exactly zero weight.
    """

    def __init__(self, rng, dim, num_heads, name="mhsa"):
        if dim % num_heads != 0:
            raise DimensionError("embed dim must be divisible by num_heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.wq = Linear(rng, dim, dim, name + ".q")
        self.wk = Linear(rng, dim, dim, name + ".k")
        self.wv = Linear(rng, dim, dim, name + ".v")
        self.wo = Linear(rng, dim, dim, name + ".o")

    def _split(self, x: Tensor, batched: bool) -> Tensor:
        n = x.shape[-2]
        if batched:
            b = x.shape[0]
            return x.reshape(b, n, self.num_heads, self.head_dim).transpose((0, 2, 1, 3))
        return x.reshape(n, self.num_heads, self.head_dim).transpose((1, 0, 2))

    def _merge(self, x: Tensor, batched: bool) -> Tensor:
        if batched:
            b, _, n, _ = x.shape
            return x.transpose((0, 2, 1, 3)).reshape(b, n, self.dim)
        _, n, _ = x.shape
        return x.transpose((1, 0, 2)).reshape(n, self.dim)

    def __call__(self, z: Tensor, allowed: np.ndarray | None = None) -> Tensor:
        batched = z.data.ndim == 3
        q = self._split(self.wq(z), batched)
        k = self._split(self.wk(z), batched)
        v = self._split(self.wv(z), batched)
        scores = (q @ k.transpose((0, 1, 3, 2) if batched else (0, 2, 1))) \
            * (1.0 / math.sqrt(self.head_dim))
        mask = None
        if allowed is not None:
            allowed = np.asarray(allowed, dtype=bool)
            # broadcast over the head axis (and batch axis when present)
            mask = allowed[..., None, :, :] if batched and allowed.ndim == 3 \
                else allowed
        attn = softmax(scores, mask=mask, axis=-1)
        return self.wo(self._merge(attn @ v, batched))


class PreNormBlock(Module):
    """z -> z + MHSA(LN(z)); then h -> h + FFN(LN(h)).

    `row_mask` (0/1 over positions) re-zeroes masked rows after each residual
    add so padded/invalid slots stay exactly zero through the stack.
    """

    def __init__(self, rng, dim, num_heads, ffn_hidden, name="block"):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(rng, dim, num_heads, name + ".attn")
        self.ln2 = LayerNorm(dim)
        self.ffn = FeedForward(rng, dim, ffn_hidden, name + ".ffn")

    def __call__(self, z, allowed=None, row_mask=None):
        h = self.attn(self.ln1(z), allowed) + z
        if row_mask is not None:
            h = h * row_mask
        h = self.ffn(self.ln2(h)) + h
        if row_mask is not None:
            h = h * row_mask
        return h


class ConvLayer(Module):
    """conv1d with its own weights; kernel [k, D_in, D_out]."""

    def __init__(self, rng, k, d_in, d_out, name="conv", bias=True):
        self.w = Parameter(
            uniform_init(rng, (k, d_in, d_out), k * d_in, k * d_out), name + ".w")
        self.b = Parameter(np.zeros(d_out), name + ".b") if bias else None

    def __call__(self, x, stride=1, padding="same"):
        return conv1d(x, self.w, self.b, stride=stride, padding=padding)


class DepthwiseDownsample(Module):
    """Learned strided depth-wise convolution, kernel size == stride."""

    def __init__(self, rng, dim, stride, name="down"):
        self.stride = stride
        init = np.full((stride, dim), 1.0 / stride)
        init += rng.uniform(-0.01, 0.01, size=init.shape)
        self.w = Parameter(init, name + ".w")

    def __call__(self, x):
        if self.stride == 1:
            return x
        return depthwise_conv1d(x, self.w, self.stride)
