"""Parameterized building blocks on top of the autodiff core.

Modules register parameters through ordinary attribute assignment;
`named_parameters` walks attributes in insertion order, so parameter
order (and therefore checkpoint layout and optimizer state order) is
deterministic for a fixed architecture.

Weight conventions: linear weights are stored [in, out] and applied as
x @ W + b; initialization is Xavier-uniform from a caller-supplied
numpy Generator, biases start at zero.
"""

import numpy as np

from . import tensor as T
from .tensor import Tensor


def xavier_uniform(rng, fan_in, fan_out, shape=None):
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Module:
    """Base class; submodules and parameters are discovered by attribute walk."""

    def named_parameters(self, prefix=""):
        for name, attr in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(attr, Tensor):
                if attr.requires_grad:
                    yield full, attr
            elif isinstance(attr, Module):
                yield from attr.named_parameters(f"{full}.")
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state(self, arrays):
        params = dict(self.named_parameters())
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)[:5]} extra={sorted(extra)[:5]}")
        for name, p in params.items():
            arr = arrays[name]
            if tuple(arr.shape) != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, rng, in_features, out_features, bias=True):
        self.weight = Tensor(xavier_uniform(rng, in_features, out_features), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def forward(self, x):
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Mlp(Module):
    """Two linear layers with an activation in between."""

    def __init__(self, rng, dim, hidden, out=None, activation=T.gelu):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, out or dim)
        self.activation = activation

    def forward(self, x):
        return self.fc2(self.activation(self.fc1(x)))


def split_heads(x, num_heads):
    """[B, L, D] -> [B, H, L, D/H]"""
    b, l, d = x.shape
    return T.transpose(T.reshape(x, (b, l, num_heads, d // num_heads)), (0, 2, 1, 3))


def merge_heads(x):
    """[B, H, L, dh] -> [B, L, H*dh]"""
    b, h, l, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, l, h * dh))


def attention_core(q, k, v, mask=None):
    """Scaled dot-product attention over [B, H, L, dh] projections.

    `mask` (if given) is a plain array broadcastable to the score shape
    [B, H, Lq, Lk]; masked pairs carry a large negative value so their
    post-softmax weight underflows to zero.
    """
    dh = q.shape[-1]
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = scores + Tensor(np.broadcast_to(mask, scores.shape))
    weights = T.softmax(scores, axis=-1)
    return T.matmul(weights, v)


class MultiheadAttention(Module):
    """Separate q/k/v/out projections; inputs shaped [B, L, D]."""

    def __init__(self, rng, dim, num_heads):
        if dim % num_heads:
            raise T.ShapeError(f"dim {dim} not divisible by {num_heads} heads")
        self.q_proj = Linear(rng, dim, dim)
        self.k_proj = Linear(rng, dim, dim)
        self.v_proj = Linear(rng, dim, dim)
        self.out_proj = Linear(rng, dim, dim)
        self.num_heads = num_heads

    def forward(self, q, k, v, mask=None):
        qh = split_heads(self.q_proj(q), self.num_heads)
        kh = split_heads(self.k_proj(k), self.num_heads)
        vh = split_heads(self.v_proj(v), self.num_heads)
        return self.out_proj(merge_heads(attention_core(qh, kh, vh, mask)))
