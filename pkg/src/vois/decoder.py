"""Query-based transformer decoder over flattened space-time memory.

The stage-4 video feature is linearly embedded to the decoder width and
flattened t-major with a fixed 3D sinusoidal position encoding added.
N = n*T learned object queries decode in parallel through pre-norm
DETR-style layers (query embeddings re-added as positional input at each
attention), and the N outputs regroup into n sequence proposals of T
per-frame features each. Query layout is frame-major: index = t*n + j.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import ConfigError
from .nn import LayerNorm, Linear, Module, MultiheadAttention
from .tensor import Tensor


@dataclass
class DecoderConfig:
    hidden_dim: int = 384
    layers: int = 6
    n: int = 10
    heads: int = 8

    def validate(self):
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by {self.heads} heads")
        if self.hidden_dim % 6:
            raise ConfigError(f"hidden_dim {self.hidden_dim} must be divisible by 6 "
                              "for the 3-axis sinusoidal position encoding")
        return self


def sinusoidal_position_encoding_3d(t, h, w, dim):
    """Fixed [t*h*w, dim] encoding; dim splits evenly over the (t, h, w) axes,
    each axis encoded with interleaved sin/cos at geometric frequencies.
    Rows follow the same t-major raster order as the flattened memory."""
    if dim % 6:
        raise ConfigError(f"position encoding dim {dim} not divisible by 6")
    d_axis = dim // 3

    def encode(positions):
        i = np.arange(d_axis // 2, dtype=np.float64)
        freqs = 1.0 / (10000.0 ** (2.0 * i / d_axis))
        ang = positions[:, None] * freqs[None, :]
        out = np.empty((len(positions), d_axis))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    et = encode(np.arange(t, dtype=np.float64))
    eh = encode(np.arange(h, dtype=np.float64))
    ew = encode(np.arange(w, dtype=np.float64))
    pe = np.concatenate([
        np.broadcast_to(et[:, None, None, :], (t, h, w, d_axis)),
        np.broadcast_to(eh[None, :, None, :], (t, h, w, d_axis)),
        np.broadcast_to(ew[None, None, :, :], (t, h, w, d_axis)),
    ], axis=-1)
    return pe.reshape(t * h * w, dim)


class MemoryEmbed(Module):
    """Linear 8C -> hidden per token, flatten t-major, add position encoding."""

    def __init__(self, rng, in_dim, hidden_dim):
        self.proj = Linear(rng, in_dim, hidden_dim)
        self.hidden_dim = hidden_dim

    def forward(self, f4):
        t, h, w, _ = f4.shape
        mem = T.reshape(self.proj(f4), (t * h * w, self.hidden_dim))
        pos = sinusoidal_position_encoding_3d(t, h, w, self.hidden_dim)
        return mem + Tensor(pos)


class DecoderLayer(Module):
    """Pre-norm: self-attention over queries, cross-attention into memory, FFN.

    Query embeddings ride along as positional input: they are added to the
    normalized features wherever those act as attention queries or keys,
    but never to the values.
    """

    def __init__(self, rng, dim, heads):
        self.norm1 = LayerNorm(dim)
        self.self_attn = MultiheadAttention(rng, dim, heads)
        self.norm2 = LayerNorm(dim)
        self.cross_attn = MultiheadAttention(rng, dim, heads)
        self.norm3 = LayerNorm(dim)
        self.ffn1 = Linear(rng, dim, 4 * dim)
        self.ffn2 = Linear(rng, 4 * dim, dim)

    def forward(self, tgt, memory, query_pos):
        z = self.norm1(tgt)
        qk = z + query_pos
        tgt = tgt + self.self_attn(qk, qk, z)
        z = self.norm2(tgt)
        tgt = tgt + self.cross_attn(z + query_pos, memory, memory)
        z = self.norm3(tgt)
        return tgt + self.ffn2(T.relu(self.ffn1(z)))


class QueryDecoder(Module):
    """Decode N = n*T object features from memory; no final normalization,
    so a zero-weight single layer passes the query embeddings through."""

    def __init__(self, cfg, t, rng):
        cfg.validate()
        self.cfg = cfg
        self.t = t
        n_queries = cfg.n * t
        self.queries = Tensor(rng.normal(0.0, 0.02, size=(n_queries, cfg.hidden_dim)),
                              requires_grad=True)
        self.layers = [DecoderLayer(rng, cfg.hidden_dim, cfg.heads)
                       for _ in range(cfg.layers)]

    def forward(self, memory):
        """memory [M, hidden] -> decoded [N, hidden]."""
        mem = T.reshape(memory, (1,) + memory.shape)
        query_pos = T.reshape(self.queries, (1,) + self.queries.shape)
        tgt = query_pos
        for layer in self.layers:
            tgt = layer(tgt, mem, query_pos)
        return T.reshape(tgt, self.queries.shape)


def group_proposals(decoded, n, t):
    """[N, hidden] -> [n, T, hidden]; proposal j collects query indices
    {j + n*t' : t' = 0..T-1} under the frame-major layout."""
    total, hidden = decoded.shape
    if total != n * t:
        raise ConfigError(f"decoded length {total} != n*T = {n * t}")
    return T.transpose(T.reshape(decoded, (t, n, hidden)), (1, 0, 2))


def flatten_proposals(proposals):
    """Inverse of group_proposals."""
    n, t, hidden = proposals.shape
    return T.reshape(T.transpose(proposals, (1, 0, 2)), (n * t, hidden))
