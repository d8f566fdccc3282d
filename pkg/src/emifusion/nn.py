"""Layers: linear projection, masked multi-head attention blocks, MLP head.

All layers run batched (leading batch axis) as the only code path; the
single-sequence helpers at the bottom wrap a batch of one. Layer parameters
are plain Tensors with ``requires_grad=True``, reachable through
``named_parameters``.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor import (
    DegenerateMaskError,
    ShapeMismatchError,
    Tensor,
    dropout,
    gelu,
    layer_norm,
    masked_softmax,
    reshape,
    scale,
    tensor_sum,
    transpose,
)


def init_weight(rng, d_in: int, d_out: int) -> Tensor:
    """Uniform(-1/sqrt(d_in), 1/sqrt(d_in)) weight matrix."""
    bound = 1.0 / math.sqrt(d_in)
    return Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)),
                  requires_grad=True)


class Linear:
    """Affine map on the last axis; leading axes are flattened into one GEMM."""

    def __init__(self, d_in: int, d_out: int, rng=None):
        self.d_in = d_in
        self.d_out = d_out
        if rng is None:
            self.weight = Tensor(np.zeros((d_in, d_out)), requires_grad=True)
        else:
            self.weight = init_weight(rng, d_in, d_out)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeMismatchError(
                f"linear expects last dim {self.d_in}, got {x.shape}"
            )
        lead = x.shape[:-1]
        flat = reshape(x, (-1, self.d_in)) if x.ndim != 2 else x
        out = flat @ self.weight + self.bias
        if x.ndim != 2:
            out = reshape(out, lead + (self.d_out,))
        return out

    def named_parameters(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


def sinusoidal_encoding(length: int, d: int) -> np.ndarray:
    """Fixed sine/cosine position table, shape (length, d)."""
    pos = np.arange(length)[:, None]
    idx = np.arange(d // 2)[None, :]
    angle = pos / np.power(10000.0, 2.0 * idx / d)
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : (d - d // 2)])
    return table


def _check_mask(mask: np.ndarray, expect_shape) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(expect_shape):
        raise ShapeMismatchError(
            f"mask shape {mask.shape} does not match sequence {expect_shape}"
        )
    if not mask.any(axis=-1).all():
        raise DegenerateMaskError("a sequence has no valid position")
    return mask


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over valid positions of a (B, T, d) sequence -> (B, d)."""
    mask = _check_mask(mask, x.shape[:2])
    weights = mask.astype(np.float64)
    weights = weights / weights.sum(axis=1, keepdims=True)
    kept = x * Tensor(weights[:, :, None])
    return tensor_sum(kept, axis=1)


class SelfAttentionBlock:
    """Multi-head self-attention with residual and post-norm, no FFN.

    Padded positions are excluded as keys by the mask and their output rows
    are zeroed so downstream pooling cannot see them.
    """

    def __init__(self, d: int, heads: int, rng=None):
        if d % heads != 0:
            raise ValueError(f"model dim {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.d_head = d // heads
        self.wq = Linear(d, d, rng)
        self.wk = Linear(d, d, rng)
        self.wv = Linear(d, d, rng)
        self.wo = Linear(d, d, rng)
        self.ln_gain = Tensor(np.ones(d), requires_grad=True)
        self.ln_shift = Tensor(np.zeros(d), requires_grad=True)

    def _heads(self, x: Tensor, b: int, t: int) -> Tensor:
        split = reshape(x, (b, t, self.heads, self.d_head))
        return transpose(split, (0, 2, 1, 3))

    def forward_batch(self, x: Tensor, mask: np.ndarray,
                      return_weights: bool = False):
        if x.ndim != 3 or x.shape[2] != self.d:
            raise ShapeMismatchError(
                f"self-attention expects (B, T, {self.d}), got {x.shape}"
            )
        b, t, _ = x.shape
        mask = _check_mask(mask, (b, t))
        q = self._heads(self.wq(x), b, t)
        k = self._heads(self.wk(x), b, t)
        v = self._heads(self.wv(x), b, t)
        scores = scale(q @ transpose(k, (0, 1, 3, 2)),
                       1.0 / math.sqrt(self.d_head))
        weights = masked_softmax(scores, mask[:, None, None, :])
        ctx = weights @ v
        merged = reshape(transpose(ctx, (0, 2, 1, 3)), (b, t, self.d))
        attended = self.wo(merged)
        out = layer_norm(x + attended, self.ln_gain, self.ln_shift)
        out = out * Tensor(mask[:, :, None].astype(np.float64))
        if return_weights:
            return out, weights.data
        return out

    def named_parameters(self, prefix: str):
        params = []
        for name, layer in (("wq", self.wq), ("wk", self.wk),
                            ("wv", self.wv), ("wo", self.wo)):
            params.extend(layer.named_parameters(f"{prefix}.{name}"))
        params.append((f"{prefix}.ln_gain", self.ln_gain))
        params.append((f"{prefix}.ln_shift", self.ln_shift))
        return params


class CrossAttentionBlock:
    """One query vector per sample attends over a key/value sequence.

    The query projection is optional; without it the incoming query is used
    as-is (its width must then equal ``d``). No residual, no norm: the block
    reads out a fixed-size summary of the sequence.
    """

    def __init__(self, d_query: int, d_kv: int, d: int, heads: int, rng=None,
                 project_query: bool = True):
        if d % heads != 0:
            raise ValueError(f"model dim {d} not divisible by {heads} heads")
        if not project_query and d_query != d:
            raise ValueError(
                f"identity query needs d_query == d, got {d_query} vs {d}"
            )
        self.d = d
        self.heads = heads
        self.d_head = d // heads
        self.wq = Linear(d_query, d, rng) if project_query else None
        self.wk = Linear(d_kv, d, rng)
        self.wv = Linear(d_kv, d, rng)
        self.wo = Linear(d, d, rng)

    def forward_batch(self, query: Tensor, kv: Tensor, mask: np.ndarray,
                      return_weights: bool = False):
        if query.ndim != 2:
            raise ShapeMismatchError(
                f"cross-attention query must be (B, d_query), got {query.shape}"
            )
        if kv.ndim != 3:
            raise ShapeMismatchError(
                f"cross-attention kv must be (B, T, d_kv), got {kv.shape}"
            )
        b, t, _ = kv.shape
        if query.shape[0] != b:
            raise ShapeMismatchError(
                f"query batch {query.shape[0]} != kv batch {b}"
            )
        mask = _check_mask(mask, (b, t))
        q = self.wq(query) if self.wq is not None else query
        q = transpose(reshape(q, (b, 1, self.heads, self.d_head)),
                      (0, 2, 1, 3))
        k = transpose(reshape(self.wk(kv), (b, t, self.heads, self.d_head)),
                      (0, 2, 1, 3))
        v = transpose(reshape(self.wv(kv), (b, t, self.heads, self.d_head)),
                      (0, 2, 1, 3))
        scores = scale(q @ transpose(k, (0, 1, 3, 2)),
                       1.0 / math.sqrt(self.d_head))
        weights = masked_softmax(scores, mask[:, None, None, :])
        ctx = reshape(transpose(weights @ v, (0, 2, 1, 3)), (b, self.d))
        out = self.wo(ctx)
        if return_weights:
            return out, weights.data
        return out

    def named_parameters(self, prefix: str):
        params = []
        if self.wq is not None:
            params.extend(self.wq.named_parameters(f"{prefix}.wq"))
        for name, layer in (("wk", self.wk), ("wv", self.wv),
                            ("wo", self.wo)):
            params.extend(layer.named_parameters(f"{prefix}.{name}"))
        return params


def mlp_head(f: Tensor, w1: Linear, w2: Linear, p_drop: float,
             train: bool, rng=None) -> Tensor:
    """Two-layer regression head: w2(dropout(gelu(w1(f))))."""
    return w2(dropout(gelu(w1(f)), p_drop, train, rng))


class PredictionHead:
    """Fused-vector to targets MLP with GELU and train-only dropout."""

    def __init__(self, d_in: int, hidden: int, n_out: int, p_drop: float,
                 rng=None):
        self.w1 = Linear(d_in, hidden, rng)
        self.w2 = Linear(hidden, n_out, rng)
        self.p_drop = p_drop

    def __call__(self, f: Tensor, train: bool, rng=None) -> Tensor:
        return mlp_head(f, self.w1, self.w2, self.p_drop, train, rng)

    def named_parameters(self, prefix: str):
        return (self.w1.named_parameters(f"{prefix}.w1")
                + self.w2.named_parameters(f"{prefix}.w2"))


# -- single-sequence helpers -------------------------------------------------


def self_attention(block: SelfAttentionBlock, x: Tensor,
                   mask: np.ndarray) -> Tensor:
    """Run one (T, d) sequence through a self-attention block."""
    t, d = x.shape
    out = block.forward_batch(reshape(x, (1, t, d)),
                              np.asarray(mask, dtype=bool)[None, :])
    return reshape(out, (t, d))


def cross_attention(block: CrossAttentionBlock, query: Tensor, kv: Tensor,
                    mask: np.ndarray) -> Tensor:
    """Attend one query vector over one (T, d_kv) sequence."""
    t, d_kv = kv.shape
    out = block.forward_batch(
        reshape(query, (1, query.shape[0])),
        reshape(kv, (1, t, d_kv)),
        np.asarray(mask, dtype=bool)[None, :],
    )
    return reshape(out, (out.shape[1],))
