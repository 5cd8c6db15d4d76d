"""Local information distinguishing: grouped self-attention over feature maps.

The fused map is split into ``n`` channel groups of width ``d_w``. Each group
is tokenized per pixel, refined by single-head self-attention and a residual
feed-forward layer, then max-pooled over tokens into one local vector.
"""

import math

from gbe.errors import ConfigError
from gbe.nn import Linear, Module
from gbe.tensor import concat_channels, leaky_relu, max_axis, reshape, softmax_rows, stack, swap_last


def split_groups(f, n, d_w):
    """Contiguous channel slices of a ``(n*d_w) x H x W`` map (batch axes allowed)."""
    c = f.shape[-3]
    if n < 1 or c != n * d_w:
        raise ConfigError(f"cannot split {c} channels into {n} groups of {d_w}")
    lead = (slice(None),) * (f.ndim - 3)
    return [f[lead + (slice(m * d_w, (m + 1) * d_w),)] for m in range(n)]


def merge_groups(groups):
    return concat_channels(groups)


def to_tokens(f):
    """``... x d x H x W`` -> ``... x (H*W) x d``: one token per pixel."""
    lead = f.shape[:-3]
    d, h, w = f.shape[-3:]
    flat = reshape(f, lead + (d, h * w))
    return swap_last(flat)


def grouped_tokens(f, n, d_w):
    """All groups at once: ``... x (n*d_w) x H x W`` -> ``... x n x (H*W) x d_w``."""
    c = f.shape[-3]
    if n < 1 or c != n * d_w:
        raise ConfigError(f"cannot split {c} channels into {n} groups of {d_w}")
    lead = f.shape[:-3]
    h, w = f.shape[-2:]
    return swap_last(reshape(f, lead + (n, d_w, h * w)))


class LID(Module):
    def __init__(self, rng, n, d_w, attention_scale=True, per_group_weights=False, slope=0.01):
        # per-group weights are (n, d, d) and broadcast over the batch axis
        lead = (n,) if per_group_weights else ()
        self.embed = Linear(rng, d_w, d_w, bias=False, lead=lead)
        self.w_q = Linear(rng, d_w, d_w, bias=False, lead=lead)
        self.w_k = Linear(rng, d_w, d_w, bias=False, lead=lead)
        self.w_v = Linear(rng, d_w, d_w, bias=False, lead=lead)
        self.ffn_in = Linear(rng, d_w, 2 * d_w, lead=lead)
        self.ffn_out = Linear(rng, 2 * d_w, d_w, lead=lead)
        self.n = n
        self.d_w = d_w
        self.attention_scale = attention_scale
        self.slope = slope

    def tokenize(self, group_tokens):
        return self.embed(group_tokens)

    def attention(self, t):
        """Row-stochastic ``HW x HW`` matrix ``softmax(K Q^T [/ sqrt(d_w)])``."""
        q = self.w_q(t)
        k = self.w_k(t)
        logits = k @ swap_last(q)
        if self.attention_scale:
            logits = logits * (1.0 / math.sqrt(self.d_w))
        return softmax_rows(logits)

    def attention_enhance(self, t):
        return t + self.attention(t) @ self.w_v(t)

    def feed_forward_refine(self, x):
        return x + self.ffn_out(leaky_relu(self.ffn_in(x), self.slope))

    def __call__(self, fused, enabled=True):
        """Fused map ``... x (n*d_w) x H x W`` -> local semantics ``... x n x d_w``."""
        tokens = grouped_tokens(fused, self.n, self.d_w)
        if not enabled:
            return max_axis(tokens, -2)
        x = self.feed_forward_refine(self.attention_enhance(self.tokenize(tokens)))
        return max_axis(x, -2)


def local_semantics(groups):
    """Per-dimension max over tokens of each refined group, stacked to ``n x d_w``."""
    return stack([max_axis(g, -2) for g in groups], axis=-2)
