"""Global-local association graph: one static, fully connected GCN layer."""

import numpy as np

from gbe.errors import ConfigError, DimensionError
from gbe.nn import Module, he_uniform, param
from gbe.tensor import Tensor, concat, leaky_relu, reshape


def build_affinity(n, dtype=np.float32):
    """Uniform row-stochastic ``n x n`` matrix with self-loops."""
    if n < 1:
        raise ConfigError(f"affinity needs at least one node, got n={n}")
    return Tensor(np.full((n, n), 1.0 / n, dtype=dtype))


def node_features(locals_, gf):
    """Rows ``[local_m ; gf]``: ``... x n x 2d_w``."""
    n, d = locals_.shape[-2:]
    if gf.shape[-1] != d or gf.shape[:-1] != locals_.shape[:-2]:
        raise DimensionError(f"locals {locals_.shape} and global vector {gf.shape} disagree")
    lead = gf.shape[:-1]
    g = reshape(gf, lead + (1, d))
    ones = Tensor(np.ones(lead + (n, 1), dtype=gf.dtype))
    return concat([locals_, ones @ g], axis=-1)


def graph_forward(locals_, gf, affinity, w_s, slope=0.01):
    """``leaky_relu(A V W_s)`` with ``V`` the node features."""
    v = node_features(locals_, gf)
    if affinity.shape != (v.shape[-2],) * 2:
        raise DimensionError(f"affinity {affinity.shape} does not match {v.shape[-2]} nodes")
    if w_s.shape[0] != v.shape[-1]:
        raise DimensionError(f"W_s {w_s.shape} does not match node width {v.shape[-1]}")
    return leaky_relu(affinity @ v @ w_s, slope)


class GLAGraph(Module):
    def __init__(self, rng, n, d_w, learnable_affinity=False, slope=0.01):
        self.w_s = he_uniform(rng, (2 * d_w, d_w), 2 * d_w)
        a = build_affinity(n)
        self.affinity = param(a.data) if learnable_affinity else a
        self.d_w = d_w
        self.slope = slope

    def __call__(self, locals_, gf, enabled=True):
        if not enabled:
            # no mixing, no global vector: only the local half of W_s is used
            return leaky_relu(locals_ @ self.w_s[: self.d_w], self.slope)
        return graph_forward(locals_, gf, self.affinity, self.w_s, self.slope)
