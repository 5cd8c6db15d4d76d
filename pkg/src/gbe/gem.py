"""Global enhancement: channel gating of the deepest map, screening, pooling."""

from dataclasses import dataclass

from gbe.nn import Conv, Linear, Module
from gbe.tensor import Tensor, leaky_relu, reshape, sigmoid, spatial_pool


@dataclass
class ChannelDescriptor:
    avg: Tensor
    max: Tensor


def channel_descriptor(f_lo):
    return ChannelDescriptor(avg=spatial_pool(f_lo, "avg"), max=spatial_pool(f_lo, "max"))


class GEM(Module):
    def __init__(self, rng, c3, d_w, gate_sigmoid=True, slope=0.01):
        hidden = max(1, c3 // 4)
        self.mlp_in = Linear(rng, c3, hidden)
        self.mlp_out = Linear(rng, hidden, c3)
        self.screen = Conv(rng, c3, d_w, k=1)
        self.gate_sigmoid = gate_sigmoid
        self.slope = slope

    def mlp(self, v):
        return self.mlp_out(leaky_relu(self.mlp_in(v), self.slope))

    def gate(self, desc):
        """Per-channel enhancement ``CE``; shares one MLP between both pools."""
        ce = self.mlp(desc.avg) + self.mlp(desc.max)
        return sigmoid(ce) if self.gate_sigmoid else ce

    def channel_enhance(self, desc, f_lo):
        ce = self.gate(desc)
        return reshape(ce, ce.shape + (1, 1)) * f_lo

    def global_semantic(self, enhanced):
        return spatial_pool(self.screen(enhanced), "max")

    def __call__(self, f_lo, enabled=True):
        if not enabled:
            return self.global_semantic(f_lo)
        return self.global_semantic(self.channel_enhance(channel_descriptor(f_lo), f_lo))
