"""Multi-layer feature fusion: align pyramid scales to the middle map and fuse."""

from gbe.errors import ConfigError
from gbe.nn import Conv, Module
from gbe.tensor import concat_channels, conv2d, leaky_relu, mul, spatial_pool, upsample_nearest


def resample(x, target_hw):
    """Average-pool down or nearest-repeat up by a power-of-two factor."""
    h = x.shape[-1]
    t = target_hw[-1] if isinstance(target_hw, (tuple, list)) else target_hw
    if h == t:
        return x
    big, small = max(h, t), min(h, t)
    ratio = big // small
    if big % small or ratio & (ratio - 1):
        raise ConfigError(f"resample ratio {h}->{t} is not a power of 2")
    if h > t:
        return spatial_pool(x, "avg", ratio)
    return upsample_nearest(x, ratio)


def fuse_pair(a, b, proj, target_hw=None):
    """Project ``b`` to ``a``'s channels with a 1x1 conv, resample, multiply."""
    target_hw = a.shape[-2:] if target_hw is None else target_hw
    return mul(a, resample(proj(b), target_hw))


class FusionMLFEF(Module):
    def __init__(self, rng, c1, c2, c3, out_channels, slope=0.01):
        self.proj_lo = Conv(rng, c3, c2, k=1)
        self.proj_hi = Conv(rng, c1, c2, k=1)
        self.out = Conv(rng, 3 * c2, out_channels, k=1)
        self.c2 = c2
        self.slope = slope

    def __call__(self, pyramid, enabled=True):
        mid = pyramid.f_mid
        if enabled:
            fused = concat_channels(
                [mid, fuse_pair(mid, pyramid.f_lo, self.proj_lo), fuse_pair(mid, pyramid.f_hi, self.proj_hi)]
            )
            return leaky_relu(self.out(fused), self.slope)
        # bypass: only the mid-scale block of the output projection is used,
        # equivalent to concatenating zero maps for the fused terms
        w = self.out.weight[:, : self.c2]
        return leaky_relu(conv2d(mid, w, self.out.bias), self.slope)


def fuse_all(fusion, pyramid):
    return fusion(pyramid)
