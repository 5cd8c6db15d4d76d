"""Small convolutional backbone emitting a three-scale feature pyramid."""

from dataclasses import dataclass

from gbe.errors import DimensionError
from gbe.nn import Conv, Module
from gbe.tensor import Tensor, leaky_relu, spatial_pool


@dataclass
class FeaturePyramid:
    f_hi: Tensor
    f_mid: Tensor
    f_lo: Tensor


class Backbone(Module):
    """Three stages of two 3x3 conv + leaky_relu layers.

    The first conv is 4x4 with stride 2 and padding 1, so a ``S x S`` image yields ``f_hi`` at
    ``S/2``; a 2x2 max-pool separates the stages, giving ``f_mid`` at ``S/4``
    and ``f_lo`` at ``S/8``. Taps are taken before each pool and at the end.
    """

    def __init__(self, rng, c1=32, c2=64, c3=128, slope=0.01, in_channels=3):
        self.conv1a = Conv(rng, in_channels, c1, k=4, stride=2, pad=1)
        self.conv1b = Conv(rng, c1, c1)
        self.conv2a = Conv(rng, c1, c2)
        self.conv2b = Conv(rng, c2, c2)
        self.conv3a = Conv(rng, c2, c3)
        self.conv3b = Conv(rng, c3, c3)
        self.in_channels = in_channels
        self.slope = slope

    def _block(self, x, a, b):
        x = leaky_relu(a(x), self.slope)
        return leaky_relu(b(x), self.slope)

    def __call__(self, image):
        if image.ndim not in (3, 4) or image.shape[-3] != self.in_channels:
            raise DimensionError(f"backbone expects {self.in_channels} x S x S images, got {image.shape}")
        s = image.shape[-1]
        if image.shape[-2] != s or s % 8:
            raise DimensionError(f"backbone needs square images with side divisible by 8, got {image.shape}")
        f_hi = self._block(image, self.conv1a, self.conv1b)
        f_mid = self._block(spatial_pool(f_hi, "max", 2), self.conv2a, self.conv2b)
        f_lo = self._block(spatial_pool(f_mid, "max", 2), self.conv3a, self.conv3b)
        return FeaturePyramid(f_hi, f_mid, f_lo)


def forward_pyramid(backbone, image):
    return backbone(image)
