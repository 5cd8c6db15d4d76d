"""Parameter containers and initializers."""

import math

import numpy as np

from gbe.tensor import Tensor, conv2d, reshape


class Module:
    """Holds parameters as ``Tensor`` attributes and child modules.

    Parameter names are dotted attribute paths, e.g. ``stage1.conv_a.weight``.
    """

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield from child.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def astype(self, dtype):
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def param(array, name=None):
    return Tensor(np.asarray(array, dtype=np.float32), requires_grad=True, name=name)


def he_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return param(rng.uniform(-bound, bound, size=shape))


def zeros(shape):
    return param(np.zeros(shape))


class Conv(Module):
    """``k x k`` convolution with bias."""

    def __init__(self, rng, c_in, c_out, k=3, stride=1, pad=None):
        self.weight = he_uniform(rng, (c_out, c_in, k, k), c_in * k * k)
        self.bias = zeros((c_out,))
        self.stride = stride
        self.pad = (k // 2) if pad is None else pad

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Linear(Module):
    """Row-vector affine map ``x @ W + b``; ``lead`` prepends per-group axes."""

    def __init__(self, rng, d_in, d_out, bias=True, lead=()):
        self.weight = he_uniform(rng, tuple(lead) + (d_in, d_out), d_in)
        self.bias = zeros(tuple(lead) + (1, d_out)) if bias else None

    def __call__(self, x):
        if x.ndim == 1:
            return reshape(self(reshape(x, (1, x.shape[0]))), (self.weight.shape[-1],))
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y
