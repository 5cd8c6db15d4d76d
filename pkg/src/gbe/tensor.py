"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation produces a new :class:`Tensor` holding its
parents, the op name and a small context. Backward rules live in the
``BACKWARD_RULES`` registry keyed by op name and are looked up when
:func:`backward` runs, which keeps them swappable for fault-injection tests.

Storage defaults to float32; a float64 array passed in stays float64 so
gradient checks can run a 64-bit shadow of the same graph.
"""

import contextlib
import os

import numpy as np

from gbe.errors import ConfigError, DimensionError, UsageError

DEFAULT_DTYPE = np.float32

BACKWARD_RULES = {}

_state = {
    "grad_enabled": True,
    "debug": os.environ.get("GBE_DEBUG", "") not in ("", "0"),
    "tapes": [],
}


def set_debug(flag):
    """Toggle the finite-value check run after every forward op."""
    _state["debug"] = bool(flag)


@contextlib.contextmanager
def no_grad():
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def _as_array(data, dtype=None):
    if dtype is not None:
        return np.ascontiguousarray(data, dtype=dtype)
    if isinstance(data, (np.ndarray, np.generic)) and data.dtype in (np.float32, np.float64):
        return np.asarray(data)
    return np.asarray(data, dtype=DEFAULT_DTYPE)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_ctx")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.op = None
        self._parents = ()
        self._ctx = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        if self.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def max(self, axis):
        return max_axis(self, axis)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


class Tape:
    """Ordered record of the operations executed while the tape is active.

    Use as a context manager; :meth:`backward` then walks the recorded
    operations in reverse. Leaf tensors that were read by some op but do not
    reach the loss receive zero gradients.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _state["tapes"].append(self)
        return self

    def __exit__(self, *exc):
        _state["tapes"].remove(self)
        return False

    def record(self, node):
        self.nodes.append(node)

    def leaves(self):
        seen = {}
        for node in self.nodes:
            for p in node._parents:
                if p.op is None and p.requires_grad:
                    seen[id(p)] = p
        return list(seen.values())

    def backward(self, loss):
        backward(loss, tape=self)


def _finite_check(op, arr):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op} produced non-finite values")


def _make(data, parents, op, ctx=None):
    out = Tensor(data)
    if _state["debug"]:
        _finite_check(op, out.data)
    if _state["grad_enabled"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._ctx = ctx
        for tape in _state["tapes"]:
            tape.record(out)
    return out


def _topo_order(root):
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss, tape=None):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that needs it."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise UsageError(f"backward() needs a scalar loss, got shape {shape}")
    if tape is not None:
        if loss.op is not None and not any(n is loss for n in tape.nodes):
            raise UsageError("loss was not recorded on the given tape")
        order = [n for n in tape.nodes]
    else:
        order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    if loss.op is None and loss.requires_grad:
        leaves[id(loss)] = loss
    for node in reversed(order):
        if node.op is None:
            continue
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = BACKWARD_RULES[node.op](node._ctx, g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.op is None:
                leaves[id(p)] = p
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if tape is not None:
        for leaf in tape.leaves():
            leaves.setdefault(id(leaf), leaf)
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        g = g.astype(leaf.dtype, copy=False)
        leaf.grad = g if leaf.grad is None else leaf.grad + g


# --- helpers ---------------------------------------------------------------


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary_operands(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


# --- elementwise -----------------------------------------------------------


def add(a, b):
    a, b = _binary_operands(a, b)
    return _make(a.data + b.data, (a, b), "add", (a.shape, b.shape))


def _add_bw(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


def sub(a, b):
    a, b = _binary_operands(a, b)
    return _make(a.data - b.data, (a, b), "sub", (a.shape, b.shape))


def _sub_bw(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), -_unbroadcast(g, sb)


def mul(a, b):
    a, b = _binary_operands(a, b)
    return _make(a.data * b.data, (a, b), "mul", (a.data, b.data))


def _mul_bw(ctx, g):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def div(a, b):
    a, b = _binary_operands(a, b)
    return _make(a.data / b.data, (a, b), "div", (a.data, b.data))


def _div_bw(ctx, g):
    a, b = ctx
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)


def leaky_relu(x, slope=0.01):
    """``x`` where ``x >= 0`` else ``slope * x``; the derivative at 0 is 1."""
    if not 0.0 < slope < 1.0:
        raise ConfigError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    pos = x.data >= 0
    out = np.where(pos, x.data, x.data * x.dtype.type(slope))
    return _make(out, (x,), "leaky_relu", (pos, slope))


def _leaky_relu_bw(ctx, g):
    pos, slope = ctx
    return (np.where(pos, g, g * g.dtype.type(slope)),)


def sigmoid(x):
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (x,), "sigmoid", out)


def _sigmoid_bw(ctx, g):
    y = ctx
    return (g * y * (1 - y),)


def softplus(x):
    """``log(1 + exp(x))`` as ``max(x, 0) + log1p(exp(-|x|))``."""
    d = x.data
    out = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))
    return _make(out, (x,), "softplus", d)


def _softplus_bw(ctx, g):
    d = ctx
    # derivative is sigmoid(x), evaluated without overflow
    e = np.exp(-np.abs(d))
    sig = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return (g * sig,)


def tabs(x):
    """Absolute value; subgradient 0 at 0."""
    return _make(np.abs(x.data), (x,), "abs", np.sign(x.data))


def _abs_bw(ctx, g):
    return (g * ctx,)


# --- reductions and shape ---------------------------------------------------


def tsum(x, axis=None, keepdims=False):
    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), "sum", (x.shape, axis, keepdims))


def _sum_bw(ctx, g):
    shape, axis, keepdims = ctx
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, shape).copy(),)


def mean(x, axis=None, keepdims=False):
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / count)


def variance(x, axis=-1, keepdims=False):
    """Population variance ``mean((x - mean(x))**2)`` along ``axis``."""
    d = x.data
    mu = d.mean(axis=axis, keepdims=True)
    centered = d - mu
    out = np.mean(centered * centered, axis=axis, keepdims=keepdims)
    return _make(out, (x,), "variance", (centered, axis, keepdims, d.shape[axis]))


def _variance_bw(ctx, g):
    centered, axis, keepdims, length = ctx
    if not keepdims:
        g = np.expand_dims(g, axis)
    return (g * centered * (2.0 / length),)


def reshape(x, shape):
    return _make(x.data.reshape(shape), (x,), "reshape", x.shape)


def _reshape_bw(ctx, g):
    return (g.reshape(ctx),)


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    return _make(np.transpose(x.data, axes), (x,), "transpose", axes)


def _transpose_bw(ctx, g):
    return (np.transpose(g, np.argsort(ctx)),)


def swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def getitem(x, idx):
    return _make(x.data[idx], (x,), "getitem", (x.shape, x.dtype, idx))


def _getitem_bw(ctx, g):
    shape, dtype, idx = ctx
    out = np.zeros(shape, dtype=dtype)
    parts = idx if isinstance(idx, tuple) else (idx,)
    if any(isinstance(p, (np.ndarray, list)) for p in parts):
        np.add.at(out, idx, g)
    else:
        out[idx] = g
    return (out,)


def concat(parts, axis=0):
    parts = list(parts)
    if not parts:
        raise DimensionError("concat needs at least one part")
    ax = axis % parts[0].ndim
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(p.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(
                f"concat along axis {axis}: shape {p.shape} does not match {ref}"
            )
    sizes = [p.shape[ax] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=ax)
    return _make(out, parts, "concat", (ax, np.cumsum(sizes)[:-1]))


def _concat_bw(ctx, g):
    ax, cuts = ctx
    return tuple(np.split(g, cuts, axis=ax))


def concat_channels(parts):
    """Concatenate ``C_i x H x W`` maps (optionally batched) along channels."""
    parts = list(parts)
    for p in parts[1:]:
        if p.shape[-2:] != parts[0].shape[-2:]:
            raise DimensionError(
                f"concat_channels: spatial size {p.shape[-2:]} != {parts[0].shape[-2:]}"
            )
    return concat(parts, axis=-3)


def stack(parts, axis=0):
    parts = list(parts)
    expanded = [reshape(p, p.shape[:axis % (p.ndim + 1)] + (1,) + p.shape[axis % (p.ndim + 1):]) for p in parts]
    return concat(expanded, axis=axis)


def max_axis(x, axis):
    """Max along ``axis``; ties route the gradient to the lowest index."""
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    out = np.squeeze(out, axis=axis)
    return _make(out, (x,), "max", (x.shape, x.dtype, idx, axis))


def _max_bw(ctx, g):
    shape, dtype, idx, axis = ctx
    out = np.zeros(shape, dtype=dtype)
    np.put_along_axis(out, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
    return (out,)


# --- linear algebra --------------------------------------------------------


def matmul(a, b):
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = _binary_operands(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    return _make(np.matmul(a.data, b.data), (a, b), "matmul", (a.data, b.data))


def _matmul_bw(ctx, g):
    a, b = ctx
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def softmax_rows(x):
    """Softmax over the last axis with per-row max subtraction."""
    d = x.data
    e = np.exp(d - d.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return _make(y, (x,), "softmax_rows", y)


def _softmax_bw(ctx, g):
    y = ctx
    return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)


# --- convolution and pooling -----------------------------------------------


def _out_size(size, k, stride, pad, what):
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ConfigError(
            f"{what}: size {size} with kernel {k}, stride {stride}, pad {pad} "
            "does not give an integral output size"
        )
    return span // stride + 1


def _patches(xp, k, stride, ho, wo):
    # (..., C, Hp, Wp) -> (..., C, k, k, ho, wo)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(-2, -1))
    win = win[..., : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride, :, :]
    nd = win.ndim
    return np.moveaxis(win, (nd - 2, nd - 1), (nd - 4, nd - 3))


def _fold(cols, xp_shape, k, stride, ho, wo):
    # adjoint of _patches
    out = np.zeros(xp_shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[..., i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += cols[..., i, j, :, :]
    return out


def conv2d(x, w, bias=None, stride=1, pad=0):
    """2-D cross-correlation.

    ``x`` is ``C_in x H x W`` or batched ``N x C_in x H x W``; ``w`` is
    ``C_out x C_in x k x k``; ``bias`` is an optional length-``C_out`` tensor.
    """
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise DimensionError(f"conv2d: bad input shapes {x.shape} and {w.shape}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    n, c, h, wd = xd.shape
    co, ci, k, k2 = w.shape
    if ci != c or k != k2:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    ho = _out_size(h, k, stride, pad, "conv2d")
    wo = _out_size(wd, k, stride, pad, "conv2d")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    if k == 1 and stride == 1:
        cols = xp.reshape(n, c, h * wd)
    else:
        cols = _patches(xp, k, stride, ho, wo).reshape(n, c * k * k, ho * wo)
    wmat = w.data.reshape(co, ci * k * k)
    out = np.matmul(wmat, cols).reshape(n, co, ho, wo)
    parents = [x, w]
    if bias is not None:
        if bias.shape != (co,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({co},)")
        out = out + bias.data.reshape(1, co, 1, 1)
        parents.append(bias)
    if unbatched:
        out = out[0]
    ctx = (cols, wmat, xp.shape, x.shape, w.shape, stride, pad, ho, wo, bias is not None)
    return _make(out, parents, "conv2d", ctx)


def _conv2d_bw(ctx, g):
    cols, wmat, xp_shape, x_shape, w_shape, stride, pad, ho, wo, has_bias = ctx
    co, ci, k, _ = w_shape
    g4 = g[None] if len(x_shape) == 3 else g
    n = g4.shape[0]
    gm = g4.reshape(n, co, ho * wo)
    gw = np.matmul(gm, np.swapaxes(cols, 1, 2)).sum(axis=0).reshape(w_shape)
    gcols = np.matmul(wmat.T, gm)
    if k == 1 and stride == 1:
        gxp = gcols.reshape(xp_shape)
    else:
        gxp = _fold(gcols.reshape(n, ci, k, k, ho, wo), xp_shape, k, stride, ho, wo)
    if pad:
        gxp = gxp[:, :, pad:-pad, pad:-pad]
    gx = gxp.reshape(x_shape)
    grads = [gx, gw]
    if has_bias:
        grads.append(g4.sum(axis=(0, 2, 3)))
    return tuple(grads)


def spatial_pool(x, mode="max", window="global", stride=None):
    """Pool over the last two (spatial) axes.

    ``window="global"`` reduces each channel to one value (output drops the
    spatial axes). An integer window pools ``k x k`` patches with ``stride``
    (default ``k``). Max mode routes gradient to the first row-major argmax.
    """
    if mode not in ("max", "avg"):
        raise ConfigError(f"spatial_pool: unknown mode {mode!r}")
    if x.ndim < 2:
        raise DimensionError(f"spatial_pool needs spatial axes, got shape {x.shape}")
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    if window == "global":
        flat = reshape(x, lead + (h * w,))
        return max_axis(flat, -1) if mode == "max" else mean(flat, axis=-1)
    k = int(window)
    stride = k if stride is None else int(stride)
    if k <= 0 or stride <= 0:
        raise ConfigError(f"spatial_pool: window {k} and stride {stride} must be positive")
    ho = _out_size(h, k, stride, 0, "spatial_pool")
    wo = _out_size(w, k, stride, 0, "spatial_pool")
    patches = _patches(x.data, k, stride, ho, wo)  # (..., k, k, ho, wo)
    flat = patches.reshape(lead + (k * k, ho, wo))
    if mode == "max":
        idx = np.argmax(flat, axis=-3)
        out = np.take_along_axis(flat, idx[..., None, :, :], axis=-3)[..., 0, :, :]
    else:
        idx = None
        out = flat.mean(axis=-3)
    return _make(out, (x,), "spatial_pool", (mode, idx, x.shape, x.dtype, k, stride, ho, wo))


def _spatial_pool_bw(ctx, g):
    mode, idx, shape, dtype, k, stride, ho, wo = ctx
    lead = shape[:-2]
    if mode == "max":
        cols = (np.arange(k * k).reshape((k * k, 1, 1)) == idx[..., None, :, :]) * g[..., None, :, :]
    else:
        cols = np.broadcast_to(g[..., None, :, :] / (k * k), lead + (k * k, ho, wo))
    cols = cols.astype(dtype).reshape(lead + (k, k, ho, wo))
    return (_fold(cols, shape, k, stride, ho, wo),)


def upsample_nearest(x, factor):
    """Repeat each spatial element ``factor x factor`` times."""
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)
    return _make(out, (x,), "upsample_nearest", (x.shape, factor))


def _upsample_bw(ctx, g):
    shape, f = ctx
    h, w = shape[-2:]
    g = g.reshape(shape[:-2] + (h, f, w, f)).sum(axis=(-3, -1))
    return (g,)


BACKWARD_RULES.update(
    {
        "add": _add_bw,
        "sub": _sub_bw,
        "mul": _mul_bw,
        "div": _div_bw,
        "leaky_relu": _leaky_relu_bw,
        "sigmoid": _sigmoid_bw,
        "softplus": _softplus_bw,
        "abs": _abs_bw,
        "sum": _sum_bw,
        "variance": _variance_bw,
        "reshape": _reshape_bw,
        "transpose": _transpose_bw,
        "getitem": _getitem_bw,
        "concat": _concat_bw,
        "max": _max_bw,
        "matmul": _matmul_bw,
        "softmax_rows": _softmax_bw,
        "conv2d": _conv2d_bw,
        "spatial_pool": _spatial_pool_bw,
        "upsample_nearest": _upsample_bw,
    }
)
