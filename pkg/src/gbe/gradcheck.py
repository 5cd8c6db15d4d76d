"""Finite-difference verification of every backward rule and of the full model.

Op checks run on a 64-bit shadow with ``h = 1e-3``. The end-to-end check
perturbs sampled coordinates of every parameter tensor of a tiny model and
reports the worst relative error per module. Analytic gradients come from the
64-bit and from the 32-bit path; finite differences always use the 64-bit
shadow with ``h = 1e-4``, shrunk per coordinate when it straddles a
max/leaky-relu kink.
"""

from dataclasses import dataclass

import numpy as np

from gbe import tensor as T
from gbe.data import BenchmarkSpec, gen_dataset
from gbe.graph import build_affinity, graph_forward
from gbe.model import GBEModel
from gbe.objective import ClassEmbeddingTable, rank_loss_from_scores, reg_loss, total_loss

OP_TOL = 1e-3
E2E_TOL = {"float64": 1e-4, "float32": 1e-2}
E2E_STEP = 1e-4
GRAD_FLOOR = 1e-6


@dataclass
class CheckRow:
    name: str
    kind: str
    precision: str
    max_rel_err: float
    tol: float

    @property
    def passed(self):
        return bool(self.max_rel_err < self.tol)


def rel_err(a, b, floor=1e-12):
    """``|a - b| / max(|a|, |b|, floor)`` in the 2-norm."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def _sample_coords(rng, size, limit):
    if size <= limit:
        return np.arange(size)
    return np.sort(rng.choice(size, size=limit, replace=False))


def check_function(fn, arrays, h=1e-3, max_coords=40, seed=0):
    """Compare ``backward`` of ``sum(fn(*inputs) * R)`` with central differences.

    ``arrays`` are float64 inputs; returns the largest relative error over the
    inputs (norm over sampled coordinates).
    """
    rng = np.random.default_rng(seed)
    inputs = [T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = fn(*inputs)
    probe = rng.standard_normal(out.shape)

    def scalar(ts):
        return float(np.sum(fn(*ts).data * probe))

    loss = T.tsum(out * T.Tensor(probe))
    T.backward(loss)
    worst = 0.0
    for i, x in enumerate(inputs):
        coords = _sample_coords(rng, x.size, max_coords)
        numeric = np.empty(len(coords))
        base = x.data.reshape(-1)
        for j, c in enumerate(coords):
            orig = base[c]
            vals = []
            for sign in (1.0, -1.0):
                base[c] = orig + sign * h
                with T.no_grad():
                    vals.append(scalar([T.Tensor(t.data.copy()) if k == i else t for k, t in enumerate(inputs)]))
            base[c] = orig
            numeric[j] = (vals[0] - vals[1]) / (2 * h)
        analytic = x.grad.reshape(-1)[coords]
        worst = max(worst, rel_err(analytic, numeric))
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x) + 0.0


def _distinct(rng, shape):
    # well-separated values so max/argmax does not flip under +-h
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.05 - n * 0.025).reshape(shape) + 0.0


def op_cases(seed=0):
    """``name -> (fn, inputs)`` for every differentiable primitive."""
    r = np.random.default_rng(seed)
    n = r.standard_normal
    return {
        "add": (lambda a, b: a + b, [n((3, 4)), n((1, 4))]),
        "sub": (lambda a, b: a - b, [n((3, 4)), n((3, 1))]),
        "mul": (lambda a, b: a * b, [n((3, 4)), n((4,))]),
        "div": (lambda a, b: a / b, [n((3, 4)), 2.0 + r.random((3, 4))]),
        "matmul": (T.matmul, [n((4, 3)), n((3, 2))]),
        "matmul_batched": (T.matmul, [n((2, 4, 3)), n((3, 2))]),
        "conv2d": (lambda x, w, b: T.conv2d(x, w, b, stride=1, pad=1), [n((2, 5, 5)), n((3, 2, 3, 3)), n((3,))]),
        "conv2d_stride2": (lambda x, w: T.conv2d(x, w, stride=2, pad=1), [n((2, 2, 6, 6)), n((3, 2, 4, 4))]),
        "softmax_rows": (T.softmax_rows, [n((4, 4))]),
        "leaky_relu": (lambda x: T.leaky_relu(x, 0.01), [_away_from_zero(r, (5, 6))]),
        "sigmoid": (T.sigmoid, [3 * n((4, 5))]),
        "softplus": (T.softplus, [10 * n((4, 5))]),
        "abs": (T.tabs, [_away_from_zero(r, (7,))]),
        "sum": (lambda x: T.tsum(x, axis=1), [n((3, 4, 2))]),
        "variance": (lambda x: T.variance(x, axis=-1), [n((7,))]),
        "reshape_transpose": (lambda x: T.transpose(T.reshape(x, (4, 6)), (1, 0)), [n((2, 3, 4))]),
        "getitem": (lambda x: x[:, 1:3], [n((3, 4))]),
        "concat_channels": (lambda a, b: T.concat_channels([a, b]), [n((1, 2, 2)), n((2, 2, 2))]),
        "max": (lambda x: T.max_axis(x, 1), [_distinct(r, (3, 5))]),
        "spatial_pool_max": (lambda x: T.spatial_pool(x, "max", 2), [_distinct(r, (3, 4, 4))]),
        "spatial_pool_avg": (lambda x: T.spatial_pool(x, "avg", 2), [n((3, 4, 4))]),
        "spatial_pool_global_max": (lambda x: T.spatial_pool(x, "max"), [_distinct(r, (3, 4, 4))]),
        "spatial_pool_global_avg": (lambda x: T.spatial_pool(x, "avg"), [n((3, 4, 4))]),
        "upsample_nearest": (lambda x: T.upsample_nearest(x, 2), [n((2, 3, 3))]),
        "pipeline_conv_pool_matmul": (
            lambda x, w, m: T.matmul(T.reshape(T.spatial_pool(T.conv2d(x, w, pad=1), "avg", 2), (1, 12)), m),
            [n((2, 4, 4)), n((3, 2, 3, 3)), n((12, 2))],
        ),
        "rank_loss": (
            lambda s: rank_loss_from_scores(s, np.array([[1, 0, 1, 0, 0], [0, 1, 0, 0, 1]])),
            [n((2, 5))],
        ),
        "reg_loss": (lambda s: reg_loss(s), [n((3, 4))]),
        "graph_forward": (
            lambda loc, gf, w: graph_forward(loc, gf, build_affinity(3, np.float64), w),
            [_away_from_zero(r, (3, 4)), n((4,)), n((8, 4))],
        ),
    }


def check_ops(seed=0, names=None):
    rows = []
    for name, (fn, arrays) in op_cases(seed).items():
        if names is not None and name not in names:
            continue
        err = check_function(fn, arrays, h=1e-3, seed=seed)
        rows.append(CheckRow(name, "op", "float64", err, OP_TOL))
    return rows


def _module_of(param_name):
    return param_name.split(".", 1)[0]


def _central_difference(loss_fn, flat, c, h, fd_dtype, shrink=(1.0, 1e-2, 1e-3)):
    """Central difference at ``flat[c]``, shrinking ``h`` when a kink lies inside the interval.

    A kink shows up as disagreeing forward and backward one-sided differences;
    if they still disagree at the smallest step the point sits on a kink and
    ``nan`` is returned.
    """
    orig = flat[c]
    with T.no_grad():
        f0 = float(loss_fn(fd_dtype).data)
        for factor in shrink:
            step = h * factor
            flat[c] = orig + step
            up = float(loss_fn(fd_dtype).data)
            flat[c] = orig - step
            down = float(loss_fn(fd_dtype).data)
            flat[c] = orig
            fwd, bwd = (up - f0) / step, (f0 - down) / step
            if abs(fwd - bwd) <= 1e-3 * max(abs(fwd), abs(bwd)) + 1e-7:
                return (up - down) / (2 * step)
    return float("nan")


def check_model(loss_fn, named_params, dtype, h, max_coords=6, seed=0, fd_dtype=np.float64):
    """Worst relative error per top-level module for ``loss_fn()`` w.r.t. ``named_params``.

    The analytic gradient comes from ``backward`` with parameters cast to
    ``dtype``; finite differences always use a ``fd_dtype`` shadow of the same
    parameter values.
    """
    rng = np.random.default_rng(seed)
    named_params = list(named_params)
    if not named_params:
        return {}
    for _, p in named_params:
        p.data = p.data.astype(dtype)
        p.grad = None
    T.backward(loss_fn(dtype))
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for name, p in named_params}
    for _, p in named_params:
        p.data = p.data.astype(fd_dtype)
    worst = {}
    for name, p in named_params:
        coords = _sample_coords(rng, p.size, max_coords)
        flat = p.data.reshape(-1)
        numeric = np.array([_central_difference(loss_fn, flat, c, h, fd_dtype) for c in coords])
        smooth = np.isfinite(numeric)
        # gradients below GRAD_FLOOR are numerically zero for an O(1) loss
        err = rel_err(analytic[name].reshape(-1)[coords][smooth], numeric[smooth], GRAD_FLOOR)
        mod = _module_of(name)
        worst[mod] = max(worst.get(mod, 0.0), err)
    return worst


def tiny_problem(cfg, seed=0, batch=3):
    spec = BenchmarkSpec(
        seed=seed, num_seen=6, num_unseen=2, d_w=cfg.d_w, image_size=cfg.image_size,
        grid=2, max_labels_per_image=2, n_train=batch, n_test=1,
    )
    data = gen_dataset(spec)
    # keep pixels off the clip bounds so pooling sees no exact ties
    jitter = np.random.default_rng(seed).uniform(-1e-3, 1e-3, data.train_images.shape)
    images = (0.1 + 0.8 * data.train_images + jitter).astype(np.float32)
    y = data.train_labels[:, data.table.seen_ids].copy()
    # every sample needs a negative and a positive
    y[:, 0] = np.where(y.sum(axis=1) == 0, 1.0, y[:, 0])
    return images, y, data.table


def gradcheck(cfg, model=None, seed=0, coords=6):
    """Run op checks plus the end-to-end check; returns a list of ``CheckRow``."""
    rows = check_ops(seed)
    images, y, table = tiny_problem(cfg, seed)
    for dtype in ("float64", "float32"):
        m = GBEModel(cfg) if model is None else model

        def loss_fn(dt):
            return total_loss(m(T.Tensor(images.astype(dt))), y, cfg.lam, table, cfg.reg_mode).loss

        worst = check_model(loss_fn, m.named_parameters(), np.dtype(dtype), E2E_STEP, coords, seed)
        for mod, err in worst.items():
            rows.append(CheckRow(mod, "module", dtype, err, E2E_TOL[dtype]))
    return rows


def format_table(rows):
    lines = [f"{'check':<28} {'kind':<7} {'dtype':<8} {'max_rel_err':>12} {'tol':>8}  result"]
    for r in rows:
        lines.append(
            f"{r.name:<28} {r.kind:<7} {r.precision:<8} {r.max_rel_err:>12.3e} {r.tol:>8.0e}  {'PASS' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines)


class EmptyModel:
    """Parameterless stand-in; its gradient check passes vacuously."""

    def named_parameters(self):
        return iter(())

    def __call__(self, x):
        raise NotImplementedError


__all__ = ["CheckRow", "check_function", "check_ops", "check_model", "gradcheck", "format_table", "ClassEmbeddingTable"]
