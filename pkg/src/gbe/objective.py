"""Grouped max scoring, pairwise ranking loss and the variance regularizer."""

from dataclasses import dataclass

import numpy as np

from gbe.errors import ConfigError, UsageError
from gbe.tensor import Tensor, max_axis, reshape, softplus, swap_last, tabs, tsum, variance


@dataclass
class ClassEmbeddingTable:
    vectors: np.ndarray  # |C| x d_w
    seen_ids: np.ndarray
    unseen_ids: np.ndarray

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        self.seen_ids = np.asarray(self.seen_ids, dtype=np.int64)
        self.unseen_ids = np.asarray(self.unseen_ids, dtype=np.int64)
        if np.intersect1d(self.seen_ids, self.unseen_ids).size:
            raise ConfigError("seen and unseen class ids overlap")
        norms = np.linalg.norm(self.vectors, axis=1)
        if not np.all(np.isfinite(norms)) or np.any(norms <= 0):
            raise ConfigError("every class embedding needs a finite, nonzero norm")

    @property
    def all_ids(self):
        return np.arange(len(self.vectors))

    @property
    def d_w(self):
        return self.vectors.shape[1]


def class_scores(s, table, ids):
    """``score[c] = max_m <vectors[c], s[m]>`` for ``s`` of shape ``... x n x d_w``.

    Ties between groups resolve to the lowest group index.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise UsageError("class_scores needs at least one class id")
    emb = Tensor(table.vectors[ids].astype(s.dtype))
    return max_axis(s @ swap_last(emb), -2)


def pair_weights(y):
    """``neg_j * pos_k / (|T| |T_bar|)`` as a ``B x C x C`` array, plus the rankable mask."""
    y = np.asarray(y, dtype=np.float64)
    pos = y
    neg = 1.0 - y
    n_pos = pos.sum(axis=-1)
    n_neg = neg.sum(axis=-1)
    ok = (n_pos > 0) & (n_neg > 0)
    denom = np.where(ok, n_pos * n_neg, 1.0)
    w = neg[..., :, None] * pos[..., None, :] / denom[..., None, None]
    return w, ok


def rank_loss_from_scores(scores, y):
    """Per-sample normalized pairwise softplus loss, ``scores`` and ``y`` are ``B x C``.

    ``tau[j, k] = score(neg j) - score(pos k)``; softplus is overflow-safe.
    """
    w, ok = pair_weights(y)
    if not np.all(ok):
        raise UsageError("every sample needs at least one positive and one negative label")
    c = scores.shape[-1]
    lead = scores.shape[:-1]
    tau = reshape(scores, lead + (c, 1)) - reshape(scores, lead + (1, c))
    return tsum(softplus(tau) * Tensor(w.astype(scores.dtype)), axis=(-2, -1))


def rank_loss(s, y, table, ids=None):
    """Ranking loss of one semantic group ``n x d_w`` against labels over ``ids``."""
    ids = table.seen_ids if ids is None else ids
    scores = class_scores(s, table, ids)
    return rank_loss_from_scores(reshape(scores, (1,) + scores.shape), np.asarray(y)[None])[0]


def sample_weight(y):
    """``1 + var(y)`` for a binary label vector; lies in ``[1, 1.25]``."""
    return 1.0 + float(np.var(np.asarray(y, dtype=np.float64), axis=-1))


def reg_loss(s, mode="within_row"):
    """``|sum of variances|`` of a semantic group (per sample if batched).

    ``within_row``: variance over the ``d_w`` components of each group vector.
    ``across_groups``: variance over groups for each component.
    """
    if mode == "within_row":
        v = variance(s, axis=-1)
    elif mode == "across_groups":
        v = variance(s, axis=-2)
    else:
        raise ConfigError(f"unknown reg_mode {mode!r}")
    return tabs(tsum(v, axis=-1))


@dataclass
class LossParts:
    loss: Tensor
    rank: float
    reg: float
    used: int
    skipped: int


def total_loss(s, y, lam, table, reg_mode="within_row", ids=None):
    """Batch objective ``mean_i(w_i (1 - lam) rank_i + lam reg_i)``.

    ``s`` is ``B x n x d_w``, ``y`` is ``B x |ids|`` binary (seen classes by
    default). Samples without a positive or without a negative label are
    skipped and excluded from the mean.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    y = np.asarray(y, dtype=np.float64)
    _, ok = pair_weights(y)
    used = int(ok.sum())
    skipped = int(len(ok) - used)
    if used == 0:
        raise UsageError("no rankable sample in batch")
    if skipped:
        keep = np.flatnonzero(ok)
        s = s[keep]
        y = y[keep]
    ids = table.seen_ids if ids is None else ids
    rank = rank_loss_from_scores(class_scores(s, table, ids), y)
    reg = reg_loss(s, reg_mode)
    omega = (1.0 + np.var(y, axis=-1)).astype(s.dtype)
    per_sample = Tensor(omega * (1.0 - lam)) * rank + Tensor(np.asarray(lam, dtype=s.dtype)) * reg
    loss = tsum(per_sample) * (1.0 / used)
    return LossParts(loss, float(rank.data.mean()), float(reg.data.mean()), used, skipped)
