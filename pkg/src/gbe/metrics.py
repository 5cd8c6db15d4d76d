"""Top-K micro precision/recall/F1 and class-wise mean average precision."""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gbe.errors import DimensionError, UsageError

REPORT_COLUMNS = ("protocol", "k", "precision", "recall", "f1", "map")


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # N_images x |labels|
    label_ids: np.ndarray
    gt: np.ndarray  # N_images x |labels|, binary

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.gt = np.asarray(self.gt).astype(bool)
        self.label_ids = np.asarray(self.label_ids)
        if self.scores.shape != self.gt.shape or self.scores.shape[1] != len(self.label_ids):
            raise DimensionError(
                f"scores {self.scores.shape}, gt {self.gt.shape} and {len(self.label_ids)} labels disagree"
            )
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")


def topk_indices(scores, k):
    """Column indices of the ``k`` highest scores per row, ties to the lower index."""
    order = np.argsort(-np.asarray(scores, dtype=np.float64), axis=1, kind="stable")
    return order[:, :k]


def topk_prf(m, k):
    """Micro-averaged precision, recall and F1 over each image's top ``k`` labels.

    Images without any ground-truth label are left out of every sum.
    """
    if k <= 0:
        raise UsageError(f"k must be positive, got {k}")
    if k > m.scores.shape[1]:
        raise UsageError(f"k={k} exceeds the {m.scores.shape[1]} available labels")
    keep = m.gt.any(axis=1)
    if not keep.any():
        return 0.0, 0.0, 0.0
    scores, gt = m.scores[keep], m.gt[keep]
    top = topk_indices(scores, k)
    hits = np.take_along_axis(gt, top, axis=1).sum()
    precision = hits / (k * len(gt))
    recall = hits / gt.sum()
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return float(precision), float(recall), float(f1)


def average_precision(scores, gt):
    """Non-interpolated AP of one class; ``None`` when the class has no positive."""
    gt = np.asarray(gt).astype(bool)
    n_pos = int(gt.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hit = gt[order]
    ranks = np.flatnonzero(hit) + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


def class_aps(m, ids=None):
    """AP per eligible column (``ids`` index the columns); returns ``(aps, excluded)``."""
    cols = range(m.scores.shape[1]) if ids is None else ids
    aps, excluded = {}, []
    for c in cols:
        ap = average_precision(m.scores[:, c], m.gt[:, c])
        if ap is None:
            excluded.append(int(c))
        else:
            aps[int(c)] = ap
    return aps, excluded


def mean_ap(m, ids=None):
    aps, excluded = class_aps(m, ids)
    if not aps:
        raise UsageError(f"mAP undefined: all {len(excluded)} classes have no positive image")
    return float(np.mean(list(aps.values())))


def report_rows(m, protocol, ks):
    mAP = mean_ap(m)
    rows = []
    for k in ks:
        p, r, f1 = topk_prf(m, k)
        rows.append({"protocol": protocol, "k": int(k), "precision": p, "recall": r, "f1": f1, "map": mAP})
    return rows


def write_report(rows, out_dir, stem):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({key: row[key] for key in REPORT_COLUMNS})
    (out_dir / f"{stem}.json").write_text(json.dumps(rows, indent=2))
    return csv_path
