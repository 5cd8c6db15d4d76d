"""Training, evaluation, sweeps and ablations over the synthetic benchmark."""

import csv
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gbe.data import BenchmarkSpec, dataset_checksum, gen_dataset, read_dataset
from gbe.errors import UsageError
from gbe.metrics import ScoreMatrix, mean_ap, report_rows, write_report
from gbe.model import GBEModel
from gbe.objective import total_loss
from gbe.optim import AdamState, adam_step

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "train_loss", "rank_loss", "reg_loss", "skipped", "val_map")

# Rows a-f and the full model, as (mlfef, lid, gem, gla).
ABLATION_ROWS = {
    "a": (False, False, False, False),
    "b": (True, False, False, False),
    "c": (True, True, False, False),
    "d": (True, False, True, False),
    "e": (True, True, False, True),
    "f": (True, False, True, True),
    "full": (True, True, True, True),
}


@dataclass
class TrainResult:
    model: GBEModel
    log: list
    out_dir: Path | None = None
    skipped: int = 0
    extra: dict = field(default_factory=dict)


def lr_at(cfg, epoch):
    """Learning rate for 0-based ``epoch``; decays at each 1-based decay epoch."""
    drops = sum(1 for d in cfg.decay_epochs if epoch + 1 >= d)
    return cfg.lr * cfg.decay_factor ** drops


def validation_split(n_train, fraction, seed):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    perm = rng.permutation(n_train)
    n_val = int(round(n_train * fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def load_data(cfg):
    path = Path(cfg.dataset)
    if (path / "manifest.json").exists():
        return read_dataset(path)
    raise UsageError(f"no dataset at {path}; run `gbe gen-data` first")


def _write_log(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in LOG_COLUMNS])


def train(cfg, data=None, out_dir=None, on_epoch=None):
    """Train end to end; optionally write the run directory to ``out_dir``.

    ``on_epoch(row, model)`` is called after each epoch's log row is built.
    """
    cfg.validate()
    data = load_data(cfg) if data is None else data
    if data.table.d_w != cfg.d_w:
        raise UsageError(f"dataset embeddings have d_w={data.table.d_w}, config says {cfg.d_w}")
    model = GBEModel(cfg)
    params = model.parameters()
    model.zero_grad()
    state = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    seen = data.table.seen_ids
    train_idx, val_idx = validation_split(data.n_train, cfg.val_fraction, cfg.seed)
    images = data.train_images
    targets = data.train_labels[:, seen]
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 13]))
    rows, total_skipped = [], 0
    for epoch in range(cfg.epochs):
        state.lr = lr_at(cfg, epoch)
        order = rng.permutation(train_idx)
        loss_sum = rank_sum = reg_sum = 0.0
        used = skipped = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            y = targets[batch]
            if not np.any((y.sum(axis=1) > 0) & (y.sum(axis=1) < y.shape[1])):
                skipped += len(batch)
                continue
            s = model(images[batch])
            parts = total_loss(s, y, cfg.lam, data.table, cfg.reg_mode)
            parts.loss.backward()
            adam_step(params, state)
            loss_sum += parts.loss.item() * parts.used
            rank_sum += parts.rank * parts.used
            reg_sum += parts.reg * parts.used
            used += parts.used
            skipped += parts.skipped
        total_skipped += skipped
        row = {
            "epoch": epoch + 1,
            "lr": float(state.lr),
            "train_loss": loss_sum / max(used, 1),
            "rank_loss": rank_sum / max(used, 1),
            "reg_loss": reg_sum / max(used, 1),
            "skipped": skipped,
            "val_map": validation_map(model, data, val_idx),
        }
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row, model)
        log.info("epoch %d lr %.2e loss %.4f val_map %.4f", row["epoch"], row["lr"], row["train_loss"], row["val_map"])
    result = TrainResult(model, rows, skipped=total_skipped)
    if out_dir is not None:
        result.out_dir = write_run(cfg, data, result, out_dir)
    return result


def validation_map(model, data, val_idx):
    if len(val_idx) == 0:
        return float("nan")
    seen = data.table.seen_ids
    scores = model.score_images(data.train_images[val_idx], data.table, seen)
    gt = data.train_labels[val_idx][:, seen]
    try:
        return mean_ap(ScoreMatrix(scores, seen, gt))
    except UsageError:
        return float("nan")


def write_run(cfg, data, result, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.json")
    info = {"dataset_checksum": dataset_checksum(data), "skipped_samples": result.skipped}
    (out_dir / "run.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    _write_log(out_dir / "loss_log.csv", result.log)
    result.model.save(out_dir / "checkpoint.gbet")
    return out_dir


def protocol_ids(table, protocol):
    if protocol == "zsl":
        return table.unseen_ids
    if protocol == "gzsl":
        return table.all_ids
    raise UsageError(f"unknown protocol {protocol!r}; expected 'zsl' or 'gzsl'")


def score_matrix(model, data, protocol):
    ids = protocol_ids(data.table, protocol)
    if len(ids) == 0:
        raise UsageError(f"protocol {protocol!r} has no labels in this dataset")
    scores = model.score_images(data.test_images, data.table, ids)
    return ScoreMatrix(scores, ids, data.test_labels[:, ids])


def evaluate(model, data, protocol, ks=(3, 5), out_dir=None):
    """Report rows (one per ``k``) of top-K P/R/F1 and mAP on the test split."""
    m = score_matrix(model, data, protocol)
    rows = report_rows(m, protocol, ks)
    if out_dir is not None:
        write_report(rows, out_dir, protocol)
    return rows


def load_model(cfg, checkpoint):
    return GBEModel(cfg).load(checkpoint)


def shuffle_baseline(gt, draws=200, seed=0):
    """Mean and std of mAP under uniformly random scores for the given ground truth."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 17]))
    gt = np.asarray(gt)
    ids = np.arange(gt.shape[1])
    vals = [mean_ap(ScoreMatrix(rng.random(gt.shape), ids, gt)) for _ in range(draws)]
    return float(np.mean(vals)), float(np.std(vals))


def benchmark_for(cfg, **overrides):
    raw = {"seed": cfg.seed, "d_w": cfg.d_w, "image_size": cfg.image_size}
    raw.update(cfg.benchmark)
    raw.update(overrides)
    return BenchmarkSpec.from_dict(raw)


def train_and_evaluate(cfg, data=None, out_dir=None, protocols=("zsl", "gzsl")):
    data = gen_dataset(benchmark_for(cfg)) if data is None else data
    result = train(cfg, data, out_dir)
    reports = {p: evaluate(result.model, data, p, cfg.ks, out_dir) for p in protocols}
    return result, reports


def sweep(cfg, grid, data=None, out_dir=None):
    """Train and evaluate every point of ``grid`` (field name -> values)."""
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise UsageError("sweep grid must be nonempty")
    keys = sorted(grid)
    rows = []
    for values in itertools.product(*(grid[k] for k in keys)):
        point = dict(zip(keys, values))
        run_cfg = cfg.replace(**point)
        sub = None if out_dir is None else Path(out_dir) / "_".join(f"{k}={v}" for k, v in point.items())
        result, reports = train_and_evaluate(run_cfg, data, sub, protocols=("zsl",))
        zsl = reports["zsl"][0]
        rows.append({**point, "unseen_map": zsl["map"], "final_loss": result.log[-1]["train_loss"] if result.log else float("nan")})
    if out_dir is not None:
        _write_rows(Path(out_dir) / "sweep.csv", rows)
    return rows


def ablate(cfg, data=None, out_dir=None, variants=None):
    """Train/evaluate each ablation row; returns one summary row per variant."""
    variants = list(ABLATION_ROWS) if variants is None else variants
    rows = []
    for name in variants:
        mlfef, lid, gem, gla = ABLATION_ROWS[name]
        run_cfg = cfg.replace(mlfef=mlfef, lid=lid, gem=gem, gla=gla)
        sub = None if out_dir is None else Path(out_dir) / name
        _, reports = train_and_evaluate(run_cfg, data, sub)
        rows.append(
            {
                "variant": name,
                "mlfef": int(mlfef),
                "lid": int(lid),
                "gem": int(gem),
                "gla": int(gla),
                "zsl_map": reports["zsl"][0]["map"],
                "gzsl_map": reports["gzsl"][0]["map"],
            }
        )
    if out_dir is not None:
        _write_rows(Path(out_dir) / "ablation.csv", rows)
        (Path(out_dir) / "ablation.md").write_text(ablation_table(rows))
    return rows


def ablation_table(rows):
    """Markdown table laid out like the module-contribution table: one column per variant."""
    names = [r["variant"] for r in rows]
    lines = ["| | " + " | ".join(names) + " |", "|---|" + "---|" * len(names)]
    for key, label in (("mlfef", "ML-FEF"), ("lid", "LID"), ("gem", "GEM"), ("gla", "GLA graph")):
        lines.append(f"| {label} | " + " | ".join("x" if r[key] else "" for r in rows) + " |")
    for key, label in (("zsl_map", "mAP ZSL"), ("gzsl_map", "mAP GZSL")):
        lines.append(f"| {label} | " + " | ".join(f"{100 * r[key]:.1f}" for r in rows) + " |")
    return "\n".join(lines) + "\n"


def _write_rows(path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
