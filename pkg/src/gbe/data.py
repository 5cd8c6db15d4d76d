"""Synthetic multi-label zero-shot benchmark.

Class appearance is a fixed linear function of the class embedding, shared
by seen and unseen classes, so a model that learns the image-to-embedding
relation on seen classes can in principle rank unseen ones.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from gbe import io
from gbe.errors import ConfigError, CorruptFileError
from gbe.objective import ClassEmbeddingTable

BACKGROUND = 0.5
FILES = {"images": "images.gbet", "labels": "labels.gbet", "embeddings": "embeddings.gbet"}


@dataclass
class BenchmarkSpec:
    seed: int = 0
    num_seen: int = 40
    num_unseen: int = 10
    d_w: int = 16
    image_size: int = 32
    grid: int = 4
    max_labels_per_image: int = 4
    n_train: int = 2000
    n_test: int = 400
    noise_std: float = 0.05
    proto_scale: float = 0.3

    @property
    def cell(self):
        return self.image_size // self.grid

    @property
    def num_classes(self):
        return self.num_seen + self.num_unseen

    def validate(self):
        bad = []
        if self.d_w < 4:
            bad.append("d_w: must be at least 4")
        for name in ("num_seen", "num_unseen", "n_train", "n_test", "max_labels_per_image", "grid"):
            if getattr(self, name) < 1:
                bad.append(f"{name}: must be positive")
        if self.image_size % max(self.grid, 1):
            bad.append("image_size: must be divisible by grid")
        if self.max_labels_per_image > self.grid * self.grid:
            bad.append("max_labels_per_image: more labels than grid cells")
        if self.max_labels_per_image > self.num_seen:
            bad.append("max_labels_per_image: more labels than seen classes")
        if self.noise_std < 0:
            bad.append("noise_std: must be non-negative")
        if bad:
            raise ConfigError("invalid benchmark spec:\n  " + "\n  ".join(bad), fields=[b.split(":")[0] for b in bad])
        return self

    @classmethod
    def from_dict(cls, raw):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown benchmark field(s): {', '.join(unknown)}", fields=unknown)
        return cls(**raw)


@dataclass
class Dataset:
    images: np.ndarray  # N x 3 x S x S, train rows first
    labels: np.ndarray  # N x |C|
    table: ClassEmbeddingTable
    spec: BenchmarkSpec
    n_train: int
    manifest: dict = field(default_factory=dict)

    @property
    def train_images(self):
        return self.images[: self.n_train]

    @property
    def train_labels(self):
        return self.labels[: self.n_train]

    @property
    def test_images(self):
        return self.images[self.n_train:]

    @property
    def test_labels(self):
        return self.labels[self.n_train:]


def _stream(seed, purpose):
    return np.random.default_rng(np.random.SeedSequence([int(seed), purpose]))


def gen_embeddings(spec):
    """Unit-norm Gaussian class vectors; seen ids first, then unseen."""
    if spec.d_w < 4:
        raise ConfigError("d_w must be at least 4")
    rng = _stream(spec.seed, 0)
    vecs = np.empty((spec.num_classes, spec.d_w))
    i = 0
    while i < spec.num_classes:
        v = rng.standard_normal(spec.d_w)
        v /= np.linalg.norm(v)
        # collision guard: redraw near-duplicates
        if i and np.max(np.abs(vecs[:i] @ v)) >= 0.99:
            continue
        vecs[i] = v
        i += 1
    return ClassEmbeddingTable(
        vecs.astype(np.float32),
        np.arange(spec.num_seen),
        np.arange(spec.num_seen, spec.num_classes),
    )


def projection_matrix(spec):
    """Fixed embedding-to-appearance map shared by every class."""
    rng = _stream(spec.seed, 1)
    return rng.standard_normal((3 * spec.cell * spec.cell, spec.d_w)) * spec.proto_scale


def class_prototype(embedding, spec, proj=None):
    proj = projection_matrix(spec) if proj is None else proj
    flat = np.clip(proj @ np.asarray(embedding, dtype=np.float64) + BACKGROUND, 0.0, 1.0)
    return flat.reshape(3, spec.cell, spec.cell).astype(np.float32)


def _compose(rng, classes, protos, spec):
    img = np.full((3, spec.image_size, spec.image_size), BACKGROUND)
    cells = rng.choice(spec.grid * spec.grid, size=len(classes), replace=False)
    p = spec.cell
    for c, cell in zip(classes, cells):
        r, q = divmod(int(cell), spec.grid)
        img[:, r * p:(r + 1) * p, q * p:(q + 1) * p] = protos[c]
    if spec.noise_std > 0:
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def gen_dataset(spec):
    """Deterministic train/test images and labels for ``spec``."""
    spec.validate()
    table = gen_embeddings(spec)
    proj = projection_matrix(spec)
    protos = np.stack([class_prototype(e, spec, proj) for e in table.vectors])
    rng = _stream(spec.seed, 2)
    total = spec.n_train + spec.n_test
    images = np.empty((total, 3, spec.image_size, spec.image_size), dtype=np.float32)
    labels = np.zeros((total, spec.num_classes), dtype=np.float32)
    all_ids = table.all_ids
    for i in range(total):
        count = int(rng.integers(1, spec.max_labels_per_image + 1))
        if i < spec.n_train:
            classes = rng.choice(table.seen_ids, size=count, replace=False)
        else:
            u = int(rng.choice(table.unseen_ids))
            rest = rng.choice(np.setdiff1d(all_ids, [u]), size=count - 1, replace=False)
            classes = np.concatenate([[u], rest]).astype(np.int64)
        images[i] = _compose(rng, classes, protos, spec)
        labels[i, classes] = 1.0
    return Dataset(images, labels, table, spec, spec.n_train)


def integrity_violations(d):
    """Rows breaking the zero-shot split: unseen mass in train, no unseen in test."""
    unseen = d.table.unseen_ids
    train_bad = np.flatnonzero(d.train_labels[:, unseen].sum(axis=1) > 0)
    test_bad = np.flatnonzero(d.test_labels[:, unseen].sum(axis=1) < 1)
    return train_bad, test_bad + d.n_train


# --- serialization ---------------------------------------------------------


def _combined_checksum(file_sums):
    h = hashlib.sha256()
    for key in sorted(file_sums):
        h.update(f"{key}:{file_sums[key]}\n".encode())
    return h.hexdigest()


def write_dataset(d, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    io.save_tensor(directory / FILES["images"], d.images)
    io.save_tensor(directory / FILES["labels"], d.labels)
    io.save_tensor(directory / FILES["embeddings"], d.table.vectors)
    sums = {key: io.file_checksum(directory / name) for key, name in FILES.items()}
    manifest = {
        "format": 1,
        "spec": dataclasses.asdict(d.spec),
        "n_train": int(d.n_train),
        "n_test": int(len(d.images) - d.n_train),
        "seen_ids": [int(i) for i in d.table.seen_ids],
        "unseen_ids": [int(i) for i in d.table.unseen_ids],
        "files": {key: {"name": FILES[key], "sha256": sums[key]} for key in FILES},
        "checksum": _combined_checksum(sums),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    d.manifest = manifest
    return manifest


def read_dataset(directory):
    directory = Path(directory)
    mpath = directory / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except OSError as exc:
        raise CorruptFileError(mpath, f"cannot read manifest ({exc})") from exc
    except ValueError as exc:
        raise CorruptFileError(mpath, f"manifest is not valid JSON ({exc})") from exc
    try:
        files = manifest["files"]
        arrays, sums = {}, {}
        for key in FILES:
            path = directory / files[key]["name"]
            if not path.exists():
                raise CorruptFileError(path, "missing")
            sums[key] = io.file_checksum(path)
            if sums[key] != files[key]["sha256"]:
                raise CorruptFileError(path, "checksum mismatch")
            arrays[key] = io.load_tensor(path)
        if _combined_checksum(sums) != manifest["checksum"]:
            raise CorruptFileError(mpath, "dataset checksum mismatch")
        spec = BenchmarkSpec.from_dict(manifest["spec"])
        table = ClassEmbeddingTable(arrays["embeddings"], manifest["seen_ids"], manifest["unseen_ids"])
        n_train = int(manifest["n_train"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CorruptFileError(mpath, f"malformed manifest ({exc})") from exc
    images, labels = arrays["images"], arrays["labels"]
    if len(images) != len(labels) or len(images) != n_train + int(manifest["n_test"]):
        raise CorruptFileError(mpath, "row counts of images and labels disagree")
    return Dataset(images, labels, table, spec, n_train, manifest)


def dataset_checksum(d):
    if d.manifest.get("checksum"):
        return d.manifest["checksum"]
    h = hashlib.sha256()
    for arr in (d.images, d.labels, d.table.vectors):
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()


# --- transfer probe --------------------------------------------------------


def _salient_cell_features(img, spec):
    p, g = spec.cell, spec.grid
    cells = img.reshape(3, g, p, g, p).transpose(1, 3, 0, 2, 4).reshape(g * g, 3, p, p)
    idx = int(np.argmax(np.abs(cells - BACKGROUND).mean(axis=(1, 2, 3))))
    cell = cells[idx]
    pooled = cell.reshape(3, p // 2, 2, p // 2, 2).mean(axis=(2, 4))
    return pooled.reshape(-1)


def transfer_probe(d, top=3, alpha=1.0):
    """Fraction of single-label test images whose unseen class ranks in ``top``.

    A ridge regression from the most salient average-pooled cell to the class
    embedding is fit on single-label training images (seen classes only);
    test images are ranked by cosine against the unseen embeddings.
    """
    spec = d.spec
    train = np.flatnonzero(d.train_labels.sum(axis=1) == 1)
    x = np.stack([_salient_cell_features(d.train_images[i], spec) for i in train])
    y = d.table.vectors[np.argmax(d.train_labels[train], axis=1)]
    mu = x.mean(axis=0)
    xc = x - mu
    w = np.linalg.solve(xc.T @ xc + alpha * np.eye(xc.shape[1]), xc.T @ y)
    test = np.flatnonzero(d.test_labels.sum(axis=1) == 1)
    unseen = d.table.unseen_ids
    emb = d.table.vectors[unseen]
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    hits = 0
    for i in test:
        pred = (_salient_cell_features(d.test_images[i], spec) - mu) @ w
        sims = emb @ pred
        truth = int(np.flatnonzero(d.test_labels[i][unseen])[0])
        rank = int(np.sum(sims > sims[truth]))
        hits += rank < top
    return hits / max(len(test), 1)
