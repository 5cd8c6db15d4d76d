"""Run configuration: model shape, optimizer, schedule, ablation switches."""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from gbe.errors import ConfigError

REG_MODES = ("within_row", "across_groups")
ABLATION_SWITCHES = ("mlfef", "lid", "gem", "gla")


@dataclass
class RunConfig:
    # model
    n_groups: int = 8
    d_w: int = 16
    c1: int = 32
    c2: int = 64
    c3: int = 128
    image_size: int = 32
    fused_channels: int | None = None
    attention_scale: bool = True
    gate_sigmoid: bool = True
    reg_mode: str = "within_row"
    per_group_weights: bool = False
    learnable_affinity: bool = False
    leaky_slope: float = 0.01
    output_slope: float | None = None  # slope of the graph output activation; None -> leaky_slope
    pixel_mean: float = 0.5  # subtracted from images before the backbone
    # optimizer
    lr: float = 1e-3
    weight_decay: float = 4e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # schedule
    epochs: int = 20
    decay_epochs: tuple = (7, 14)
    decay_factor: float = 0.1
    batch_size: int = 32
    lam: float = 0.1
    seed: int = 0
    val_fraction: float = 0.1
    ks: tuple = (3, 5)
    # io
    dataset: str = "data"
    out_dir: str = "runs/default"
    # ablation switches
    mlfef: bool = True
    lid: bool = True
    gem: bool = True
    gla: bool = True
    # consumed by gen-data only
    benchmark: dict = field(default_factory=dict)

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        self.ks = tuple(int(k) for k in self.ks)

    @property
    def fused_width(self):
        return self.n_groups * self.d_w

    def violations(self):
        bad = []

        def check(ok, name, msg):
            if not ok:
                bad.append(f"{name}: {msg}")

        for name in ("n_groups", "d_w", "c1", "c2", "c3", "batch_size"):
            check(int(getattr(self, name)) >= 1, name, "must be a positive integer")
        check(self.image_size >= 8 and self.image_size % 8 == 0, "image_size", "must be a positive multiple of 8")
        check(
            self.fused_channels is None or self.fused_channels == self.fused_width,
            "fused_channels",
            f"must equal n_groups * d_w = {self.fused_width}",
        )
        check(self.reg_mode in REG_MODES, "reg_mode", f"must be one of {REG_MODES}")
        check(0.0 < self.leaky_slope < 1.0, "leaky_slope", "must lie in (0, 1)")
        check(self.output_slope is None or 0.0 < self.output_slope < 1.0, "output_slope", "must lie in (0, 1)")
        check(self.lr > 0, "lr", "must be positive")
        check(self.weight_decay >= 0, "weight_decay", "must be non-negative")
        check(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "betas", "must lie in [0, 1)")
        check(self.epochs >= 0, "epochs", "must be non-negative")
        check(
            all(0 < e < self.epochs for e in self.decay_epochs) or self.epochs == 0,
            "decay_epochs",
            "every decay epoch must be positive and below the total epoch count",
        )
        check(0 < self.decay_factor <= 1, "decay_factor", "must lie in (0, 1]")
        check(0.0 <= self.lam <= 1.0, "lam", "must lie in [0, 1]")
        check(0.0 <= self.val_fraction < 1.0, "val_fraction", "must lie in [0, 1)")
        check(len(self.ks) > 0 and all(k > 0 for k in self.ks), "ks", "must be a nonempty list of positive ints")
        return bad

    def validate(self):
        bad = self.violations()
        if bad:
            raise ConfigError("invalid config:\n  " + "\n  ".join(bad), fields=[b.split(":")[0] for b in bad])
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["decay_epochs"] = list(self.decay_epochs)
        d["ks"] = list(self.ks)
        return d

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        if "lambda" in raw:
            raw["lam"] = raw.pop("lambda")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}", fields=unknown)
        return cls(**raw)

    @classmethod
    def load(cls, path):
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}", fields=["config"]) from exc
        return cls.from_dict(raw)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def tiny_config(**changes):
    """Smallest useful model, for gradient checks and fast tests."""
    base = RunConfig(n_groups=2, d_w=4, c1=4, c2=6, c3=8, image_size=8, batch_size=4, epochs=1, decay_epochs=())
    return base.replace(**changes)
