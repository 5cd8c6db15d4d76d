"""The assembled network: backbone -> fusion -> local/global branches -> graph."""

import numpy as np

from gbe import io
from gbe.backbone import Backbone
from gbe.fusion import FusionMLFEF
from gbe.gem import GEM
from gbe.graph import GLAGraph
from gbe.lid import LID
from gbe.nn import Module
from gbe.objective import class_scores
from gbe.tensor import Tensor, no_grad


class GBEModel(Module):
    """Image batch ``B x 3 x S x S`` to semantic vector groups ``B x n x d_w``.

    Ablation switches (``cfg.mlfef`` etc.) swap a component for its bypass;
    all parameters exist in every variant so checkpoints are interchangeable.
    """

    def __init__(self, cfg, rng=None):
        rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 7])) if rng is None else rng
        slope = cfg.leaky_slope
        self.backbone = Backbone(rng, cfg.c1, cfg.c2, cfg.c3, slope)
        self.fusion = FusionMLFEF(rng, cfg.c1, cfg.c2, cfg.c3, cfg.fused_width, slope)
        self.lid = LID(rng, cfg.n_groups, cfg.d_w, cfg.attention_scale, cfg.per_group_weights, slope)
        self.gem = GEM(rng, cfg.c3, cfg.d_w, cfg.gate_sigmoid, slope)
        out_slope = slope if cfg.output_slope is None else cfg.output_slope
        self.graph = GLAGraph(rng, cfg.n_groups, cfg.d_w, cfg.learnable_affinity, out_slope)
        self.switches = {name: bool(getattr(cfg, name)) for name in ("mlfef", "lid", "gem", "gla")}
        self.pixel_mean = float(cfg.pixel_mean)

    def __call__(self, images):
        x = images if isinstance(images, Tensor) else Tensor(images)
        if self.pixel_mean:
            x = x - self.pixel_mean
        pyramid = self.backbone(x)
        fused = self.fusion(pyramid, enabled=self.switches["mlfef"])
        locals_ = self.lid(fused, enabled=self.switches["lid"])
        gf = self.gem(pyramid.f_lo, enabled=self.switches["gem"])
        return self.graph(locals_, gf, enabled=self.switches["gla"])

    def score_images(self, images, table, ids, batch_size=100):
        """Class scores ``N x |ids|`` without recording gradients."""
        out = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                s = self(images[start:start + batch_size])
                out.append(class_scores(s, table, ids).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, len(ids)), dtype=np.float32)

    def save(self, path):
        return io.save_checkpoint(path, self.state_dict())

    def load(self, path):
        self.load_state_dict(io.load_checkpoint(path))
        return self
