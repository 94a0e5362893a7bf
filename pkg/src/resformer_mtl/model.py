"""The complete multi-task network."""
from __future__ import annotations

import numpy as np

from .backend import Tensor, as_tensor
from .config import ModelConfig
from .decoder import Decoder
from .encoder import Encoder
from .heads import ClassificationHead, MtlOutput, SegmentationHead
from .nn import Module


class ResFormerMTL(Module):
    """ResFormer encoder, DFE-refined decoder, classification and segmentation heads."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator = None):
        super().__init__()
        if rng is None:
            rng = np.random.Generator(np.random.PCG64(cfg.init_seed))
        self.cfg = cfg
        ch = cfg.channels
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        self.cls_head = ClassificationHead(ch[2], ch[3], cfg.cls_hidden, cfg.n_classes, rng)
        self.seg_head = SegmentationHead(self.decoder.out_channels, cfg.n_classes, rng)

    def forward(self, image) -> MtlOutput:
        image = as_tensor(image)
        features = self.encoder(image)
        logits = self.cls_head(features[2], features[3])
        probs = self.seg_head(self.decoder(features))
        return MtlOutput(logits, probs)


def dfe_parameter_count(model: ResFormerMTL) -> int:
    return int(sum(p.size for dfe in model.decoder.dfe for p in dfe.parameters()))
