"""Full model: dual-path backbone -> memory embedding -> query decoder
-> prediction heads. Parameter names start with "backbone." for every
backbone weight, which is what the optimizer's learning-rate grouping
keys on."""

import numpy as np

from .backbone import DualPathBackbone
from .decoder import MemoryEmbed, QueryDecoder, group_proposals
from .heads import PredictionHeads
from .nn import Module
from .tensor import Tensor


class VOISModel(Module):
    def __init__(self, backbone_cfg, decoder_cfg, rng, mask_dim=16):
        backbone_cfg.validate()
        decoder_cfg.validate()
        t = backbone_cfg.video_size[0]
        self.backbone = DualPathBackbone(backbone_cfg, rng)
        self.memory = MemoryEmbed(rng, 8 * backbone_cfg.C, decoder_cfg.hidden_dim)
        self.decoder = QueryDecoder(decoder_cfg, t, rng)
        self.heads = PredictionHeads(rng, decoder_cfg.hidden_dim, backbone_cfg.C, mask_dim)
        self.backbone_cfg = backbone_cfg
        self.decoder_cfg = decoder_cfg
        self.mask_dim = mask_dim

    def forward(self, video, image):
        """video [T, H, W, 3] float in [-1, 1], image [H_i, W_i, 3] ->
        Prediction (class logits, boxes, quarter-resolution mask logits)."""
        f1, f2, f3, f4 = self.backbone(video, image)
        memory = self.memory(f4)
        decoded = self.decoder(memory)
        proposals = group_proposals(decoded, self.decoder_cfg.n, self.decoder.t)
        return self.heads(proposals, f4, (f1, f2, f3))

    def state_arrays(self):
        """(name, ndarray) pairs for checkpointing, insertion order."""
        return [(name, p.data) for name, p in self.named_parameters()]

    def load_state_arrays(self, arrays):
        """Load a {name: ndarray} mapping; names and shapes must match."""
        params = dict(self.named_parameters())
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
        for name, value in arrays.items():
            p = params[name]
            if p.data.shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} != expected {p.data.shape}")
            p.data = value.astype(p.data.dtype)


def parameter_count(model):
    return int(sum(p.data.size for _, p in model.named_parameters()))


def normalize_frames(frames_uint8):
    """uint8 RGB -> float in [-1, 1] (scale to [0,1], shift, scale)."""
    return (np.asarray(frames_uint8, dtype=np.float64) / 255.0 - 0.5) / 0.5


def preprocess(video_uint8, target_uint8):
    """Numpy preprocessing to model-input Tensors (no grad needed)."""
    return Tensor(normalize_frames(video_uint8)), Tensor(normalize_frames(target_uint8))
