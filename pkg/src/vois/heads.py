"""Per-proposal prediction heads and hypothesis extraction.

The class head is a single linear map to 2 logits (relevant,
background); the box head a 3-layer MLP squashed through sigmoid into
normalized (cx, cy, w, h). The mask head correlates each object feature
with a keyed stage-4 feature map to get a per-location attention score,
concatenates that score map with the stage-4 channels, and walks back up
the feature pyramid: three nearest-neighbour x2 upsamplings, each
concatenating the matching backbone level (f3, f2, f1) and mixing
through a 1x1 linear + GELU, ending in a single-channel logit map at
stride 4. Frames are processed one at a time to bound peak memory.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import ConfigError
from .nn import Linear, Module
from .tensor import Tensor


@dataclass
class Prediction:
    class_logits: "Tensor"  # [n, T, 2]
    boxes: "Tensor"         # [n, T, 4] in [0, 1]
    mask_logits: "Tensor"   # [n, T, H/4, W/4]


@dataclass
class Hypothesis:
    confidence: float
    masks: np.ndarray       # [T, H, W] bool, full resolution
    boxes: np.ndarray       # [T, 4] normalized (cx, cy, w, h)


class PredictionHeads(Module):
    def __init__(self, rng, hidden_dim, c, mask_dim=16):
        self.class_head = Linear(rng, hidden_dim, 2)
        self.box_fc1 = Linear(rng, hidden_dim, hidden_dim)
        self.box_fc2 = Linear(rng, hidden_dim, hidden_dim)
        self.box_fc3 = Linear(rng, hidden_dim, 4)
        self.mask_key = Linear(rng, 8 * c, hidden_dim)
        # pyramid mixers: channels in = previous width + skip level width
        self.mix1 = Linear(rng, (1 + 8 * c) + 4 * c, mask_dim)
        self.mix2 = Linear(rng, mask_dim + 2 * c, mask_dim)
        self.mix3 = Linear(rng, mask_dim + 1 * c, mask_dim)
        self.mask_out = Linear(rng, mask_dim, 1)
        self.hidden_dim = hidden_dim

    def forward(self, proposals, e, pyramid):
        """proposals [n, T, hidden], e = f4 [T, h32, w32, 8C],
        pyramid = (f1, f2, f3); returns a Prediction."""
        if len(pyramid) != 3:
            raise ConfigError(f"mask head needs exactly the (f1, f2, f3) levels, got {len(pyramid)}")
        f1, f2, f3 = pyramid
        n, t, hidden = proposals.shape

        class_logits = self.class_head(proposals)
        bx = T.relu(self.box_fc1(proposals))
        bx = T.relu(self.box_fc2(bx))
        boxes = T.sigmoid(self.box_fc3(bx))

        keys = self.mask_key(e)  # [T, h32, w32, hidden]
        scale = 1.0 / np.sqrt(self.hidden_dim)
        frame_logits = []
        for fr in range(t):
            # attention score between every proposal and every location
            obj = proposals[:, fr]                      # [n, hidden]
            key = keys[fr]                              # [h, w, hidden]
            h32, w32, _ = key.shape
            score = T.matmul(obj, T.transpose(T.reshape(key, (h32 * w32, hidden)), (1, 0))) * scale
            score = T.reshape(score, (n, h32, w32, 1))
            e_rep = T.broadcast_to(T.reshape(e[fr], (1,) + e.shape[1:]), (n,) + e.shape[1:])
            x = T.concat([score, e_rep], axis=-1)       # [n, h32, w32, 1+8C]
            x = self._mix(T.upsample2x(x), f3[fr], n, self.mix1)
            x = self._mix(T.upsample2x(x), f2[fr], n, self.mix2)
            x = self._mix(T.upsample2x(x), f1[fr], n, self.mix3)
            logit = self.mask_out(x)                    # [n, h4, w4, 1]
            frame_logits.append(T.reshape(logit, (n, 1) + logit.shape[1:3]))
        mask_logits = T.concat(frame_logits, axis=1)    # [n, T, h4, w4]
        return Prediction(class_logits=class_logits, boxes=boxes, mask_logits=mask_logits)

    @staticmethod
    def _mix(x, skip, n, mixer):
        # the upsample can overshoot the skip level by one row/column when
        # an odd extent was padded before merging further down; crop back
        sh, sw = skip.shape[:2]
        if x.shape[1] != sh or x.shape[2] != sw:
            x = x[:, :sh, :sw]
        skip = T.broadcast_to(T.reshape(skip, (1,) + skip.shape), (n,) + skip.shape)
        return T.gelu(mixer(T.concat([x, skip], axis=-1)))


def bilinear_upsample(arr, factor):
    """[..., H, W] -> [..., f*H, f*W] bilinear, half-pixel centers, edges clamped."""
    out = arr
    for axis in (-2, -1):
        n = out.shape[axis]
        src = (np.arange(n * factor) + 0.5) / factor - 0.5
        src = np.clip(src, 0.0, n - 1.0)  # edge clamp before weighting
        lo = np.floor(src).astype(np.int64)
        hi = np.clip(lo + 1, 0, n - 1)
        frac = src - lo
        a = np.take(out, lo, axis=axis)
        b = np.take(out, hi, axis=axis)
        shape = [1] * out.ndim
        shape[axis] = len(src)
        frac = frac.reshape(shape)
        out = a * (1 - frac) + b * frac
    return out


def to_hypotheses(prediction, threshold=0.001):
    """Extract per-proposal hypotheses; masks are thresholded at
    probability 0.5 after bilinear x4 upsampling of the logits
    (logit > 0 is the same cut). Proposals at or below the confidence
    threshold are dropped."""
    with T.no_grad():
        probs = T.softmax(prediction.class_logits, axis=-1).numpy()[:, :, 0]
    confidence = probs.mean(axis=1)
    logits = prediction.mask_logits.numpy()
    boxes = prediction.boxes.numpy()
    out = []
    for j in range(len(confidence)):
        if confidence[j] <= threshold:
            continue
        full = bilinear_upsample(logits[j], 4)
        out.append(Hypothesis(confidence=float(confidence[j]),
                              masks=full > 0.0, boxes=boxes[j].copy()))
    return out
