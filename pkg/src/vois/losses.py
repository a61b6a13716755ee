"""Sequence matching and the three-part training loss.

Matching runs detached: per (proposal, ground-truth) pair the cost
averages -prob(relevant) + weighted box terms over the frames where the
ground truth is present, and the Hungarian solver picks the injective
assignment of min(n, M) pairs with least total cost. The differentiable
loss then combines weighted cross-entropy (background down-weighted),
box L1 + GIoU, and Dice + focal mask terms on the matched pairs.

Ground-truth masks enter the mask terms downsampled to the logit
resolution by block averaging, so targets are soft in [0, 1]; the focal
term generalizes accordingly and reduces to the standard form for hard
targets.
"""

from dataclasses import dataclass

import numpy as np
import scipy.optimize

from . import tensor as T
from .tensor import Tensor


@dataclass
class LossWeights:
    class_weight: float = 1.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0
    dice_weight: float = 1.0
    focal_weight: float = 2.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    background_weight: float = 0.1


@dataclass
class GroundTruthTrack:
    """One relevant object: full-resolution per-frame masks and derived
    boxes. Absent frames carry an all-zero mask and a zero box."""

    masks: np.ndarray       # [T, H, W] binary
    boxes: np.ndarray       # [T, 4] normalized (cx, cy, w, h), zeros when absent
    presence: np.ndarray    # [T] bool

    @property
    def first_frame(self):
        return int(np.flatnonzero(self.presence)[0])

    @property
    def last_frame(self):
        return int(np.flatnonzero(self.presence)[-1])


def track_from_masks(masks):
    """Build a GroundTruthTrack from [T, H, W] binary masks; boxes are the
    tight bounds of each nonempty frame."""
    t, h, w = masks.shape
    presence = masks.any(axis=(1, 2))
    boxes = np.zeros((t, 4))
    for i in np.flatnonzero(presence):
        ys, xs = np.nonzero(masks[i])
        y0, y1 = ys.min(), ys.max() + 1
        x0, x1 = xs.min(), xs.max() + 1
        boxes[i] = ((x0 + x1) / (2 * w), (y0 + y1) / (2 * h), (x1 - x0) / w, (y1 - y0) / h)
    return GroundTruthTrack(masks=masks.astype(np.uint8), boxes=boxes, presence=presence)


# -- differentiable box terms ------------------------------------------


def box_corners(boxes):
    """(cx, cy, w, h) -> (x0, y0, x1, y1), each [K]."""
    cx, cy, w, h = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    half_w, half_h = w * 0.5, h * 0.5
    return cx - half_w, cy - half_h, cx + half_w, cy + half_h


def box_giou(a, b, eps=1e-8):
    """Generalized IoU per row of two [K, 4] (cx, cy, w, h) tensors.

    maximum/minimum split gradients at ties, which makes the gradient of
    (1 - GIoU) exactly zero when a == b.
    """
    ax0, ay0, ax1, ay1 = box_corners(a)
    bx0, by0, bx1, by1 = box_corners(b)
    zero = Tensor(np.zeros(a.shape[0], dtype=a.data.dtype))
    floor = Tensor(np.full(a.shape[0], eps, dtype=a.data.dtype))
    iw = T.maximum(T.minimum(ax1, bx1) - T.maximum(ax0, bx0), zero)
    ih = T.maximum(T.minimum(ay1, by1) - T.maximum(ay0, by0), zero)
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    # max-guard (not +eps) so the division is exact for non-degenerate
    # boxes and the loss gradient vanishes exactly at identical boxes
    iou = inter / T.maximum(union, floor)
    cw = T.maximum(ax1, bx1) - T.minimum(ax0, bx0)
    ch = T.maximum(ay1, by1) - T.minimum(ay0, by0)
    enclosure = cw * ch
    return iou - (enclosure - union) / T.maximum(enclosure, floor)


def box_giou_np(a, b, eps=1e-8):
    """Plain-array GIoU for the detached matching cost; same formula."""
    ax0, ay0 = a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2
    ax1, ay1 = a[:, 0] + a[:, 2] / 2, a[:, 1] + a[:, 3] / 2
    bx0, by0 = b[:, 0] - b[:, 2] / 2, b[:, 1] - b[:, 3] / 2
    bx1, by1 = b[:, 0] + b[:, 2] / 2, b[:, 1] + b[:, 3] / 2
    iw = np.maximum(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0.0)
    ih = np.maximum(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0.0)
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    iou = inter / np.maximum(union, eps)
    enclosure = (np.maximum(ax1, bx1) - np.minimum(ax0, bx0)) * (np.maximum(ay1, by1) - np.minimum(ay0, by0))
    return iou - (enclosure - union) / np.maximum(enclosure, eps)


# -- mask terms ---------------------------------------------------------


def dice_loss(probs, targets, eps=1e-8):
    """1 - 2*sum(p*t)/(sum(p)+sum(t)+eps) per row of [K, pixels]; mean over rows."""
    num = T.sum_(probs * targets, axis=1) * 2.0
    den = T.sum_(probs, axis=1) + T.sum_(targets, axis=1) + eps
    return T.mean(1.0 - num / den)


def focal_loss(logits, targets, gamma=2.0, alpha=0.25):
    """Focal BCE generalized to soft targets in [0, 1], mean over elements.

    weight = alpha*t + (1-alpha)*(1-t), modulation = |p - t|^gamma; for
    t in {0, 1} this is exactly the standard alpha-balanced focal loss.
    """
    p = T.sigmoid(logits)
    bce = -(targets * T.log_sigmoid(logits) + (1.0 - targets) * T.log_sigmoid(-logits))
    weight = targets * alpha + (1.0 - targets) * (1.0 - alpha)
    modulation = T.abs_(p - targets) ** gamma
    return T.mean(weight * modulation * bce)


def downsample_mask(mask, factor):
    """[..., H, W] -> [..., H/f, W/f] by block averaging (soft values)."""
    h, w = mask.shape[-2:]
    if h % factor or w % factor:
        raise T.ShapeError(f"mask extents {h}x{w} not divisible by {factor}")
    shaped = mask.reshape(mask.shape[:-2] + (h // factor, factor, w // factor, factor))
    return shaped.astype(np.float64).mean(axis=(-3, -1))


# -- matching -----------------------------------------------------------


def matching_cost(class_probs, boxes, gts, weights):
    """Detached [n, M] cost matrix.

    cost[j, i] = mean over gt i's present frames of
      -prob_relevant[j, t] + l1_weight * |box - gt|_1 + giou_weight * (1 - GIoU)
    """
    n = class_probs.shape[0]
    cost = np.zeros((n, len(gts)))
    for i, gt in enumerate(gts):
        frames = np.flatnonzero(gt.presence)
        gt_boxes = gt.boxes[frames]
        for j in range(n):
            l1 = np.abs(boxes[j, frames] - gt_boxes).sum(axis=1)
            giou = box_giou_np(boxes[j, frames], gt_boxes)
            per_frame = (-class_probs[j, frames]
                         + weights.l1_weight * l1
                         + weights.giou_weight * (1.0 - giou))
            cost[j, i] = per_frame.mean()
    return cost


def hungarian(costs):
    """Minimum-cost injective assignment of min(n, M) pairs.

    Returns a list of (row, column) pairs sorted by row. Rectangular
    matrices are fine; NaN costs are an error.
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.size and np.isnan(costs).any():
        raise ValueError("NaN entries in assignment cost matrix")
    if 0 in costs.shape:
        return []
    rows, cols = scipy.optimize.linear_sum_assignment(costs)
    return sorted(zip(rows.tolist(), cols.tolist()))


def match(prediction, gts, weights):
    """Run detached matching for one sample; returns assignment pairs."""
    with T.no_grad():
        probs = T.softmax(prediction.class_logits, axis=-1).numpy()[:, :, 0]
    return hungarian(matching_cost(probs, prediction.boxes.numpy(), gts, weights))


# -- the Hungarian loss -------------------------------------------------


def hungarian_loss(prediction, gts, assignment, weights):
    """Weighted sum of classification, box, and mask terms.

    Returns a dict of scalar Tensors: total plus the unweighted value of
    each term. Box and mask terms average over all matched present
    (pair, frame) slots; absent frames of a matched ground truth
    contribute only background classification.
    """
    n, t, _ = prediction.class_logits.shape
    dtype = prediction.class_logits.data.dtype

    target_rel = np.zeros((n, t), dtype=dtype)
    for j, i in assignment:
        target_rel[j, gts[i].presence] = 1.0

    lsm = T.log_softmax(prediction.class_logits, axis=-1)
    rel = Tensor(target_rel)
    ce = -(rel * lsm[:, :, 0] + (1.0 - rel) * lsm[:, :, 1])
    ce_w = target_rel + weights.background_weight * (1.0 - target_rel)
    class_term = T.sum_(ce * Tensor(ce_w)) / float(ce_w.sum())

    matched_slots = [(j, i, fr) for j, i in assignment
                     for fr in np.flatnonzero(gts[i].presence)]
    if matched_slots:
        mh, mw = prediction.mask_logits.shape[2:]
        gt_h = gts[0].masks.shape[1]
        factor = gt_h // mh

        box_rows, logit_rows, gt_boxes, gt_masks = [], [], [], []
        for j, i, fr in matched_slots:
            box_rows.append(prediction.boxes[j, fr].reshape(1, 4))
            logit_rows.append(prediction.mask_logits[j, fr].reshape(1, mh * mw))
            gt_boxes.append(gts[i].boxes[fr])
            gt_masks.append(downsample_mask(gts[i].masks[fr], factor).reshape(-1))
        pred_boxes = T.concat(box_rows, axis=0)
        pred_logits = T.concat(logit_rows, axis=0)
        gt_boxes = Tensor(np.stack(gt_boxes).astype(dtype))
        gt_masks = Tensor(np.stack(gt_masks).astype(dtype))

        l1_term = T.mean(T.sum_(T.abs_(pred_boxes - gt_boxes), axis=1))
        giou_term = T.mean(1.0 - box_giou(pred_boxes, gt_boxes))
        dice_term = dice_loss(T.sigmoid(pred_logits), gt_masks)
        focal_term = focal_loss(pred_logits, gt_masks,
                                weights.focal_gamma, weights.focal_alpha)
    else:
        zero = Tensor(np.zeros(()))
        l1_term = giou_term = dice_term = focal_term = zero

    total = (weights.class_weight * class_term
             + weights.l1_weight * l1_term
             + weights.giou_weight * giou_term
             + weights.dice_weight * dice_term
             + weights.focal_weight * focal_term)
    return {"total": total, "class": class_term, "l1": l1_term,
            "giou": giou_term, "dice": dice_term, "focal": focal_term}
