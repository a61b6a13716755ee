"""Sequence-level evaluation: RLE masks, spatio-temporal IoU, AP/AR over
IoU thresholds, and the seed-comparison significance test.

AP follows the COCO/VIS convention: hypotheses from all videos are
sorted by confidence (ties broken by stable input order), greedily
matched per IoU threshold to the unmatched same-video ground truth with
highest sequence IoU above the threshold, and each threshold's
precision-recall curve is summarized by 101-point interpolation. AR_K
keeps only the top-K hypotheses per video and averages recall over the
same thresholds.
"""

import numpy as np
import scipy.stats

IOU_THRESHOLDS = np.arange(0.50, 1.00, 0.05).round(2)


class MetricsError(ValueError):
    pass


# -- run-length codec ---------------------------------------------------


def rle_encode(mask):
    """Binary [H, W] -> run lengths, row-major, alternating runs starting
    with the zero-count (possibly 0)."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return []
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return runs


def rle_decode(runs, h, w):
    """Run lengths -> binary [H, W]; total run length must be exactly H*W."""
    total = int(sum(runs))
    if total != h * w:
        raise MetricsError(f"RLE decodes to {total} bits, expected {h * w}")
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if value:
            flat[pos:pos + run] = True
        pos += run
        value = not value
    return flat.reshape(h, w)


class MaskSequence:
    """T per-frame binary masks stored as RLE; absent frames are empty."""

    def __init__(self, rles, h, w, t):
        if len(rles) != t:
            raise MetricsError(f"{len(rles)} frames of RLE for clip length {t}")
        self.rles = rles
        self.h, self.w, self.t = h, w, t
        self._decoded = None

    @classmethod
    def from_arrays(cls, masks):
        masks = np.asarray(masks, dtype=bool)
        seq = cls([rle_encode(m) for m in masks], masks.shape[1], masks.shape[2], masks.shape[0])
        seq._decoded = masks
        return seq

    def arrays(self):
        if self._decoded is None:
            self._decoded = np.stack([rle_decode(r, self.h, self.w) for r in self.rles])
        return self._decoded


def sequence_iou(a, b):
    """Sum-over-frames intersection / sum-over-frames union; 0/0 -> 0."""
    if (a.h, a.w, a.t) != (b.h, b.w, b.t):
        raise MetricsError(f"extent mismatch: {(a.h, a.w, a.t)} vs {(b.h, b.w, b.t)}")
    am, bm = a.arrays(), b.arrays()
    inter = np.logical_and(am, bm).sum()
    union = np.logical_or(am, bm).sum()
    return float(inter) / float(union) if union else 0.0


# -- AP / AR ------------------------------------------------------------


def _greedy_match(order, ious, hyp_video, n_gts_per_video, tau):
    """Walk hypotheses in `order`; each takes the unmatched same-video gt
    with highest IoU >= tau (first index on ties). Returns the TP flags in
    walk order and the total number of matched gts."""
    taken = [np.zeros(m, dtype=bool) for m in n_gts_per_video]
    tp = np.zeros(len(order), dtype=bool)
    for rank, j in enumerate(order):
        v = hyp_video[j]
        best, best_iou = -1, 0.0
        for i in range(n_gts_per_video[v]):
            if taken[v][i] or ious[j][i] < tau:
                continue
            if best < 0 or ious[j][i] > best_iou:
                best, best_iou = i, ious[j][i]
        if best >= 0:
            taken[v][best] = True
            tp[rank] = True
    return tp, int(sum(t.sum() for t in taken))


def _interpolated_ap(tp, total_gts):
    """101-point interpolated area under the precision-recall curve."""
    if len(tp) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(tp) + 1)
    recall = cum_tp / total_gts
    # precision envelope: max precision at any recall >= r
    grid = np.linspace(0.0, 1.0, 101)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, grid, side="left")
    interp = np.where(idx < len(tp), env[np.minimum(idx, len(tp) - 1)], 0.0)
    return float(interp.mean())


def evaluate(hypotheses_per_video, gts_per_video, k_values=(1, 10)):
    """hypotheses_per_video: list over videos of lists of (confidence,
    MaskSequence); gts_per_video: list over videos of lists of
    MaskSequence. Returns the metric report dict (fractions in [0, 1])
    with one "ar{k}" entry per requested recall budget."""
    total_gts = sum(len(g) for g in gts_per_video)
    if total_gts == 0:
        raise MetricsError("no ground-truth sequences to evaluate against")
    if not k_values or any(k < 1 for k in k_values):
        raise MetricsError(f"k_values {k_values} must be positive")

    conf, video_of, ious = [], [], []
    for v, hyps in enumerate(hypotheses_per_video):
        for score, seq in hyps:
            conf.append(score)
            video_of.append(v)
            ious.append([sequence_iou(seq, gt) for gt in gts_per_video[v]])
    conf = np.asarray(conf, dtype=np.float64)
    n_gts = [len(g) for g in gts_per_video]

    order_all = np.argsort(-conf, kind="stable")

    # top-K subsets per video for AR, by confidence with stable ties
    def top_k_order(k):
        keep = np.zeros(len(conf), dtype=bool)
        for v in range(len(gts_per_video)):
            members = np.flatnonzero(np.asarray(video_of) == v)
            ranked = members[np.argsort(-conf[members], kind="stable")]
            keep[ranked[:k]] = True
        return order_all[keep[order_all]]

    orders = {k: top_k_order(k) for k in k_values}

    per_threshold = []
    ap_values = []
    ar_values = {k: [] for k in k_values}
    for tau in IOU_THRESHOLDS:
        tp, _ = _greedy_match(order_all, ious, video_of, n_gts, tau)
        ap_tau = _interpolated_ap(tp, total_gts)
        ap_values.append(ap_tau)
        row = {"iou": float(tau), "ap": ap_tau}
        for k in k_values:
            _, matched = _greedy_match(orders[k], ious, video_of, n_gts, tau)
            ar_values[k].append(matched / total_gts)
            row[f"ar{k}"] = matched / total_gts
        per_threshold.append(row)

    report = {
        "ap": float(np.mean(ap_values)),
        "ap50": ap_values[0],
        "ap75": ap_values[5],
        "per_threshold": per_threshold,
    }
    for k in k_values:
        report[f"ar{k}"] = float(np.mean(ar_values[k]))
    return report


# -- significance -------------------------------------------------------


def significance_test(samples_a, samples_b, eps=1e-12):
    """Welch two-sample t-test; returns per-side mean/std and the
    two-sided p-value. Degenerate zero-variance sides are guarded by a
    small epsilon in the denominator; identical means give p = 1 exactly.
    """
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise MetricsError("significance test needs at least 2 samples per side")
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1), b.var(ddof=1)
    sa, sb = va / len(a), vb / len(b)
    if ma == mb:
        p = 1.0
        t_stat = 0.0
    else:
        t_stat = (ma - mb) / np.sqrt(sa + sb + eps)
        if sa + sb > 0:
            df = (sa + sb) ** 2 / (sa ** 2 / (len(a) - 1) + sb ** 2 / (len(b) - 1))
        else:
            df = len(a) + len(b) - 2
        p = float(2.0 * scipy.stats.t.sf(abs(t_stat), df))
    return {"mean_a": float(ma), "std_a": float(np.sqrt(va)),
            "mean_b": float(mb), "std_b": float(np.sqrt(vb)),
            "t": float(t_stat), "p_value": p}
