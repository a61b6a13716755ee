"""Independent reference implementations used only by tests.

Everything here is written in plain numpy with explicit loops, deriving
its answers from definitions rather than from the production code paths
it checks.
"""

import itertools

import numpy as np


def softmax_rows(scores):
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mha_dense(q_in, k_in, v_in, heads, wq, bq, wk, bk, wv, bv, wo, bo):
    """Plain full multi-head attention on [Lq, D] / [Lk, D] token matrices."""
    d = q_in.shape[-1]
    dh = d // heads
    q = q_in @ wq + bq
    k = k_in @ wk + bk
    v = v_in @ wv + bv
    out = np.zeros((q_in.shape[0], d), dtype=q.dtype)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = (q[:, sl] @ k[:, sl].T) / np.sqrt(dh)
        out[:, sl] = softmax_rows(scores) @ v[:, sl]
    return out @ wo + bo


def naive_windowed_attention(x, window, shift, heads, qkv_w, qkv_b, out_w, out_b):
    """Shifted-window attention by brute force.

    Materializes the shifted canvas, walks every window cell by cell, and
    groups cells by whether their original coordinate wraps around under
    the cyclic shift on each axis (cells of one group form a contiguous
    block of the unshifted canvas). Plain unmasked attention runs within
    each group; padding cells (original coordinate outside the true
    extents) are dropped entirely.
    """
    t, h, w, c = x.shape
    wt, wh, ww = window
    ext = (t + (-t) % wt, h + (-h) % wh, w + (-w) % ww)
    xp = np.zeros(ext + (c,), dtype=x.dtype)
    xp[:t, :h, :w] = x
    s = tuple((wi // 2 if shift else 0) for wi in window)
    xs = np.roll(xp, (-s[0], -s[1], -s[2]), axis=(0, 1, 2))

    out = np.zeros_like(xs)
    for at in range(0, ext[0], wt):
        for ah in range(0, ext[1], wh):
            for aw in range(0, ext[2], ww):
                cells = {}
                for it in range(at, at + wt):
                    for ih in range(ah, ah + wh):
                        for iw in range(aw, aw + ww):
                            orig = ((it + s[0]) % ext[0], (ih + s[1]) % ext[1], (iw + s[2]) % ext[2])
                            if orig[0] >= t or orig[1] >= h or orig[2] >= w:
                                continue  # padding, not a real token
                            key = ((it + s[0]) >= ext[0], (ih + s[1]) >= ext[1], (iw + s[2]) >= ext[2])
                            cells.setdefault(key, []).append((it, ih, iw))
                for members in cells.values():
                    tokens = np.stack([xs[p] for p in members])
                    attended = mha_dense(
                        tokens, tokens, tokens, heads,
                        qkv_w[:, :c], qkv_b[:c],
                        qkv_w[:, c:2 * c], qkv_b[c:2 * c],
                        qkv_w[:, 2 * c:], qkv_b[2 * c:],
                        out_w, out_b)
                    for p, row in zip(members, attended):
                        out[p] = row

    out = np.roll(out, s, axis=(0, 1, 2))
    return out[:t, :h, :w]


def brute_force_assignment(cost):
    """Minimum-cost injective assignment by enumerating every injection of
    the smaller side into the larger. Returns (total, set of (row, col))."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    best_total, best_pairs = np.inf, set()
    if n <= m:
        for cols in itertools.permutations(range(m), n):
            total = sum(cost[r, c] for r, c in enumerate(cols))
            if total < best_total:
                best_total = total
                best_pairs = set(enumerate(cols))
    else:
        for rows in itertools.permutations(range(n), m):
            total = sum(cost[r, c] for c, r in enumerate(rows))
            if total < best_total:
                best_total = total
                best_pairs = {(r, c) for c, r in enumerate(rows)}
    return best_total, best_pairs


def pixel_loop_sequence_iou(a, b):
    """Spatio-temporal IoU counted one pixel at a time."""
    inter = union = 0
    t, h, w = a.shape
    for fr in range(t):
        for y in range(h):
            for x in range(w):
                pa, pb = bool(a[fr, y, x]), bool(b[fr, y, x])
                inter += pa and pb
                union += pa or pb
    return inter / union if union else 0.0


def reference_evaluate(hyps_per_video, gts_per_video, thresholds=None):
    """AP/AR re-derived with explicit loops from the prose definitions.

    hyps_per_video: per video, list of (confidence, [T, H, W] bool array);
    gts_per_video: per video, list of [T, H, W] bool arrays.
    """
    if thresholds is None:
        thresholds = [0.50 + 0.05 * i for i in range(10)]
    flat = []  # (confidence, insertion index, video, per-gt ious)
    for v, hyps in enumerate(hyps_per_video):
        for conf, masks in hyps:
            ious = [pixel_loop_sequence_iou(masks, gt) for gt in gts_per_video[v]]
            flat.append((conf, len(flat), v, ious))
    total_gts = sum(len(g) for g in gts_per_video)

    def run_matching(entries, tau):
        entries = sorted(entries, key=lambda e: (-e[0], e[1]))  # stable ties
        used = {v: [False] * len(gts_per_video[v]) for v in range(len(gts_per_video))}
        tps = []
        for conf, _, v, ious in entries:
            pick, pick_iou = -1, -1.0
            for i, iou in enumerate(ious):
                if not used[v][i] and iou >= tau and iou > pick_iou:
                    pick, pick_iou = i, iou
            if pick >= 0:
                used[v][pick] = True
            tps.append(pick >= 0)
        return tps

    def ap_at(tau):
        tps = run_matching(flat, tau)
        points = []
        tp_count = 0
        for k, is_tp in enumerate(tps, start=1):
            tp_count += is_tp
            points.append((tp_count / total_gts, tp_count / k))
        total = 0.0
        for g in range(101):
            r = g / 100
            candidates = [p for rec, p in points if rec >= r]
            total += max(candidates) if candidates else 0.0
        return total / 101

    def ar_at(tau, k):
        kept = []
        for v in range(len(gts_per_video)):
            members = sorted([e for e in flat if e[2] == v], key=lambda e: (-e[0], e[1]))
            kept.extend(members[:k])
        tps = run_matching(kept, tau)
        return sum(tps) / total_gts

    aps = [ap_at(t) for t in thresholds]
    return {
        "ap": sum(aps) / len(aps),
        "ap50": aps[0],
        "ap75": aps[5],
        "ar1": sum(ar_at(t, 1) for t in thresholds) / len(thresholds),
        "ar10": sum(ar_at(t, 10) for t in thresholds) / len(thresholds),
    }
