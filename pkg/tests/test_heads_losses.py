"""Tests for box/mask loss terms, matching, the Hungarian loss, the
prediction heads, and hypothesis extraction."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from vois import tensor as T
from vois.heads import PredictionHeads, Prediction, bilinear_upsample, to_hypotheses
from vois.losses import (
    GroundTruthTrack,
    LossWeights,
    box_giou,
    box_giou_np,
    dice_loss,
    downsample_mask,
    focal_loss,
    hungarian,
    hungarian_loss,
    match,
    matching_cost,
    track_from_masks,
)
from vois.tensor import Tensor


@pytest.fixture(autouse=True)
def f64():
    T.set_default_dtype(np.float64)
    yield
    T.set_default_dtype(np.float32)


W = LossWeights()


# -- GIoU ---------------------------------------------------------------


def test_giou_identical_boxes_is_one():
    boxes = Tensor(np.array([[0.5, 0.5, 0.4, 0.3]]))
    giou = box_giou(boxes, boxes).item()
    assert abs(giou - 1.0) < 1e-6


def test_giou_disjoint_boxes_negative():
    a = Tensor(np.array([[0.1, 0.1, 0.1, 0.1]]))
    b = Tensor(np.array([[0.9, 0.9, 0.1, 0.1]]))
    assert box_giou(a, b).item() < 0


def test_giou_hand_computed_value():
    # corners (0,0,.5,.5) vs (.25,.25,.75,.75): I=1/16, U=7/16, C=9/16
    # GIoU = (1/16)/(7/16) - (9/16-7/16)/(9/16) = 1/7 - 2/9 = -5/63
    a = Tensor(np.array([[0.25, 0.25, 0.5, 0.5]]))
    b = Tensor(np.array([[0.5, 0.5, 0.5, 0.5]]))
    np.testing.assert_allclose(box_giou(a, b).item(), -5 / 63, atol=1e-7)
    np.testing.assert_allclose(box_giou_np(a.numpy(), b.numpy())[0], -5 / 63, atol=1e-7)


def test_giou_tensor_and_numpy_versions_agree():
    rng = np.random.default_rng(0)
    a = np.column_stack([rng.uniform(0.2, 0.8, 20), rng.uniform(0.2, 0.8, 20),
                         rng.uniform(0.05, 0.4, 20), rng.uniform(0.05, 0.4, 20)])
    b = np.column_stack([rng.uniform(0.2, 0.8, 20), rng.uniform(0.2, 0.8, 20),
                         rng.uniform(0.05, 0.4, 20), rng.uniform(0.05, 0.4, 20)])
    np.testing.assert_allclose(box_giou(Tensor(a), Tensor(b)).numpy(),
                               box_giou_np(a, b), atol=1e-12)


def test_giou_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    a = Tensor(np.column_stack([rng.uniform(0.3, 0.7, 5), rng.uniform(0.3, 0.7, 5),
                                rng.uniform(0.1, 0.3, 5), rng.uniform(0.1, 0.3, 5)]),
               requires_grad=True)
    b = Tensor(np.column_stack([rng.uniform(0.3, 0.7, 5), rng.uniform(0.3, 0.7, 5),
                                rng.uniform(0.1, 0.3, 5), rng.uniform(0.1, 0.3, 5)]))
    report = T.finite_diff_check(lambda: T.sum_(1.0 - box_giou(a, b)), {"a": a})
    assert report["max_rel_err"] < 1e-5, report


def test_giou_loss_gradient_is_zero_at_identical_boxes():
    # tie-splitting in maximum/minimum makes the optimum an exact
    # stationary point instead of a kink with a one-sided pull
    vals = np.array([[0.5, 0.4, 0.3, 0.2], [0.2, 0.7, 0.1, 0.4]])
    a = Tensor(vals.copy(), requires_grad=True)
    b = Tensor(vals.copy())
    T.backward(T.sum_(1.0 - box_giou(a, b)))
    np.testing.assert_allclose(a.grad, 0.0, atol=1e-6)


# -- dice / focal -------------------------------------------------------


def test_dice_identical_and_disjoint():
    p = Tensor(np.array([[1.0, 1.0, 0.0, 0.0]]))
    assert dice_loss(p, Tensor(p.numpy().copy())).item() < 1e-6
    q = Tensor(np.array([[0.0, 0.0, 1.0, 1.0]]))
    assert abs(dice_loss(p, q).item() - 1.0) < 1e-6


def test_dice_hand_value():
    p = Tensor(np.array([[1.0, 1.0, 0.0, 0.0]]))
    t = Tensor(np.array([[1.0, 0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(dice_loss(p, t).item(), 1 / 3, atol=1e-6)


def test_focal_matches_standard_form_on_hard_targets():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((3, 7)) * 3
    targets = (rng.random((3, 7)) > 0.5).astype(np.float64)
    got = focal_loss(Tensor(logits), Tensor(targets)).item()
    p = 1 / (1 + np.exp(-logits))
    p_t = np.where(targets == 1, p, 1 - p)
    alpha_t = np.where(targets == 1, 0.25, 0.75)
    want = (alpha_t * (1 - p_t) ** 2 * -np.log(p_t)).mean()
    np.testing.assert_allclose(got, want, rtol=1e-10)


def test_focal_zero_when_probability_equals_soft_target():
    # t = 0.5 with logit 0 gives p = t exactly; modulation |p-t|^gamma = 0
    assert focal_loss(Tensor(np.zeros((1, 4))), Tensor(np.full((1, 4), 0.5))).item() == 0.0


def test_focal_gradient():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    t = Tensor(rng.random((2, 5)))
    report = T.finite_diff_check(lambda: focal_loss(x, t), {"x": x})
    assert report["max_rel_err"] < 1e-5, report


def test_downsample_mask_block_average():
    mask = np.zeros((4, 4))
    mask[:2, :2] = 1  # one full quadrant
    out = downsample_mask(mask, 2)
    np.testing.assert_array_equal(out, [[1.0, 0.0], [0.0, 0.0]])
    mask[0, 2] = 1  # quarter of the next block
    np.testing.assert_allclose(downsample_mask(mask, 2), [[1.0, 0.25], [0.0, 0.0]])


# -- tracks -------------------------------------------------------------


def test_track_from_masks_tight_boxes_and_span():
    masks = np.zeros((4, 8, 8), dtype=np.uint8)
    masks[1, 2:5, 3:7] = 1
    masks[3, 0:2, 0:2] = 1
    track = track_from_masks(masks)
    np.testing.assert_array_equal(track.presence, [False, True, False, True])
    assert track.first_frame == 1 and track.last_frame == 3
    # frame 1: rows 2..4, cols 3..6 -> cx=(3+7)/16, cy=(2+5)/16, w=4/8, h=3/8
    np.testing.assert_allclose(track.boxes[1], [10 / 16, 7 / 16, 4 / 8, 3 / 8])
    np.testing.assert_array_equal(track.boxes[0], 0)


# -- matching cost ------------------------------------------------------


def make_track(present, h=8, w=8, seed=0):
    rng = np.random.default_rng(seed)
    masks = np.zeros((len(present), h, w), dtype=np.uint8)
    for i, p in enumerate(present):
        if p:
            y, x = rng.integers(0, h - 3), rng.integers(0, w - 3)
            masks[i, y:y + 3, x:x + 3] = 1
    return track_from_masks(masks)


def test_matching_cost_perfect_prediction():
    gt = make_track([True, True], seed=1)
    probs = np.ones((1, 2))
    cost = matching_cost(probs, gt.boxes[None], [gt], W)
    assert abs(cost[0, 0] - (-1.0)) < 1e-6


def test_matching_cost_ties_for_identical_predictions():
    gt = make_track([True, True], seed=2)
    probs = np.full((2, 2), 0.7)
    boxes = np.stack([gt.boxes, gt.boxes])
    cost = matching_cost(probs, boxes, [gt], W)
    assert cost[0, 0] == cost[1, 0]


def test_matching_cost_matches_direct_reevaluation():
    rng = np.random.default_rng(4)
    gts = [make_track([True, False, True], seed=5), make_track([False, True, True], seed=6)]
    probs = rng.random((3, 3))
    boxes = rng.random((3, 3, 4)) * 0.5 + 0.25
    got = matching_cost(probs, boxes, gts, W)
    for j in range(3):
        for i, gt in enumerate(gts):
            terms = []
            for fr in range(3):
                if not gt.presence[fr]:
                    continue
                l1 = np.abs(boxes[j, fr] - gt.boxes[fr]).sum()
                giou = box_giou_np(boxes[j, fr][None], gt.boxes[fr][None])[0]
                terms.append(-probs[j, fr] + W.l1_weight * l1 + W.giou_weight * (1 - giou))
            np.testing.assert_allclose(got[j, i], np.mean(terms), atol=1e-12)


# -- hungarian ----------------------------------------------------------


def test_hungarian_singleton():
    assert hungarian(np.array([[5.0]])) == [(0, 0)]


def test_hungarian_two_by_two():
    assert hungarian(np.array([[1.0, 2.0], [2.0, 4.0]])) == [(0, 1), (1, 0)]


@pytest.mark.parametrize("shape", [(2, 2), (3, 3), (4, 4), (6, 6), (3, 5), (5, 2), (1, 4), (6, 1)])
def test_hungarian_matches_brute_force(shape):
    rng = np.random.default_rng(7)
    for _ in range(10):
        cost = rng.standard_normal(shape) * 5
        pairs = hungarian(cost)
        total = sum(cost[r, c] for r, c in pairs)
        best_total, _ = oracles.brute_force_assignment(cost)
        assert len(pairs) == min(shape)
        np.testing.assert_allclose(total, best_total, atol=1e-9)


def test_hungarian_rejects_nan():
    with pytest.raises(ValueError):
        hungarian(np.array([[1.0, np.nan], [0.0, 2.0]]))


def test_hungarian_empty():
    assert hungarian(np.zeros((0, 3))) == []
    assert hungarian(np.zeros((3, 0))) == []


@given(seed=st.integers(0, 10**6), shift=st.floats(-100, 100, allow_nan=False))
@settings(max_examples=25, deadline=None)
def test_hungarian_invariant_to_constant_shift(seed, shift):
    cost = np.random.default_rng(seed).standard_normal((4, 4))
    assert hungarian(cost) == hungarian(cost + shift)


# -- hungarian loss -----------------------------------------------------


def micro_prediction(n=2, t=3, mh=4, mw=4, seed=8, saturate=None):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((n, t, 2))
    boxes = rng.random((n, t, 4)) * 0.5 + 0.25
    masks = rng.standard_normal((n, t, mh, mw))
    if saturate is not None:
        gts, assignment = saturate
        logits = np.tile([-20.0, 20.0], (n, t, 1))
        for j, i in assignment:
            for fr in np.flatnonzero(gts[i].presence):
                logits[j, fr] = [20.0, -20.0]
                boxes[j, fr] = gts[i].boxes[fr]
                factor = gts[i].masks.shape[1] // mh
                masks[j, fr] = np.where(downsample_mask(gts[i].masks[fr], factor) > 0.5, 20.0, -20.0)
    return Prediction(class_logits=Tensor(logits, requires_grad=True),
                      boxes=Tensor(boxes, requires_grad=True),
                      mask_logits=Tensor(masks, requires_grad=True))


def block_track(present, h=16, w=16, seed=0):
    """Masks aligned to 4x4 blocks so downsampled targets are exactly 0/1."""
    rng = np.random.default_rng(seed)
    masks = np.zeros((len(present), h, w), dtype=np.uint8)
    for i, p in enumerate(present):
        if p:
            y, x = 4 * rng.integers(0, h // 4 - 1), 4 * rng.integers(0, w // 4 - 1)
            masks[i, y:y + 8, x:x + 8] = 1
    return track_from_masks(masks)


def test_loss_near_zero_at_saturated_optimum():
    gts = [block_track([True, True, True], seed=9)]
    assignment = [(0, 0)]
    pred = micro_prediction(saturate=(gts, assignment))
    terms = hungarian_loss(pred, gts, assignment, W)
    assert terms["total"].item() < 1e-3, {k: v.item() for k, v in terms.items()}


def test_loss_nonnegative_on_random_instances():
    for seed in range(5):
        gts = [block_track([True, False, True], seed=seed), block_track([True, True, True], seed=seed + 50)]
        pred = micro_prediction(seed=seed)
        assignment = match(pred, gts, W)
        terms = hungarian_loss(pred, gts, assignment, W)
        assert terms["total"].item() >= 0.0


def test_absent_frames_contribute_no_box_or_mask_gradient():
    gts = [block_track([True, False, True], seed=10)]
    pred = micro_prediction(seed=11)
    terms = hungarian_loss(pred, gts, [(0, 0)], W)
    T.backward(terms["total"])
    # frame 1 is absent: box and mask gradients there must be exactly zero
    np.testing.assert_array_equal(pred.boxes.grad[0, 1], 0.0)
    np.testing.assert_array_equal(pred.mask_logits.grad[0, 1], 0.0)
    # class gradient still flows there (background supervision)
    assert np.abs(pred.class_logits.grad[0, 1]).max() > 0


def test_unmatched_proposals_get_background_only():
    gts = [block_track([True, True, True], seed=12)]
    pred = micro_prediction(n=2, seed=13)
    terms = hungarian_loss(pred, gts, [(0, 0)], W)
    T.backward(terms["total"])
    np.testing.assert_array_equal(pred.boxes.grad[1], 0.0)
    np.testing.assert_array_equal(pred.mask_logits.grad[1], 0.0)


def reference_hungarian_loss(pred, gts, assignment, w):
    """Straightforward loop reimplementation of every loss term."""
    logits = pred.class_logits.numpy()
    boxes = pred.boxes.numpy()
    mlogits = pred.mask_logits.numpy()
    n, t, _ = logits.shape

    ce_num = ce_den = 0.0
    matched = {j: i for j, i in assignment}
    for j in range(n):
        for fr in range(t):
            relevant = j in matched and gts[matched[j]].presence[fr]
            z = logits[j, fr] - logits[j, fr].max()
            logp = z - np.log(np.exp(z).sum())
            ce = -logp[0] if relevant else -logp[1]
            weight = 1.0 if relevant else w.background_weight
            ce_num += weight * ce
            ce_den += weight
    class_term = ce_num / ce_den

    l1s, gious, dices, focals = [], [], [], []
    for j, i in assignment:
        gt = gts[i]
        factor = gt.masks.shape[1] // mlogits.shape[2]
        for fr in np.flatnonzero(gt.presence):
            l1s.append(np.abs(boxes[j, fr] - gt.boxes[fr]).sum())
            gious.append(1 - box_giou_np(boxes[j, fr][None], gt.boxes[fr][None])[0])
            tgt = downsample_mask(gt.masks[fr], factor).reshape(-1)
            lg = mlogits[j, fr].reshape(-1)
            p = 1 / (1 + np.exp(-lg))
            dices.append(1 - 2 * (p * tgt).sum() / (p.sum() + tgt.sum() + 1e-8))
            bce = -(tgt * np.log(p) + (1 - tgt) * np.log(1 - p))
            focals.append(((tgt * w.focal_alpha + (1 - tgt) * (1 - w.focal_alpha))
                           * np.abs(p - tgt) ** w.focal_gamma * bce))
    focal_term = np.concatenate(focals).mean() if focals else 0.0
    return (w.class_weight * class_term + w.l1_weight * np.mean(l1s)
            + w.giou_weight * np.mean(gious) + w.dice_weight * np.mean(dices)
            + w.focal_weight * focal_term)


def test_loss_matches_independent_reimplementation():
    gts = [block_track([True, True, False], seed=14), block_track([False, True, True], seed=15)]
    pred = micro_prediction(n=3, seed=16)
    assignment = match(pred, gts, W)
    got = hungarian_loss(pred, gts, assignment, W)["total"].item()
    want = reference_hungarian_loss(pred, gts, assignment, W)
    np.testing.assert_allclose(got, want, rtol=1e-9)


def test_loss_gradient_finite_differences():
    gts = [block_track([True, True, True], seed=17)]
    pred = micro_prediction(n=2, seed=18)
    params = {"cls": pred.class_logits, "boxes": pred.boxes, "masks": pred.mask_logits}
    report = T.finite_diff_check(
        lambda: hungarian_loss(pred, gts, [(0, 0)], W)["total"], params, sample=20)
    assert report["max_rel_err"] < 1e-4, report


def test_empty_gt_list_gives_pure_background_loss():
    pred = micro_prediction(seed=19)
    terms = hungarian_loss(pred, [], [], W)
    assert terms["l1"].item() == 0.0 and terms["dice"].item() == 0.0
    assert terms["total"].item() > 0  # background CE remains


# -- prediction heads ---------------------------------------------------


def micro_features(n=2, t=2, c=4, h32=2, w32=2, hidden=12, seed=20):
    rng = np.random.default_rng(seed)
    proposals = Tensor(rng.standard_normal((n, t, hidden)))
    e = Tensor(rng.standard_normal((t, h32, w32, 8 * c)))
    f3 = Tensor(rng.standard_normal((t, 2 * h32, 2 * w32, 4 * c)))
    f2 = Tensor(rng.standard_normal((t, 4 * h32, 4 * w32, 2 * c)))
    f1 = Tensor(rng.standard_normal((t, 8 * h32, 8 * w32, c)))
    return proposals, e, (f1, f2, f3)


def test_heads_output_shapes():
    proposals, e, pyramid = micro_features()
    heads = PredictionHeads(np.random.default_rng(21), 12, 4, mask_dim=6)
    pred = heads(proposals, e, pyramid)
    assert pred.class_logits.shape == (2, 2, 2)
    assert pred.boxes.shape == (2, 2, 4)
    assert pred.mask_logits.shape == (2, 2, 16, 16)


def test_boxes_bounded_by_sigmoid():
    proposals, e, pyramid = micro_features(seed=22)
    heads = PredictionHeads(np.random.default_rng(23), 12, 4, mask_dim=6)
    proposals.data *= 50  # drive the MLP hard
    boxes = heads(proposals, e, pyramid).boxes.numpy()
    assert (boxes >= 0).all() and (boxes <= 1).all()


def test_zero_features_and_weights_give_constant_mask_logit():
    proposals, e, pyramid = micro_features(seed=24)
    heads = PredictionHeads(np.random.default_rng(25), 12, 4, mask_dim=6)
    proposals.data[:] = 0
    for _, p in heads.named_parameters():
        p.data[:] = 0
    pred = heads(proposals, e, pyramid)
    logits = pred.mask_logits.numpy()
    np.testing.assert_array_equal(logits, np.full_like(logits, logits.flat[0]))


def test_heads_reject_wrong_pyramid():
    proposals, e, pyramid = micro_features()
    heads = PredictionHeads(np.random.default_rng(26), 12, 4, mask_dim=6)
    with pytest.raises(Exception):
        heads(proposals, e, pyramid[:2])


# -- hypotheses ---------------------------------------------------------


def test_to_hypotheses_threshold_zero_keeps_all():
    pred = micro_prediction(n=3, seed=27)
    assert len(to_hypotheses(pred, threshold=0.0)) == 3


def test_to_hypotheses_drops_background_proposals():
    pred = micro_prediction(n=2, seed=28)
    pred.class_logits.data[:] = np.tile([-20.0, 20.0], (2, 3, 1))  # prob ~ 4e-18
    assert to_hypotheses(pred, threshold=0.001) == []


def test_to_hypotheses_confidence_is_mean_probability():
    pred = micro_prediction(n=1, seed=29)
    hyp = to_hypotheses(pred, threshold=0.0)[0]
    z = pred.class_logits.numpy()
    probs = np.exp(z[..., 0]) / np.exp(z).sum(-1)
    np.testing.assert_allclose(hyp.confidence, probs.mean(), rtol=1e-12)
    assert 0.0 <= hyp.confidence <= 1.0


def test_to_hypotheses_mask_resolution_and_threshold():
    pred = micro_prediction(n=1, t=2, mh=4, mw=4, seed=30)
    pred.mask_logits.data[:] = -1.0
    pred.mask_logits.data[0, :, 1, 1] = 30.0  # one hot block per frame
    hyp = to_hypotheses(pred, threshold=0.0)[0]
    assert hyp.masks.shape == (2, 16, 16)
    assert hyp.masks[0, 4:8, 4:8].any()       # upsampled block lights up
    assert not hyp.masks[0, 12:, 12:].any()


# -- bilinear upsampling ------------------------------------------------


def test_bilinear_upsample_constant():
    x = np.full((2, 3, 3), 2.5)
    np.testing.assert_allclose(bilinear_upsample(x, 4), np.full((2, 12, 12), 2.5))


def test_bilinear_upsample_hand_values():
    # 1x2 row [0, 1] at factor 2: half-pixel centers give [0, 0.25, 0.75, 1]
    x = np.array([[0.0, 1.0]])
    np.testing.assert_allclose(bilinear_upsample(x, 2)[0], [0.0, 0.25, 0.75, 1.0])


def test_bilinear_upsample_preserves_linear_ramp_interior():
    x = np.arange(5, dtype=np.float64)[None, :]
    up = bilinear_upsample(x, 4)[0]
    # interior of the upsampled ramp is linear with slope 1/4
    diffs = np.diff(up[2:-2])
    np.testing.assert_allclose(diffs, 0.25, atol=1e-12)
