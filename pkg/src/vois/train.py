"""Training, inference, evaluation, and benchmark drivers.

Determinism contract: a fixed (seed, config, thread count) reproduces
the loss log bit-exactly. The seed feeds a SeedSequence split into an
init stream (weights) and a train stream (epoch shuffles, augmentation),
so resuming from an epoch checkpoint restores the exact mid-run RNG
state and continues identically to the uninterrupted run.
"""

import json
import os
import time

import numpy as np

from . import tensor as T
from .backbone import ConfigError
from .checkpoint import load_tensors, save_tensors
from .config import config_to_toml
from .data import (
    DEFAULT_COLORS,
    DataError,
    Sample,
    Track,
    read_dataset,
    write_dataset,
    write_rgb8,
)
from .heads import to_hypotheses
from .losses import hungarian_loss, match, track_from_masks
from .metrics import MaskSequence, evaluate, rle_decode
from .model import VOISModel, normalize_frames, parameter_count
from .optim import AdamW
from .tensor import FiniteError, Tensor


class TrainError(RuntimeError):
    pass


LOG_HEADER = "step,total,class,l1,giou,dice,focal"
LOSS_TERMS = ("class", "l1", "giou", "dice", "focal")


def _scalar(t):
    return float(np.asarray(t.numpy()).reshape(()))


# -- augmentation -------------------------------------------------------


def augment_sample(video, target, masks, rng, crop_pad):
    """Random horizontal flip, then pad-by-`crop_pad` and crop back to
    the original canvas. Flips apply to the video, the masks, and the
    target image alike; the crop moves video and masks together. A crop
    that would erase a track entirely is retried, then abandoned."""
    if rng.random() < 0.5:
        video = video[:, :, ::-1]
        target = target[:, ::-1]
        masks = [m[:, :, ::-1] for m in masks]
    if crop_pad > 0:
        h, w = video.shape[1:3]
        for _ in range(5):
            dy = int(rng.integers(0, 2 * crop_pad + 1))
            dx = int(rng.integers(0, 2 * crop_pad + 1))
            pad_spec = ((0, 0), (crop_pad, crop_pad), (crop_pad, crop_pad))
            vp = np.pad(video, pad_spec + ((0, 0),), mode="edge")
            cropped_video = vp[:, dy:dy + h, dx:dx + w]
            cropped_masks = [np.pad(m, pad_spec)[:, dy:dy + h, dx:dx + w] for m in masks]
            if all(m.any() for m in cropped_masks):
                return cropped_video, target, cropped_masks
        # fall through: keep the flip, drop the crop
    return video, target, masks


def prepare_batch(sample, rng, augment, crop_pad):
    video = sample.video
    target = sample.target_image
    masks = [track.masks for track in sample.tracks]
    if augment:
        video, target, masks = augment_sample(video, target, masks, rng, crop_pad)
    gts = [track_from_masks(m) for m in masks]
    return Tensor(normalize_frames(video)), Tensor(normalize_frames(target)), gts


# -- checkpoints --------------------------------------------------------


def save_checkpoint(dirpath, model, optimizer, cfg, step, epochs_completed, train_rng):
    os.makedirs(dirpath, exist_ok=True)
    save_tensors(os.path.join(dirpath, "params.bin"), model.state_arrays())
    save_tensors(os.path.join(dirpath, "optim.bin"), optimizer.state_arrays())
    state = {
        "step": step,
        "epochs_completed": epochs_completed,
        "optimizer_steps": optimizer.step_count,
        "train_rng": train_rng.bit_generator.state,
        "seed": cfg.optim.seed,
    }
    with open(os.path.join(dirpath, "state.json"), "w") as f:
        json.dump(state, f)
    with open(os.path.join(dirpath, "config.toml"), "w") as f:
        f.write(config_to_toml(cfg))


def load_checkpoint_into(dirpath, model, optimizer=None):
    """Restore parameters (and optionally optimizer state); returns the
    state dict from state.json."""
    model.load_state_arrays(load_tensors(os.path.join(dirpath, "params.bin")))
    with open(os.path.join(dirpath, "state.json")) as f:
        state = json.load(f)
    if optimizer is not None:
        optimizer.load_state_arrays(load_tensors(os.path.join(dirpath, "optim.bin")),
                                    state["optimizer_steps"])
    return state


def build_model(cfg):
    init_ss, _ = np.random.SeedSequence(cfg.optim.seed).spawn(2)
    return VOISModel(cfg.backbone, cfg.decoder, np.random.default_rng(init_ss),
                     mask_dim=cfg.mask_dim)


# -- training loop ------------------------------------------------------


def train(cfg, out_dir, resume=None, max_steps=None, log_hook=None):
    """Run the configured training; writes loss_log.csv and one
    checkpoint directory per epoch under out_dir. Returns a summary."""
    cfg.validate()
    if not cfg.data.dir:
        raise ConfigError("data.dir is required for training")
    samples = read_dataset(cfg.data.dir)
    if not samples:
        raise DataError(f"{cfg.data.dir}: no samples")
    t, h, w, _ = samples[0].video.shape
    if cfg.backbone.video_size != (t, h, w):
        raise ConfigError(f"model video_size {cfg.backbone.video_size} != dataset ({t}, {h}, {w})")
    if cfg.backbone.image_size != (h, w):
        raise ConfigError(f"model image_size {cfg.backbone.image_size} != dataset canvas ({h}, {w})")
    for sample in samples:
        if not sample.tracks:
            raise DataError("training sample without any relevant track")

    init_ss, train_ss = np.random.SeedSequence(cfg.optim.seed).spawn(2)
    model = VOISModel(cfg.backbone, cfg.decoder, np.random.default_rng(init_ss),
                      mask_dim=cfg.mask_dim)
    optimizer = AdamW(model.named_parameters(),
                      lr_backbone=cfg.optim.lr_backbone, lr_rest=cfg.optim.lr_rest,
                      weight_decay=cfg.optim.weight_decay, clip_norm=cfg.optim.clip_norm)
    train_rng = np.random.default_rng(train_ss)

    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "loss_log.csv")
    step = 0
    start_epoch = 0
    if resume is not None:
        state = load_checkpoint_into(resume, model, optimizer)
        step = state["step"]
        start_epoch = state["epochs_completed"]
        train_rng.bit_generator.state = state["train_rng"]
    else:
        with open(log_path, "w") as f:
            f.write(LOG_HEADER + "\n")

    if start_epoch >= cfg.optim.epochs:
        raise TrainError(f"checkpoint already covers all {cfg.optim.epochs} epochs")

    log_f = open(log_path, "a")
    final_loss = None
    try:
        for epoch in range(start_epoch, cfg.optim.epochs):
            lr_scale = cfg.optim.decay_factor if epoch >= cfg.optim.decay_epoch else 1.0
            order = train_rng.permutation(len(samples))
            for idx in order:
                video, target, gts = prepare_batch(samples[idx], train_rng,
                                                   cfg.data.augment, cfg.data.crop_pad)
                try:
                    prediction = model.forward(video, target)
                    assignment = match(prediction, gts, cfg.loss)
                    losses = hungarian_loss(prediction, gts, assignment, cfg.loss)
                    for term in ("total",) + LOSS_TERMS:
                        value = _scalar(losses[term])
                        if not np.isfinite(value):
                            raise TrainError(f"non-finite loss at step {step}: term {term!r} = {value}")
                    optimizer.zero_grad()
                    T.backward(losses["total"])
                except FiniteError as exc:
                    raise TrainError(f"non-finite value at step {step}: {exc}") from exc
                optimizer.step(lr_scale=lr_scale)
                final_loss = _scalar(losses["total"])
                row = [step, final_loss] + [_scalar(losses[k]) for k in LOSS_TERMS]
                log_f.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
                log_f.flush()
                if log_hook is not None:
                    log_hook(step, losses)
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            last_checkpoint = os.path.join(out_dir, f"epoch_{epoch + 1:03d}")
            save_checkpoint(last_checkpoint, model, optimizer, cfg, step, epoch + 1, train_rng)
            if max_steps is not None and step >= max_steps:
                break
    finally:
        log_f.close()
    return {"steps": step, "final_loss": final_loss, "last_checkpoint": last_checkpoint}


# -- inference ----------------------------------------------------------


def infer(model, samples, threshold, out_dir, overlays=False):
    """Run the model on each sample; write hypotheses in the dataset
    manifest format (tight boxes recomputed from predicted masks, raw
    box-head output under "box_head", confidence alongside) so the
    output directory passes the dataset validator. Returns the
    per-sample hypothesis lists."""
    results = []
    out_samples = []
    for sample in samples:
        with T.no_grad():
            prediction = model.forward(Tensor(normalize_frames(sample.video)),
                                       Tensor(normalize_frames(sample.target_image)))
        hyps = to_hypotheses(prediction, threshold=threshold)
        results.append(hyps)
        tracks = [Track(object_id=j, shape=sample.target_shape,
                        color=sample.target_color, masks=hyp.masks)
                  for j, hyp in enumerate(hyps)]
        out_samples.append(Sample(video=sample.video, target_image=sample.target_image,
                                  target_shape=sample.target_shape,
                                  target_color=sample.target_color, tracks=tracks))
    if out_dir is not None:
        write_dataset(out_samples, out_dir)
        _attach_hypothesis_fields(out_dir, results)
        if overlays:
            for i, (sample, hyps) in enumerate(zip(samples, results)):
                write_rgb8(os.path.join(out_dir, f"sample_{i:04d}_overlay.rgb8"),
                           render_overlay(sample.video, hyps))
    return results


def _attach_hypothesis_fields(out_dir, results):
    with open(os.path.join(out_dir, "dataset.json")) as f:
        names = json.load(f)["samples"]
    for name, hyps in zip(names, results):
        path = os.path.join(out_dir, name)
        with open(path) as f:
            manifest = json.load(f)
        for entry, hyp in zip(manifest["tracks"], hyps):
            entry["confidence"] = hyp.confidence
            entry["box_head"] = [[float(v) for v in box] for box in hyp.boxes]
        with open(path, "w") as f:
            json.dump(manifest, f)


def overlay_color(index):
    return DEFAULT_COLORS[index % len(DEFAULT_COLORS)]


def render_overlay(video, hyps):
    """50/50 blend of a per-hypothesis color over the original frame;
    the color depends only on the hypothesis index, so one object keeps
    one color across the whole clip. Where hypotheses overlap the
    highest index wins, so every painted pixel mixes exactly one color."""
    src = video.astype(np.float64)
    out = src.copy()
    for j, hyp in enumerate(hyps):
        color = np.array(overlay_color(j), dtype=np.float64)
        for fr in range(video.shape[0]):
            sel = hyp.masks[fr]
            out[fr][sel] = 0.5 * src[fr][sel] + 0.5 * color
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def read_hypotheses(dirpath):
    """Read an inference output directory back as per-video lists of
    (confidence, MaskSequence)."""
    index_path = os.path.join(dirpath, "dataset.json")
    if not os.path.exists(index_path):
        raise DataError(f"{dirpath}: no dataset.json")
    with open(index_path) as f:
        names = json.load(f)["samples"]
    per_video = []
    for name in names:
        with open(os.path.join(dirpath, name)) as f:
            manifest = json.load(f)
        hyps = []
        for entry in manifest["tracks"]:
            if "confidence" not in entry:
                raise DataError(f"{name}: track {entry['id']} has no confidence")
            masks = np.zeros((manifest["frames"], manifest["height"], manifest["width"]), dtype=bool)
            for fr, runs in enumerate(entry["masks"]):
                if runs is not None:
                    masks[fr] = rle_decode(runs, manifest["height"], manifest["width"])
            hyps.append((float(entry["confidence"]), MaskSequence.from_arrays(masks)))
        per_video.append(hyps)
    return per_video


def evaluate_dirs(hyp_dir, gt_dir, k_values=(1, 10)):
    """Compare an inference output directory against a ground-truth
    dataset directory; videos are aligned by sample order."""
    hyps = read_hypotheses(hyp_dir)
    gt_samples = read_dataset(gt_dir)
    if len(hyps) != len(gt_samples):
        raise DataError(f"hypotheses cover {len(hyps)} videos, ground truth has {len(gt_samples)}")
    gts = [[MaskSequence.from_arrays(track.masks.astype(bool)) for track in sample.tracks]
           for sample in gt_samples]
    return evaluate(hyps, gts, k_values=k_values)


# -- benchmark ----------------------------------------------------------


def bench(model, warmup=2, iters=5):
    """Forward-pass throughput with inputs pre-materialized in memory
    (no dataset reads inside the timed region), batch 1."""
    t, h, w = model.backbone_cfg.video_size
    hi, wi = model.backbone_cfg.image_size
    rng = np.random.default_rng(0)
    video = Tensor(rng.uniform(-1, 1, size=(t, h, w, 3)))
    image = Tensor(rng.uniform(-1, 1, size=(hi, wi, 3)))
    with T.no_grad():
        for _ in range(warmup):
            model.forward(video, image)
        start = time.perf_counter()
        for _ in range(iters):
            model.forward(video, image)
        elapsed = time.perf_counter() - start
    return {
        "fps": t * iters / elapsed,
        "frames": t,
        "iterations": iters,
        "seconds_per_clip": elapsed / iters,
        "params": parameter_count(model),
    }
