"""Synthetic moving-shapes scenes with analytic ground truth.

Each sample pairs a short video of colored shapes drifting over a dark
canvas with a target image (one shape on a white background). Objects
sharing the target's shape AND color are "relevant" and get annotated
tracks; every distractor differs in shape or color. Rasterization is
exact at pixel centers with no anti-aliasing, so masks are ground truth
by construction, and occlusion (later draw order on top) removes the
hidden region from the occluded object's mask.

On-disk layout: `.rgb8` raw video/image files (16-byte header: magic,
H, W, T as little-endian uint32, then T*H*W*3 bytes), one
`sample_XXXX.json` manifest per sample (target metadata plus per-track
per-frame RLE masks and boxes, null when absent), and a `dataset.json`
index listing the manifests.
"""

import dataclasses
import json
import os
import struct

import numpy as np

from .backbone import ConfigError
from .losses import track_from_masks
from .metrics import MetricsError, rle_decode, rle_encode

SHAPES = ("circle", "square", "triangle", "ring")

DEFAULT_COLORS = (
    (220, 50, 47),    # red
    (38, 139, 210),   # blue
    (133, 153, 0),    # green
    (181, 137, 0),    # yellow
    (211, 54, 130),   # magenta
    (42, 161, 152),   # teal
)

BACKGROUND = (32, 32, 32)
RGB8_MAGIC = b"RGB8"

_SIZE_RANGE = (0.08, 0.14)     # shape half-extent as a fraction of min(H, W)
_SPEED_LIMIT = 0.06            # per-frame speed cap, same units
_RING_INNER = 0.55             # inner radius as a fraction of outer
_TARGET_SIZE = 0.22            # target-image shape half-extent fraction


class DataError(ValueError):
    """Malformed dataset files or manifests."""


@dataclasses.dataclass(frozen=True)
class SceneSpec:
    """Recipe for one synthetic sample."""

    canvas: tuple = (64, 64)          # (H, W), each divisible by 32
    frames: int = 4
    shapes: tuple = SHAPES
    colors: tuple = DEFAULT_COLORS
    relevant_count: int = 1
    distractor_count: int = 0
    leave_reenter_count: int = 0      # objects given an absence window, relevant first
    seed: int = 0

    def validate(self):
        h, w = self.canvas
        if h % 32 or w % 32 or h <= 0 or w <= 0:
            raise ConfigError(f"canvas {self.canvas} must be positive and divisible by 32")
        if not 1 <= self.frames <= 36:
            raise ConfigError(f"frames {self.frames} outside [1, 36]")
        if not self.shapes or any(s not in SHAPES for s in self.shapes):
            raise ConfigError(f"shapes {self.shapes} must be a nonempty subset of {SHAPES}")
        if not self.colors or len(set(map(tuple, self.colors))) != len(self.colors):
            raise ConfigError("colors must be nonempty and distinct")
        for c in self.colors:
            if len(c) != 3 or any(not 0 <= v <= 255 for v in c):
                raise ConfigError(f"color {c} is not an RGB byte triple")
        if not 1 <= self.relevant_count <= 3:
            raise ConfigError(f"relevant_count {self.relevant_count} outside [1, 3]")
        if not 0 <= self.distractor_count <= 5:
            raise ConfigError(f"distractor_count {self.distractor_count} outside [0, 5]")
        if self.distractor_count > 0 and len(self.shapes) * len(self.colors) < 2:
            raise ConfigError("palette too small: distractors need a non-target shape/color combo")
        n_objects = self.relevant_count + self.distractor_count
        if not 0 <= self.leave_reenter_count <= n_objects:
            raise ConfigError(f"leave_reenter_count {self.leave_reenter_count} outside [0, {n_objects}]")
        if self.leave_reenter_count > 0 and self.frames < 3:
            raise ConfigError("leave/re-enter needs at least 3 frames")
        return self


@dataclasses.dataclass
class Track:
    """One relevant object's visible-region masks with a stable id."""

    object_id: int
    shape: str
    color: tuple
    masks: np.ndarray               # [T, H, W] bool, empty frame = absent

    @property
    def presence(self):
        return self.masks.any(axis=(1, 2))

    def ground_truth(self):
        return track_from_masks(self.masks)


@dataclasses.dataclass
class Sample:
    video: np.ndarray               # [T, H, W, 3] uint8
    target_image: np.ndarray        # [H, W, 3] uint8, white background
    target_shape: str
    target_color: tuple
    tracks: list


# -- rasterization ------------------------------------------------------


def rasterize(shape, cy, cx, size, h, w):
    """Exact pixel-center membership test for one shape; [h, w] bool."""
    py, px = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    dy, dx = py - cy, px - cx
    if shape == "circle":
        return dy * dy + dx * dx <= size * size
    if shape == "square":
        return np.maximum(np.abs(dy), np.abs(dx)) <= size
    if shape == "ring":
        d2 = dy * dy + dx * dx
        inner = _RING_INNER * size
        return (d2 <= size * size) & (d2 > inner * inner)
    if shape == "triangle":
        # apex up: A=(cx, cy-size), B=(cx-size, cy+size), C=(cx+size, cy+size);
        # inside iff the three edge cross products share a sign
        ax, ay = cx, cy - size
        bx, by = cx - size, cy + size
        gx, gy = cx + size, cy + size
        e0 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        e1 = (gx - bx) * (py - by) - (gy - by) * (px - bx)
        e2 = (ax - gx) * (py - gy) - (ay - gy) * (px - gx)
        return ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))
    raise ConfigError(f"unknown shape {shape!r}")


def _advance(pos, vel, lo, hi):
    """One linear step with wall reflection keeping pos in [lo, hi]."""
    pos = pos + vel
    while pos < lo or pos > hi:
        if pos < lo:
            pos = 2 * lo - pos
        else:
            pos = 2 * hi - pos
        vel = -vel
    return pos, vel


# -- generation ---------------------------------------------------------


@dataclasses.dataclass
class _Body:
    shape: str
    color: tuple
    size: float
    pos: np.ndarray                 # (cy, cx) float
    vel: np.ndarray                 # (vy, vx) float
    gap: tuple                      # (g0, g1) absent frames [g0, g1), or None


def generate_sample(spec):
    """Render one sample deterministically from spec.seed."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w = spec.canvas
    t = spec.frames
    scale = min(h, w)

    target_shape = spec.shapes[rng.integers(len(spec.shapes))]
    target_color = tuple(spec.colors[rng.integers(len(spec.colors))])
    others = [(s, tuple(c)) for s in spec.shapes for c in spec.colors
              if (s, tuple(c)) != (target_shape, target_color)]

    def body(shape, color):
        size = float(rng.uniform(*_SIZE_RANGE) * scale)
        pos = np.array([rng.uniform(size, h - size), rng.uniform(size, w - size)])
        vel = rng.uniform(-_SPEED_LIMIT, _SPEED_LIMIT, 2) * scale
        return _Body(shape, color, size, pos, vel, None)

    bodies = [body(target_shape, target_color) for _ in range(spec.relevant_count)]
    for _ in range(spec.distractor_count):
        s, c = others[rng.integers(len(others))]
        bodies.append(body(s, c))
    for b in bodies[:spec.leave_reenter_count]:
        g0 = int(rng.integers(1, t - 1))
        g1 = int(rng.integers(g0 + 1, t))
        b.gap = (g0, g1)
    draw_order = rng.permutation(len(bodies))

    video = np.empty((t, h, w, 3), dtype=np.uint8)
    video[:] = BACKGROUND
    visible = np.zeros((spec.relevant_count, t, h, w), dtype=bool)
    for fr in range(t):
        rasters = [None] * len(bodies)
        for k, b in enumerate(bodies):
            if b.gap and b.gap[0] <= fr < b.gap[1]:
                continue
            rasters[k] = rasterize(b.shape, b.pos[0], b.pos[1], b.size, h, w)
        for rank, k in enumerate(draw_order):
            if rasters[k] is None:
                continue
            mask = rasters[k].copy()
            for j in draw_order[rank + 1:]:              # later draws cover this one
                if rasters[j] is not None:
                    mask &= ~rasters[j]
            video[fr][mask] = bodies[k].color
            if k < spec.relevant_count:
                visible[k, fr] = mask
        for b in bodies:
            b.pos[0], b.vel[0] = _advance(b.pos[0], b.vel[0], b.size, h - b.size)
            b.pos[1], b.vel[1] = _advance(b.pos[1], b.vel[1], b.size, w - b.size)

    target = np.full((h, w, 3), 255, dtype=np.uint8)
    target[rasterize(target_shape, h / 2, w / 2, _TARGET_SIZE * scale, h, w)] = target_color

    tracks = [Track(object_id=k, shape=target_shape, color=target_color, masks=visible[k])
              for k in range(spec.relevant_count)]
    return Sample(video=video, target_image=target, target_shape=target_shape,
                  target_color=target_color, tracks=tracks)


def generate_dataset(spec, count):
    """count samples; sample i reseeds deterministically from
    (spec.seed, i) so sets are reproducible and samples independent."""
    samples = []
    for i in range(count):
        mixed = int(np.random.SeedSequence([spec.seed, i]).generate_state(1, np.uint64)[0])
        samples.append(generate_sample(dataclasses.replace(spec, seed=mixed)))
    return samples


# -- .rgb8 codec --------------------------------------------------------


def write_rgb8(path, array):
    """Raw RGB frames: 16-byte header (magic, H, W, T) + T*H*W*3 bytes."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise DataError(f"expected [T, H, W, 3] or [H, W, 3] uint8, got {array.shape}")
    t, h, w, _ = arr.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIII", RGB8_MAGIC, h, w, t))
        f.write(arr.tobytes())


def read_rgb8(path):
    with open(path, "rb") as f:
        header = f.read(16)
        if len(header) != 16:
            raise DataError(f"{path}: truncated header")
        magic, h, w, t = struct.unpack("<4sIII", header)
        if magic != RGB8_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        payload = f.read()
    if len(payload) != t * h * w * 3:
        raise DataError(f"{path}: payload is {len(payload)} bytes, header implies {t * h * w * 3}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(t, h, w, 3).copy()


# -- dataset directory --------------------------------------------------


def write_dataset(samples, dirpath, annotation_stride=1):
    """Write videos, target images, per-sample manifests, and the index.

    annotation_stride > 1 stores masks/boxes only every k-th frame
    (others become null), mirroring sparse annotation; the in-memory
    roundtrip is lossless only at stride 1.
    """
    if annotation_stride < 1:
        raise ConfigError(f"annotation_stride {annotation_stride} must be >= 1")
    os.makedirs(dirpath, exist_ok=True)
    names = []
    for i, sample in enumerate(samples):
        stem = f"sample_{i:04d}"
        t, h, w, _ = sample.video.shape
        write_rgb8(os.path.join(dirpath, stem + ".rgb8"), sample.video)
        write_rgb8(os.path.join(dirpath, stem + "_target.rgb8"), sample.target_image)
        tracks = []
        for track in sample.tracks:
            gt = track.ground_truth()
            masks, boxes = [], []
            for fr in range(t):
                annotated = fr % annotation_stride == 0 and track.masks[fr].any()
                masks.append(rle_encode(track.masks[fr]) if annotated else None)
                boxes.append([float(v) for v in gt.boxes[fr]] if annotated else None)
            tracks.append({"id": track.object_id, "shape": track.shape,
                           "color": list(track.color), "masks": masks, "boxes": boxes})
        manifest = {
            "video": stem + ".rgb8",
            "target_image": stem + "_target.rgb8",
            "height": h, "width": w, "frames": t,
            "annotation_stride": annotation_stride,
            "target": {"shape": sample.target_shape, "color": list(sample.target_color)},
            "tracks": tracks,
        }
        name = stem + ".json"
        with open(os.path.join(dirpath, name), "w") as f:
            json.dump(manifest, f)
        names.append(name)
    with open(os.path.join(dirpath, "dataset.json"), "w") as f:
        json.dump({"samples": names}, f)


def _manifest_field(manifest, path, key, kind):
    if key not in manifest:
        raise DataError(f"{path}: missing field {key!r}")
    value = manifest[key]
    if not isinstance(value, kind):
        raise DataError(f"{path}: field {key!r} has type {type(value).__name__}")
    return value


def read_sample(dirpath, name):
    path = os.path.join(dirpath, name)
    try:
        with open(path) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable manifest ({exc})") from exc
    h = _manifest_field(manifest, path, "height", int)
    w = _manifest_field(manifest, path, "width", int)
    t = _manifest_field(manifest, path, "frames", int)
    video = read_rgb8(os.path.join(dirpath, _manifest_field(manifest, path, "video", str)))
    if video.shape != (t, h, w, 3):
        raise DataError(f"{path}: field 'video' shape {video.shape} != manifest ({t}, {h}, {w}, 3)")
    target = read_rgb8(os.path.join(dirpath, _manifest_field(manifest, path, "target_image", str)))
    if target.shape != (1, h, w, 3):
        raise DataError(f"{path}: field 'target_image' shape {target.shape} != manifest (1, {h}, {w}, 3)")
    target_meta = _manifest_field(manifest, path, "target", dict)
    tracks = []
    for entry in _manifest_field(manifest, path, "tracks", list):
        runs_per_frame = entry["masks"]
        if len(runs_per_frame) != t:
            raise DataError(f"{path}: field 'masks' lists {len(runs_per_frame)} frames, manifest says {t}")
        masks = np.zeros((t, h, w), dtype=bool)
        for fr, runs in enumerate(runs_per_frame):
            if runs is None:
                continue
            try:
                masks[fr] = rle_decode(runs, h, w)
            except MetricsError as exc:
                raise DataError(f"{path}: field 'masks' frame {fr}: {exc}") from exc
        tracks.append(Track(object_id=int(entry["id"]), shape=entry["shape"],
                            color=tuple(entry["color"]), masks=masks))
    return Sample(video=video, target_image=target[0],
                  target_shape=target_meta["shape"], target_color=tuple(target_meta["color"]),
                  tracks=tracks)


def read_dataset(dirpath):
    index_path = os.path.join(dirpath, "dataset.json")
    if not os.path.exists(index_path):
        return []
    try:
        with open(index_path) as f:
            index = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{index_path}: unreadable index ({exc})") from exc
    return [read_sample(dirpath, name) for name in _manifest_field(index, index_path, "samples", list)]


def validate_dataset(dirpath):
    """Check invariants across the directory; returns a list of problems
    (empty = valid). Unreadable files become report lines, not raises."""
    report = []
    index_path = os.path.join(dirpath, "dataset.json")
    if not os.path.exists(index_path):
        return report
    with open(index_path) as f:
        names = json.load(f)["samples"]
    for name in names:
        path = os.path.join(dirpath, name)
        try:
            sample = read_sample(dirpath, name)
        except DataError as exc:
            report.append(str(exc))
            continue
        with open(path) as f:
            manifest = json.load(f)
        seen = set()
        for track, entry in zip(sample.tracks, manifest["tracks"]):
            label = f"{name}: track {track.object_id}"
            if track.object_id in seen:
                report.append(f"{label}: duplicate object id")
            seen.add(track.object_id)
            if (track.shape, track.color) != (sample.target_shape, sample.target_color):
                report.append(f"{label}: shape/color does not match the target")
            if not track.presence.any():
                report.append(f"{label}: never present")
            gt = track.ground_truth()
            for fr, stored in enumerate(entry["boxes"]):
                if (stored is None) != (entry["masks"][fr] is None):
                    report.append(f"{label}: frame {fr}: box/mask nullness disagree")
                elif stored is not None and list(gt.boxes[fr]) != stored:
                    report.append(f"{label}: frame {fr}: stored box is not tight")
    return report
