"""Dataset generator tests: exact rasterization, occlusion, events,
determinism, the .rgb8 codec, manifest roundtrip, and the validator."""

import dataclasses
import json
import os
import time

import numpy as np
import pytest

from vois.backbone import ConfigError
from vois.data import (
    DataError,
    SceneSpec,
    generate_sample,
    rasterize,
    read_dataset,
    read_rgb8,
    validate_dataset,
    write_dataset,
    write_rgb8,
)
from vois.metrics import rle_encode


def spec(**kw):
    base = dict(canvas=(32, 32), frames=4, seed=7)
    base.update(kw)
    return SceneSpec(**base)


# -- rasterizers --------------------------------------------------------


def test_circle_raster_matches_pixel_center_loop():
    got = rasterize("circle", 5.0, 6.0, 3.2, 12, 12)
    for i in range(12):
        for j in range(12):
            want = (i + 0.5 - 5.0) ** 2 + (j + 0.5 - 6.0) ** 2 <= 3.2 ** 2
            assert got[i, j] == want


def test_square_raster_extent():
    got = rasterize("square", 6.0, 6.0, 2.0, 12, 12)
    # pixel centers in [4.5, 7.5] on both axes -> rows/cols 4..7
    want = np.zeros((12, 12), dtype=bool)
    want[4:8, 4:8] = True
    np.testing.assert_array_equal(got, want)


def test_ring_has_hole():
    got = rasterize("ring", 8.0, 8.0, 5.0, 16, 16)
    assert got.any()
    assert not got[8, 8]                       # center is outside the band
    outer = rasterize("circle", 8.0, 8.0, 5.0, 16, 16)
    assert (got & ~outer).sum() == 0           # ring lies within the outer circle


def test_triangle_contains_centroid_and_is_symmetric():
    got = rasterize("triangle", 8.0, 8.0, 5.0, 16, 16)
    assert got[8, 8]
    assert not got[2, 2]                       # above-left of the apex
    np.testing.assert_array_equal(got, got[:, ::-1])   # mirror symmetry about cx=8


def test_unknown_shape_rejected():
    with pytest.raises(ConfigError):
        rasterize("hexagon", 4.0, 4.0, 2.0, 8, 8)


# -- spec validation ----------------------------------------------------


def test_canvas_must_be_divisible_by_32():
    with pytest.raises(ConfigError):
        spec(canvas=(48, 64)).validate()


def test_frames_bounded():
    with pytest.raises(ConfigError):
        spec(frames=37).validate()
    with pytest.raises(ConfigError):
        spec(frames=0).validate()


def test_counts_bounded():
    with pytest.raises(ConfigError):
        spec(relevant_count=4).validate()
    with pytest.raises(ConfigError):
        spec(distractor_count=6).validate()


def test_palette_too_small_for_distractors():
    with pytest.raises(ConfigError):
        spec(shapes=("circle",), colors=((10, 20, 30),), distractor_count=1).validate()
    # same palette without distractors is fine
    spec(shapes=("circle",), colors=((10, 20, 30),), distractor_count=0).validate()


def test_duplicate_colors_rejected():
    with pytest.raises(ConfigError):
        spec(colors=((1, 2, 3), (1, 2, 3))).validate()


# -- generation ---------------------------------------------------------


def test_single_object_track_is_exact_raster():
    sample = generate_sample(spec(relevant_count=1, distractor_count=0))
    assert len(sample.tracks) == 1
    track = sample.tracks[0]
    assert track.presence.all()
    for fr in range(4):
        # with no occluders the visible mask is exactly the colored region
        colored = (sample.video[fr] != np.array([32, 32, 32], dtype=np.uint8)).any(axis=-1)
        np.testing.assert_array_equal(track.masks[fr], colored)
        assert track.masks[fr].any()


def test_relevance_partition():
    sample = generate_sample(spec(relevant_count=2, distractor_count=3, seed=11))
    assert len(sample.tracks) == 2
    for track in sample.tracks:
        assert (track.shape, track.color) == (sample.target_shape, sample.target_color)
    # distractor pixels exist: colors besides background and target appear
    palette = {tuple(c) for c in np.unique(sample.video.reshape(-1, 3), axis=0)}
    assert len(palette - {(32, 32, 32), sample.target_color}) >= 1


def test_leave_reenter_gap_keeps_single_id():
    sample = generate_sample(spec(frames=6, leave_reenter_count=1, seed=3))
    track = sample.tracks[0]
    present = track.presence
    assert present[0] and present[-1]
    assert not present.all()                  # a real gap
    first, last = np.flatnonzero(present)[[0, -1]]
    gap = np.flatnonzero(~present[first:last + 1])
    assert gap.size > 0
    assert track.object_id == 0


def test_occlusion_keeps_visible_masks_disjoint():
    # crowded canvases force overlap; visible regions must still partition
    for seed in range(30):
        sample = generate_sample(spec(relevant_count=3, distractor_count=5, seed=seed))
        union = np.zeros(sample.video.shape[:3], dtype=bool)
        total = 0
        for track in sample.tracks:
            union |= track.masks
            total += int(track.masks.sum())
        assert union.sum() == total


def test_masks_match_video_colors():
    sample = generate_sample(spec(relevant_count=1, distractor_count=2, seed=5))
    track = sample.tracks[0]
    color = np.array(sample.target_color, dtype=np.uint8)
    for fr in range(sample.video.shape[0]):
        if track.masks[fr].any():
            assert (sample.video[fr][track.masks[fr]] == color).all()


def test_target_image_white_background():
    sample = generate_sample(spec(seed=9))
    shape_px = (sample.target_image != 255).any(axis=-1)
    assert shape_px.any()
    assert (sample.target_image[~shape_px] == 255).all()
    assert (sample.target_image[shape_px] == np.array(sample.target_color, np.uint8)).all()


def test_same_seed_bit_identical():
    s = spec(relevant_count=2, distractor_count=2, leave_reenter_count=1, frames=5, seed=123)
    a, b = generate_sample(s), generate_sample(s)
    np.testing.assert_array_equal(a.video, b.video)
    np.testing.assert_array_equal(a.target_image, b.target_image)
    for ta, tb in zip(a.tracks, b.tracks):
        np.testing.assert_array_equal(ta.masks, tb.masks)


def test_different_seeds_differ():
    a = generate_sample(spec(seed=1))
    b = generate_sample(spec(seed=2))
    assert (a.video != b.video).any()


def test_toy_set_generates_quickly():
    start = time.monotonic()
    for i in range(16):
        generate_sample(SceneSpec(canvas=(64, 64), frames=4, relevant_count=2,
                                  distractor_count=2, seed=i))
    assert time.monotonic() - start < 5.0


# -- rgb8 codec ---------------------------------------------------------


def test_rgb8_roundtrip(tmp_path):
    arr = np.random.default_rng(0).integers(0, 256, (3, 8, 6, 3), dtype=np.uint8)
    path = tmp_path / "clip.rgb8"
    write_rgb8(path, arr)
    assert path.stat().st_size == 16 + arr.size
    np.testing.assert_array_equal(read_rgb8(path), arr)


def test_rgb8_single_image_gains_frame_axis(tmp_path):
    img = np.random.default_rng(1).integers(0, 256, (8, 6, 3), dtype=np.uint8)
    path = tmp_path / "img.rgb8"
    write_rgb8(path, img)
    np.testing.assert_array_equal(read_rgb8(path), img[None])


def test_rgb8_truncation_detected(tmp_path):
    arr = np.zeros((2, 4, 4, 3), dtype=np.uint8)
    path = tmp_path / "clip.rgb8"
    write_rgb8(path, arr)
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(DataError):
        read_rgb8(path)


def test_rgb8_bad_magic(tmp_path):
    path = tmp_path / "clip.rgb8"
    path.write_bytes(b"JUNK" + bytes(12))
    with pytest.raises(DataError):
        read_rgb8(path)


# -- dataset roundtrip and validation -----------------------------------


def make_samples(n=3):
    return [generate_sample(spec(relevant_count=2, distractor_count=1,
                                 leave_reenter_count=1, frames=5, seed=100 + i))
            for i in range(n)]


def test_write_read_identity(tmp_path):
    samples = make_samples()
    write_dataset(samples, tmp_path)
    back = read_dataset(tmp_path)
    assert len(back) == len(samples)
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.video, b.video)
        np.testing.assert_array_equal(a.target_image, b.target_image)
        assert (a.target_shape, a.target_color) == (b.target_shape, b.target_color)
        assert len(a.tracks) == len(b.tracks)
        for ta, tb in zip(a.tracks, b.tracks):
            assert ta.object_id == tb.object_id
            assert (ta.shape, ta.color) == (tb.shape, tb.color)
            np.testing.assert_array_equal(ta.masks, tb.masks)


def test_empty_dir_reads_as_empty_list(tmp_path):
    assert read_dataset(tmp_path) == []
    assert validate_dataset(tmp_path) == []


def test_valid_dataset_passes_validator(tmp_path):
    write_dataset(make_samples(), tmp_path)
    assert validate_dataset(tmp_path) == []


def test_annotation_stride_nulls_off_stride_frames(tmp_path):
    samples = make_samples(1)
    write_dataset(samples, tmp_path, annotation_stride=2)
    with open(tmp_path / "sample_0000.json") as f:
        manifest = json.load(f)
    assert manifest["annotation_stride"] == 2
    for track in manifest["tracks"]:
        for fr in range(1, 5, 2):
            assert track["masks"][fr] is None and track["boxes"][fr] is None
    assert validate_dataset(tmp_path) == []


def _edit_manifest(dirpath, fn):
    path = os.path.join(dirpath, "sample_0000.json")
    with open(path) as f:
        manifest = json.load(f)
    fn(manifest)
    with open(path, "w") as f:
        json.dump(manifest, f)


def test_bad_rle_length_flagged(tmp_path):
    write_dataset(make_samples(1), tmp_path)

    def corrupt(m):
        for fr, runs in enumerate(m["tracks"][0]["masks"]):
            if runs is not None:
                m["tracks"][0]["masks"][fr] = [3, 2]
                return
    _edit_manifest(tmp_path, corrupt)
    report = validate_dataset(tmp_path)
    assert len(report) == 1 and "masks" in report[0] and "sample_0000.json" in report[0]
    with pytest.raises(DataError):
        read_dataset(tmp_path)


def test_non_tight_box_flagged(tmp_path):
    write_dataset(make_samples(1), tmp_path)

    def corrupt(m):
        for fr, box in enumerate(m["tracks"][0]["boxes"]):
            if box is not None:
                box[2] = box[2] * 2
                return
    _edit_manifest(tmp_path, corrupt)
    report = validate_dataset(tmp_path)
    assert any("not tight" in line for line in report)


def test_duplicate_id_flagged(tmp_path):
    samples = make_samples(1)
    write_dataset(samples, tmp_path)

    def corrupt(m):
        m["tracks"][1]["id"] = m["tracks"][0]["id"]
    _edit_manifest(tmp_path, corrupt)
    assert any("duplicate" in line for line in validate_dataset(tmp_path))


def test_size_mismatch_errors_name_file_and_field(tmp_path):
    write_dataset(make_samples(1), tmp_path)
    _edit_manifest(tmp_path, lambda m: m.update(height=64))
    with pytest.raises(DataError) as exc_info:
        read_dataset(tmp_path)
    assert "sample_0000.json" in str(exc_info.value)
    assert "video" in str(exc_info.value)
    report = validate_dataset(tmp_path)
    assert len(report) == 1 and "sample_0000.json" in report[0]


def test_wrong_relevance_metadata_flagged(tmp_path):
    write_dataset(make_samples(1), tmp_path)

    def corrupt(m):
        m["tracks"][0]["color"] = [1, 2, 3]
    _edit_manifest(tmp_path, corrupt)
    assert any("target" in line for line in validate_dataset(tmp_path))
