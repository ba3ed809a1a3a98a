"""Test the synthetic portrait renderer and its ground truth."""

# This file is part of VideoStylizer.
# VideoStylizer is free software: you can redistribute it and/or modify it under the terms of
# the GNU General Public License as published by the Free Software Foundation,
# either version 3 of the License, or (at your option) any later version.
# VideoStylizer is distributed in the hope that it will be useful, but WITHOUT ANY
# WARRANTY; without even the implied warranty of MERCHANTABILITY or
# FITNESS FOR A PARTICULAR PURPOSE. See the GNU General Public License for more details.
# You should have received a copy of the GNU General Public License along with VideoStylizer.
# If not, see <https://www.gnu.org/licenses/>."""
import dataclasses

import numpy as np
import pytest

from videostylizer.errors import ConfigurationError, DimensionError
from videostylizer.flowwarp import warp_frame
from videostylizer.metrics import pupil_offset
from videostylizer.synthdata import (
    LABEL_BACKGROUND,
    STYLE_PALETTE,
    BackgroundParams,
    Trajectory,
    VideoSequence,
    boost_saturation,
    oracle_stylize,
    render_video,
    sample_scene,
)


def test_sample_scene_is_deterministic():
    """Test that the same seed gives the same scene."""
    assert sample_scene(7, 10, 64) == sample_scene(7, 10, 64)
    assert sample_scene(7, 10, 64) != sample_scene(8, 10, 64)


@pytest.mark.parametrize("frames,size", [(4, 48), (0, 64), (4, 16)])
def test_sample_scene_rejects_invalid_arguments(frames, size):
    """Test that unsupported sizes and empty durations are rejected."""
    with pytest.raises(ConfigurationError):
        sample_scene(0, frames, size)


def test_render_video_is_pure():
    """Test that rendering the same scene twice is bit-identical."""
    scene = sample_scene(11, 6, 32)
    video_a, truth_a = render_video(scene)
    video_b, truth_b = render_video(scene)
    assert all(np.array_equal(a, b) for a, b in zip(video_a.frames, video_b.frames))
    assert np.array_equal(truth_a.flow_gt, truth_b.flow_gt)
    assert np.array_equal(truth_a.flow_valid, truth_b.flow_valid)


def test_render_video_shapes(scene):
    """Test the shapes and ranges of rendered frames and truth."""
    video, truth = scene
    assert video.num_frames == 8
    assert video.fps == 20.0
    for frame in video.frames:
        assert frame.shape == (32, 32, 3)
        assert frame.dtype == np.float32
        assert frame.min() >= 0.0 and frame.max() <= 1.0
    assert truth.flow_gt.shape == (8, 32, 32, 2)
    assert truth.flow_valid.shape == (8, 32, 32)
    assert truth.mask_bg.shape == (8, 32, 32)
    assert truth.gaze_px.shape == (8, 2, 2)
    assert truth.eye_boxes.shape == (8, 2, 4)


def test_first_frame_has_no_flow(scene):
    """Test that frame 0 has zero flow and no valid pixels."""
    _, truth = scene
    assert not truth.flow_gt[0].any()
    assert not truth.flow_valid[0].any()


def test_mask_matches_labels(scene):
    """Test that the background mask is the background label."""
    _, truth = scene
    assert np.array_equal(truth.mask_bg == 1.0, truth.labels == LABEL_BACKGROUND)


def test_eye_boxes_inside_frame(scene):
    """Test that the eye boxes are inclusive boxes within the frame."""
    _, truth = scene
    boxes = truth.eye_boxes.reshape(-1, 4)
    assert (boxes[:, 0] <= boxes[:, 2]).all() and (boxes[:, 1] <= boxes[:, 3]).all()
    assert boxes.min() >= 0 and boxes.max() <= 31


@pytest.mark.parametrize("size", [32, 64, 128])
def test_gaze_truth_matches_rendered_pupil(size):
    """Test that the darkest-pixel centroid of every rendered eye sits on gaze_px."""
    for seed in range(25):
        video, truth = render_video(sample_scene(seed, 4, size))
        for t in range(video.num_frames):
            for eye in range(2):
                measured = pupil_offset(video.frames[t], truth.eye_boxes[t, eye])
                assert np.linalg.norm(measured - truth.gaze_px[t, eye]) <= 1.0


def test_full_gaze_moves_the_pupil_several_pixels(posed_scene):
    """Test that looking fully sideways moves the pupil at least two pixels at 64px."""
    for gaze in (-1.0, 1.0):
        video, truth = render_video(posed_scene(gaze_x=gaze, face_size=0.4))
        assert np.all(np.sign(truth.gaze_px[0, :, 0]) == gaze)
        assert np.all(np.abs(truth.gaze_px[0, :, 0]) >= 2.0)
        for eye in range(2):
            measured = pupil_offset(video.frames[0], truth.eye_boxes[0, eye])
            assert np.allclose(measured, truth.gaze_px[0, eye])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_ground_truth_flow_is_exact(seed):
    """Test that warping frame t-1 with the truth flow reproduces frame t on valid pixels."""
    video, truth = render_video(sample_scene(seed, 12, 64))
    for t in range(1, video.num_frames):
        valid = truth.flow_valid[t]
        assert valid.any()
        warped = warp_frame(video.frames[t - 1], truth.flow_gt[t])
        assert np.abs(warped - video.frames[t])[valid].max() < 2 / 255


def test_constant_translation_background():
    """Test that a scrolling background has the scroll velocity as flow."""
    scene = dataclasses.replace(
        sample_scene(5, 4, 64), background=BackgroundParams(pattern=0, velocity=(1.0, 0.0))
    )
    _, truth = render_video(scene)
    background = truth.mask_bg[2] == 1.0
    assert np.allclose(truth.flow_gt[2][background], [1.0, 0.0])


def test_trajectory():
    """Test trajectory evaluation and the sinusoid limit."""
    assert Trajectory(base=1.0, velocity=0.5)(4) == 3.0
    with pytest.raises(ConfigurationError):
        Trajectory(base=0.0, components=((1.0, 0.1, 0.0),) * 4)


def test_video_sequence_rejects_mixed_shapes():
    """Test that frames of a sequence must share their shape."""
    with pytest.raises(DimensionError):
        VideoSequence(frames=[np.zeros((4, 4, 3)), np.zeros((4, 5, 3))])


def test_oracle_stylize():
    """Test that the oracle is deterministic and keeps flat palette colours."""
    video, _ = render_video(sample_scene(2, 1, 32))
    first = oracle_stylize(video.frames[0])
    assert np.array_equal(first, oracle_stylize(video.frames[0]))
    assert first.shape == (32, 32, 3)
    assert first.min() >= 0.0 and first.max() <= 1.0
    white = np.ones((8, 8, 3), dtype=np.float32)
    assert np.allclose(oracle_stylize(white), 1.0, atol=1e-6)


def test_boost_saturation_keeps_gray():
    """Test that gray pixels are unchanged by the saturation boost."""
    gray = np.full((4, 4, 3), 0.5, dtype=np.float32)
    assert np.allclose(boost_saturation(gray), gray, atol=1e-6)


def test_oracle_keeps_black():
    """Test that an all-black frame is a fixed point of the oracle."""
    black = np.zeros((8, 8, 3), dtype=np.float32)
    assert np.array_equal(oracle_stylize(black), black)


def test_oracle_commutes_with_mirroring():
    """Test that stylizing a mirrored frame mirrors the stylized frame."""
    video, _ = render_video(sample_scene(6, 1, 32))
    frame = video.frames[0]
    mirrored = oracle_stylize(np.fliplr(frame))
    assert np.allclose(mirrored, np.fliplr(oracle_stylize(frame)), atol=1e-6)


def test_oracle_maps_uniform_gray_to_nearest_palette_colour():
    """Test that a flat mid-gray frame becomes the boosted nearest palette colour."""
    gray = np.full((8, 8, 3), 0.5, dtype=np.float32)
    nearest = STYLE_PALETTE[((STYLE_PALETTE - 0.5) ** 2).sum(axis=1).argmin()]
    styled = oracle_stylize(gray)
    # a flat frame has no edges to darken
    expected = boost_saturation(np.broadcast_to(nearest, gray.shape))
    assert np.allclose(styled, expected, atol=1e-6)
    assert np.allclose(styled, styled[0, 0], atol=1e-6)


def test_identities_differ_between_seeds():
    """Test that neighbouring seeds draw different identities, 99 of 100 times."""
    vectors = [render_video(sample_scene(seed, 1, 32))[1].identity_vec for seed in range(101)]
    distinct = sum(not np.array_equal(vectors[seed], vectors[seed + 1]) for seed in range(100))
    assert distinct >= 99
