"""Test the evaluation metrics."""

# This file is part of VideoStylizer.
# VideoStylizer is free software: you can redistribute it and/or modify it under the terms of
# the GNU General Public License as published by the Free Software Foundation,
# either version 3 of the License, or (at your option) any later version.
# VideoStylizer is distributed in the hope that it will be useful, but WITHOUT ANY
# WARRANTY; without even the implied warranty of MERCHANTABILITY or
# FITNESS FOR A PARTICULAR PURPOSE. See the GNU General Public License for more details.
# You should have received a copy of the GNU General Public License along with VideoStylizer.
# If not, see <https://www.gnu.org/licenses/>."""
import numpy as np
import pytest
import torch

from videostylizer.errors import ConfigurationError, DimensionError, UndefinedRegionError
from videostylizer.infer import StylizationPipeline
from videostylizer.metrics import (
    benchmark_latency,
    compare_outputs,
    csim,
    evaluate,
    gaze_distance,
    identity_descriptor,
    pupil_offset,
    report_params,
    temporal_warp_error,
)
from videostylizer.nets import SequentialRefiner, freeze
from videostylizer.synthdata import (
    EYE_SEMI_X,
    PUPIL_RADIUS,
    VideoSequence,
    render_video,
    sample_scene,
)


def test_csim_of_identical_frames(scene):
    """Test that a frame is fully similar to itself."""
    video, truth = scene
    assert csim(video.frames[3], video.frames[3], truth.mask_bg[3]) == 1.0


def test_identity_descriptor_is_unit_length(scene):
    """Test the descriptor norm and its error cases."""
    video, truth = scene
    descriptor = identity_descriptor(video.frames[0], truth.mask_bg[0])
    assert descriptor.shape == (5,)
    assert np.linalg.norm(descriptor) == pytest.approx(1.0)
    with pytest.raises(UndefinedRegionError):
        identity_descriptor(video.frames[0], np.ones((32, 32)))
    with pytest.raises(DimensionError):
        identity_descriptor(video.frames[0], np.zeros((16, 16)))
    with pytest.raises(DimensionError):
        csim(video.frames[0], video.frames[0][:16], truth.mask_bg[0])


def test_identity_descriptor_separates_identities():
    """Test that frames of one identity are closer than frames of different identities."""
    scenes = [render_video(sample_scene(seed, 6, 64)) for seed in range(8)]
    descriptors = [
        [identity_descriptor(video.frames[t], truth.mask_bg[t]) for t in (0, 5)]
        for video, truth in scenes
    ]
    same = [first @ last for first, last in descriptors]
    different = [descriptors[i][0] @ descriptors[(i + 1) % 8][0] for i in range(8)]
    assert np.mean(same) > np.mean(different)


def test_identity_descriptors_differ_between_scenes():
    """Test that neighbouring seeds give distinct descriptors, 99 of 100 times."""
    descriptors = []
    for seed in range(101):
        video, truth = render_video(sample_scene(seed, 1, 32))
        descriptors.append(identity_descriptor(video.frames[0], truth.mask_bg[0]))
    distinct = sum(
        not np.allclose(descriptors[seed], descriptors[seed + 1], atol=1e-6) for seed in range(100)
    )
    assert distinct >= 99


def test_pupil_offset():
    """Test the darkest-pixel centroid relative to the box centre."""
    frame = np.ones((10, 10, 3), dtype=np.float32)
    box = (2, 2, 6, 6)
    assert np.array_equal(pupil_offset(frame, box), [0.0, 0.0])
    frame[3, 5] = 0.0
    assert np.allclose(pupil_offset(frame, box), [1.0, -1.0])
    with pytest.raises(ConfigurationError):
        pupil_offset(frame, (2, 2, 10, 6))


def test_gaze_distance():
    """Test the mean pupil displacement over eye boxes."""
    src = np.ones((10, 10, 3), dtype=np.float32)
    out = src.copy()
    src[3, 5] = 0.0
    out[3, 2] = 0.0
    boxes = [(2, 2, 6, 6), (7, 7, 9, 9)]
    # (1, -1) against (-2, -1) in the first box, uniform second box
    assert gaze_distance(src, out, boxes) == pytest.approx(1.5)
    assert gaze_distance(src, src, boxes) == 0.0
    assert gaze_distance(src, out, []) == 0.0


def test_gaze_of_identical_renders(scene):
    """Test that a video has zero gaze distance to itself."""
    video, truth = scene
    assert gaze_distance(video.frames[2], video.frames[2], truth.eye_boxes[2]) == 0.0


def test_gaze_distance_of_a_two_pixel_shift(posed_scene):
    """Test that renders whose pupils sit two pixels apart are two pixels apart in gaze."""
    # a gaze of 1 / reach aims the pupil one pixel off the eye centre
    reach = (EYE_SEMI_X - PUPIL_RADIUS) * 0.5 * 64
    src, src_truth = render_video(posed_scene(gaze_x=-1.0 / reach))
    out, out_truth = render_video(posed_scene(gaze_x=1.0 / reach))
    assert np.array_equal(src_truth.eye_boxes, out_truth.eye_boxes)
    assert np.allclose(out_truth.gaze_px[0] - src_truth.gaze_px[0], [[2.0, 0.0], [2.0, 0.0]])
    distance = gaze_distance(src.frames[0], out.frames[0], src_truth.eye_boxes[0])
    assert distance == pytest.approx(2.0, abs=0.5)


def test_warp_error_of_a_static_video():
    """Test that a static video has no temporal warp error."""
    frame = np.random.default_rng(0).random((8, 8, 3)).astype(np.float32)
    video = VideoSequence([frame] * 4)
    flows = [np.zeros((8, 8, 2), np.float32)] * 4
    valid = [np.ones((8, 8), bool)] * 4
    assert temporal_warp_error(video, flows, valid) == 0.0


def test_warp_error_with_a_frozen_last_frame(scene):
    """Test that repeating the last frame with zero flow scales the error by (T-1)/T."""
    video, truth = scene
    valid = [np.ones((32, 32), bool)] * video.num_frames
    error = temporal_warp_error(video, truth.flow_gt, valid)
    assert error > 0
    frozen = VideoSequence(video.frames + [video.frames[-1]])
    flows = list(truth.flow_gt) + [np.zeros((32, 32, 2), np.float32)]
    extended = temporal_warp_error(frozen, flows, valid + [valid[0]])
    steps = video.num_frames - 1
    assert extended == pytest.approx(error * steps / (steps + 1))


def test_warp_error_edge_cases(scene):
    """Test mismatching lengths and frames without valid pixels."""
    video, truth = scene
    with pytest.raises(DimensionError):
        temporal_warp_error(video, truth.flow_gt[:-1], truth.flow_valid)
    empty = [np.zeros((32, 32), bool)] * video.num_frames
    assert temporal_warp_error(video, truth.flow_gt, empty) == 0.0
    assert temporal_warp_error(video, truth.flow_gt, truth.flow_valid) < 2 / 255


def test_benchmark_latency_with_a_fake_clock(mocker, scene, translator):
    """Test the latency statistics on known timings."""
    video, _ = scene
    ticks = []
    for rep in range(10):
        ticks += [float(rep), rep + 0.01 * (rep + 1)]
    mocker.patch("videostylizer.metrics.time.perf_counter", side_effect=ticks)
    report = benchmark_latency(StylizationPipeline(translator), video, warmup=2, reps=10)
    assert report.mean_s == pytest.approx(0.055)
    assert report.p95_s == pytest.approx(0.0955)
    assert report.fps == pytest.approx(1 / 0.055)
    assert report.mode == "single-thread"
    assert report.threads == 1
    assert report.reps == 10


def test_benchmark_latency(scene, translator, tiny_config):
    """Test a real benchmark run and its argument checks."""
    video, _ = scene
    threads = torch.get_num_threads()
    pipeline = StylizationPipeline(translator, freeze(SequentialRefiner(tiny_config)))
    report = benchmark_latency(pipeline, video, warmup=2, reps=10)
    assert torch.get_num_threads() == threads
    assert report.mean_s > 0 and report.p95_s > 0 and report.fps > 0
    assert report.mean_s <= report.p95_s
    assert set(report.as_dict()) == {"mean_s", "p95_s", "fps", "mode", "threads", "reps"}
    with pytest.raises(ConfigurationError):
        benchmark_latency(pipeline, video, reps=9)
    with pytest.raises(ConfigurationError):
        benchmark_latency(pipeline, VideoSequence([]), reps=10)


def test_benchmark_without_refiner_is_not_slower(scene, translator, tiny_config):
    """Test that dropping the refiner never costs latency."""
    video, _ = scene
    full = StylizationPipeline(translator, freeze(SequentialRefiner(tiny_config)))
    plain = StylizationPipeline(translator, full.refiner, use_refiner=False)
    full_means, plain_means = [], []
    for _ in range(3):
        full_means.append(benchmark_latency(full, video, warmup=2, reps=30).mean_s)
        plain_means.append(benchmark_latency(plain, video, warmup=2, reps=30).mean_s)
    assert min(plain_means) <= min(full_means)


def test_report_params(mocker, translator, tiny_config):
    """Test the deploy stack size and the ceiling warning."""
    refiner = SequentialRefiner(tiny_config)
    logger = mocker.patch("videostylizer.metrics.logger")
    assert report_params(None, refiner) == 2_691
    assert report_params(translator, refiner) == 174_310
    logger.warning.assert_not_called()
    mocker.patch("videostylizer.metrics.PARAM_CEILING", 1_000)
    report_params(None, refiner)
    logger.warning.assert_called_once()


def test_evaluate_with_truth(scene):
    """Test the aggregate report of a video against itself."""
    video, truth = scene
    report = evaluate([video, video], [video, video], [truth, truth])
    assert report["csim_mean"] == 1.0
    assert report["gaze_px_mean"] == 0.0
    assert report["warp_error"] == pytest.approx(
        temporal_warp_error(video, truth.flow_gt, truth.flow_valid)
    )
    assert report["n_frames"] == 16
    with pytest.raises(DimensionError):
        evaluate([video], [])


def test_evaluate_without_truth(scene):
    """Test that estimated flows and masks are used without scene truth."""
    video, _ = scene
    report = evaluate([video], [video])
    assert report["gaze_px_mean"] is None
    assert report["n_frames"] == 8
    assert report["warp_error"] >= 0.0


def test_compare_outputs(scene):
    """Test the pairwise preference of a clean over a noisy output."""
    video, truth = scene
    rng = np.random.default_rng(0)
    noisy = VideoSequence(
        [frame + rng.uniform(-0.1, 0.1, frame.shape).astype(np.float32) for frame in video.frames]
    )
    result = compare_outputs([video], [video], [noisy], [truth])
    assert result == {"temporal_consistency": 1.0, "identity": 1.0, "n_videos": 1}
    with pytest.raises(DimensionError):
        compare_outputs([video], [video], [])
