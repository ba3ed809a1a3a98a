"""Evaluation metrics: identity similarity, gaze distance, temporal warp error, latency, size."""

# This file is part of VideoStylizer.
# VideoStylizer is free software: you can redistribute it and/or modify it under the terms of
# the GNU General Public License as published by the Free Software Foundation,
# either version 3 of the License, or (at your option) any later version.
# VideoStylizer is distributed in the hope that it will be useful, but WITHOUT ANY
# WARRANTY; without even the implied warranty of MERCHANTABILITY or
# FITNESS FOR A PARTICULAR PURPOSE. See the GNU General Public License for more details.
# You should have received a copy of the GNU General Public License along with VideoStylizer.
# If not, see <https://www.gnu.org/licenses/>."""
import math
import time
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from loguru import logger
from PIL import Image

from videostylizer.errors import (
    ConfigurationError,
    DimensionError,
    UndefinedRegionError,
)
from videostylizer.flowwarp import (
    FlowField,
    ParsingMap,
    estimate_flow_classical,
    heuristic_background,
    warp_frame,
)
from videostylizer.infer import StylizationPipeline, frame_to_tensor
from videostylizer.nets import SequentialRefiner, UNetTranslator, param_count
from videostylizer.synthdata import SceneTruth, VideoSequence, luma

PARAM_CEILING = 6_000_000
TIE_TOLERANCE = 1e-6
MIN_REPS = 10
# min-max ranges of the descriptor entries that are not already in [0, 1]
ASPECT_RANGE = (0.5, 1.5)
SPACING_RANGE = (0.3, 0.8)
EYE_WHITE_LUMA = 0.85
EYE_WHITE_SATURATION = 0.15


def _hsv(frame: np.ndarray) -> np.ndarray:
    array = np.clip(np.rint(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    return np.asarray(Image.fromarray(array).convert("HSV"), dtype=np.float64) / 255.0


def _circular_mean(hues: np.ndarray) -> float:
    angles = 2 * math.pi * hues
    mean = math.atan2(float(np.sin(angles).mean()), float(np.cos(angles).mean()))
    return (mean / (2 * math.pi)) % 1.0


def _normalize(value: float, bounds: Tuple[float, float]) -> float:
    low, high = bounds
    return float(np.clip((value - low) / (high - low), 0.0, 1.0))


def identity_descriptor(frame: np.ndarray, background: Union[ParsingMap, np.ndarray]) -> np.ndarray:
    """5-dim unit identity descriptor of the foreground of a frame.

    Entries: face mean hue, face mean saturation, face bbox aspect ratio,
    eye spacing / face width, hair mean hue. The face is the brighter half of
    the foreground (by mean luma), hair the rest, eyes the bright unsaturated
    face pixels.

    Args:
        frame: H x W x 3 frame in [0, 1].
        background: Background probability map; foreground is where it is < 0.5.

    Returns:
        Unit-length float64 vector.
    """
    background = background.data if isinstance(background, ParsingMap) else np.asarray(background)
    frame = np.asarray(frame, dtype=np.float32)
    if background.shape != frame.shape[:2]:
        raise DimensionError(f"Mask {background.shape} does not match frame {frame.shape}.")
    foreground = background < 0.5
    if not foreground.any():
        raise UndefinedRegionError("The frame has no foreground.")
    hsv = _hsv(frame)
    brightness = luma(frame)
    face = foreground & (brightness >= brightness[foreground].mean())
    hair = foreground & ~face
    if not face.any():
        raise UndefinedRegionError("The foreground has no face region.")

    ys, xs = np.nonzero(face)
    face_width = float(xs.max() - xs.min() + 1)
    face_height = float(ys.max() - ys.min() + 1)
    eyes = face & (brightness >= EYE_WHITE_LUMA) & (hsv[..., 1] <= EYE_WHITE_SATURATION)
    spacing = 0.0
    if eyes.any():
        eye_ys, eye_xs = np.nonzero(eyes)
        middle = xs.mean()
        left, right = eye_xs[eye_xs < middle], eye_xs[eye_xs >= middle]
        if len(left) and len(right):
            spacing = float(right.mean() - left.mean()) / face_width

    descriptor = np.array(
        [
            _circular_mean(hsv[..., 0][face]),
            float(hsv[..., 1][face].mean()),
            _normalize(face_width / face_height, ASPECT_RANGE),
            _normalize(spacing, SPACING_RANGE),
            _circular_mean(hsv[..., 0][hair]) if hair.any() else 0.0,
        ]
    )
    norm = np.linalg.norm(descriptor)
    if norm == 0:
        raise UndefinedRegionError("The identity descriptor is all zero.")
    return descriptor / norm


def csim(src: np.ndarray, out: np.ndarray, fg_mask: Union[ParsingMap, np.ndarray]) -> float:
    """Cosine similarity of the identity descriptors of two frames, in [-1, 1]."""
    if np.shape(src) != np.shape(out):
        raise DimensionError(f"Frames differ in shape: {np.shape(src)} vs {np.shape(out)}.")
    a = identity_descriptor(src, fg_mask)
    b = identity_descriptor(out, fg_mask)
    if np.array_equal(a, b):
        return 1.0
    return float(np.clip(a @ b, -1.0, 1.0))


def pupil_offset(frame: np.ndarray, box: Sequence[int]) -> np.ndarray:
    """Darkest-pixel centroid minus box centre; a uniform box gives (0, 0)."""
    height, width = np.shape(frame)[:2]
    x0, y0, x1, y1 = (int(v) for v in box)
    if not (0 <= x0 <= x1 < width and 0 <= y0 <= y1 < height):
        raise ConfigurationError(f"Eye box {tuple(box)} lies outside the {width}x{height} frame.")
    region = luma(np.asarray(frame)[y0 : y1 + 1, x0 : x1 + 1])
    darkest = region <= region.min() + TIE_TOLERANCE
    if darkest.all():
        return np.zeros(2)
    ys, xs = np.nonzero(darkest)
    return np.array([xs.mean() - (x1 - x0) / 2.0, ys.mean() - (y1 - y0) / 2.0])


def gaze_distance(src: np.ndarray, out: np.ndarray, eye_boxes: Sequence[Sequence[int]]) -> float:
    """Mean Euclidean distance (pixels) between the pupil offsets of both frames over the eyes."""
    if np.shape(src) != np.shape(out):
        raise DimensionError(f"Frames differ in shape: {np.shape(src)} vs {np.shape(out)}.")
    distances = [
        float(np.linalg.norm(pupil_offset(src, box) - pupil_offset(out, box))) for box in eye_boxes
    ]
    return float(np.mean(distances)) if distances else 0.0


def temporal_warp_error(
    video: VideoSequence,
    flows: Sequence[Union[FlowField, np.ndarray]],
    valid: Sequence[np.ndarray],
) -> float:
    """Mean over t >= 1 of the mean |warp(y_{t-1}, f_t) - y_t| over valid pixels.

    flows[0] and valid[0] are ignored. Frames without valid pixels are skipped.
    """
    if len(flows) != video.num_frames or len(valid) != video.num_frames:
        raise DimensionError(
            f"{video.num_frames} frames but {len(flows)} flows and {len(valid)} masks."
        )
    errors = []
    for t in range(1, video.num_frames):
        mask = np.asarray(valid[t], dtype=bool)
        if not mask.any():
            logger.warning(f"Frame {t} has no valid flow pixels; skipped.")
            continue
        warped = warp_frame(video.frames[t - 1], flows[t])
        errors.append(float(np.abs(warped - video.frames[t])[mask].mean()))
    return float(np.mean(errors)) if errors else 0.0


@dataclass
class LatencyReport:
    mean_s: float
    p95_s: float
    fps: float
    mode: str
    threads: int
    reps: int

    def as_dict(self) -> dict:
        return asdict(self)


def benchmark_latency(
    pipeline: StylizationPipeline,
    video: VideoSequence,
    warmup: int = 10,
    reps: int = 100,
    parallel: bool = False,
) -> LatencyReport:
    """Per-frame wall-clock latency of the deploy stack, excluding disk I/O.

    Frames are fed in order (cycling through the video) after `warmup` untimed
    frames. Single-threaded unless parallel is set.

    p95 is the linearly interpolated 95th percentile. It lies at or above the mean for
    reps=10, but with more reps a single slow outlier can lift the mean above it, so the
    two are reported side by side and not ordered.
    """
    if reps < MIN_REPS:
        raise ConfigurationError(f"bench.reps must be >= {MIN_REPS}, got {reps}.")
    if video.num_frames == 0:
        raise ConfigurationError("The benchmark needs at least one frame.")
    tensors = [frame_to_tensor(frame) for frame in video.frames]
    previous_threads = torch.get_num_threads()
    if not parallel:
        torch.set_num_threads(1)
    threads = torch.get_num_threads()
    try:
        pipeline.reset()
        for index in range(warmup):
            pipeline.step(tensors[index % len(tensors)])
        timings = []
        for index in range(reps):
            frame = tensors[(warmup + index) % len(tensors)]
            start = time.perf_counter()
            pipeline.step(frame)
            timings.append(time.perf_counter() - start)
    finally:
        torch.set_num_threads(previous_threads)
    mean = float(np.mean(timings))
    report = LatencyReport(
        mean_s=mean,
        p95_s=float(np.percentile(timings, 95)),
        fps=1.0 / mean if mean > 0 else float("inf"),
        mode="parallel" if parallel else "single-thread",
        threads=threads,
        reps=reps,
    )
    logger.info(
        f"Latency ({report.mode}, {threads} threads): mean {report.mean_s * 1000:.2f} ms, "
        f"p95 {report.p95_s * 1000:.2f} ms, {report.fps:.1f} fps."
    )
    return report


def report_params(
    translator: Optional[UNetTranslator], refiner: Optional[SequentialRefiner]
) -> int:
    """Trainable parameters of the deploy stack (translator + refiner)."""
    count = sum(param_count(net, include_frozen=True) for net in (translator, refiner))
    logger.info(f"Deploy stack has {count:,} trainable parameters.")
    if count >= PARAM_CEILING:
        logger.warning(f"Deploy stack exceeds {PARAM_CEILING:,} parameters.")
    return count


def _truth_inputs(
    source: VideoSequence, truth: Optional[SceneTruth]
) -> Tuple[List[np.ndarray], List[np.ndarray], List[np.ndarray]]:
    """Flows, valid masks and background maps, from truth or estimated on the source."""
    if truth is not None:
        return list(truth.flow_gt), list(truth.flow_valid), list(truth.mask_bg)
    size = source.frames[0].shape[:2]
    flows = [np.zeros(size + (2,), np.float32)] + [
        estimate_flow_classical(source.frames[t - 1], source.frames[t]).data
        for t in range(1, source.num_frames)
    ]
    valid = [np.ones(size, dtype=bool)] * source.num_frames
    masks = [heuristic_background(frame) for frame in source.frames]
    return flows, valid, masks


def evaluate_video(
    source: VideoSequence, output: VideoSequence, truth: Optional[SceneTruth] = None
) -> Dict[str, Optional[float]]:
    """Per-video metrics; gaze needs the eye boxes of the scene truth."""
    if source.num_frames != output.num_frames:
        raise DimensionError(
            f"Source has {source.num_frames} frames, output {output.num_frames}."
        )
    flows, valid, masks = _truth_inputs(source, truth)
    similarities = []
    for src, out, mask in zip(source.frames, output.frames, masks):
        try:
            similarities.append(csim(src, out, mask))
        except UndefinedRegionError:
            logger.warning("Skipping a frame without foreground in CSIM.")
    gaze = None
    if truth is not None:
        gaze = float(
            np.mean(
                [
                    gaze_distance(src, out, boxes)
                    for src, out, boxes in zip(source.frames, output.frames, truth.eye_boxes)
                ]
            )
        )
    return {
        "csim_mean": float(np.mean(similarities)) if similarities else None,
        "gaze_px_mean": gaze,
        "warp_error": temporal_warp_error(output, flows, valid),
        "n_frames": output.num_frames,
    }


def evaluate(
    sources: Sequence[VideoSequence],
    outputs: Sequence[VideoSequence],
    truths: Optional[Sequence[Optional[SceneTruth]]] = None,
) -> dict:
    """Aggregate report {csim_mean, gaze_px_mean, warp_error, n_frames} over videos.

    Means are weighted by frame count.
    """
    if len(sources) != len(outputs):
        raise DimensionError(f"{len(sources)} source videos but {len(outputs)} outputs.")
    truths = truths if truths is not None else [None] * len(sources)
    per_video = [evaluate_video(s, o, t) for s, o, t in zip(sources, outputs, truths)]
    n_frames = sum(item["n_frames"] for item in per_video)

    def weighted(key: str) -> Optional[float]:
        pairs = [(item[key], item["n_frames"]) for item in per_video if item[key] is not None]
        if not pairs:
            return None
        return float(sum(value * n for value, n in pairs) / sum(n for _, n in pairs))

    return {
        "csim_mean": weighted("csim_mean"),
        "gaze_px_mean": weighted("gaze_px_mean"),
        "warp_error": weighted("warp_error"),
        "n_frames": n_frames,
    }


def compare_outputs(
    sources: Sequence[VideoSequence],
    outputs_a: Sequence[VideoSequence],
    outputs_b: Sequence[VideoSequence],
    truths: Optional[Sequence[Optional[SceneTruth]]] = None,
) -> dict:
    """Fraction of videos on which output A beats output B, per criterion.

    Temporal consistency: lower temporal warp error. Identity: higher mean CSIM.
    """
    if not (len(sources) == len(outputs_a) == len(outputs_b)):
        raise DimensionError("Source and output video counts differ.")
    truths = truths if truths is not None else [None] * len(sources)
    temporal_wins = identity_wins = identity_votes = 0
    for source, a, b, truth in zip(sources, outputs_a, outputs_b, truths):
        report_a = evaluate_video(source, a, truth)
        report_b = evaluate_video(source, b, truth)
        temporal_wins += report_a["warp_error"] < report_b["warp_error"]
        if report_a["csim_mean"] is not None and report_b["csim_mean"] is not None:
            identity_votes += 1
            identity_wins += report_a["csim_mean"] > report_b["csim_mean"]
    n = len(sources)
    return {
        "temporal_consistency": temporal_wins / n if n else None,
        "identity": identity_wins / identity_votes if identity_votes else None,
        "n_videos": n,
    }
