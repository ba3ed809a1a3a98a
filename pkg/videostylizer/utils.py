"""Helpers for logging phases, seeding, checkpoint checks and dataset I/O."""

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
import functools
import json
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, List, Sequence, Tuple, Union

import numpy as np
import torch
from loguru import logger
from PIL import Image

from videostylizer.checkpoint import Checkpoint, Stage
from videostylizer.errors import ConfigurationError, DataError
from videostylizer.synthdata import SceneTruth, VideoSequence, render_video, sample_scene

FLO2_MAGIC = b"SFLO"
FRAME_PATTERN = "{:06d}.png"
FLOW_PATTERN = "{:06d}.flo2"
TRUTH_FILE = "truth.json"
MANIFEST_FILE = "manifest.json"

PathLike = Union[str, Path]


class CompatibilityStatus(Enum):
    """Enum for the compatibility status of a pair of checkpoints."""

    UNKNOWN = 0
    COMPATIBLE = 1
    INCOMPATIBLE = 2


@dataclass
class CheckResult:
    """Dataclass for the result of a check.

    Attributes:
        status: Compatibility status.
        message: Message to be displayed to the user.
    """

    status: CompatibilityStatus
    message: str


def log_phase(description: str) -> Callable:
    """Logging decorator for long-running phases.

    Logs the description with the scalar keyword parameters, then the elapsed
    time on success or a failure line before re-raising.

    Args:
        description: Description of the phase.
    """

    def logging_decorator(func) -> Callable:
        @functools.wraps(func)
        def logging(*args, **kwargs):
            parameters = {
                key: value
                for key, value in kwargs.items()
                if isinstance(value, (bool, int, float, str, Path))
            }
            logger.info(f"{description} - Parameters: {parameters}")
            start = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception:
                logger.error(f"{description} failed!")
                raise
            logger.success(f"{description} done in {time.perf_counter() - start:.1f}s.")
            return result

        return logging

    return logging_decorator


def seed_everything(seed: int) -> torch.Generator:
    """Seed torch's global generator and return a dedicated generator for sampling."""
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def checkpoints_work_together(translator: Checkpoint, refiner: Checkpoint) -> CheckResult:
    """Determine if a refiner checkpoint was trained on top of the given translator.

    Args:
        translator: Stage-I translator checkpoint.
        refiner: Stage-II refiner checkpoint.

    Returns:
        CheckResult object containing the compatibility status and a message.
    """
    if translator.stage is not Stage.TRANSLATOR or refiner.stage is not Stage.REFINER:
        logger.error("Wrong checkpoint stages given.")
        return CheckResult(
            CompatibilityStatus.INCOMPATIBLE,
            f"Expected translator and refiner checkpoints, got "
            f"{translator.stage.value} and {refiner.stage.value}.",
        )
    for key in ("image_size", "base_channels", "latent_dim"):
        if translator.config.get(key) != refiner.config.get(key):
            logger.error(f"Checkpoints disagree on {key}.")
            return CheckResult(
                CompatibilityStatus.INCOMPATIBLE,
                f"Translator and refiner disagree on {key}: "
                f"{translator.config.get(key)} vs {refiner.config.get(key)}.",
            )
    expected = refiner.config.get("translator_fingerprint")
    if expected is None:
        return CheckResult(
            CompatibilityStatus.UNKNOWN,
            "The refiner does not record which translator it was trained with.",
        )
    if expected != translator.fingerprint("translator"):
        logger.warning("Refiner was trained on top of a different translator.")
        return CheckResult(
            CompatibilityStatus.INCOMPATIBLE,
            "The refiner was trained on top of a different translator.",
        )
    logger.success("Translator and refiner checkpoints work together.")
    return CheckResult(CompatibilityStatus.COMPATIBLE, "Checkpoints work together.")


def save_png(path: Path, frame: np.ndarray):
    """Write a float frame in [0, 1] as 8-bit RGB (H x W x 3) or gray (H x W)."""
    array = np.clip(np.rint(np.asarray(frame, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(array).save(path)


def load_png(path: Path, gray: bool = False) -> np.ndarray:
    with Image.open(path) as image:
        array = np.asarray(image.convert("L" if gray else "RGB"), dtype=np.float32)
    return array / 255.0


def write_flo2(path: Path, flow: np.ndarray):
    """SFLO magic, u32 LE width, u32 LE height, then row-major LE float32 (dx, dy) pairs."""
    flow = np.asarray(flow, dtype="<f4")
    height, width = flow.shape[:2]
    path.write_bytes(FLO2_MAGIC + struct.pack("<II", width, height) + flow.tobytes(order="C"))


def read_flo2(path: Path) -> np.ndarray:
    payload = path.read_bytes()
    if payload[:4] != FLO2_MAGIC or len(payload) < 12:
        raise DataError(f"{path} is not a .flo2 file.")
    width, height = struct.unpack_from("<II", payload, 4)
    if len(payload) != 12 + 8 * width * height:
        raise DataError(f"{path} is truncated.")
    data = np.frombuffer(payload, dtype="<f4", offset=12)
    return data.reshape(height, width, 2).astype(np.float32)


def encode_runs(mask: np.ndarray) -> List[int]:
    """Run lengths of a boolean mask in row-major order, starting with a False run."""
    flat = np.asarray(mask, dtype=bool).ravel()
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs.insert(0, 0)
    return [int(run) for run in runs]


def decode_runs(runs: Sequence[int], shape: Tuple[int, int]) -> np.ndarray:
    values = np.arange(len(runs)) % 2 == 1
    flat = np.repeat(values, runs)
    if flat.size != shape[0] * shape[1]:
        raise DataError(f"Run lengths cover {flat.size} pixels, expected {shape[0] * shape[1]}.")
    return flat.reshape(shape)


def write_frames(directory: Path, frames: Sequence[np.ndarray], fps: float):
    """Write frames/%06d.png and manifest.json into directory."""
    frames_dir = directory / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    for index, frame in enumerate(frames):
        save_png(frames_dir / FRAME_PATTERN.format(index), frame)
    height, width = frames[0].shape[:2] if len(frames) else (0, 0)
    manifest = {"num_frames": len(frames), "width": width, "height": height, "fps": fps}
    (directory / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def read_frames(directory: PathLike) -> VideoSequence:
    directory = Path(directory)
    frames_dir = directory / "frames"
    files = sorted(frames_dir.glob("*.png"))
    if not files:
        raise DataError(f"No frames found in {frames_dir}.")
    fps = 20.0
    for meta_name in (MANIFEST_FILE, TRUTH_FILE):
        meta_path = directory / meta_name
        if meta_path.is_file():
            fps = float(json.loads(meta_path.read_text(encoding="utf-8")).get("fps", fps))
            break
    return VideoSequence(frames=[load_png(path) for path in files], fps=fps)


def write_scene(directory: PathLike, video: VideoSequence, truth: SceneTruth) -> Path:
    """Write one rendered scene in the dataset layout."""
    directory = Path(directory)
    write_frames(directory, video.frames, video.fps)
    (directory / "flow").mkdir(exist_ok=True)
    (directory / "mask").mkdir(exist_ok=True)
    for t in range(truth.num_frames):
        write_flo2(directory / "flow" / FLOW_PATTERN.format(t), truth.flow_gt[t])
        save_png(directory / "mask" / FRAME_PATTERN.format(t), truth.mask_bg[t])
    height, width = truth.flow_valid.shape[1:3]
    payload = {
        "fps": truth.fps,
        "identity_vec": truth.identity_vec.tolist(),
        "gaze_px": truth.gaze_px.tolist(),
        "eye_boxes": truth.eye_boxes.tolist(),
        "eye_centers": truth.eye_centers.tolist(),
        "flow_valid": {
            "shape": [height, width],
            "runs": [encode_runs(valid) for valid in truth.flow_valid],
        },
    }
    (directory / TRUTH_FILE).write_text(json.dumps(payload), encoding="utf-8")
    return directory


def read_truth(directory: PathLike) -> SceneTruth:
    directory = Path(directory)
    truth_path = directory / TRUTH_FILE
    if not truth_path.is_file():
        raise DataError(f"No {TRUTH_FILE} in {directory}.")
    payload = json.loads(truth_path.read_text(encoding="utf-8"))
    shape = tuple(payload["flow_valid"]["shape"])
    flow_files = sorted((directory / "flow").glob("*.flo2"))
    mask_files = sorted((directory / "mask").glob("*.png"))
    return SceneTruth(
        flow_gt=np.stack([read_flo2(path) for path in flow_files]),
        flow_valid=np.stack([decode_runs(runs, shape) for runs in payload["flow_valid"]["runs"]]),
        mask_bg=np.stack([load_png(path, gray=True) for path in mask_files]),
        gaze_px=np.asarray(payload["gaze_px"], dtype=np.float32),
        eye_boxes=np.asarray(payload["eye_boxes"], dtype=np.int64),
        eye_centers=np.asarray(payload["eye_centers"], dtype=np.float32),
        identity_vec=np.asarray(payload["identity_vec"], dtype=np.float32),
        fps=float(payload["fps"]),
    )


def read_scene(directory: PathLike) -> Tuple[VideoSequence, SceneTruth]:
    return read_frames(directory), read_truth(directory)


def list_scenes(root: PathLike) -> List[Path]:
    """Scene directories below root, or root itself when it is a scene."""
    root = Path(root)
    if (root / "frames").is_dir():
        return [root]
    scenes = []
    if root.is_dir():
        scenes = sorted(path for path in root.iterdir() if (path / "frames").is_dir())
    if not scenes:
        raise DataError(f"No scenes found in {root}.")
    return scenes


def scene_seed(seed: int, index: int) -> int:
    """Seed of scene `index` of a dataset drawn with `seed`."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@log_phase("Generating the synthetic dataset")
def generate_dataset(
    out: PathLike,
    num_scenes: int,
    frames: int,
    size: int,
    seed: int,
    fps: float = 20.0,
    jobs: int = 1,
) -> List[Path]:
    """Render num_scenes scenes into out/scene_%04d, using `jobs` worker threads.

    The output only depends on the arguments, not on the number of workers.
    """
    if num_scenes < 1:
        raise ConfigurationError(f"num_scenes must be >= 1, got {num_scenes}.")
    if jobs < 1:
        raise ConfigurationError(f"jobs must be >= 1, got {jobs}.")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)

    def render_one(index: int) -> Path:
        scene = sample_scene(scene_seed(seed, index), frames, size)
        video, truth = render_video(dataclasses.replace(scene, fps=fps))
        return write_scene(out / f"scene_{index:04d}", video, truth)

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        scenes = list(pool.map(render_one, range(num_scenes)))
    logger.success(f"Wrote {len(scenes)} scenes of {frames} frames to {out}.")
    return scenes
