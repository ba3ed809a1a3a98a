"""Causal, streaming video stylization: translator per frame, then the sequential refiner."""

# This file is part of VideoStylizer.
# VideoStylizer is free software: you can redistribute it and/or modify it under the terms of
# the GNU General Public License as published by the Free Software Foundation,
# either version 3 of the License, or (at your option) any later version.
# VideoStylizer is distributed in the hope that it will be useful, but WITHOUT ANY
# WARRANTY; without even the implied warranty of MERCHANTABILITY or
# FITNESS FOR A PARTICULAR PURPOSE. See the GNU General Public License for more details.
# You should have received a copy of the GNU General Public License along with VideoStylizer.
# If not, see <https://www.gnu.org/licenses/>."""
from collections import deque
from typing import Deque, Iterable, Iterator, Optional

import numpy as np
import torch
from loguru import logger

from videostylizer.errors import (
    CompatibilityError,
    ConfigurationError,
    ContractViolationError,
    DataError,
    DimensionError,
)
from videostylizer.nets import RefinerInput, SequentialRefiner, UNetTranslator
from videostylizer.synthdata import VideoSequence

__all__ = [
    "RefinerInput",
    "StreamState",
    "StylizationPipeline",
    "assemble_window",
    "commit",
    "stylize_stream",
    "stylize_video",
]


class StreamState:
    """Ring buffers of the last L+1 sources and the last L refined frames.

    `assemble_window` pushes x_t, `commit` pushes y_t and advances t, so between
    the two calls the refined buffer lags the source buffer by one slot.
    """

    def __init__(self, window: int):
        if window < 1:
            raise ConfigurationError(f"The refiner window must be >= 1, got {window}.")
        self.window = window
        self.sources: Deque[torch.Tensor] = deque(maxlen=window + 1)
        self.refined: Deque[torch.Tensor] = deque(maxlen=window)
        self.first_source: Optional[torch.Tensor] = None
        self.first_intermediate: Optional[torch.Tensor] = None
        self.t = 0
        self.pending = False
        self.peak_resident = 0

    @property
    def resident(self) -> int:
        """Number of frames currently held, padding frames included."""
        firsts = sum(frame is not None for frame in (self.first_source, self.first_intermediate))
        return len(self.sources) + len(self.refined) + firsts

    def _touch(self):
        self.peak_resident = max(self.peak_resident, self.resident)


def assemble_window(
    state: StreamState, x_t: torch.Tensor, intermediate: torch.Tensor, window: int
) -> RefinerInput:
    """Push x_t and build the refiner input for frame t.

    Slots before the first frame repeat x_0 (sources) and the translation of x_0
    (refined frames).
    """
    if window != state.window:
        raise ConfigurationError(f"State holds a window of {state.window}, asked for {window}.")
    if state.pending:
        raise ContractViolationError(f"Frame {state.t} was assembled but never committed.")
    if intermediate.shape != x_t.shape:
        raise DimensionError(
            f"Intermediate {tuple(intermediate.shape)} and source {tuple(x_t.shape)} differ."
        )
    if state.first_source is None:
        state.first_source = x_t
        state.first_intermediate = intermediate
    elif x_t.shape != state.first_source.shape:
        raise DimensionError(
            f"Frame {state.t} has shape {tuple(x_t.shape)}, "
            f"the stream started with {tuple(state.first_source.shape)}."
        )
    state.sources.append(x_t)
    state.pending = True
    state._touch()
    sources = [state.first_source] * (window + 1 - len(state.sources)) + list(state.sources)
    refined = [state.first_intermediate] * (window - len(state.refined)) + list(state.refined)
    return RefinerInput(sources=sources, refined_prev=refined, intermediate=intermediate)


def commit(state: StreamState, refined: torch.Tensor):
    """Record y_t and advance the stream to t+1."""
    if not state.pending:
        raise ContractViolationError("commit() called without an assembled window.")
    state.refined.append(refined)
    state.pending = False
    state.t += 1
    state._touch()


def frame_to_tensor(frame: np.ndarray) -> torch.Tensor:
    """H x W x 3 frame to a 1 x 3 x H x W tensor."""
    array = np.ascontiguousarray(np.asarray(frame, dtype=np.float32).transpose(2, 0, 1))
    return torch.from_numpy(array).unsqueeze(0)


def tensor_to_frame(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach()[0].numpy().transpose(1, 2, 0).copy()


class StylizationPipeline:
    """Per-frame deploy stack: frozen translator, optionally followed by the refiner."""

    def __init__(
        self,
        translator: UNetTranslator,
        refiner: Optional[SequentialRefiner] = None,
        use_refiner: bool = True,
    ):
        self.translator = translator
        self.refiner = refiner
        self.use_refiner = use_refiner and refiner is not None
        if self.use_refiner:
            if refiner.config.image_size != translator.config.image_size:
                raise CompatibilityError(
                    f"Refiner works on {refiner.config.image_size}px frames, "
                    f"translator on {translator.config.image_size}px."
                )
            self.window = refiner.config.refiner_window
        else:
            self.window = 1
        self.state = StreamState(self.window)

    @property
    def image_size(self) -> int:
        return self.translator.config.image_size

    def reset(self):
        self.state = StreamState(self.window)

    @torch.no_grad()
    def step(self, x_t: torch.Tensor) -> torch.Tensor:
        intermediate = self.translator(x_t)
        if not self.use_refiner:
            return intermediate
        refined = self.refiner(assemble_window(self.state, x_t, intermediate, self.window))
        commit(self.state, refined)
        return refined


def stylize_stream(
    frames: Iterable[np.ndarray], pipeline: StylizationPipeline
) -> Iterator[np.ndarray]:
    """Yield stylized frames in order; output t only depends on inputs 0..t."""
    pipeline.reset()
    for frame in frames:
        x_t = frame_to_tensor(frame)
        if tuple(x_t.shape[-2:]) != (pipeline.image_size,) * 2:
            raise CompatibilityError(
                f"Frames are {x_t.shape[-1]}px, the checkpoints expect {pipeline.image_size}px."
            )
        yield tensor_to_frame(pipeline.step(x_t))


def stylize_video(
    video: VideoSequence,
    translator: UNetTranslator,
    refiner: Optional[SequentialRefiner] = None,
    window: int = 2,
    use_refiner: bool = True,
) -> VideoSequence:
    """Stylize a whole video.

    Args:
        video: Source frames.
        translator: Stage-I translator.
        refiner: Stage-II refiner, ignored when use_refiner is False.
        window: Refiner window L; must match the refiner checkpoint.
        use_refiner: False returns the frame-by-frame translator outputs.

    Returns:
        The stylized video, same length and fps as the input.
    """
    if video.num_frames == 0:
        raise DataError("Cannot stylize an empty video.")
    if use_refiner:
        if refiner is None:
            raise CompatibilityError("No refiner given; use use_refiner=False for intermediates.")
        if refiner.config.refiner_window != window:
            raise CompatibilityError(
                f"Refiner was built for L={refiner.config.refiner_window}, asked for L={window}."
            )
    pipeline = StylizationPipeline(translator, refiner, use_refiner)
    frames = list(stylize_stream(video.frames, pipeline))
    logger.info(
        f"Stylized {len(frames)} frames ({'refined' if pipeline.use_refiner else 'intermediate'}), "
        f"peak resident frames {pipeline.state.peak_resident}."
    )
    return VideoSequence(frames=frames, fps=video.fps)
