"""Backward warping, classical flow estimation and background parsing.

Flow and parsing providers are only used while training the refiner. Inference
never touches this module apart from `backward_warp` in the metrics.
"""

# This file is part of VideoStylizer.
# VideoStylizer is free software: you can redistribute it and/or modify it under the terms of
# the GNU General Public License as published by the Free Software Foundation,
# either version 3 of the License, or (at your option) any later version.
# VideoStylizer is distributed in the hope that it will be useful, but WITHOUT ANY
# WARRANTY; without even the implied warranty of MERCHANTABILITY or
# FITNESS FOR A PARTICULAR PURPOSE. See the GNU General Public License for more details.
# You should have received a copy of the GNU General Public License along with VideoStylizer.
# If not, see <https://www.gnu.org/licenses/>."""
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Protocol, Union

import numpy as np
import torch
from scipy import ndimage, special
from torch import nn

from videostylizer.checkpoint import Stage, load_external
from videostylizer.errors import (
    ConfigurationError,
    DimensionError,
    DomainError,
    MissingInputError,
)
from videostylizer.synthdata import (
    BACKGROUND_PALETTE,
    FOREGROUND_PALETTE,
    FrameTruth,
    luma,
)

# neighbourhood average of the classic Horn-Schunck scheme
AVERAGE_KERNEL = np.array(
    [[1 / 12, 1 / 6, 1 / 12], [1 / 6, 0.0, 1 / 6], [1 / 12, 1 / 6, 1 / 12]]
)
CENTRAL_DIFFERENCE = np.array([-0.5, 0.0, 0.5])
DEFAULT_TAU = 0.05


@dataclass
class FlowField:
    """H x W x 2 backward flow in pixels: frame t position + (dx, dy) = frame t-1 position."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[2] != 2:
            raise DimensionError(f"Flow must be H x W x 2, got {self.data.shape}.")
        if not np.isfinite(self.data).all():
            raise DomainError("Flow contains non-finite values.")
        if np.abs(self.data).max(initial=0.0) > self.data.shape[1]:
            raise DomainError("Flow displacement exceeds the image width.")

    @property
    def shape(self):
        return self.data.shape[:2]

    def to_tensor(self) -> torch.Tensor:
        """2 x H x W tensor for `backward_warp`."""
        return torch.from_numpy(np.ascontiguousarray(self.data.transpose(2, 0, 1)))


@dataclass
class ParsingMap:
    """H x W probability that a pixel belongs to the background."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise DimensionError(f"Parsing map must be H x W, got {self.data.shape}.")
        if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
            raise DomainError("Parsing map values must lie in [0, 1].")

    def to_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.data[None].copy())


def backward_warp(image: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Bilinearly sample image at (x + dx, y + dy) with replicated borders.

    Args:
        image: N x C x H x W or C x H x W tensor.
        flow: N x 2 x H x W (or 2 x H x W) displacements in pixels, channel 0 is dx.

    Returns:
        The warped image, same shape as the input. Differentiable w.r.t. image and flow.
    """
    unbatched = image.dim() == 3
    if unbatched:
        image = image.unsqueeze(0)
    if flow.dim() == 3:
        flow = flow.unsqueeze(0)
    if (
        image.dim() != 4
        or flow.dim() != 4
        or flow.shape[1] != 2
        or image.shape[-2:] != flow.shape[-2:]
        or flow.shape[0] not in (1, image.shape[0])
    ):
        raise DimensionError(
            f"Cannot warp image of shape {tuple(image.shape)} with flow {tuple(flow.shape)}."
        )
    n, c, h, w = image.shape
    flow = flow.to(image.dtype).expand(n, -1, -1, -1)
    xs = torch.arange(w, dtype=image.dtype, device=image.device).view(1, 1, w)
    ys = torch.arange(h, dtype=image.dtype, device=image.device).view(1, h, 1)
    sx = (xs + flow[:, 0]).clamp(0, w - 1)
    sy = (ys + flow[:, 1]).clamp(0, h - 1)
    x0, y0 = sx.floor(), sy.floor()
    wx = (sx - x0).unsqueeze(1)
    wy = (sy - y0).unsqueeze(1)
    x0, y0 = x0.long(), y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    flat = image.reshape(n, c, h * w)

    def sample(yi: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        index = (yi * w + xi).view(n, 1, h * w).expand(n, c, h * w)
        return flat.gather(2, index).view(n, c, h, w)

    top_left = sample(y0, x0)
    top = top_left + wx * (sample(y0, x1) - top_left)
    bottom_left = sample(y1, x0)
    bottom = bottom_left + wx * (sample(y1, x1) - bottom_left)
    warped = top + wy * (bottom - top)
    return warped.squeeze(0) if unbatched else warped


def warp_frame(frame: np.ndarray, flow: Union[FlowField, np.ndarray]) -> np.ndarray:
    """`backward_warp` for H x W x C numpy frames."""
    flow_data = flow.data if isinstance(flow, FlowField) else np.asarray(flow, np.float32)
    image = torch.from_numpy(np.ascontiguousarray(np.asarray(frame, np.float32).transpose(2, 0, 1)))
    flow_tensor = torch.from_numpy(np.ascontiguousarray(flow_data.transpose(2, 0, 1)))
    with torch.no_grad():
        warped = backward_warp(image, flow_tensor)
    return warped.numpy().transpose(1, 2, 0)


def estimate_flow_classical(
    prev: np.ndarray, next: np.ndarray, iters: int = 100, alpha: float = 10.0
) -> FlowField:
    """Horn-Schunck estimate of the backward flow between two frames.

    Solves Ix*u + Iy*v + (prev - next) = 0 with smoothness weight alpha**2 by
    Jacobi iteration on the luma of both frames (0-255 units).

    Args:
        prev: Frame t-1, H x W x 3 in [0, 1].
        next: Frame t, same shape.
        iters: Number of fixed-point iterations.
        alpha: Smoothness weight.

    Returns:
        FlowField such that warp(prev, flow) approximates next.
    """
    if iters <= 0:
        raise ConfigurationError(f"Horn-Schunck needs at least one iteration, got {iters}.")
    if np.shape(prev) != np.shape(next):
        raise DimensionError(f"Frame shapes differ: {np.shape(prev)} vs {np.shape(next)}.")
    first = 255.0 * luma(prev).astype(np.float64)
    second = 255.0 * luma(next).astype(np.float64)
    mean = 0.5 * (first + second)
    ix = ndimage.correlate1d(mean, CENTRAL_DIFFERENCE, axis=1, mode="nearest")
    iy = ndimage.correlate1d(mean, CENTRAL_DIFFERENCE, axis=0, mode="nearest")
    it = first - second
    denominator = alpha**2 + ix**2 + iy**2

    u = np.zeros_like(mean)
    v = np.zeros_like(mean)
    for _ in range(iters):
        u_avg = ndimage.convolve(u, AVERAGE_KERNEL, mode="nearest")
        v_avg = ndimage.convolve(v, AVERAGE_KERNEL, mode="nearest")
        residual = (ix * u_avg + iy * v_avg + it) / denominator
        u = u_avg - ix * residual
        v = v_avg - iy * residual
    return FlowField(np.stack([u, v], axis=-1))


def _nearest_distance(frame: np.ndarray, palette: np.ndarray) -> np.ndarray:
    differences = np.asarray(frame, np.float32)[..., None, :] - palette.astype(np.float32)
    return np.sqrt((differences**2).sum(axis=-1)).min(axis=-1)


def heuristic_background(frame: np.ndarray, tau: float = DEFAULT_TAU) -> np.ndarray:
    """sigmoid((d_fg - d_bg) / tau) with d_* the distance to the nearest palette colour."""
    if tau <= 0:
        raise ConfigurationError(f"parse.tau must be positive, got {tau}.")
    d_bg = _nearest_distance(frame, BACKGROUND_PALETTE)
    d_fg = _nearest_distance(frame, FOREGROUND_PALETTE)
    return special.expit((d_fg - d_bg) / tau).astype(np.float32)


class FlowProviderKind(Enum):
    TRUTH = "truth"
    HS = "hs"
    EXTERNAL = "external"


class ParseProviderKind(Enum):
    TRUTH = "truth"
    HEURISTIC = "heuristic"
    EXTERNAL = "external"


def parse_background(
    frame: np.ndarray,
    truth: Optional[FrameTruth] = None,
    mode: Union[str, ParseProviderKind] = ParseProviderKind.TRUTH,
    tau: float = DEFAULT_TAU,
) -> ParsingMap:
    """Background probability map of a frame, from scene truth or from colour heuristics."""
    mode = ParseProviderKind(mode)
    if mode is ParseProviderKind.TRUTH:
        if truth is None:
            raise MissingInputError("Ground-truth parsing needs the scene truth of the frame.")
        return ParsingMap(truth.mask_bg)
    if mode is ParseProviderKind.HEURISTIC:
        return ParsingMap(heuristic_background(frame, tau))
    raise ConfigurationError("External parsing needs a loaded ExternalParseProvider.")


class FlowProvider(Protocol):
    requires_truth: bool

    def provide(
        self, prev: np.ndarray, next: np.ndarray, truth: Optional[FrameTruth] = None
    ) -> FlowField:
        ...


class ParseProvider(Protocol):
    requires_truth: bool

    def provide(self, frame: np.ndarray, truth: Optional[FrameTruth] = None) -> ParsingMap:
        ...


@dataclass(frozen=True)
class TruthFlowProvider:
    requires_truth: bool = field(default=True, init=False)

    def provide(self, prev, next, truth=None) -> FlowField:
        if truth is None:
            raise MissingInputError("The ground-truth flow provider needs the scene truth.")
        return FlowField(truth.flow)


@dataclass(frozen=True)
class HornSchunckFlowProvider:
    iters: int = 100
    alpha: float = 10.0
    requires_truth: bool = field(default=False, init=False)

    def __post_init__(self):
        if self.iters <= 0:
            raise ConfigurationError(f"flow.iters must be positive, got {self.iters}.")

    def provide(self, prev, next, truth=None) -> FlowField:
        return estimate_flow_classical(prev, next, self.iters, self.alpha)


@dataclass(frozen=True)
class TruthParseProvider:
    requires_truth: bool = field(default=True, init=False)

    def provide(self, frame, truth=None) -> ParsingMap:
        return parse_background(frame, truth, ParseProviderKind.TRUTH)


@dataclass(frozen=True)
class HeuristicParseProvider:
    tau: float = DEFAULT_TAU
    requires_truth: bool = field(default=False, init=False)

    def provide(self, frame, truth=None) -> ParsingMap:
        return parse_background(frame, truth, ParseProviderKind.HEURISTIC, self.tau)


class TinyFlowNet(nn.Module):
    """Small convolutional flow regressor loaded from external weights."""

    def __init__(self, channels: int = 16):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(6, channels, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, 2, 3, padding=1),
        )

    def forward(self, prev: torch.Tensor, next: torch.Tensor) -> torch.Tensor:
        return self.layers(torch.cat([prev, next], dim=1))


class TinyParseNet(nn.Module):
    """Small convolutional background classifier loaded from external weights."""

    def __init__(self, channels: int = 16):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(3, channels, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(channels, 1, 3, padding=1),
        )

    def forward(self, frame: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.layers(frame))


def _load_external(path: Union[str, Path], stage: Stage, module: nn.Module) -> nn.Module:
    if not str(path):
        raise ConfigurationError(
            f"No weights directory configured for the external {stage.value} provider."
        )
    return load_external(path, stage, module)


def _frame_tensor(frame: np.ndarray) -> torch.Tensor:
    array = np.asarray(frame, np.float32).transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(array))[None]


class ExternalFlowProvider:
    requires_truth = False

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.net = _load_external(path, Stage.FLOW, TinyFlowNet())

    def provide(self, prev, next, truth=None) -> FlowField:
        with torch.no_grad():
            flow = self.net(_frame_tensor(prev), _frame_tensor(next))[0]
        return FlowField(flow.numpy().transpose(1, 2, 0))


class ExternalParseProvider:
    requires_truth = False

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.net = _load_external(path, Stage.PARSE, TinyParseNet())

    def provide(self, frame, truth=None) -> ParsingMap:
        with torch.no_grad():
            probability = self.net(_frame_tensor(frame))[0, 0]
        return ParsingMap(probability.numpy())


def make_flow_provider(
    kind: Union[str, FlowProviderKind],
    iters: int = 100,
    alpha: float = 10.0,
    external: Union[str, Path] = "",
) -> FlowProvider:
    kind = FlowProviderKind(kind)
    if kind is FlowProviderKind.TRUTH:
        return TruthFlowProvider()
    if kind is FlowProviderKind.HS:
        return HornSchunckFlowProvider(iters=iters, alpha=alpha)
    return ExternalFlowProvider(external)


def make_parse_provider(
    kind: Union[str, ParseProviderKind],
    tau: float = DEFAULT_TAU,
    external: Union[str, Path] = "",
) -> ParseProvider:
    kind = ParseProviderKind(kind)
    if kind is ParseProviderKind.TRUTH:
        return TruthParseProvider()
    if kind is ParseProviderKind.HEURISTIC:
        return HeuristicParseProvider(tau=tau)
    return ExternalParseProvider(external)
