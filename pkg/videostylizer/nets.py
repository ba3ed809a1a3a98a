"""Trainable networks of both stages and the frozen feature extractor."""

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
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import List, Mapping, Optional, Sequence, Union

import torch
import torch.nn.functional as F
from loguru import logger
from torch import nn
from typing_extensions import Self

from videostylizer.checkpoint import Checkpoint, Stage, load_external
from videostylizer.errors import (
    CompatibilityError,
    ConfigurationError,
    DimensionError,
    WindowArityError,
)

# d-dimensional standard normal vector, one row per sample
LatentCode = torch.Tensor

FEATURE_CHANNELS = (16, 32, 64)
NEGATIVE_SLOPE = 0.2


@dataclass(frozen=True)
class NetConfig:
    image_size: int = 64
    base_channels: int = 32
    latent_dim: int = 64
    refiner_window: int = 2
    refiner_residual: bool = True
    refiner_channels: int = 32
    seed: int = 0

    def __post_init__(self):
        size = self.image_size
        if size < 32 or size & (size - 1):
            raise ConfigurationError(f"image_size must be a power of two >= 32, got {size}.")
        if self.refiner_window < 1:
            raise ConfigurationError(f"refiner_window must be >= 1, got {self.refiner_window}.")
        if min(self.base_channels, self.latent_dim, self.refiner_channels) < 1:
            raise ConfigurationError("Channel counts and latent_dim must be positive.")

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping) -> Self:
        names = {f.name for f in fields(cls)}
        missing = names - set(values)
        if missing:
            raise CompatibilityError(f"Checkpoint config lacks {sorted(missing)}.")
        return cls(**{name: values[name] for name in names})


def sample_latents(n: int, latent_dim: int, generator: torch.Generator) -> LatentCode:
    return torch.randn(n, latent_dim, generator=generator)


def conv_block(in_channels: int, out_channels: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1),
        nn.LeakyReLU(NEGATIVE_SLOPE),
    )


def _batched(x: torch.Tensor, size: int, name: str) -> torch.Tensor:
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[-2:]) != (size, size):
        raise DimensionError(
            f"{name} expects 3 x {size} x {size} frames, got {tuple(x.shape)}."
        )
    return x


class ModulatedBlock(nn.Module):
    """Upsample, 3x3 conv, per-channel scale/shift from the style vector."""

    def __init__(self, in_channels: int, out_channels: int, style_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.modulation = nn.Linear(style_dim, 2 * out_channels)

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        x = self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))
        scale, shift = self.modulation(style).chunk(2, dim=1)
        x = x * (1 + scale[..., None, None]) + shift[..., None, None]
        return F.leaky_relu(x, NEGATIVE_SLOPE)


def generator_channels(config: NetConfig) -> List[int]:
    """Channel width of the 4x4 constant and of every upsampling block."""
    num_blocks = int(math.log2(config.image_size // 4))
    widest = 4 * config.base_channels
    return [
        max(config.base_channels, widest >> max(0, k - 1)) for k in range(num_blocks + 1)
    ]


class StyleGenerator(nn.Module):
    """Latent code to frame: style MLP, learned 4x4 constant, modulated upsampling blocks.

    Used as G_X (source domain) and, after fine-tuning, as G_Y (target domain).
    """

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        d = config.latent_dim
        self.mapping = nn.Sequential(
            nn.Linear(d, d),
            nn.LeakyReLU(NEGATIVE_SLOPE),
            nn.Linear(d, d),
            nn.LeakyReLU(NEGATIVE_SLOPE),
        )
        channels = generator_channels(config)
        self.const = nn.Parameter(torch.randn(1, channels[0], 4, 4))
        self.blocks = nn.ModuleList(
            ModulatedBlock(channels[k], channels[k + 1], d) for k in range(len(channels) - 1)
        )
        self.to_rgb = nn.Conv2d(channels[-1], 3, 1)

    def forward(self, z: LatentCode) -> torch.Tensor:
        if z.dim() == 1:
            z = z.unsqueeze(0)
        if z.dim() != 2 or z.shape[1] != self.config.latent_dim:
            raise ConfigurationError(
                f"Latent codes must have {self.config.latent_dim} dims, got {tuple(z.shape)}."
            )
        style = self.mapping(z)
        x = self.const.expand(z.shape[0], -1, -1, -1)
        for block in self.blocks:
            x = block(x, style)
        return (torch.tanh(self.to_rgb(x)) + 1) / 2


class UNetTranslator(nn.Module):
    """Encoder-decoder with four stride-2 stages and concatenated skips."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        b = config.base_channels
        widths = [b, 2 * b, 4 * b, 8 * b, 8 * b]
        self.stem = conv_block(3, widths[0])
        self.down = nn.ModuleList(conv_block(widths[k], widths[k + 1], stride=2) for k in range(4))
        self.up = nn.ModuleList(conv_block(widths[k + 1] + widths[k], widths[k]) for k in range(4))
        self.head = nn.Conv2d(widths[0], 3, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.stem(2 * _batched(x, self.config.image_size, "Translator") - 1)
        skips = [h]
        for down in self.down:
            h = down(h)
            skips.append(h)
        skips.pop()
        for k in reversed(range(4)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = self.up[k](torch.cat([h, skips[k]], dim=1))
        return torch.sigmoid(self.head(h))


class Discriminator(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        b = config.base_channels
        widths = [3, b, 2 * b, 4 * b, 4 * b]
        self.features = nn.Sequential(
            *(conv_block(widths[k], widths[k + 1], stride=2) for k in range(4))
        )
        side = config.image_size // 16
        self.logit = nn.Linear(widths[-1] * side * side, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """One logit per frame, in batch order."""
        h = self.features(2 * _batched(x, self.config.image_size, "Discriminator") - 1)
        return self.logit(h.flatten(1)).squeeze(1)


class FeatureExtractor(nn.Module):
    """Frozen three-level convolutional pyramid with (16, 32, 64) channels.

    Weights are drawn once from the seed, or loaded from a 'features' checkpoint.
    """

    def __init__(self, seed: int = 0):
        super().__init__()
        widths = (3,) + FEATURE_CHANNELS
        self.levels = nn.ModuleList(
            nn.Conv2d(widths[k], widths[k + 1], 3, stride=1 if k == 0 else 2, padding=1)
            for k in range(len(FEATURE_CHANNELS))
        )
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in self.levels:
                fan_in = conv.in_channels * 9
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=generator) * math.sqrt(2.0 / fan_in)
                )
                conv.bias.copy_(torch.rand(conv.bias.shape, generator=generator) * 0.2 - 0.1)
        self.requires_grad_(False)
        self.eval()

    @classmethod
    def from_weights(cls, path: Union[str, Path]) -> Self:
        return load_external(path, Stage.FEATURES, cls())

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        features = []
        h = x
        for conv in self.levels:
            h = F.leaky_relu(conv(h), NEGATIVE_SLOPE)
            features.append(h)
        return features


def build_feature_extractor(weights: Union[str, Path] = "", seed: int = 0) -> FeatureExtractor:
    if weights:
        return FeatureExtractor.from_weights(weights)
    return FeatureExtractor(seed)


@dataclass
class RefinerInput:
    """Markov window of the refiner, oldest frame first.

    Attributes:
        sources: L+1 source frames x_{t-L} .. x_t.
        refined_prev: L refined frames y_{t-L} .. y_{t-1}.
        intermediate: Translator output for x_t.
    """

    sources: Sequence[torch.Tensor]
    refined_prev: Sequence[torch.Tensor]
    intermediate: torch.Tensor

    def validate(self, window: int):
        if len(self.sources) != window + 1 or len(self.refined_prev) != window:
            raise WindowArityError(
                f"Window must hold ({window + 1}, {window}, 1) frames, got "
                f"({len(self.sources)}, {len(self.refined_prev)}, 1)."
            )
        shape = self.intermediate.shape
        for frame in list(self.sources) + list(self.refined_prev):
            if frame.shape != shape:
                raise DimensionError(
                    f"Window frames must share the shape {tuple(shape)}, got {tuple(frame.shape)}."
                )

    def stack(self) -> torch.Tensor:
        return torch.cat([*self.sources, *self.refined_prev, self.intermediate], dim=-3)


class SequentialRefiner(nn.Module):
    """Predicts y_t from the window. The residual head starts at zero."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        window = config.refiner_window
        c = config.refiner_channels
        self.body = nn.Sequential(
            conv_block(3 * (2 * window + 2), c), conv_block(c, c), conv_block(c, c)
        )
        self.head = nn.Conv2d(c, 3, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, window: RefinerInput) -> torch.Tensor:
        window.validate(self.config.refiner_window)
        stacked = window.stack()
        unbatched = stacked.dim() == 3
        if unbatched:
            stacked = stacked.unsqueeze(0)
        if tuple(stacked.shape[-2:]) != (self.config.image_size,) * 2:
            raise DimensionError(
                f"Refiner expects {self.config.image_size}px frames, "
                f"got {tuple(stacked.shape[-2:])}."
            )
        delta = self.head(self.body(2 * stacked - 1))
        if unbatched:
            delta = delta.squeeze(0)
        if self.config.refiner_residual:
            return torch.clamp(window.intermediate + delta, 0.0, 1.0)
        return torch.sigmoid(delta)


def param_count(net: Optional[nn.Module], include_frozen: bool = False) -> int:
    """Number of trainable scalars.

    Frozen parameters (the feature extractor, auxiliary networks) are not counted unless
    include_frozen is set, as for a deploy stack frozen for inference.
    """
    if net is None:
        return 0
    return sum(p.numel() for p in net.parameters() if include_frozen or p.requires_grad)


def freeze(net: nn.Module) -> nn.Module:
    net.requires_grad_(False)
    net.eval()
    return net


def _config_of(checkpoint: Checkpoint, expected: Stage) -> NetConfig:
    if checkpoint.stage is not expected:
        raise CompatibilityError(
            f"Expected a '{expected.value}' checkpoint, got '{checkpoint.stage.value}'."
        )
    return NetConfig.from_dict(checkpoint.config)


def load_generator(checkpoint: Checkpoint) -> StyleGenerator:
    if checkpoint.stage not in (Stage.SOURCE, Stage.TARGET):
        raise CompatibilityError(
            f"Expected a generator checkpoint, got '{checkpoint.stage.value}'."
        )
    config = NetConfig.from_dict(checkpoint.config)
    return checkpoint.load_into(StyleGenerator(config), "generator")


def load_translator(checkpoint: Checkpoint) -> UNetTranslator:
    config = _config_of(checkpoint, Stage.TRANSLATOR)
    translator = checkpoint.load_into(UNetTranslator(config), "translator")
    logger.info(f"Translator with {param_count(translator)} parameters loaded.")
    return translator


def load_refiner(checkpoint: Checkpoint) -> SequentialRefiner:
    config = _config_of(checkpoint, Stage.REFINER)
    return checkpoint.load_into(SequentialRefiner(config), "refiner")
