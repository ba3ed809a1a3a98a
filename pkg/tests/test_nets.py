"""Test the networks of both stages."""

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

import pytest
import torch

from videostylizer.errors import (
    CompatibilityError,
    ConfigurationError,
    DimensionError,
    WindowArityError,
)
from videostylizer.nets import (
    Discriminator,
    FeatureExtractor,
    NetConfig,
    RefinerInput,
    SequentialRefiner,
    StyleGenerator,
    UNetTranslator,
    freeze,
    load_refiner,
    param_count,
    sample_latents,
)


def test_net_config_validation():
    """Test that invalid network configs are rejected."""
    with pytest.raises(ConfigurationError):
        NetConfig(image_size=48)
    with pytest.raises(ConfigurationError):
        NetConfig(refiner_window=0)
    with pytest.raises(CompatibilityError):
        NetConfig.from_dict({"image_size": 64})
    config = NetConfig(image_size=32)
    assert NetConfig.from_dict({**config.as_dict(), "translator_fingerprint": "x"}) == config


def test_generator(tiny_config):
    """Test generator output shape and range."""
    generator = StyleGenerator(tiny_config)
    z = sample_latents(3, tiny_config.latent_dim, torch.Generator().manual_seed(0))
    frames = generator(z)
    assert frames.shape == (3, 3, 32, 32)
    assert frames.min() >= 0.0 and frames.max() <= 1.0
    with pytest.raises(ConfigurationError):
        generator(torch.zeros(2, tiny_config.latent_dim + 1))


def test_translator(tiny_config):
    """Test translator output shape and range."""
    translator = UNetTranslator(tiny_config)
    output = translator(torch.rand(2, 3, 32, 32))
    assert output.shape == (2, 3, 32, 32)
    assert output.min() >= 0.0 and output.max() <= 1.0
    with pytest.raises(DimensionError):
        translator(torch.rand(1, 3, 64, 64))


def test_discriminator(tiny_config):
    """Test that the discriminator gives one logit per frame."""
    assert Discriminator(tiny_config)(torch.rand(5, 3, 32, 32)).shape == (5,)


def test_param_counts(tiny_config):
    """Test the parameter counts against the closed-form layer sums."""
    assert param_count(UNetTranslator(tiny_config)) == 171_619
    # 18 c^2 + 192 c + 3 for a window of 2
    assert param_count(SequentialRefiner(tiny_config)) == 2_691
    assert param_count(None) == 0
    frozen = freeze(UNetTranslator(tiny_config))
    assert param_count(frozen) == 0
    assert param_count(frozen, include_frozen=True) == 171_619


def test_default_deploy_stack_is_small():
    """Test that the default translator and refiner stay below 6M parameters."""
    config = NetConfig()
    total = param_count(UNetTranslator(config)) + param_count(SequentialRefiner(config))
    assert total < 6_000_000


def _window(config: NetConfig, sources: int, refined: int) -> RefinerInput:
    frame = torch.rand(1, 3, config.image_size, config.image_size)
    return RefinerInput(
        sources=[torch.rand_like(frame) for _ in range(sources)],
        refined_prev=[torch.rand_like(frame) for _ in range(refined)],
        intermediate=frame,
    )


def test_zero_initialized_refiner_is_identity(tiny_config):
    """Test that the residual refiner starts as the identity on the intermediate frame."""
    window = _window(tiny_config, 3, 2)
    assert torch.equal(SequentialRefiner(tiny_config)(window), window.intermediate)


def test_non_residual_refiner_starts_at_gray(tiny_config):
    """Test that the non-residual refiner starts at sigmoid(0)."""
    config = dataclasses.replace(tiny_config, refiner_residual=False)
    output = SequentialRefiner(config)(_window(config, 3, 2))
    assert torch.equal(output, torch.full_like(output, 0.5))


def test_refiner_window_arity(tiny_config):
    """Test that windows of the wrong arity are rejected."""
    refiner = SequentialRefiner(tiny_config)
    with pytest.raises(WindowArityError):
        refiner(_window(tiny_config, 2, 2))
    with pytest.raises(WindowArityError):
        refiner(_window(tiny_config, 3, 3))
    window = _window(tiny_config, 3, 2)
    window.sources[0] = torch.rand(1, 3, 16, 16)
    with pytest.raises(DimensionError):
        refiner(window)


def test_refiner_window_stacking(tiny_config):
    """Test that the window is stacked oldest source first."""
    window = _window(tiny_config, 3, 2)
    stacked = window.stack()
    assert stacked.shape == (1, 18, 32, 32)
    assert torch.equal(stacked[:, :3], window.sources[0])
    assert torch.equal(stacked[:, -3:], window.intermediate)


def test_feature_extractor():
    """Test the frozen, seeded feature pyramid."""
    extractor = FeatureExtractor(seed=4)
    features = extractor(torch.rand(1, 3, 32, 32))
    assert [tuple(level.shape) for level in features] == [
        (1, 16, 32, 32),
        (1, 32, 16, 16),
        (1, 64, 8, 8),
    ]
    assert param_count(extractor) == 0
    same = FeatureExtractor(seed=4)
    assert all(torch.equal(a, b) for a, b in zip(extractor.parameters(), same.parameters()))


def test_load_refiner_checks_stage(translator_ckpt):
    """Test that a translator checkpoint cannot be loaded as a refiner."""
    with pytest.raises(CompatibilityError):
        load_refiner(translator_ckpt)
