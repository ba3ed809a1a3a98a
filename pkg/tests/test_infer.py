"""Test the streaming stylization pipeline."""

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
from torch import nn

from videostylizer.errors import (
    CompatibilityError,
    ConfigurationError,
    ContractViolationError,
    DataError,
    DimensionError,
)
from videostylizer.infer import (
    StreamState,
    StylizationPipeline,
    assemble_window,
    commit,
    stylize_stream,
    stylize_video,
)
from videostylizer.nets import SequentialRefiner, freeze
from videostylizer.synthdata import VideoSequence


def _marker(value: float) -> torch.Tensor:
    return torch.tensor([float(value)])


@pytest.mark.parametrize("window", [1, 2, 3])
def test_window_indices(window):
    """Test which frames fill every window slot, padding included."""
    state = StreamState(window)
    for t in range(7):
        assembled = assemble_window(state, _marker(t), _marker(100 + t), window)
        sources = [value.item() for value in assembled.sources]
        refined = [value.item() for value in assembled.refined_prev]
        assert sources == [max(i, 0) for i in range(t - window, t + 1)]
        assert refined == [200 + i if i >= 0 else 100 for i in range(t - window, t)]
        assert assembled.intermediate.item() == 100 + t
        commit(state, _marker(200 + t))
        assert state.t == t + 1
    assert state.peak_resident <= 2 * window + 3


def test_stream_contract_errors():
    """Test the assemble/commit protocol and its checks."""
    with pytest.raises(ConfigurationError):
        StreamState(0)
    state = StreamState(2)
    with pytest.raises(ContractViolationError):
        commit(state, _marker(0))
    with pytest.raises(ConfigurationError):
        assemble_window(state, _marker(0), _marker(100), 3)
    with pytest.raises(DimensionError):
        assemble_window(state, _marker(0), torch.zeros(2), 2)
    assemble_window(state, _marker(0), _marker(100), 2)
    with pytest.raises(ContractViolationError):
        assemble_window(state, _marker(1), _marker(101), 2)
    commit(state, _marker(200))
    with pytest.raises(DimensionError):
        assemble_window(state, torch.zeros(2), torch.zeros(2), 2)


def test_zero_refiner_matches_translator(scene, translator, tiny_config):
    """Test that an untrained residual refiner reproduces the intermediate frames bit-exactly."""
    video, _ = scene
    refiner = freeze(SequentialRefiner(tiny_config))
    refined = stylize_video(video, translator, refiner, window=2)
    plain = stylize_video(video, translator, use_refiner=False)
    assert refined.num_frames == plain.num_frames == video.num_frames
    assert all(np.array_equal(a, b) for a, b in zip(refined.frames, plain.frames))


@pytest.fixture
def random_refiner(tiny_config):
    refiner = SequentialRefiner(tiny_config)
    torch.manual_seed(5)
    with torch.no_grad():
        nn.init.normal_(refiner.head.weight, std=0.1)
    return freeze(refiner)


def test_stylization_is_causal(scene, translator, random_refiner):
    """Test that outputs only depend on past and present inputs."""
    video, _ = scene
    full = stylize_video(video, translator, random_refiner)
    prefix = stylize_video(VideoSequence(video.frames[:5]), translator, random_refiner)
    assert all(np.array_equal(a, b) for a, b in zip(prefix.frames, full.frames[:5]))
    changed = VideoSequence(video.frames[:5] + [1 - f for f in video.frames[5:]])
    altered = stylize_video(changed, translator, random_refiner)
    assert all(np.array_equal(a, b) for a, b in zip(altered.frames[:5], full.frames[:5]))
    assert not np.array_equal(altered.frames[6], full.frames[6])


def test_refiner_uses_history(scene, translator, random_refiner):
    """Test that the same frame refines differently after a different history."""
    video, _ = scene
    pipeline = StylizationPipeline(translator, random_refiner)
    first = list(stylize_stream([video.frames[0], video.frames[4]], pipeline))
    second = list(stylize_stream([video.frames[2], video.frames[4]], pipeline))
    assert not np.array_equal(first[1], second[1])
    again = list(stylize_stream([video.frames[0], video.frames[4]], pipeline))
    assert np.array_equal(first[1], again[1])


def test_stylize_errors(scene, translator, tiny_config):
    """Test the stylize argument checks."""
    video, _ = scene
    refiner = SequentialRefiner(tiny_config)
    with pytest.raises(DataError):
        stylize_video(VideoSequence([]), translator, refiner)
    with pytest.raises(CompatibilityError):
        stylize_video(video, translator, None)
    with pytest.raises(CompatibilityError):
        stylize_video(video, translator, refiner, window=3)
    large = VideoSequence([np.zeros((64, 64, 3), dtype=np.float32)])
    with pytest.raises(CompatibilityError):
        stylize_video(large, translator, refiner)
