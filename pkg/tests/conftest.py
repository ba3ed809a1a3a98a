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
from pathlib import Path

import pytest
import torch

from videostylizer.checkpoint import Checkpoint, Stage
from videostylizer.nets import NetConfig, SequentialRefiner, UNetTranslator, freeze
from videostylizer.synthdata import constant, render_video, sample_scene
from videostylizer.utils import write_scene


@pytest.fixture
def config_path():
    return Path("videostylizer/assets/configs")


@pytest.fixture
def tiny_config():
    return NetConfig(
        image_size=32, base_channels=8, latent_dim=16, refiner_window=2, refiner_channels=8
    )


@pytest.fixture
def scene():
    """A short 32px scene and its truth."""
    return render_video(sample_scene(seed=3, duration_frames=8, size=32))


@pytest.fixture
def translator(tiny_config):
    torch.manual_seed(0)
    return freeze(UNetTranslator(tiny_config))


@pytest.fixture
def translator_ckpt(translator, tiny_config):
    return Checkpoint.from_modules(
        Stage.TRANSLATOR, tiny_config.as_dict(), 0, {"translator": translator}
    )


@pytest.fixture
def refiner_ckpt(translator_ckpt, tiny_config):
    """Zero-initialized refiner trained 'on top of' the translator fixture."""
    fingerprint = translator_ckpt.fingerprint("translator")
    config = {**tiny_config.as_dict(), "translator_fingerprint": fingerprint}
    return Checkpoint.from_modules(
        Stage.REFINER, config, 0, {"refiner": SequentialRefiner(tiny_config)}
    )


@pytest.fixture
def scene_dir(tmp_path, scene):
    video, truth = scene
    return write_scene(tmp_path / "data" / "scene_0000", video, truth)


@pytest.fixture
def posed_scene():
    """Build a still, centred one-frame scene with a fixed gaze and face size."""

    def build(gaze_x: float, face_size: float = 0.5, size: int = 64, gaze_y: float = 0.0):
        scene = sample_scene(seed=4, duration_frames=1, size=size)
        identity = dataclasses.replace(scene.identity, face_size=face_size)
        motion = dataclasses.replace(
            scene.motion,
            center_x=constant(size / 2.0),
            center_y=constant(size / 2.0),
            scale=constant(1.0),
            gaze_x=constant(gaze_x),
            gaze_y=constant(gaze_y),
        )
        return dataclasses.replace(scene, identity=identity, motion=motion)

    return build
