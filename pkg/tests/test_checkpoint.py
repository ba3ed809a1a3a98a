"""Test the checkpoint format."""

# This file is part of VideoStylizer.
# VideoStylizer is free software: you can redistribute it and/or modify it under the terms of
# the GNU General Public License as published by the Free Software Foundation,
# either version 3 of the License, or (at your option) any later version.
# VideoStylizer is distributed in the hope that it will be useful, but WITHOUT ANY
# WARRANTY; without even the implied warranty of MERCHANTABILITY or
# FITNESS FOR A PARTICULAR PURPOSE. See the GNU General Public License for more details.
# You should have received a copy of the GNU General Public License along with VideoStylizer.
# If not, see <https://www.gnu.org/licenses/>."""
import json

import pytest
import torch

from videostylizer.checkpoint import (
    META_FILE,
    Checkpoint,
    Stage,
    load_external,
    parameter_fingerprint,
    read_tensor,
    write_tensor,
)
from videostylizer.errors import CompatibilityError, WeightsLoadError
from videostylizer.nets import FeatureExtractor, UNetTranslator, load_translator


def test_tensor_codec(tmp_path):
    """Test that tensors of any rank survive the binary format bit-exactly."""
    for shape in [(), (5,), (2, 3), (4, 1, 3, 3)]:
        tensor = torch.randn(shape)
        write_tensor(tmp_path / "t.bin", tensor)
        assert torch.equal(read_tensor(tmp_path / "t.bin"), tensor)


def test_tensor_header_layout(tmp_path):
    """Test the little-endian rank and dims header."""
    write_tensor(tmp_path / "t.bin", torch.zeros(2, 3))
    payload = (tmp_path / "t.bin").read_bytes()
    assert payload[:12] == b"\x02\x00\x00\x00\x02\x00\x00\x00\x03\x00\x00\x00"
    assert len(payload) == 12 + 4 * 6


def test_truncated_tensor(tmp_path):
    """Test that truncated tensor files are rejected."""
    write_tensor(tmp_path / "t.bin", torch.ones(4, 4))
    payload = (tmp_path / "t.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(payload[:-4])
    with pytest.raises(WeightsLoadError):
        read_tensor(tmp_path / "t.bin")
    (tmp_path / "t.bin").write_bytes(payload[:6])
    with pytest.raises(WeightsLoadError):
        read_tensor(tmp_path / "t.bin")


def test_round_trip_is_bit_identical(tmp_path, translator, translator_ckpt, tiny_config):
    """Test that a reloaded translator computes bit-identical outputs."""
    translator_ckpt.save(tmp_path / "translator")
    loaded = Checkpoint.load(tmp_path / "translator")
    assert loaded.stage is Stage.TRANSLATOR
    assert loaded.config == tiny_config.as_dict()
    assert loaded.fingerprint() == translator_ckpt.fingerprint()
    reloaded = load_translator(loaded)
    generator = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for _ in range(10):
            x = torch.rand(1, 3, 32, 32, generator=generator)
            assert torch.equal(reloaded(x), translator(x))


def test_fingerprints_agree(translator, translator_ckpt):
    """Test that module and checkpoint fingerprints agree per prefix."""
    assert parameter_fingerprint(translator, "translator") == translator_ckpt.fingerprint(
        "translator"
    )
    assert translator_ckpt.prefixes() == ["translator"]


def test_missing_and_malformed_meta(tmp_path, translator_ckpt):
    """Test that missing or malformed meta files fail to load."""
    with pytest.raises(WeightsLoadError):
        Checkpoint.load(tmp_path / "nothing")
    directory = translator_ckpt.save(tmp_path / "ckpt")
    meta = json.loads((directory / META_FILE).read_text())
    meta["stage"] = "decoder"
    (directory / META_FILE).write_text(json.dumps(meta))
    with pytest.raises(WeightsLoadError):
        Checkpoint.load(directory)
    (directory / META_FILE).write_text("{not json")
    with pytest.raises(WeightsLoadError):
        Checkpoint.load(directory)


def test_architecture_mismatch(translator_ckpt, tiny_config):
    """Test that loading into a different architecture is a compatibility error."""
    wider = UNetTranslator(tiny_config.__class__(image_size=32, base_channels=16))
    with pytest.raises(CompatibilityError):
        translator_ckpt.load_into(wider, "translator")
    with pytest.raises(CompatibilityError):
        translator_ckpt.load_into(wider, "refiner")


def test_load_external_features(tmp_path):
    """Test that external feature weights load frozen and reject other stages."""
    source = FeatureExtractor(seed=9)
    Checkpoint.from_modules(Stage.FEATURES, {}, 0, {"features": source}).save(tmp_path / "f")
    loaded = FeatureExtractor.from_weights(tmp_path / "f")
    assert all(torch.equal(a, b) for a, b in zip(loaded.parameters(), source.parameters()))
    assert not any(p.requires_grad for p in loaded.parameters())
    with pytest.raises(WeightsLoadError):
        load_external(tmp_path / "f", Stage.FLOW, FeatureExtractor())
