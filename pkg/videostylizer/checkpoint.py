"""Checkpoints: a directory with meta.json and one binary file per parameter tensor."""

# This file is part of VideoStylizer.
# VideoStylizer is free software: you can redistribute it and/or modify it under the terms of
# the GNU General Public License as published by the Free Software Foundation,
# either version 3 of the License, or (at your option) any later version.
# VideoStylizer is distributed in the hope that it will be useful, but WITHOUT ANY
# WARRANTY; without even the implied warranty of MERCHANTABILITY or
# FITNESS FOR A PARTICULAR PURPOSE. See the GNU General Public License for more details.
# You should have received a copy of the GNU General Public License along with VideoStylizer.
# If not, see <https://www.gnu.org/licenses/>."""
import hashlib
import json
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Union

import numpy as np
import torch
from loguru import logger
from torch import nn
from typing_extensions import Self

from videostylizer.errors import CompatibilityError, WeightsLoadError

META_FILE = "meta.json"
TENSOR_SUFFIX = ".bin"


class Stage(str, Enum):
    """Which training phase produced a checkpoint."""

    SOURCE = "source"
    TARGET = "target"
    TRANSLATOR = "translator"
    REFINER = "refiner"
    FEATURES = "features"
    FLOW = "flow"
    PARSE = "parse"


def write_tensor(path: Path, tensor: torch.Tensor):
    """Write u32 rank, u32 dims, then the little-endian float32 payload."""
    array = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
    header = struct.pack(f"<I{array.ndim}I", array.ndim, *array.shape)
    path.write_bytes(header + array.tobytes(order="C"))


def read_tensor(path: Path) -> torch.Tensor:
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise WeightsLoadError(f"Could not read tensor file {path}: {e}")
    if len(payload) < 4:
        raise WeightsLoadError(f"Tensor file {path} is truncated.")
    (rank,) = struct.unpack_from("<I", payload, 0)
    offset = 4 + 4 * rank
    if len(payload) < offset:
        raise WeightsLoadError(f"Tensor file {path} has a truncated header.")
    shape = struct.unpack_from(f"<{rank}I", payload, 4)
    count = int(np.prod(shape, dtype=np.int64))
    if len(payload) != offset + 4 * count:
        raise WeightsLoadError(
            f"Tensor file {path} holds {len(payload) - offset} payload bytes, expected {4 * count}."
        )
    array = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
    return torch.from_numpy(array.astype(np.float32).reshape(shape))


def parameter_fingerprint(module: nn.Module, prefix: str = "") -> str:
    """sha256 over the names and raw bytes of all parameters of a module.

    With a prefix it equals `Checkpoint.fingerprint(prefix)` of a checkpoint of the module.
    """
    digest = hashlib.sha256()
    named = [(f"{prefix}.{name}" if prefix else name, p) for name, p in module.named_parameters()]
    for name, param in sorted(named, key=lambda item: item[0]):
        digest.update(name.encode("utf-8"))
        digest.update(param.detach().cpu().numpy().astype("<f4").tobytes())
    return digest.hexdigest()


@dataclass
class Checkpoint:
    """Named parameter tensors plus the network config, step and stage tag."""

    stage: Stage
    config: dict
    step: int
    params: Dict[str, torch.Tensor]
    history: List[dict] = field(default_factory=list)

    @classmethod
    def from_modules(
        cls,
        stage: Stage,
        config: dict,
        step: int,
        modules: Mapping[str, nn.Module],
        history: List[dict] = None,
    ) -> Self:
        params = {
            f"{prefix}.{name}": param.detach().clone()
            for prefix, module in modules.items()
            for name, param in module.named_parameters()
        }
        return cls(Stage(stage), dict(config), int(step), params, list(history or []))

    def prefixes(self) -> List[str]:
        return sorted({name.split(".", 1)[0] for name in self.params})

    def load_into(self, module: nn.Module, prefix: str) -> nn.Module:
        """Copy the tensors stored under prefix into module.

        The stored names must be exactly the module's parameter names.
        """
        stored = {
            name[len(prefix) + 1 :]: tensor
            for name, tensor in self.params.items()
            if name.startswith(prefix + ".")
        }
        expected = dict(module.named_parameters())
        if set(stored) != set(expected):
            missing = sorted(set(expected) - set(stored))
            unexpected = sorted(set(stored) - set(expected))
            raise CompatibilityError(
                f"Checkpoint '{prefix}' does not match the architecture. "
                f"Missing: {missing[:5]}, unexpected: {unexpected[:5]}."
            )
        with torch.no_grad():
            for name, param in expected.items():
                if param.shape != stored[name].shape:
                    raise CompatibilityError(
                        f"Parameter {prefix}.{name} has shape {tuple(stored[name].shape)}, "
                        f"architecture expects {tuple(param.shape)}."
                    )
                param.copy_(stored[name])
        return module

    def save(self, directory: Union[str, Path]) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "stage": self.stage.value,
            "step": self.step,
            "config": self.config,
            "history": self.history,
            "params": sorted(self.params),
        }
        (directory / META_FILE).write_text(
            json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8"
        )
        for name, tensor in self.params.items():
            write_tensor(directory / f"{name}{TENSOR_SUFFIX}", tensor)
        logger.info(f"Saved {self.stage.value} checkpoint at step {self.step} to {directory}.")
        return directory

    @classmethod
    def load(cls, directory: Union[str, Path]) -> Self:
        directory = Path(directory)
        meta_path = directory / META_FILE
        if not meta_path.is_file():
            raise WeightsLoadError(f"No checkpoint found at {directory} (missing {META_FILE}).")
        try:
            meta = json.loads(meta_path.read_text(encoding="utf-8"))
            stage = Stage(meta["stage"])
            names = list(meta["params"])
            config, step = dict(meta["config"]), int(meta["step"])
        except (ValueError, KeyError, TypeError) as e:
            raise WeightsLoadError(f"Malformed checkpoint meta at {meta_path}: {e}")
        params = {name: read_tensor(directory / f"{name}{TENSOR_SUFFIX}") for name in names}
        logger.info(f"Loaded {stage.value} checkpoint (step {step}) from {directory}.")
        return cls(stage, config, step, params, list(meta.get("history", [])))

    def fingerprint(self, prefix: Optional[str] = None) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            if prefix is not None and not name.startswith(prefix + "."):
                continue
            digest.update(name.encode("utf-8"))
            digest.update(self.params[name].numpy().astype("<f4").tobytes())
        return digest.hexdigest()


def load_external(path: Union[str, Path], stage: Stage, module: nn.Module) -> nn.Module:
    """Load frozen weights of an auxiliary network (features, flow, parse) from a checkpoint."""
    checkpoint = Checkpoint.load(path)
    if checkpoint.stage is not stage:
        raise WeightsLoadError(
            f"Expected a '{stage.value}' checkpoint at {path}, found '{checkpoint.stage.value}'."
        )
    try:
        checkpoint.load_into(module, stage.value)
    except CompatibilityError as e:
        raise WeightsLoadError(f"Malformed {stage.value} weights at {path}: {e}")
    module.requires_grad_(False)
    module.eval()
    logger.info(f"Loaded external {stage.value} network from {path}.")
    return module
