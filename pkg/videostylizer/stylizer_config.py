"""Class to load, validate and resolve the flat run configuration."""

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
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import regex
import yaml
from loguru import logger
from schema import And, Or, Regex, Schema, SchemaError
from typing_extensions import Self

from videostylizer.errors import ConfigurationError
from videostylizer.flowwarp import (
    FlowProvider,
    ParseProvider,
    make_flow_provider,
    make_parse_provider,
)
from videostylizer.losses import LossWeights, WarpOperand, parse_levels
from videostylizer.nets import FeatureExtractor, NetConfig, build_feature_extractor
from videostylizer.train import PairMode, TrainConfig

CONFIG_PATH = Path(__file__).parent.joinpath("assets", "configs").resolve()
RESOLVED_FILE = "resolved.cfg"

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "jobs": 1,
    "data.size": 64,
    "data.frames": 16,
    "data.num_scenes": 8,
    "data.fps": 20.0,
    "net.base_channels": 32,
    "net.latent_dim": 64,
    "net.refiner_window": 2,
    "net.refiner_residual": True,
    "net.refiner_channels": 32,
    "net.features": "",
    "train.batch_size": 16,
    "train.lr": 0.0002,
    "train.finetune_lr_factor": 0.1,
    "train.beta1": 0.0,
    "train.beta2": 0.99,
    "train.source_steps": 2000,
    "train.finetune_steps": 500,
    "train.translator_steps": 3000,
    "train.refiner_steps": 1500,
    "train.rollout": 4,
    "train.eval_every": 250,
    "train.log_every": 50,
    "train.num_pairs": 1000,
    "train.heldout_fraction": 0.1,
    "pairs.mode": "oracle",
    "loss.lambda_adv": 1.0,
    "loss.lambda_recon": 10.0,
    "loss.lambda_perc": 1.0,
    "loss.lambda_warp": 1.0,
    "loss.lambda_temp": 0.5,
    "loss.r1_gamma": 1.0,
    "loss.perceptual_levels": "2,3",
    "loss.temporal_levels": "1,2,3",
    "warp.operand": "source_prev",
    "flow.provider": "truth",
    "flow.iters": 100,
    "flow.alpha": 10.0,
    "flow.external": "",
    "parse.provider": "truth",
    "parse.tau": 0.05,
    "parse.external": "",
    "bench.parallel": False,
    "bench.warmup": 10,
    "bench.reps": 100,
}

CHOICES = {
    "pairs.mode": ("oracle", "gan"),
    "warp.operand": ("source_prev", "refined_prev"),
    "flow.provider": ("truth", "hs", "external"),
    "parse.provider": ("truth", "heuristic", "external"),
}

# key = value, optionally followed by a comment
LINE = regex.compile(r"^\s*(?P<key>[A-Za-z_][\w.]*)\s*=\s*(?P<value>[^#]*?)\s*(?:#.*)?$")
BLANK = regex.compile(r"^\s*(?:#.*)?$")


def _schema_for(key: str, default: Any):
    if key in CHOICES:
        return Or(*CHOICES[key])
    if key.endswith("_levels"):
        return Regex(r"^[1-3](,[1-3])*$")
    if isinstance(default, bool):
        return bool
    if isinstance(default, int):
        return And(int, lambda value: not isinstance(value, bool))
    if isinstance(default, float):
        return And(float, lambda value: value == value, error=f"{key} must be a number")
    return str


def config_schema() -> Schema:
    """Every documented key is required, unknown keys are rejected."""
    return Schema({key: _schema_for(key, default) for key, default in DEFAULTS.items()})


def validate_config(config: Mapping[str, Any]) -> bool:
    """Validate the schema of a resolved config.

    Raises:
        ConfigurationError naming the offending key.
    """
    try:
        config_schema().validate(dict(config))
    except SchemaError as se:
        logger.error(f"Config is invalid. Error {se}")
        raise ConfigurationError(f"Config is invalid: {se}") from se
    logger.success("Config is valid.")
    return True


def _coerce(key: str, value: Any) -> Any:
    """Type a raw yaml value after the documented default of the key."""
    default = DEFAULTS.get(key)
    if value is None:
        return "" if isinstance(default, str) else value
    if isinstance(default, float) and not isinstance(value, bool):
        # yaml reads 1e-4 as a string and 1 as an int
        try:
            return float(value)
        except (TypeError, ValueError):
            return value
    if isinstance(default, str) and not isinstance(value, str):
        return str(value)
    return value


def parse_lines(text: str, source: str = "<string>") -> Dict[str, Any]:
    """Parse `key = value` lines into a typed mapping."""
    values: Dict[str, Any] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        if BLANK.match(line):
            continue
        match = LINE.match(line)
        if match is None:
            raise ConfigurationError(f"{source}:{number}: expected 'key = value', got '{line}'.")
        key = match.group("key")
        if key in values:
            raise ConfigurationError(f"{source}:{number}: duplicate key '{key}'.")
        try:
            raw = yaml.safe_load(match.group("value")) if match.group("value") else None
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{source}:{number}: cannot read value of '{key}': {exc}")
        values[key] = _coerce(key, raw)
    return values


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value)
    return repr(value)


class Config:
    """Resolved run configuration: defaults < config file < overrides."""

    def __init__(self, values: Optional[Mapping[str, Any]] = None, source: Optional[Path] = None):
        resolved = dict(DEFAULTS)
        resolved.update(values or {})
        validate_config(resolved)
        self.values = resolved
        self.source = source

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> Self:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            logger.error(f"Loading the config from {path} failed with {exc}")
            raise ConfigurationError(f"Cannot read config file {path}: {exc}") from exc
        config = cls(parse_lines(text, source=str(path)), source=path)
        logger.info(f"Loaded config from {path}.")
        return config

    @classmethod
    def load(
        cls, name: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None
    ) -> Self:
        """Load a named or given config file (or only defaults) and apply overrides."""
        config = cls.from_file(_find_config_file(name)) if name else cls()
        return config.with_overrides(overrides or {})

    def with_overrides(self, overrides: Mapping[str, Any]) -> Self:
        """Copy with the non-None overrides applied."""
        given = {key: _coerce(key, value) for key, value in overrides.items() if value is not None}
        if not given:
            return self
        logger.info(f"Config overrides: {given}")
        return type(self)({**self.values, **given}, source=self.source)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, Config) and self.values == other.values

    def as_dict(self) -> Dict[str, Any]:
        return dict(self.values)

    def dumps(self) -> str:
        return "".join(
            f"{key} = {_format_value(self.values[key])}\n" for key in sorted(self.values)
        )

    def write_resolved(self, directory: Union[str, Path]) -> Path:
        """Write every key, sorted and typed, to DIR/resolved.cfg."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / RESOLVED_FILE
        path.write_text(self.dumps(), encoding="utf-8")
        logger.info(f"Wrote resolved config to {path}.")
        return path

    def net_config(self, image_size: Optional[int] = None) -> NetConfig:
        return NetConfig(
            image_size=image_size or self["data.size"],
            base_channels=self["net.base_channels"],
            latent_dim=self["net.latent_dim"],
            refiner_window=self["net.refiner_window"],
            refiner_residual=self["net.refiner_residual"],
            refiner_channels=self["net.refiner_channels"],
            seed=self["seed"],
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            **{
                name: self[f"loss.{name}"]
                for name in (
                    "lambda_adv",
                    "lambda_recon",
                    "lambda_perc",
                    "lambda_warp",
                    "lambda_temp",
                    "r1_gamma",
                )
            }
        )

    def train_config(self) -> TrainConfig:
        train = {
            key.split(".", 1)[1]: value
            for key, value in self.values.items()
            if key.startswith("train.")
        }
        return TrainConfig(
            seed=self["seed"],
            pair_mode=PairMode(self["pairs.mode"]),
            warp_operand=WarpOperand(self["warp.operand"]),
            perceptual_levels=parse_levels(self["loss.perceptual_levels"]),
            temporal_levels=parse_levels(self["loss.temporal_levels"]),
            weights=self.loss_weights(),
            **train,
        )

    def flow_provider(self) -> FlowProvider:
        return make_flow_provider(
            self["flow.provider"],
            iters=self["flow.iters"],
            alpha=self["flow.alpha"],
            external=self["flow.external"],
        )

    def parse_provider(self) -> ParseProvider:
        return make_parse_provider(
            self["parse.provider"], tau=self["parse.tau"], external=self["parse.external"]
        )

    def feature_extractor(self) -> FeatureExtractor:
        return build_feature_extractor(self["net.features"], seed=self["seed"])


def _find_config_file(name: str, config_path: Path = CONFIG_PATH) -> Path:
    """Find a config file: an existing path first, then the bundled configs."""
    for candidate in (Path(name), config_path / name, config_path / f"{name}.cfg"):
        if candidate.is_file():
            logger.info(f"Using config file {candidate}.")
            return candidate
    logger.error(f"No config file found for '{name}'.")
    raise ConfigurationError(f"Config file '{name}' not found.")
