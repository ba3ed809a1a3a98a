"""Exceptions raised by the stylizer. The CLI maps them to exit codes."""

# This file is part of VideoStylizer.
# VideoStylizer is free software: you can redistribute it and/or modify it under the terms of
# the GNU General Public License as published by the Free Software Foundation,
# either version 3 of the License, or (at your option) any later version.
# VideoStylizer is distributed in the hope that it will be useful, but WITHOUT ANY
# WARRANTY; without even the implied warranty of MERCHANTABILITY or
# FITNESS FOR A PARTICULAR PURPOSE. See the GNU General Public License for more details.
# You should have received a copy of the GNU General Public License along with VideoStylizer.
# If not, see <https://www.gnu.org/licenses/>."""


class StylizerError(Exception):
    """Base class of all errors raised by videostylizer."""

    exit_code = 2


class ConfigurationError(StylizerError):
    """Invalid configuration value, key or argument."""

    exit_code = 1


class DimensionError(StylizerError):
    """Shapes of frames, flows, masks or windows do not match."""

    exit_code = 1


class WindowArityError(StylizerError):
    """A refiner window does not hold (L+1, L, 1) frames."""

    exit_code = 1


class DomainError(StylizerError):
    """A value lies outside its allowed range."""

    exit_code = 1


class MissingInputError(StylizerError):
    """A required input (for example scene truth) was not given."""

    exit_code = 1


class CompatibilityError(StylizerError):
    """Checkpoint and configuration do not belong together."""

    exit_code = 1


class DataError(StylizerError):
    """Empty or insufficient data."""


class NumericError(StylizerError):
    """NaN or infinite values where finite ones are required."""


class WeightsLoadError(StylizerError):
    """External weights could not be loaded."""


class ContractViolationError(StylizerError):
    """A runtime contract (for example the frozen translator) was broken."""


class UndefinedRegionError(StylizerError):
    """A metric region is empty."""
