"""Exception types shared across the package.

The CLI maps these onto exit codes: usage/config problems exit 1,
data problems exit 2, numeric failures exit 3.
"""


class StickerRankError(Exception):
    """Base class for package errors."""


class ShapeError(StickerRankError):
    """An operation received tensors with incompatible shapes."""


class ConfigError(StickerRankError):
    """Invalid or contradictory configuration."""


class DataError(StickerRankError):
    """Malformed dataset record, image, or vocabulary."""


class NumericError(StickerRankError):
    """A non-finite value appeared where finite values are required."""
