"""Exception types raised across the package."""


class FLGamesError(Exception):
    pass


class ConfigError(FLGamesError, ValueError):
    pass


class ShapeError(FLGamesError, ValueError):
    pass


class LabelError(FLGamesError, ValueError):
    pass


class FormatError(FLGamesError, ValueError):
    """Binary input does not follow the expected file layout."""


class LengthError(FormatError):
    pass


class RuleError(FLGamesError, ValueError):
    pass


class SizeError(FLGamesError, ValueError):
    pass


class EmptyBufferError(FLGamesError, LookupError):
    pass


class VariantError(FLGamesError, RuntimeError):
    pass
