"""Exception types shared across the package."""


class MelGlowError(Exception):
    pass


class WavFormatError(MelGlowError, ValueError):
    """Malformed RIFF/WAVE container."""


class UnsupportedFormatError(WavFormatError):
    """Well-formed WAV with an encoding we do not read (e.g. 24-bit PCM)."""


class MelCacheError(MelGlowError, ValueError):
    pass


class EmptyInputError(MelGlowError, ValueError):
    pass


class ShapeError(MelGlowError, ValueError):
    pass


class NumericError(MelGlowError, ArithmeticError):
    pass


class InputTooShortError(ShapeError):
    pass


class ConfigError(MelGlowError, ValueError):
    pass


class InversionError(NumericError):
    pass


class CheckpointError(MelGlowError, ValueError):
    pass


class TrainingDivergedError(NumericError):
    pass
