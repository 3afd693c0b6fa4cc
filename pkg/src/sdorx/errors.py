"""Exception types shared across the receiver, simulator and CLI."""


class ConfigError(ValueError):
    """Invalid parameterization (maps to CLI exit code 2)."""


class SignalSizeError(ValueError):
    """Input array has the wrong length or framing."""


class NyquistError(ValueError):
    """Sample rate too low for the requested band."""


class SequenceError(RuntimeError):
    """Buffers or carried state arrived out of order, or a gap was detected."""


class SyncError(RuntimeError):
    """Received bits could not be aligned to the reference (exit code 3)."""


class CalibrationError(RuntimeError):
    """Offline calibration produced an unusable operating point (exit code 3)."""


class EqualizerDivergence(RuntimeError):
    """Adaptive equalizer taps blew up."""
