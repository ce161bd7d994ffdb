"""
Error hierarchy
===============

Every failure raised on purpose by the services derives from SplatError,
so the CLI can catch one type, log it and turn it into an exit code.
"""

from typing import Optional


class SplatError(Exception):
    """Base class for all domain errors."""
    pass


class ConfigError(SplatError, ValueError):
    """Invalid configuration file or settings value."""
    pass


class SceneParseError(SplatError, ValueError):
    """Malformed scene/camera/manifest document."""

    def __init__(self, message: str, line: int = 0, column: int = 0, path: Optional[str] = None):
        self.line = line
        self.column = column
        self.path = path
        where = f"{path}:" if path else ""
        super().__init__(f"{where}{line}:{column}: {message}")


class SceneValidationError(SplatError, ValueError):
    """A loaded or constructed object violates a declared invariant."""

    def __init__(self, kind: str, index: Optional[int], field: str, message: str):
        self.kind = kind
        self.index = index
        self.field = field
        at = f"{kind}[{index}]" if index is not None else kind
        super().__init__(f"{at}.{field}: {message}")


class ImageFormatError(SplatError, ValueError):
    """Unsupported, truncated or mis-sized image file."""
    pass


class RenderError(SplatError, ValueError):
    """Invalid render request (for example a zero-resolution camera)."""
    pass


class DeformError(SplatError, ValueError):
    """Invalid deformation query or a deformed splat breaking an invariant."""
    pass


class AutodiffError(SplatError, ValueError):
    """Primitive evaluated outside its domain while recording."""
    pass


class LossError(SplatError, ValueError):
    """Loss inputs with mismatched resolution."""
    pass


class TrainingDivergedError(SplatError, RuntimeError):
    """Non-finite loss during training."""

    def __init__(self, step: int, frame: int, term: str):
        self.step = step
        self.frame = frame
        self.term = term
        super().__init__(f"non-finite loss at step {step}, frame {frame}, term '{term}'")
