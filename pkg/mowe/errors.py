from typing import Any, Dict, Optional


class MoweError(Exception):
    """Base class for every error the toolkit raises on purpose."""

    code = "mowe_error"

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        """Machine-readable form written to stderr by the CLI."""
        return {
            "error": self.code,
            "type": type(self).__name__,
            "message": self.message,
            "details": self.details,
        }


class DimensionError(MoweError, ValueError):
    code = "dimension_error"

    def __init__(self, op: str, *shapes, hint: str = ""):
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        message = f"{op}: incompatible shapes {rendered}"
        if hint:
            message = f"{message} ({hint})"
        super().__init__(message, {"op": op, "shapes": [list(s) for s in shapes]})


class ArgumentError(MoweError, ValueError):
    code = "argument_error"


class ConfigError(MoweError, ValueError):
    code = "config_error"

    def __init__(self, message: str, location: str = "", hint: str = ""):
        text = f"{location}: {message}" if location else message
        if hint:
            text = f"{text}. Hint: {hint}"
        super().__init__(text, {"location": location, "hint": hint})
        self.location = location
        self.hint = hint


class EncoderIndexError(MoweError, IndexError):
    code = "encoder_index_error"


class NonFiniteError(MoweError, ArithmeticError):
    code = "non_finite"

    def __init__(self, tensor_name: str, step: Optional[int] = None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(
            f"non-finite values in '{tensor_name}'{where}",
            {"tensor": tensor_name, "step": step},
        )
        self.tensor_name = tensor_name


class FormatError(MoweError):
    code = "format_error"
