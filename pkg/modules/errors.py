"""
Errors Module - Exception hierarchy and argument guards
========================================================
Every failure raised by the library derives from MeltsimError so the CLI can
map it to an exit code. Validation problems also derive from ValueError.
"""

import inspect
from functools import wraps
from typing import Any, Callable, Optional, Sequence, Tuple


class MeltsimError(Exception):
    """Base class for all library errors."""


class ExpressionError(MeltsimError):
    """Parse or evaluation failure of a parsed function.

    Attributes:
        offset: byte offset into the source text (parse errors)
        location: (x, y, t) of the first offending sample (evaluation errors)
    """

    def __init__(self, message: str, offset: Optional[int] = None,
                 location: Optional[Tuple[float, float, float]] = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        if location is not None:
            message = f"{message} at x={location[0]!r}, y={location[1]!r}, t={location[2]!r}"
        super().__init__(message)
        self.offset = offset
        self.location = location


class MeshError(MeltsimError, ValueError):
    pass


class AssemblyError(MeltsimError):
    pass


class SolverError(MeltsimError):
    """Krylov solver failure (non-convergence or breakdown)."""

    def __init__(self, message: str, residual: float = float("nan"),
                 iterations: int = 0, breakdown: bool = False):
        super().__init__(f"{message} (iterations={iterations}, relative residual={residual:.3e})")
        self.residual = residual
        self.iterations = iterations
        self.breakdown = breakdown


class FieldError(MeltsimError):
    pass


class PointNotFoundError(FieldError):
    pass


class CheckpointError(FieldError):
    pass


class RbdError(MeltsimError):
    pass


class ConfigError(MeltsimError, ValueError):
    """Config file problem. Carries the offending key and line when known."""

    def __init__(self, message: str, key: Optional[str] = None, line: Optional[int] = None):
        prefix = ""
        if line is not None:
            prefix += f"line {line}: "
        if key is not None:
            prefix += f"[{key}] "
        super().__init__(prefix + message)
        self.key = key
        self.line = line


class VerificationError(MeltsimError):
    pass


# ============== ARGUMENT GUARDS ==============

def _bound_arguments(func: Callable, args: tuple, kwargs: dict) -> dict:
    bound = inspect.signature(func).bind(*args, **kwargs)
    bound.apply_defaults()
    return bound.arguments


def require_positive(*names: str) -> Callable:
    """Decorator: rejects calls where any named argument is not strictly positive.

    Usage:
        @require_positive("alpha")
        def local_peclet(v_mag, h_cell, alpha):
            ...
    """
    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args, **kwargs):
            arguments = _bound_arguments(func, args, kwargs)
            for name in names:
                value = arguments.get(name)
                if value is None or not value > 0:
                    raise ValueError(
                        f"{func.__name__}() requires positive '{name}', got: {value!r}"
                    )
            return func(*args, **kwargs)
        return wrapper
    return decorator


def require_dim(*dims: int, argument: str = "mesh") -> Callable:
    """Decorator: the named argument (a Mesh, or anything carrying .mesh) must have dim in dims."""
    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args, **kwargs):
            target: Any = _bound_arguments(func, args, kwargs).get(argument)
            dim = getattr(target, "dim", None)
            if dim is None and hasattr(target, "mesh"):
                dim = target.mesh.dim
            if dim not in dims:
                raise MeshError(
                    f"{func.__name__}() supports dimension {_join(dims)}, got: {dim}"
                )
            return func(*args, **kwargs)
        return wrapper
    return decorator


def _join(values: Sequence[int]) -> str:
    return " or ".join(str(v) for v in values)
