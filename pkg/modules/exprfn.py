"""
Expression Functions Module - Parsed functions of (x, y, t)
===========================================================
Coefficients, boundary values, initial values and exact solutions are written
as math expressions in the config file, e.g.

    g*(1 + ((exp(v*x/alpha) - 1)/(exp(v/alpha) - 1) - 1)*(1 - exp(-beta*t^2)))

with constants bound separately ("alpha=2, v=-5, g=-2, beta=10").

Grammar (lowest to highest precedence):
    comparison := additive (('<' | '<=' | '>' | '>=' | '==') additive)?
    additive   := term (('+' | '-') term)*
    term       := unary (('*' | '/') unary)*
    unary      := ('-' | '+') unary | power
    power      := primary ('^' unary)?
    primary    := NUMBER | NAME | NAME '(' args ')' | '(' comparison ')'

Evaluation is vectorized over numpy arrays; `if(c, a, b)` evaluates each branch
only on the samples that select it.
"""

import logging
import re
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ExpressionError

logger = logging.getLogger(__name__)

VARIABLES = ("x", "y", "t")

_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")

_TOKEN = re.compile(
    r"\s*(?:"
    r"(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op><=|>=|==|[-+*/^(),<>])"
    r")"
)

FUNCTIONS: Dict[str, Tuple[int, Callable]] = {
    "exp": (1, np.exp),
    "sin": (1, np.sin),
    "cos": (1, np.cos),
    "log": (1, np.log),
    "abs": (1, np.abs),
    "sqrt": (1, np.sqrt),
    "if": (3, None),
}

_BINARY = {
    "+": np.add,
    "-": np.subtract,
    "*": np.multiply,
    "/": np.divide,
    "^": np.power,
}

_COMPARE = {
    "<": np.less,
    "<=": np.less_equal,
    ">": np.greater,
    ">=": np.greater_equal,
    "==": np.equal,
}


# ============== SYNTAX TREE ==============

@dataclass(frozen=True)
class Number:
    value: float


@dataclass(frozen=True)
class Variable:
    name: str


@dataclass(frozen=True)
class Constant:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    operand: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Compare:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    name: str
    args: Tuple["Expr", ...]


@dataclass(frozen=True)
class If:
    condition: "Expr"
    then: "Expr"
    otherwise: "Expr"


Expr = Union[Number, Variable, Constant, Unary, Binary, Compare, Call, If]


def constant_names(e: Expr) -> set:
    """All named constants referenced by an expression."""
    if isinstance(e, Constant):
        return {e.name}
    if isinstance(e, (Unary,)):
        return constant_names(e.operand)
    if isinstance(e, (Binary, Compare)):
        return constant_names(e.left) | constant_names(e.right)
    if isinstance(e, Call):
        names = set()
        for arg in e.args:
            names |= constant_names(arg)
        return names
    if isinstance(e, If):
        return constant_names(e.condition) | constant_names(e.then) | constant_names(e.otherwise)
    return set()


# ============== BINDINGS ==============

class Bindings(Mapping):
    """Immutable map of constant name -> value."""

    def __init__(self, values: Optional[Mapping[str, float]] = None):
        data = {}
        for name, value in (values or {}).items():
            if not _NAME.match(name):
                raise ExpressionError(f"Invalid constant name: {name!r}")
            if name in VARIABLES:
                raise ExpressionError(f"Constant name {name!r} is reserved for a coordinate")
            if name in FUNCTIONS:
                raise ExpressionError(f"Constant name {name!r} is a function name")
            data[name] = float(value)
        self._data = data

    def __getitem__(self, name: str) -> float:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        return f"Bindings({format_constants(self)!r})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Mapping) and dict(self._data) == dict(other)

    def __hash__(self) -> int:
        return hash(tuple(sorted(self._data.items())))


def parse_constants(text: str) -> Bindings:
    """Parses "alpha=2, v=-5" into Bindings."""
    values: Dict[str, float] = {}
    for item in filter(None, (part.strip() for part in text.split(","))):
        name, sep, value = item.partition("=")
        if not sep:
            raise ExpressionError(f"Constant definition needs 'name=value', got: {item!r}")
        try:
            values[name.strip()] = float(value.strip())
        except ValueError:
            raise ExpressionError(f"Constant {name.strip()!r} is not a number: {value.strip()!r}")
    return Bindings(values)


def format_constants(bindings: Mapping[str, float]) -> str:
    return ", ".join(f"{name}={value!r}" for name, value in bindings.items())


# ============== PARSER ==============

def _byte_offset(source: str, position: int) -> int:
    return len(source[:position].encode("utf-8"))


def _tokenize(source: str) -> List[Tuple[str, str, int]]:
    tokens = []
    position = 0
    while position < len(source):
        if source[position:].strip() == "":
            break
        match = _TOKEN.match(source, position)
        if match is None or match.end() == position:
            start = position + len(source[position:]) - len(source[position:].lstrip())
            raise ExpressionError(f"Unexpected character {source[start]!r}", _byte_offset(source, start))
        kind = match.lastgroup
        start = match.start(kind)
        tokens.append((kind, match.group(kind), start))
        position = match.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = _tokenize(source)
        self.index = 0

    @property
    def current(self) -> Tuple[str, str, int]:
        return self.tokens[self.index]

    def error(self, message: str, position: Optional[int] = None) -> ExpressionError:
        if position is None:
            position = self.current[2]
        return ExpressionError(message, _byte_offset(self.source, position))

    def accept(self, *ops: str) -> Optional[str]:
        kind, text, _ = self.current
        if kind == "op" and text in ops:
            self.index += 1
            return text
        return None

    def expect(self, op: str) -> None:
        if self.accept(op) is None:
            found = self.current[1] or "end of input"
            raise self.error(f"Expected {op!r}, found {found!r}")

    def parse(self) -> Expr:
        expr = self.comparison()
        if self.current[0] != "end":
            raise self.error(f"Unexpected token {self.current[1]!r}")
        return expr

    def comparison(self) -> Expr:
        left = self.additive()
        op = self.accept(*_COMPARE)
        if op is not None:
            return Compare(op, left, self.additive())
        return left

    def additive(self) -> Expr:
        left = self.term()
        while True:
            op = self.accept("+", "-")
            if op is None:
                return left
            left = Binary(op, left, self.term())

    def term(self) -> Expr:
        left = self.unary()
        while True:
            op = self.accept("*", "/")
            if op is None:
                return left
            left = Binary(op, left, self.unary())

    def unary(self) -> Expr:
        op = self.accept("-", "+")
        if op == "-":
            return Unary("-", self.unary())
        if op == "+":
            return self.unary()
        return self.power()

    def power(self) -> Expr:
        base = self.primary()
        if self.accept("^") is not None:
            return Binary("^", base, self.unary())
        return base

    def primary(self) -> Expr:
        kind, text, position = self.current
        if kind == "number":
            self.index += 1
            return Number(float(text))
        if kind == "name":
            self.index += 1
            if self.accept("("):
                return self.call(text, position)
            if text in VARIABLES:
                return Variable(text)
            if text in FUNCTIONS:
                raise self.error(f"Function {text!r} used without arguments", position)
            return Constant(text)
        if self.accept("("):
            inner = self.comparison()
            self.expect(")")
            return inner
        raise self.error(f"Unexpected token {text or 'end of input'!r}")

    def call(self, name: str, position: int) -> Expr:
        if name not in FUNCTIONS:
            raise self.error(f"Unknown function {name!r}", position)
        args = [self.comparison()]
        while self.accept(","):
            args.append(self.comparison())
        self.expect(")")
        arity = FUNCTIONS[name][0]
        if len(args) != arity:
            raise self.error(f"Function {name!r} takes {arity} argument(s), got {len(args)}", position)
        if name == "if":
            return If(*args)
        return Call(name, tuple(args))


def parse(source: str) -> Expr:
    """Parses an expression string into an Expr.

    Raises:
        ExpressionError: syntax error (with byte offset), unknown function, arity mismatch
    """
    if source is None or not source.strip():
        raise ExpressionError("Empty expression")
    return _Parser(source).parse()


def parse_vector(source: str) -> Tuple[Expr, ...]:
    """Parses semicolon separated components, e.g. "vmax*y; 0"."""
    parts = source.split(";")
    if len(parts) > 2:
        raise ExpressionError(f"At most 2 components are supported, got {len(parts)}")
    return tuple(parse(part) for part in parts)


# ============== PRINTER ==============

def to_source(e: Expr) -> str:
    """Fully parenthesized source text that parses back to an equivalent Expr."""
    if isinstance(e, Number):
        return repr(e.value)
    if isinstance(e, (Variable, Constant)):
        return e.name
    if isinstance(e, Unary):
        return f"(-{to_source(e.operand)})"
    if isinstance(e, (Binary, Compare)):
        return f"({to_source(e.left)} {e.op} {to_source(e.right)})"
    if isinstance(e, Call):
        return f"{e.name}({', '.join(to_source(a) for a in e.args)})"
    if isinstance(e, If):
        return f"if({to_source(e.condition)}, {to_source(e.then)}, {to_source(e.otherwise)})"
    raise TypeError(f"Not an expression node: {e!r}")


# ============== EVALUATION ==============

def _evaluate(e: Expr, env: Dict[str, np.ndarray], constants: Mapping[str, float], size: int) -> np.ndarray:
    if isinstance(e, Number):
        return np.full(size, e.value)
    if isinstance(e, Variable):
        return env[e.name]
    if isinstance(e, Constant):
        return np.full(size, constants[e.name])
    if isinstance(e, Unary):
        return np.negative(_evaluate(e.operand, env, constants, size))
    if isinstance(e, Binary):
        left = _evaluate(e.left, env, constants, size)
        right = _evaluate(e.right, env, constants, size)
        return _BINARY[e.op](left, right)
    if isinstance(e, Compare):
        left = _evaluate(e.left, env, constants, size)
        right = _evaluate(e.right, env, constants, size)
        return _COMPARE[e.op](left, right).astype(float)
    if isinstance(e, Call):
        function = FUNCTIONS[e.name][1]
        return function(_evaluate(e.args[0], env, constants, size))
    if isinstance(e, If):
        selected = _evaluate(e.condition, env, constants, size) != 0.0
        result = np.empty(size)
        for mask, branch in ((selected, e.then), (~selected, e.otherwise)):
            count = int(mask.sum())
            if count:
                sub_env = {name: values[mask] for name, values in env.items()}
                result[mask] = _evaluate(branch, sub_env, constants, count)
        return result
    raise TypeError(f"Not an expression node: {e!r}")


def _check_bound(e: Expr, bindings: Mapping[str, float]) -> None:
    missing = sorted(constant_names(e) - set(bindings))
    if missing:
        raise ExpressionError(f"Unbound constant(s): {', '.join(missing)}")


def evaluate_array(e: Expr, bindings: Mapping[str, float], x, y=0.0, t=0.0) -> np.ndarray:
    """Vectorized evaluation; x, y, t broadcast against each other.

    Raises:
        ExpressionError: unbound constant, or a non-finite result (reports the first location)
    """
    _check_bound(e, bindings)
    x, y, t = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (x, y, t)))
    shape = x.shape
    env = {"x": x.ravel(), "y": y.ravel(), "t": t.ravel()}
    with np.errstate(all="ignore"):
        values = _evaluate(e, env, bindings, env["x"].size)
    bad = ~np.isfinite(values)
    if bad.any():
        k = int(np.argmax(bad))
        location = (float(env["x"][k]), float(env["y"][k]), float(env["t"][k]))
        raise ExpressionError(f"Non-finite value in '{to_source(e)}'", location=location)
    return values.reshape(shape)


def evaluate(e: Expr, bindings: Mapping[str, float], x: float = 0.0, y: float = 0.0, t: float = 0.0) -> float:
    """Evaluates an expression at a single point (x, y, t)."""
    return float(evaluate_array(e, bindings, x, y, t))


def vector_eval(exprs: Sequence[Expr], bindings: Mapping[str, float],
                x: float = 0.0, y: float = 0.0, t: float = 0.0) -> Tuple[float, ...]:
    if not 1 <= len(exprs) <= 2:
        raise ExpressionError(f"Vector functions have 1 or 2 components, got {len(exprs)}")
    return tuple(evaluate(e, bindings, x, y, t) for e in exprs)


# ============== FUNCTION OBJECTS ==============

class ParsedFunction:
    """A scalar or vector function of (points, t) backed by parsed expressions.

    Called with an (n, d) array of points and a time, returns (n,) for scalar
    functions and (n, components) for vector functions.
    """

    def __init__(self, source: str, constants: Union[str, Mapping[str, float], None] = None):
        self.source = source.strip()
        if isinstance(constants, str):
            constants = parse_constants(constants)
        self.constants = constants if isinstance(constants, Bindings) else Bindings(constants)
        self.components = parse_vector(self.source)
        for component in self.components:
            _check_bound(component, self.constants)

    @property
    def is_vector(self) -> bool:
        return len(self.components) > 1

    @property
    def is_zero(self) -> bool:
        return all(isinstance(c, Number) and c.value == 0.0 for c in self.components)

    def __call__(self, points: np.ndarray, t: float = 0.0) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        x = points[:, 0]
        y = points[:, 1] if points.shape[1] > 1 else 0.0
        values = [evaluate_array(c, self.constants, x, y, t) for c in self.components]
        if self.is_vector:
            return np.stack(values, axis=1)
        return values[0]

    def __eq__(self, other) -> bool:
        return (isinstance(other, ParsedFunction) and self.source == other.source
                and self.constants == other.constants)

    def __hash__(self) -> int:
        return hash((self.source, self.constants))

    def __repr__(self) -> str:
        return f"ParsedFunction({self.source!r}, {format_constants(self.constants)!r})"


class ConstantFunction:
    """Spatially and temporally constant scalar or vector function."""

    def __init__(self, value: Union[float, Sequence[float]]):
        self.value = np.atleast_1d(np.asarray(value, dtype=float))
        if not np.all(np.isfinite(self.value)):
            raise ExpressionError(f"Non-finite constant value: {value!r}")

    @property
    def is_vector(self) -> bool:
        return self.value.size > 1

    @property
    def is_zero(self) -> bool:
        return bool(np.all(self.value == 0.0))

    def __call__(self, points: np.ndarray, t: float = 0.0) -> np.ndarray:
        n = np.atleast_2d(points).shape[0]
        if self.is_vector:
            return np.tile(self.value, (n, 1))
        return np.full(n, self.value[0])

    def __eq__(self, other) -> bool:
        return isinstance(other, ConstantFunction) and np.array_equal(self.value, other.value)

    def __hash__(self) -> int:
        return hash(tuple(self.value))

    def __repr__(self) -> str:
        return f"ConstantFunction({self.value.tolist()!r})"


def is_zero_function(f) -> bool:
    """True when f is known to vanish identically (None, zero constant, literal zero expression)."""
    if f is None:
        return True
    return bool(getattr(f, "is_zero", False))
