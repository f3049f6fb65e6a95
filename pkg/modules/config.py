"""
Config Module - Run configuration files
=======================================
INI-style files parsed with configparser. Sections and keys:

    [meta]                dim
    [geometry]            grid_name, sizes, angular_cells
    [refinement]          initial_global_cycles, boundaries_to_refine, initial_boundary_cycles
    [pde]                 velocity, diffusivity, source, constants
    [initial_values]      function
    [boundary_conditions] implementation_types, function_expressions
    [time]                end_time, step_size, semi_implicit_theta
    [solver]              tolerance, max_iterations, jacobi
    [verification]        enabled, exact
    [study]               case, parameters, first_cycle, levels, dt_per_h, temporal_cycles, dt0
    [body]                shape, sizes, hull_samples, initial_pose
    [rbd]                 gravity, melting_temperature, max_change, tol_g, tol_f, step_tol, ...
    [coupling]            steps, substeps, schedule
    [output]              directory, deterministic

Values are numbers, true/false, comma lists or double-quoted expression
strings. Expressions are parsed when the file is loaded, so a typo is reported
with the key and line it came from.
"""

import configparser
import csv
import logging
import math
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from .assembly import FeSpace
from .coupling import CouplingConfig, parse_bc_schedule
from .errors import ConfigError, ExpressionError
from .exprfn import Bindings, ConstantFunction, Number, ParsedFunction, format_constants, parse_constants, parse_vector
from .linsolve import SolverSettings
from .mesh import GRID_NAMES, GridSpec, Mesh, generate, refine_boundary, refine_global
from .pde import AmbientProblem, BoundaryCondition
from .rbd import BODY_SHAPES, BodyGeometry, RbdSettings, RigidState

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

REQUIRED = object()

_SECTION = re.compile(r"^\s*\[([^\]]+)\]")
_KEY = re.compile(r"^([^#;\s=][^=]*?)\s*=")

# section -> key -> (kind, default)
SCHEMA: Dict[str, Dict[str, Tuple[str, Any]]] = {
    "meta": {"dim": ("int", REQUIRED)},
    "geometry": {
        "grid_name": ("str", REQUIRED),
        "sizes": ("floats", REQUIRED),
        "angular_cells": ("int", 8),
    },
    "refinement": {
        "initial_global_cycles": ("int", 0),
        "boundaries_to_refine": ("ints", ()),
        "initial_boundary_cycles": ("int", 0),
    },
    "pde": {
        "velocity": ("expr", ""),
        "diffusivity": ("expr", REQUIRED),
        "source": ("expr", ""),
        "constants": ("constants", Bindings()),
    },
    "initial_values": {"function": ("expr", "0")},
    "boundary_conditions": {
        "implementation_types": ("strs", REQUIRED),
        "function_expressions": ("exprs", REQUIRED),
    },
    "time": {
        "end_time": ("float", REQUIRED),
        "step_size": ("float", REQUIRED),
        "semi_implicit_theta": ("float", 0.5),
    },
    "solver": {
        "tolerance": ("float", 1e-8),
        "max_iterations": ("int", None),
        "jacobi": ("bool", False),
    },
    "verification": {
        "enabled": ("bool", False),
        "exact": ("expr", ""),
    },
    "study": {
        "case": ("str", ""),
        "parameters": ("constants", Bindings()),
        "first_cycle": ("int", 4),
        "levels": ("int", 5),
        "dt_per_h": ("float", 0.5),
        "temporal_cycles": ("int", 8),
        "dt0": ("float", 0.05),
    },
    "body": {
        "shape": ("str", "circle"),
        "sizes": ("floats", (1.0,)),
        "hull_samples": ("int", 32),
        "initial_pose": ("floats", (0.0, 0.0, 0.0)),
    },
    "rbd": {
        "gravity": ("floats", (0.0, 1.0)),
        "melting_temperature": ("float", 0.0),
        "max_change": ("floats", (0.0, 0.0, 0.5)),
        "tol_g": ("float", 1e-6),
        "tol_f": ("float", 1e-10),
        "step_tol": ("float", 1e-6),
        "max_outer": ("int", 10),
        "max_inner": ("int", 200),
        "fd_step": ("float", 1e-6),
    },
    "coupling": {
        "steps": ("int", 1),
        "substeps": ("int", 1),
        "schedule": ("str", ""),
    },
    "output": {
        "directory": ("str", "output"),
        "deterministic": ("bool", False),
    },
}


# ============== SETTINGS VIEWS ==============

@dataclass(frozen=True)
class MeshSettings:
    grid_name: str
    sizes: Tuple[float, ...]
    angular_cells: int = 8
    initial_global_cycles: int = 0
    boundaries_to_refine: Tuple[int, ...] = ()
    initial_boundary_cycles: int = 0


@dataclass(frozen=True)
class PdeSettings:
    diffusivity: str
    velocity: str = ""
    source: str = ""
    constants: Bindings = field(default_factory=Bindings)
    initial_values: str = "0"


@dataclass(frozen=True)
class BoundarySettings:
    implementation_types: Tuple[str, ...]
    function_expressions: Tuple[str, ...]


@dataclass(frozen=True)
class TimeSettings:
    end_time: float
    step_size: float
    theta: float = 0.5


@dataclass(frozen=True)
class VerificationSettings:
    enabled: bool = False
    exact: str = ""


@dataclass(frozen=True)
class StudyConfig:
    case: str = ""
    parameters: Bindings = field(default_factory=Bindings)
    first_cycle: int = 4
    levels: int = 5
    dt_per_h: float = 0.5
    temporal_cycles: int = 8
    dt0: float = 0.05


@dataclass(frozen=True)
class BodySettings:
    shape: str = "circle"
    sizes: Tuple[float, ...] = (1.0,)
    hull_samples: int = 32
    initial_pose: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    gravity: Tuple[float, float] = (0.0, 1.0)
    melting_temperature: float = 0.0
    max_change: Tuple[float, float, float] = (0.0, 0.0, 0.5)


@dataclass(frozen=True)
class CouplingSettings:
    steps: int = 1
    substeps: int = 1
    schedule: str = ""


@dataclass(frozen=True)
class OutputSettings:
    directory: str = "output"
    deterministic: bool = False


@dataclass(frozen=True)
class Config:
    dim: int
    mesh: MeshSettings
    pde: PdeSettings
    boundaries: BoundarySettings
    time: TimeSettings
    solver: SolverSettings = field(default_factory=SolverSettings)
    verification: VerificationSettings = field(default_factory=VerificationSettings)
    study: StudyConfig = field(default_factory=StudyConfig)
    body: BodySettings = field(default_factory=BodySettings)
    rbd: RbdSettings = field(default_factory=RbdSettings)
    coupling: CouplingSettings = field(default_factory=CouplingSettings)
    output: OutputSettings = field(default_factory=OutputSettings)


# ============== PARSING ==============

def _line_index(text: str) -> Dict[Tuple[str, Optional[str]], int]:
    """(section, key) -> 1-based line number; (section, None) for headers."""
    index: Dict[Tuple[str, Optional[str]], int] = {}
    section = ""
    for number, line in enumerate(text.splitlines(), start=1):
        header = _SECTION.match(line)
        if header:
            section = header.group(1).strip()
            index.setdefault((section, None), number)
            continue
        key = _KEY.match(line)
        if key and section:
            index.setdefault((section, key.group(1).strip()), number)
    return index


def _unquote(raw: str, where: str, line: Optional[int]) -> str:
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] == '"':
        return raw[1:-1]
    raise ConfigError(f"Expected a double-quoted string, got {raw!r}", key=where, line=line)


def _split(raw: str) -> List[str]:
    rows = list(csv.reader([" ".join(raw.split())], skipinitialspace=True))
    return [item.strip() for item in rows[0]] if rows else []


def _split_quoted(raw: str, where: str, line: Optional[int]) -> List[str]:
    """Comma list of quoted strings; commas inside quotes belong to the string."""
    items = re.findall(r'\s*"([^"]*)"\s*(?:,|$)', raw)
    rebuilt = ",".join(f'"{item}"' for item in items)
    if re.sub(r"\s+", "", rebuilt) != re.sub(r"\s+", "", raw):
        raise ConfigError(f"Expected a comma list of double-quoted strings, got {raw!r}", key=where, line=line)
    return [" ".join(item.split()) for item in items]


def _check_expression(source: str, where: str, line: Optional[int], constants: Bindings) -> None:
    try:
        ParsedFunction(source, constants)
    except ExpressionError as e:
        raise ConfigError(f"Invalid expression {source!r}: {e}", key=where, line=line)


def _convert(kind: str, raw: str, where: str, line: Optional[int]):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError("not finite")
            return value
        if kind == "bool":
            lowered = raw.strip().lower()
            if lowered not in ("true", "false"):
                raise ValueError("expected true or false")
            return lowered == "true"
        if kind == "str":
            raw = raw.strip()
            return raw[1:-1] if len(raw) >= 2 and raw[0] == raw[-1] == '"' else raw
        if kind == "floats":
            return tuple(float(v) for v in _split(raw))
        if kind == "ints":
            return tuple(int(v) for v in _split(raw))
        if kind == "strs":
            return tuple(_split(raw))
        if kind == "expr":
            return " ".join(_unquote(raw, where, line).split())
        if kind == "exprs":
            return tuple(_split_quoted(raw, where, line))
        if kind == "constants":
            return parse_constants(_unquote(raw, where, line))
    except ConfigError:
        raise
    except (ValueError, ExpressionError) as e:
        raise ConfigError(f"Invalid {kind} value {raw!r}: {e}", key=where, line=line)
    raise ConfigError(f"Unknown value kind {kind!r}", key=where, line=line)


def _read_sections(text: str) -> Tuple[Dict[str, Dict[str, Any]], Dict]:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), inline_comment_prefixes=("#",),
                                       comment_prefixes=("#", ";"), empty_lines_in_values=False)
    parser.optionxform = str
    lines = _line_index(text)
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"Malformed config: {e}", line=getattr(e, "lineno", None))

    values: Dict[str, Dict[str, Any]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"Unknown section; expected one of {sorted(SCHEMA)}",
                              key=section, line=lines.get((section, None)))
        schema = SCHEMA[section]
        values[section] = {}
        for key, raw in parser.items(section):
            where = f"{section}.{key}"
            line = lines.get((section, key))
            if key not in schema:
                raise ConfigError(f"Unknown key; expected one of {sorted(schema)}", key=where, line=line)
            kind, _ = schema[key]
            values[section][key] = _convert(kind, raw, where, line)

    for section, schema in SCHEMA.items():
        present = values.setdefault(section, {})
        for key, (_, default) in schema.items():
            if key in present:
                continue
            if default is REQUIRED:
                raise ConfigError("Missing required key", key=f"{section}.{key}",
                                  line=lines.get((section, None)))
            present[key] = default
    return values, lines


def _validate(values: Dict[str, Dict[str, Any]], lines: Dict) -> None:
    def fail(message: str, section: str, key: str):
        raise ConfigError(message, key=f"{section}.{key}", line=lines.get((section, key)))

    dim = values["meta"]["dim"]
    if dim not in (1, 2):
        fail(f"dim must be 1 or 2, got {dim}", "meta", "dim")
    grid = values["geometry"]["grid_name"]
    if grid not in GRID_NAMES:
        fail(f"Unknown grid name {grid!r}; expected one of {sorted(GRID_NAMES)}", "geometry", "grid_name")
    if (grid == "hyper_cube") != (dim == 1):
        fail(f"grid {grid!r} does not match dim {dim}", "geometry", "grid_name")

    types = values["boundary_conditions"]["implementation_types"]
    expressions = values["boundary_conditions"]["function_expressions"]
    for kind in types:
        if kind not in ("strong", "natural"):
            fail(f"Boundary kinds must be 'strong' or 'natural', got {kind!r}",
                 "boundary_conditions", "implementation_types")
    if len(types) != len(expressions):
        fail(f"{len(types)} implementation types but {len(expressions)} function expressions",
             "boundary_conditions", "function_expressions")

    time = values["time"]
    if not time["end_time"] > 0:
        fail(f"end_time must be positive, got {time['end_time']}", "time", "end_time")
    if not time["step_size"] > 0:
        fail(f"step_size must be positive, got {time['step_size']}", "time", "step_size")
    if not 0.0 <= time["semi_implicit_theta"] <= 1.0:
        fail(f"semi_implicit_theta must lie in [0, 1], got {time['semi_implicit_theta']}",
             "time", "semi_implicit_theta")
    if values["verification"]["enabled"] and not values["verification"]["exact"]:
        fail("Verification is enabled but no exact expression is given", "verification", "exact")
    if values["body"]["shape"] not in BODY_SHAPES:
        fail(f"Unknown body shape; expected one of {sorted(BODY_SHAPES)}", "body", "shape")
    if len(values["body"]["initial_pose"]) != 3:
        fail("initial_pose needs 3 values (theta, r0, r1)", "body", "initial_pose")
    if len(values["rbd"]["gravity"]) != 2:
        fail("gravity needs 2 components", "rbd", "gravity")
    if len(values["rbd"]["max_change"]) != 3:
        fail("max_change needs 3 values (theta, r0, r1)", "rbd", "max_change")
    try:
        parse_bc_schedule(values["coupling"]["schedule"])
    except ValueError as e:
        fail(str(e), "coupling", "schedule")

    constants = values["pde"]["constants"]
    checks = [("pde", "velocity", values["pde"]["velocity"]),
              ("pde", "diffusivity", values["pde"]["diffusivity"]),
              ("pde", "source", values["pde"]["source"]),
              ("initial_values", "function", values["initial_values"]["function"]),
              ("verification", "exact", values["verification"]["exact"])]
    checks += [("boundary_conditions", "function_expressions", e) for e in expressions]
    for section, key, source in checks:
        if source:
            _check_expression(source, f"{section}.{key}", lines.get((section, key)), constants)


def parse_config(text: str) -> Config:
    """Parses and validates config text.

    Raises:
        ConfigError: syntax error, unknown section or key, missing key, invalid value
    """
    values, lines = _read_sections(text)
    _validate(values, lines)
    geometry, refinement, pde = values["geometry"], values["refinement"], values["pde"]
    body, rbd = values["body"], values["rbd"]
    return Config(
        dim=values["meta"]["dim"],
        mesh=MeshSettings(geometry["grid_name"], geometry["sizes"], geometry["angular_cells"],
                          refinement["initial_global_cycles"], refinement["boundaries_to_refine"],
                          refinement["initial_boundary_cycles"]),
        pde=PdeSettings(pde["diffusivity"], pde["velocity"], pde["source"], pde["constants"],
                        values["initial_values"]["function"]),
        boundaries=BoundarySettings(values["boundary_conditions"]["implementation_types"],
                                    values["boundary_conditions"]["function_expressions"]),
        time=TimeSettings(values["time"]["end_time"], values["time"]["step_size"],
                          values["time"]["semi_implicit_theta"]),
        solver=SolverSettings(**values["solver"]),
        verification=VerificationSettings(**values["verification"]),
        study=StudyConfig(**values["study"]),
        body=BodySettings(body["shape"], body["sizes"], body["hull_samples"], body["initial_pose"],
                          rbd["gravity"], rbd["melting_temperature"], rbd["max_change"]),
        rbd=RbdSettings(**{k: rbd[k] for k in ("tol_g", "tol_f", "step_tol", "max_outer", "max_inner", "fd_step")}),
        coupling=CouplingSettings(**values["coupling"]),
        output=OutputSettings(**values["output"]),
    )


def load_config(path: PathLike) -> Config:
    """Reads and validates a config file.

    Raises:
        ConfigError: see parse_config; also when the file cannot be read
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}")
    config = parse_config(text)
    logger.debug("Loaded config %s (dim %d, grid %s)", path, config.dim, config.mesh.grid_name)
    return config


# ============== WRITING ==============

def _format(kind: str, value) -> Optional[str]:
    if value is None:
        return None
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    if kind in ("floats", "ints", "strs"):
        return ", ".join(repr(float(v)) if kind == "floats" else str(v) for v in value)
    if kind == "expr":
        return f'"{value}"'
    if kind == "exprs":
        return ", ".join(f'"{v}"' for v in value)
    if kind == "constants":
        return f'"{format_constants(value)}"'
    return str(value)


def _sections(config: Config) -> Dict[str, Dict[str, Any]]:
    m, p, b = config.mesh, config.pde, config.body
    return {
        "meta": {"dim": config.dim},
        "geometry": {"grid_name": m.grid_name, "sizes": m.sizes, "angular_cells": m.angular_cells},
        "refinement": {"initial_global_cycles": m.initial_global_cycles,
                       "boundaries_to_refine": m.boundaries_to_refine,
                       "initial_boundary_cycles": m.initial_boundary_cycles},
        "pde": {"velocity": p.velocity, "diffusivity": p.diffusivity, "source": p.source,
                "constants": p.constants},
        "initial_values": {"function": p.initial_values},
        "boundary_conditions": {"implementation_types": config.boundaries.implementation_types,
                                "function_expressions": config.boundaries.function_expressions},
        "time": {"end_time": config.time.end_time, "step_size": config.time.step_size,
                 "semi_implicit_theta": config.time.theta},
        "solver": {f.name: getattr(config.solver, f.name) for f in fields(config.solver)},
        "verification": {"enabled": config.verification.enabled, "exact": config.verification.exact},
        "study": {f.name: getattr(config.study, f.name) for f in fields(config.study)},
        "body": {"shape": b.shape, "sizes": b.sizes, "hull_samples": b.hull_samples,
                 "initial_pose": b.initial_pose},
        "rbd": {"gravity": b.gravity, "melting_temperature": b.melting_temperature,
                "max_change": b.max_change,
                **{f.name: getattr(config.rbd, f.name) for f in fields(config.rbd)}},
        "coupling": {f.name: getattr(config.coupling, f.name) for f in fields(config.coupling)},
        "output": {f.name: getattr(config.output, f.name) for f in fields(config.output)},
    }


def format_config(config: Config) -> str:
    """Config text that parses back to an equal Config."""
    out: List[str] = []
    for section, values in _sections(config).items():
        out.append(f"[{section}]")
        for key, value in values.items():
            text = _format(SCHEMA[section][key][0], value)
            if text is not None and not (SCHEMA[section][key][0] == "expr" and value == ""):
                out.append(f"{key} = {text}")
        out.append("")
    return "\n".join(out)


def write_config(config: Config, path: PathLike) -> Path:
    path = Path(path)
    path.write_text(format_config(config), encoding="utf-8")
    return path


# ============== BUILDERS ==============

def make_function(source: str, constants: Bindings):
    """ConstantFunction for literal numbers ("2", "0; -1"), ParsedFunction otherwise."""
    if not source:
        return None
    components = parse_vector(source)
    if all(isinstance(c, Number) for c in components):
        values = [c.value for c in components]
        return ConstantFunction(values if len(values) > 1 else values[0])
    return ParsedFunction(source, constants)


def build_mesh(config: Config) -> Mesh:
    m = config.mesh
    mesh = refine_global(generate(GridSpec(m.grid_name, m.sizes, m.angular_cells)), m.initial_global_cycles)
    for boundary_id in m.boundaries_to_refine:
        mesh = refine_boundary(mesh, boundary_id, m.initial_boundary_cycles)
    logger.debug("Mesh: %d cells, %d nodes", mesh.n_cells, mesh.n_nodes)
    return mesh


def build_problem(config: Config, mesh: Optional[Mesh] = None) -> AmbientProblem:
    """The AmbientProblem a config describes.

    Raises:
        ConfigError: the boundary list does not match the mesh boundary ids
    """
    mesh = mesh if mesh is not None else build_mesh(config)
    ids = mesh.boundary_ids
    types = config.boundaries.implementation_types
    if len(types) != len(ids):
        raise ConfigError(f"Mesh has boundary ids {ids} but {len(types)} implementation types are given",
                          key="boundary_conditions.implementation_types")
    constants = config.pde.constants
    conditions = {
        b: BoundaryCondition(kind, make_function(source, constants))
        for b, kind, source in zip(ids, types, config.boundaries.function_expressions)
    }
    return AmbientProblem(
        space=FeSpace(mesh),
        diffusivity=make_function(config.pde.diffusivity, constants),
        boundary_conditions=conditions,
        initial_values=make_function(config.pde.initial_values, constants),
        velocity=make_function(config.pde.velocity, constants),
        source=make_function(config.pde.source, constants),
        theta=config.time.theta,
        step_size=config.time.step_size,
        end_time=config.time.end_time,
        solver=config.solver,
    )


def build_exact(config: Config) -> Optional[ParsedFunction]:
    if not config.verification.enabled:
        return None
    return ParsedFunction(config.verification.exact, config.pde.constants)


def build_body(config: Config) -> BodyGeometry:
    return BodyGeometry(config.body.shape, config.body.sizes, config.body.hull_samples)


def initial_rigid(config: Config) -> RigidState:
    return RigidState(*config.body.initial_pose, rate=(0.0, 0.0, 0.0))


def build_coupling(config: Config, template: Optional[AmbientProblem] = None) -> CouplingConfig:
    """Coupled trajectory settings; the template problem defaults to build_problem(config).

    Raises:
        ConfigError: a 1D config or an invalid schedule
    """
    if config.dim != 2:
        raise ConfigError("Trajectory runs need a 2D config", key="meta.dim")
    template = template if template is not None else build_problem(config)
    try:
        return CouplingConfig(
            template=template,
            body=build_body(config),
            gravity=config.body.gravity,
            melting_temperature=config.body.melting_temperature,
            max_change=config.body.max_change,
            steps=config.coupling.steps,
            substeps=config.coupling.substeps,
            rbd_settings=config.rbd,
            schedule=parse_bc_schedule(config.coupling.schedule),
        )
    except ValueError as e:
        raise ConfigError(str(e), key="coupling")
