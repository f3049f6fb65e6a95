import pytest

from modules.config import (
    build_body, build_coupling, build_exact, build_mesh, build_problem, format_config, initial_rigid,
    load_config, make_function, parse_config, write_config,
)
from modules.errors import ConfigError
from modules.exprfn import ConstantFunction, ParsedFunction

PRESETS = [
    "circle_single_step.cfg", "donea_huerta.cfg", "donea_huerta_pe6.cfg", "donea_huerta_refined.cfg",
    "exact_steady.cfg", "flux_step.cfg", "mms1d.cfg", "mms2d.cfg", "sphere_cylinder.cfg",
    "stefan_film.cfg",
]


def _line_of(text, prefix):
    return next(i for i, line in enumerate(text.splitlines(), start=1) if line.startswith(prefix))


def test_donea_huerta_values(configs):
    c = load_config(configs / "donea_huerta.cfg")
    assert c.dim == 1
    assert c.mesh.grid_name == "hyper_cube"
    assert c.mesh.sizes == (0.0, 1.0)
    assert c.mesh.initial_global_cycles == 3
    assert c.pde.velocity == "v"
    assert dict(c.pde.constants) == {"v": 1.0, "alpha": 0.1}
    assert c.boundaries.implementation_types == ("strong", "strong")
    assert c.boundaries.function_expressions == ("0", "0")
    assert (c.time.end_time, c.time.step_size, c.time.theta) == (1.2, 0.01, 0.5)
    assert c.solver.tolerance == 1e-12
    assert c.solver.max_iterations is None
    assert c.output.directory == "output/donea_huerta"
    assert not c.verification.enabled


def test_multiline_expressions_are_joined(configs):
    c = load_config(configs / "mms1d.cfg")
    assert "\n" not in c.pde.source
    assert c.pde.source.startswith("2*beta*g*t*exp(-beta*t^2) *(if(")
    assert len(c.boundaries.function_expressions) == 2
    assert c.verification.enabled
    assert c.study.case == "mms1d"
    assert c.study.parameters["v"] == -5.0


def test_missing_required_key_reports_section(configs):
    text = (configs / "donea_huerta.cfg").read_text()
    broken = text.replace("end_time = 1.2\n", "")
    with pytest.raises(ConfigError) as info:
        parse_config(broken)
    assert info.value.key == "time.end_time"
    assert info.value.line == _line_of(broken, "[time]")


def test_unknown_key_reports_its_line(configs):
    text = (configs / "donea_huerta.cfg").read_text().replace("step_size = 0.01", "stepsize = 0.01")
    with pytest.raises(ConfigError, match="Unknown key") as info:
        parse_config(text)
    assert info.value.key == "time.stepsize"
    assert info.value.line == _line_of(text, "stepsize")


def test_unknown_section(configs):
    text = (configs / "donea_huerta.cfg").read_text() + "\n[plotting]\ncolor = red\n"
    with pytest.raises(ConfigError, match="Unknown section") as info:
        parse_config(text)
    assert info.value.line == _line_of(text, "[plotting]")


@pytest.mark.parametrize("old, new, key", [
    ('function_expressions = "0", "0"', 'function_expressions = "0"', "boundary_conditions.function_expressions"),
    ("implementation_types = strong, strong", "implementation_types = strong, robin",
     "boundary_conditions.implementation_types"),
    ('source = "1"', 'source = "1 +"', "pde.source"),
    ('source = "1"', 'source = "beta"', "pde.source"),
    ('source = "1"', "source = 1", "pde.source"),
    ("step_size = 0.01", "step_size = -0.01", "time.step_size"),
    ("step_size = 0.01", "step_size = fast", "time.step_size"),
    ("semi_implicit_theta = 0.5", "semi_implicit_theta = 2", "time.semi_implicit_theta"),
    ("grid_name = hyper_cube", "grid_name = hyper_shell", "geometry.grid_name"),
    ("dim = 1", "dim = 3", "meta.dim"),
])
def test_invalid_values(configs, old, new, key):
    text = (configs / "donea_huerta.cfg").read_text()
    assert old in text
    with pytest.raises(ConfigError) as info:
        parse_config(text.replace(old, new))
    assert info.value.key == key
    assert info.value.line is not None


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError, match="Cannot read config"):
        load_config(tmp_path / "missing.cfg")


@pytest.mark.parametrize("name", PRESETS)
def test_presets_load_and_round_trip(configs, tmp_path, name):
    c = load_config(configs / name)
    assert parse_config(format_config(c)) == c
    assert load_config(write_config(c, tmp_path / name)) == c
    problem = build_problem(c)
    assert sorted(problem.boundary_conditions) == problem.mesh.boundary_ids


def test_make_function():
    assert make_function("", {}) is None
    assert make_function("2", {}) == ConstantFunction(2.0)
    assert make_function("0; -1", {}) == ConstantFunction([0.0, -1.0])
    f = make_function("alpha*x", {"alpha": 2.0})
    assert isinstance(f, ParsedFunction)


def test_builders(configs):
    c = load_config(configs / "circle_single_step.cfg")
    mesh = build_mesh(c)
    assert mesh.boundary_ids == [0, 1]
    assert mesh.n_cells == 128 * (16 + 3)
    assert build_exact(c) is None
    body = build_body(c)
    assert (body.shape, body.sizes) == ("circle", (1.0,))
    rigid = initial_rigid(c)
    assert (rigid.theta, rigid.r0, rigid.r1, rigid.rate) == (0.0, 0.0, 0.0, (0.0, 0.0, 0.0))
    coupling = build_coupling(c)
    assert coupling.steps == 1
    assert coupling.substeps == 5
    assert coupling.interval == pytest.approx(1.0)
    assert coupling.max_change == (0.0, 0.0, 0.5)
    assert build_exact(load_config(configs / "mms1d.cfg")) is not None


def test_coupling_needs_2d(configs):
    with pytest.raises(ConfigError, match="2D") as info:
        build_coupling(load_config(configs / "donea_huerta.cfg"))
    assert info.value.key == "meta.dim"


def test_boundary_count_must_match_mesh(configs):
    c = load_config(configs / "circle_single_step.cfg")
    text = (configs / "circle_single_step.cfg").read_text()
    text = text.replace("implementation_types = natural, strong", "implementation_types = natural")
    text = text.replace('function_expressions = "2", "-1"', 'function_expressions = "2"')
    with pytest.raises(ConfigError, match="boundary ids"):
        build_problem(parse_config(text))
    assert len(build_problem(c).boundary_conditions) == 2
