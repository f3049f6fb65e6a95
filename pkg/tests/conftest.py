from pathlib import Path

import pytest

from modules.mesh import GridSpec, generate, refine_global

CONFIGS = Path(__file__).parent.parent / "configs"


@pytest.fixture
def configs() -> Path:
    return CONFIGS


@pytest.fixture
def unit_interval():
    return refine_global(generate(GridSpec("hyper_cube", (0.0, 1.0))), 3)


@pytest.fixture
def unit_square():
    return refine_global(generate(GridSpec("hyper_rectangle", (0.0, 0.0, 1.0, 1.0))), 2)


@pytest.fixture
def shell():
    return refine_global(generate(GridSpec("hyper_shell", (1.0, 2.0))), 2)
