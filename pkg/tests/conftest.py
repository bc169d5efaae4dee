import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "fixed",
    derandomize=True,
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("fixed")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def reference_dims():
    from trapnet.geometry import load_reference_dimensions

    return load_reference_dimensions()


@pytest.fixture(scope="session")
def reference_solution(reference_dims):
    """BEM solution of the reference geometry at its stored tuned parameter."""
    from trapnet.bem import assemble_and_solve
    from trapnet.geometry import reference_mesh

    mesh = reference_mesh(reference_dims["tuned"]["parameter"], reference_dims)
    return assemble_and_solve(mesh)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS, format_line

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(format_line(number))
