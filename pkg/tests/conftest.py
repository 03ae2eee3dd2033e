import numpy as np
import pytest

from stagger.panel import Panel, make_adoption


def write(path, text):
    path.write_text(text)
    return path


@pytest.fixture
def small_csv(tmp_path):
    panel = write(
        tmp_path / "panel.csv",
        "unit,time,outcome,x1\n"
        "a,1,1.0,0.5\na,2,2.0,0.5\na,3,3.0,0.5\n"
        "b,1,0.0,1.5\nb,2,1.0,1.5\nb,3,0.5,1.5\n",
    )
    adoption = write(tmp_path / "adopt.csv", "unit,adoption_time,censored\na,1.5,0\nb,,1\n")
    return panel, adoption


def static_panel(y, x):
    """Panel with a scalar covariate broadcast over time."""
    y = np.asarray(y, dtype=float)
    return Panel(y, np.asarray(x, dtype=float))


def adoption(times, t_max):
    return make_adoption(times, t_max)


# One line per acceptance criterion, printed at the end of the run.
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
