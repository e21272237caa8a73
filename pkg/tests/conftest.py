import numpy as np
import pytest

from modeshift.core import Mode, ModeAttributes, Zone
from modeshift.data import gen_fixture

@pytest.fixture(scope="session")
def small_bundle(tmp_path_factory):
    """A 4-zone, 2-wage-group synthetic city written to disk."""
    out = tmp_path_factory.mktemp("bundle")
    return gen_fixture(out, n_zones=4, n_wage_groups=2, seed=3), out


@pytest.fixture
def two_zone_table():
    zones = {"A": Zone("A", "Manhattan"), "B": Zone("B", "Queens")}
    table = {}
    for o in zones:
        for d in zones:
            for m in Mode:
                table[(o, d, m)] = ModeAttributes(0.5, 0.05, 10.0, 1.0, 3.0)
    return zones, table


def costs6(*vals):
    """Six-mode cost vector from the leading values; the rest unavailable."""
    g = np.full(6, np.inf)
    g[:len(vals)] = vals
    return g


# criterion number -> (passed, detail); filled by the acceptance suite
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
