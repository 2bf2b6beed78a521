import numpy as np
import pytest

from gridtopo.actions import enumerate_catalog
from gridtopo.grid import load_grid_spec, load_ieee14
from gridtopo.scenarios import Scenario


@pytest.fixture(scope="session")
def ieee14():
    return load_ieee14()


@pytest.fixture(scope="session")
def ieee14_catalog(ieee14):
    return enumerate_catalog(ieee14)


def write_grid(tmp_path, text):
    p = tmp_path / "toy.grid"
    p.write_text(text)
    return load_grid_spec(p)


# single line 0-1, generator feeding one load; sub voltages chosen so the
# MW limit of the line is exactly 10 (sqrt(3)*kV*A/1000 with A below)
SERIES_GRID = """
SUBSTATIONS
0 100
1 100
LINES
0 0 1 0.1 57.735026918962575
LOADS
0 1 10.0
GENERATORS
0 0 thermal 50
"""

# two parallel lines between the same substations; line 0 limit 10 MW,
# line 1 limit 100 MW
PARALLEL_GRID = """
SUBSTATIONS
0 100
1 100
LINES
0 0 1 0.1 57.735026918962575
1 0 1 0.1 577.35026918962575
LOADS
0 1 10.0
GENERATORS
0 0 thermal 200
"""

# triangle with equal reactances: generator at 0, load at 1, corner sub 2
TRIANGLE_GRID = """
SUBSTATIONS
0 100
1 100
2 100
LINES
0 0 1 0.2 577.35026918962575
1 0 2 0.2 577.35026918962575
2 2 1 0.2 577.35026918962575
LOADS
0 1 9.0
GENERATORS
0 0 thermal 50
"""

# chain 0-1-2 with generators at both ends and the load in the middle
CHAIN_GRID = """
SUBSTATIONS
0 100
1 100
2 100
LINES
0 0 1 0.1 577.35026918962575
1 1 2 0.1 577.35026918962575
LOADS
0 1 20.0
GENERATORS
0 0 thermal 50
1 2 thermal 50
"""

# chain 0-1-2-3, generators at 0 and 2, loads at 1 and 3: cutting line 1
# leaves two self-sufficient parts
SPLIT_GRID = """
SUBSTATIONS
0 100
1 100
2 100
3 100
LINES
0 0 1 0.1 577.35026918962575
1 1 2 0.1 577.35026918962575
2 2 3 0.1 577.35026918962575
LOADS
0 1 10.0
1 3 10.0
GENERATORS
0 0 thermal 50
1 2 thermal 50
"""


def flat_scenario(spec, steps, load_mw=None, gen_mw=None, outages=None, sid=0):
    """Constant-injection scenario for hand-built engine tests."""
    if load_mw is None:
        load_mw = [ld.base_mw for ld in spec.loads]
    load = np.tile(np.asarray(load_mw, float), (steps, 1))
    if gen_mw is None:
        total = float(np.sum(load_mw))
        gen = np.zeros((steps, spec.n_gen))
        gen[:, 0] = total  # single slack-style dispatch
    else:
        gen = np.tile(np.asarray(gen_mw, float), (steps, 1))
    return Scenario(sid, load, gen, outages)


def scenario_from_profiles(spec, load_rows, gen_rows=None, outages=None, sid=0):
    """Scenario from explicit per-step load rows; generator 0 balances."""
    load = np.asarray(load_rows, float)
    steps = load.shape[0]
    if gen_rows is None:
        gen = np.zeros((steps, spec.n_gen))
        gen[:, 0] = load.sum(axis=1)
    else:
        gen = np.asarray(gen_rows, float)
    return Scenario(sid, load, gen, outages)
