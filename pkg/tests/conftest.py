import numpy as np
import pytest
import torch

from fleetadapt import fleet_sim as fs
from fleetadapt import kinodyn as K

torch.set_num_threads(1)

LIGHT = "m0.5_f0.6_s0.6"
HEAVY = "m4_f0.6_s0.6"


@pytest.fixture(scope="session")
def fleet100():
    """The default training fleet: 8 vehicles x 100 trajectories."""
    cfgs = fs.default_fleet()
    return {c.id: c for c in cfgs}, fs.generate_fleet(cfgs, 100, 0)


@pytest.fixture(scope="session")
def fleet_test():
    """Held-out trajectories of the default fleet on a disjoint seed."""
    return fs.generate_fleet(fs.default_fleet(), 20, 99)


@pytest.fixture(scope="session")
def scratch_pair(fleet100):
    """From-scratch models for a light and a heavy vehicle (alpha_m 0.5 vs 4.0), full training budget."""
    _, data = fleet100
    hyper = K.KinoHyper()
    jobs = [K.KinoJob([K.make_windows(data[v], hyper.T_pred)], [1.0], seed=i) for i, v in enumerate((LIGHT, HEAVY))]
    res = K.train_kino(jobs, hyper, 0.05)
    return {LIGHT: res.trees[0], HEAVY: res.trees[1]}, res, jobs


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
