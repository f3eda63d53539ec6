import numpy as np
import pytest

from randimpulse.fixed_point import default_grid, solve_classical, solve_randomized
from randimpulse.grid_fd import discretize_generator, solve_feynman_kac
from randimpulse.model import LambdaPair, benchmark_default


@pytest.fixture(scope="session")
def spec():
    return benchmark_default()


@pytest.fixture(scope="session")
def grid():
    return default_grid()


@pytest.fixture(scope="session")
def gen(spec, grid):
    return discretize_generator(spec, grid)


@pytest.fixture(scope="session")
def psi0(spec, grid, gen):
    return solve_feynman_kac(gen, spec, grid)


@pytest.fixture(scope="session")
def randomized_run(spec, grid):
    """Benchmark solve at lambda = (0.5, 0.5) together with every outer iterate."""
    iterates = []
    return solve_randomized(spec, LambdaPair(0.5, 0.5), grid, keep_iterates=iterates), iterates


@pytest.fixture(scope="session")
def randomized(randomized_run):
    return randomized_run[0]


@pytest.fixture(scope="session")
def classical(spec, grid):
    return solve_classical(spec, grid)


@pytest.fixture
def rng():
    return np.random.default_rng(20261017)


TD_SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture(scope="session")
def td_runs(spec, randomized):
    """Default TD training at lambda = (0.5, 0.5) for five seeds (several minutes each).

    Returns a namespace with ``runs`` (seed -> ``(net, history)``) and the total
    training time in ``seconds``.
    """
    import time
    from types import SimpleNamespace

    from randimpulse.td_learn import TrainConfig, train

    start = time.perf_counter()
    runs = {s: train(spec, LambdaPair(0.5, 0.5), TrainConfig(), seed=s, reference=randomized.psi) for s in TD_SEEDS}
    return SimpleNamespace(runs=runs, seconds=time.perf_counter() - start)


CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(number, ok, detail)``."""

    def record(number, ok, detail):
        CRITERIA[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(CRITERIA[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
