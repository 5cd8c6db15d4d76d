import time

import pytest

ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance():
    """``record(criterion, passed, detail)`` appends one line to the end-of-run summary."""

    def record(name, passed, detail=""):
        ACCEPTANCE.append(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        return passed

    return record


class DeskRuns:
    """Default-benchmark train+evaluate runs, cached for the whole session."""

    SEEDS = (0, 1, 2, 3, 4)
    VARIANTS = {"full": {}, "gla-off": {"gla": False}, "lid-off": {"lid": False}}

    def __init__(self):
        self._runs = {}
        self._data = {}

    def data(self, seed):
        from gbe.config import RunConfig
        from gbe.data import gen_dataset
        from gbe.harness import benchmark_for

        if seed not in self._data:
            self._data[seed] = gen_dataset(benchmark_for(RunConfig(seed=seed)))
        return self._data[seed]

    def get(self, variant, seed):
        from gbe.config import RunConfig
        from gbe.harness import train_and_evaluate

        key = (variant, seed)
        if key not in self._runs:
            cfg = RunConfig(seed=seed, **self.VARIANTS[variant])
            start = time.perf_counter()
            result, reports = train_and_evaluate(cfg, self.data(seed))
            self._runs[key] = {
                "log": result.log,
                "reports": reports,
                "seconds": time.perf_counter() - start,
            }
        return self._runs[key]


@pytest.fixture(scope="session")
def desk_runs():
    return DeskRuns()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
