import numpy as np
import pytest
import torch

from densernet.data import SceneSpec, generate_city


@pytest.fixture(scope="session")
def small_city():
    return generate_city(SceneSpec(grid_size=2, views_per_block=4, occluder_rate=0.5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


# -- acceptance summary: one PASS/FAIL line per criterion ----------------------

_ACCEPTANCE: list[str] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if item.module.__name__.endswith("test_acceptance") and (rep.when == "call" or rep.failed):
        label = (item.function.__doc__ or item.name).strip().splitlines()[0]
        detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
        status = "PASS" if rep.passed else "FAIL"
        _ACCEPTANCE.append(f"{status}  {label}" + (f"  [{detail}]" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
