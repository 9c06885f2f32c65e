from __future__ import annotations

import functools

import pytest

from gridtwin.network import load_case
from gridtwin.telemetry import FluctuationConfig, simulate_series

from oracles import FIXTURES

ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


@functools.lru_cache(maxsize=None)
def case(name: str):
    return load_case(FIXTURES / f"{name}.case")


@functools.lru_cache(maxsize=None)
def series9(seed: int = 0, samples: int = 9600):
    return simulate_series(case("ieee9"), FluctuationConfig(seed=seed, samples=samples))


@pytest.fixture(scope="session")
def net9():
    return case("ieee9")


@pytest.fixture(scope="session")
def net118():
    return case("ieee118")


@pytest.fixture(scope="session")
def fixture_series9():
    return series9(0, 9600)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")


@functools.lru_cache(maxsize=None)
def trained9():
    from gridtwin.neural import TrainConfig, train
    return train(series9(0, 9600), TrainConfig())
