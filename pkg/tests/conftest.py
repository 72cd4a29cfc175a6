"""Session-wide cache of trained cohorts plus the acceptance summary printer.

Training runs are expensive, so every test that needs a trained PerDPM or DMM
on the default cohort draws from one lazily filled cache.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import pytest

from perdpm.evaluation import EvalReport, evaluate
from perdpm.model import ModelConfig, PerDPM
from perdpm.synthgen import CohortDataset, GenConfig, generate, split_indices
from perdpm.training import FitResult, TrainConfig, fit

TEST_FRACTION = 0.2


@dataclass
class Run:
    seed: int
    n_train: int
    dmm: bool
    data: CohortDataset
    test: CohortDataset
    result: FitResult
    report: EvalReport
    seconds: float


def train_and_evaluate(seed: int, n_train: int = 600, dmm: bool = False) -> Run:
    n_total = round(n_train / (1 - TEST_FRACTION))
    data = generate(GenConfig(n_samples=n_total, seed=seed))
    train_idx, test_idx = split_indices(n_total, TEST_FRACTION, seed)
    assert train_idx.size == n_train
    test = data.subset(test_idx)
    t0 = time.perf_counter()
    model = PerDPM(ModelConfig(d_x=data.x.shape[2], d_u=data.u.shape[2], d_g=data.g.shape[1],
                               dmm=dmm), seed=seed)
    result = fit(data.subset(train_idx), model, TrainConfig(seed=seed))
    report = evaluate(result.model, test, seed=seed)
    return Run(seed, n_train, dmm, data, test, result, report, time.perf_counter() - t0)


class RunCache:
    def __init__(self):
        self._runs: dict[tuple[int, int, bool], Run] = {}

    def get(self, seed: int, n_train: int = 600, dmm: bool = False) -> Run:
        key = (seed, n_train, dmm)
        if key not in self._runs:
            self._runs[key] = train_and_evaluate(seed, n_train, dmm)
        return self._runs[key]


@pytest.fixture(scope="session")
def runs() -> RunCache:
    return RunCache()


# ------------------------------------------------------ acceptance lines

_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    def record(number: int, name: str, passed: bool, detail: str) -> None:
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        _LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


def pytest_collection_modifyitems(config, items):
    # anything that trains on a full-size cohort is slow
    for item in items:
        if "runs" in getattr(item, "fixturenames", ()) or item.name == "test_c8_bernoulli_mode":
            item.add_marker(pytest.mark.slow)
