import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rvsm.data_io import ClassDictionary, SyntheticSceneSpec, generate_scene
from rvsm.kernel import KernelSpec
from rvsm.multiclass_map import train_map
from rvsm.sparse_bayes import TrainConfig

settings.register_profile("rvsm", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("rvsm")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_scene():
    """Three separated blobs, 60 points each, 10% label noise."""
    return generate_scene(SyntheticSceneSpec.standard(noise=0.1, seed=3, count=60))


@pytest.fixture(scope="session")
def small_map(small_scene):
    train, _, _ = small_scene
    return train_map(train, ClassDictionary.default([0, 1, 2]), KernelSpec(), TrainConfig(rng_seed=7))


VERDICTS = []


@pytest.fixture
def verdict(capsys):
    """Record and print one pass/fail line for an acceptance criterion."""
    def record(number, name, ok, detail):
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
        VERDICTS.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS):
            terminalreporter.write_line(line)
