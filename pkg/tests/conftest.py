import hashlib
import inspect
from pathlib import Path

import numpy as np
import pytest

import diffplan.autodiff
import diffplan.diffusion
import diffplan.simkit
from diffplan.diffusion import DiffusionScenarioGenerator
from diffplan.gridopt import load_case
from diffplan.simkit import SyntheticBaselines, generate_training_set

PAPER_M = 10_000
PAPER_SEED = 1


@pytest.fixture(scope="session")
def small_dataset():
    return generate_training_set(400, seed=0)


@pytest.fixture(scope="session")
def small_model(small_dataset):
    return DiffusionScenarioGenerator(n_steps=20, epochs=15, random_state=0).fit(small_dataset)


@pytest.fixture(scope="session")
def case():
    return load_case()


@pytest.fixture(scope="session")
def day_pool():
    return SyntheticBaselines(years=1, seed=11).days


def _source_key() -> str:
    h = hashlib.sha256()
    for mod in (diffplan.autodiff, diffplan.simkit, diffplan.diffusion):
        h.update(inspect.getsource(mod).encode())
    h.update(repr(sorted(DiffusionScenarioGenerator().get_params().items())).encode())
    h.update(f"{PAPER_M}-{PAPER_SEED}".encode())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def paper_dataset():
    return generate_training_set(PAPER_M, seed=PAPER_SEED)


@pytest.fixture(scope="session")
def paper_model(request, paper_dataset):
    """Generator trained with default hyperparameters on 10,000 simulated samples.

    The fitted model is cached between sessions, keyed by the source of the
    modules that determine it, so edits invalidate the cache.
    """
    cache = Path(request.config.cache.mkdir("diffplan"))
    path = cache / f"paper_model_{_source_key()}.json"
    if path.exists():
        return DiffusionScenarioGenerator.load(path)
    model = DiffusionScenarioGenerator().fit(paper_dataset)
    model.save(path)
    return model


def winter_and_summer_days():
    from diffplan.simkit import synth_baseline
    return synth_baseline(20, np.random.default_rng(123)), synth_baseline(200, np.random.default_rng(123))


_ACCEPTANCE = []


@pytest.fixture
def report():
    """Record one acceptance-criterion line for the end-of-run summary."""
    def add(line):
        print(line)
        _ACCEPTANCE.append(line)
    return add


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: s.split()[1]):
            terminalreporter.write_line(line)
