import numpy as np
import pytest

from mcm.dataset import DatasetSchema, FeatureSpec, load_whas500


@pytest.fixture(scope="session")
def whas():
    return load_whas500()


@pytest.fixture
def small_schema():
    return DatasetSchema((
        FeatureSpec("x", "continuous", "covariate"),
        FeatureSpec("b", "binary", "covariate"),
        FeatureSpec("t", "continuous", "duration"),
        FeatureSpec("e", "binary", "event"),
    ))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def quick_model(whas):
    """A briefly trained model with its transform state and residual bank."""
    from mcm import model as M
    from mcm.transform import fit_transform_state, forward

    st = fit_transform_state(whas)
    V = forward(whas, st)
    m, _ = M.train(M.init_model(8, 32, 0, whas.schema.names), V, M.TrainConfig(epochs=40, seed=0))
    m.residuals = M.fit_residual_bank(m, V, seed=0)
    return m, st


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one pass/fail line per acceptance criterion."""
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
