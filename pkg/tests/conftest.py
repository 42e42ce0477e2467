import pytest

from ccshap_audit.synthetic import make_separable_corpus
from ccshap_audit.toy_models import TrainConfig, train_bce

_ACCEPTANCE = []


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("acceptance")
    if marker is None or call.when != "call":
        return
    passed = call.excinfo is None
    _ACCEPTANCE.append((marker.args[0] if marker.args else item.name, passed))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}")


@pytest.fixture(scope="session")
def separable():
    return make_separable_corpus(40, seed=3)


@pytest.fixture(scope="session")
def trained_model(separable):
    model, _ = train_bce(separable, separable, TrainConfig(epochs=100))
    return model
