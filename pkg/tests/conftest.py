import numpy as np
import pytest

from lipdeq.model import ModelConfig, build_model

_ACCEPTANCE = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running end-to-end checks")
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        detail = dict(item.user_properties).get("detail", "")
        _ACCEPTANCE.append((mark.args[0], mark.args[1], "PASS" if rep.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"{status} {number:>2}. {title}" + (f": {detail}" if detail else ""))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(n=2, channels=(2, 4), height=8, width=8, in_channels=3, classes=3, seed=3)


@pytest.fixture(scope="session")
def tiny_params(tiny_cfg):
    return build_model(tiny_cfg)


@pytest.fixture(scope="session")
def desk_params():
    return build_model(ModelConfig())
