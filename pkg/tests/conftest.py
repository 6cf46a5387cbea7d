import numpy as np
import pytest

from recurrent_octomap.neural import Dense
from recurrent_octomap.perception import init_perception_model


def toy_perception_model(feature_dim=8, seed=0):
    """Small random perception model whose prototypes decode to their own class."""
    model = init_perception_model(np.random.default_rng(seed), point_sizes=(8, 8), object_sizes=(feature_dim,))
    protos = np.zeros((4, feature_dim))
    for c in range(4):
        protos[c, 2 * c:2 * c + 2] = 3.0
    model.object_mlp.layers[-1] = Dense(protos.copy(), np.zeros(4), "identity")
    model.prototypes = protos
    return model


@pytest.fixture
def toy_model():
    return toy_perception_model()


# ---------------------------------------------------------------- acceptance summary

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, name): acceptance criterion checked by this test")
    config._criteria = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when not in ("setup", "call"):
        return
    n, name = mark.args
    failed = call.excinfo is not None
    detail = dict(item.user_properties).get("detail", "")
    if failed:
        detail = (detail + "; " if detail else "") + str(call.excinfo.value).splitlines()[0][:300]
    prev = item.config._criteria.get(n)
    if call.when == "call" or failed:
        item.config._criteria[n] = (name, not failed and not (prev and not prev[1]), detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_criteria", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        name, ok, detail = results[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:2d} ({name}): {detail}")
