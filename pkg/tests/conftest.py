import warnings

import numpy as np
import pytest

from isac_alloc.grid import OfdmConfig, ResourceState


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def desk_cfg():
    return OfdmConfig(16, 8)


def random_state(rng, N, M, n_users=0, boolean=True, power="random", min_sensing=1):
    """Seeded random allocation used across the test modules."""
    while True:
        owner = rng.integers(-1, n_users + 1, size=(N, M))
        if (owner == 0).sum() >= min_sensing:
            break
    sel = np.stack([(owner == k).astype(float) for k in range(n_users + 1)])
    if not boolean:
        sel = sel * rng.uniform(0.2, 1.0, size=sel.shape)
    p = rng.uniform(0.5, 2.0, size=(N, M)) if power == "random" else np.ones((N, M))
    return ResourceState(sel, p, relaxed=not boolean)


@pytest.fixture(autouse=True)
def _quiet_zc():
    from isac_alloc.grid import ZadoffChuWarning
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZadoffChuWarning)
        yield


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(results):
        terminalreporter.write_line(results[num])
