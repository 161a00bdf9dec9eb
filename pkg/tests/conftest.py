import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tsclab import netsim

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

# acceptance lines collected during the run and echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture
def grid1():
    return netsim.grid_network(1, 1)


@pytest.fixture(scope="session")
def grid2():
    return netsim.grid_network(2, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_short_flow(path, network, horizon=300.0, rate=0.02):
    """Replay flow with a constant-rate segment on every boundary route."""
    import json

    from tsclab import demand

    segs = [{"route": list(r), "start_s": 0.0, "end_s": float(horizon), "rate": rate}
            for r in demand.boundary_routes(network)]
    path.write_text(json.dumps({"format": demand.FLOW_FORMAT, "segments": segs}))
    return str(path)


@pytest.fixture
def short_cfg(tmp_path):
    """Factory for quick configs: a small grid, a 300 s horizon and a replay flow."""
    from tsclab.config import ExperimentConfig

    def make(rows=1, cols=1, horizon=300.0, rate=0.02, **kw):
        net = netsim.grid_network(rows, cols)
        flow = write_short_flow(tmp_path / f"flow_{rows}x{cols}_{int(horizon)}.json", net,
                                horizon, rate)
        base = dict(grid_rows=rows, grid_cols=cols, horizon=horizon, flow="replay",
                    flow_path=flow, iterations=1, seeds=[0])
        base.update(kw)
        return ExperimentConfig(**base)

    return make
