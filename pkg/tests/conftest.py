import numpy as np
import pytest

from optliq import calibrate as cal
from optliq import model

EM_HORIZON = 12.0   # days; about 2.3e4 events under the two-regime reference market
EM_SEEDS = range(20)


@pytest.fixture(scope="session")
def switching_fits():
    """EM fits on 20 simulated two-regime logs, with the hidden regime paths."""
    spec = model.table2_spec()
    out = []
    for seed in EM_SEEDS:
        log, chain = cal.simulate_event_log(spec, EM_HORIZON, seed)
        out.append((log, chain, cal.em_fit(log, EM_HORIZON)))
    return out


@pytest.fixture(scope="session")
def flat_fits():
    """EM fits (generator held at the moment start) on 20 logs without regime switching."""
    spec = model.two_tick_spec([1000.0, 1000.0], [1000.0, 1000.0], Q=np.zeros((2, 2)), T=EM_HORIZON)
    out = []
    for seed in EM_SEEDS:
        log, _ = cal.simulate_event_log(spec, EM_HORIZON, 1000 + seed)
        out.append((log, cal.em_fit(log, EM_HORIZON, cal.EmConfig(fix_generator=True))))
    return out
