import math

import numpy as np
import pytest

from optliq import filter as fl
from optliq import hjb, model
from optliq import simulator as sm
from optliq.errors import ThinningBoundError


@pytest.fixture(scope="module")
def t2():
    return model.table2_spec()


@pytest.fixture(scope="module")
def drift_batch():
    # single regime, up 1000 / down 900 per day, no impact, no selling
    spec = model.two_tick_spec([1000.0], [900.0], a=0.0, T=0.5, w0=1000.0)
    return spec, sm.simulate_batch(spec, sm.Policy.constant(0.0), 100_000, seed=99)


def test_no_selling_earns_nothing(t2):
    rec = sm.simulate_path(t2, sm.Policy.constant(0.0), seed=1)
    assert rec.revenue == 0.0 and rec.terminal_payment == 0.0
    assert rec.final_inventory == t2.w0 and rec.tau == t2.T


def test_quiet_market_constant_rate_sells_everything():
    spec = model.two_tick_spec([0.0], [0.0], a=0.0, T=2.0, w0=6000.0, nu_max=9000.0)
    rec = sm.simulate_path(spec, sm.Policy.constant(3000.0), seed=4)
    assert rec.revenue == pytest.approx(6000.0, rel=1e-12)
    assert rec.tau == pytest.approx(2.0, rel=1e-12)
    assert rec.n_jumps == 0


def test_price_moment_identities(drift_batch):
    spec, b = drift_batch
    S = b.final_price
    se = S.std(ddof=1) / math.sqrt(S.size)
    # E[S_T] = s0 exp(T * sum z_j lambda_j)
    assert abs(S.mean() - math.exp(0.1 * spec.T)) <= 3 * se
    # E[S_T^2] = s0^2 exp(T * sum lambda_j ((1 + z_j)^2 - 1))
    c2 = 1000 * ((1.001) ** 2 - 1) + 900 * ((0.999) ** 2 - 1)
    S2 = S ** 2
    se2 = S2.std(ddof=1) / math.sqrt(S.size)
    assert S2.mean() <= math.exp(c2 * spec.T) * (1 + 3 * se2)
    assert abs(S2.mean() - math.exp(c2 * spec.T)) <= 3 * se2


def test_event_count_below_thinning_bound(drift_batch):
    spec, b = drift_batch
    assert b.n_events.mean() <= model.lambda_max(spec) * spec.T * 1.01


def test_path_invariants(t2):
    rate = 4000.0
    rec = sm.simulate_path(t2, sm.Policy.constant(rate), seed=12)
    assert np.all(rec.price_post > 0) and np.all(rec.price_pre > 0)
    assert np.all(np.diff(rec.times) > 0)
    # inventory identity under a constant rate
    np.testing.assert_allclose(rec.inventory, np.maximum(t2.w0 - rate * rec.times, 0.0), rtol=1e-9, atol=1e-6)
    assert rec.tau == pytest.approx(t2.w0 / rate, rel=1e-12)
    assert np.all(np.abs(rec.pi_post.sum(axis=1) - 1) < 1e-10)
    jumps = rec.kinds == sm.JUMP
    np.testing.assert_allclose(rec.price_post[jumps] / rec.price_pre[jumps],
                               1 + t2.jumps.support[rec.labels[jumps]], rtol=1e-12)


def test_determinism(t2):
    p = sm.Policy.bang_bang(0.45)
    a = sm.simulate_path(t2, p, seed=2024)
    b = sm.simulate_path(t2, p, seed=2024)
    for name in ("times", "kinds", "labels", "price_post", "pi_post", "inventory"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    assert a.total == b.total


def test_path_seeds_are_distinct():
    seeds = {sm.path_seed(7, i) for i in range(1000)}
    assert len(seeds) == 1000
    assert sm.path_seed(7, 3) == sm.path_seed(7, 3)


def test_in_path_filter_matches_replay(t2):
    rate = 4000.0
    rec = sm.simulate_path(t2, sm.Policy.constant(rate), seed=31)
    nu = lambda t: rate if t < rec.tau else 0.0   # noqa: E731
    tr = fl.filter_event_log(t2, rec.jump_log(), nu)
    jumps = rec.kinds == sm.JUMP
    assert np.abs(tr.pi_post - rec.pi_post[jumps]).max() < 1e-6


def test_identical_policies_give_zero_gain(t2):
    p = sm.Policy.constant(3500.0)
    cmp = sm.compare_policies(t2, p, p, 200, seed=3)
    assert cmp.gain == 0.0 and cmp.ci == 0.0
    gain, ci = cmp
    assert gain == 0.0


def test_batch_results_do_not_depend_on_workers(t2):
    p = sm.Policy.constant(3500.0)
    a = sm.simulate_batch(t2, p, 40, seed=5, workers=1)
    b = sm.simulate_batch(t2, p, 40, seed=5, workers=2)
    np.testing.assert_array_equal(a.total, b.total)


def test_mc_mean_below_upper_bound(t2):
    for p in (sm.Policy.constant(3000.0), sm.Policy.bang_bang(0.5), sm.Policy.constant(9000.0)):
        mean, se = sm.mc_evaluate(t2, p, 400, seed=8)
        assert mean <= model.value_upper_bound(t2) + 3 * se


def test_policy_from_field_reads_table():
    spec = model.counterexample_spec()
    vf = hjb.solve_deterministic(spec, hjb.Grid(40, 30, 1))
    pol = sm.Policy.from_field(vf)
    assert pol.kind == "deterministic"
    assert pol(0.0, 3000.0, 1.0, spec.nu_max) == 9000.0
    assert pol(0.0, 0.0, 1.0, spec.nu_max) == 0.0


def test_thinning_bound_violation_is_reported():
    base = model.table2_spec()
    js = base.jumps
    bad = model.JumpSpec(js.support, js.base_intensity, js.impact_coefficient,
                         time_multiplier=lambda t: 2.0, multiplier_bound=1.0)
    with pytest.raises(ThinningBoundError):
        sm.simulate_path(base.replace(jumps=bad), sm.Policy.constant(0.0), seed=1)


def test_policy_validation():
    with pytest.raises(ValueError):
        sm.Policy("sometimes")
    with pytest.raises(ValueError):
        sm.Policy.constant(-1.0)
    with pytest.raises(ValueError):
        sm.Policy.deterministic([0.0, 1.0], [0.0, 1.0], np.ones((3, 2)))
