import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from optliq import filter as fl
from optliq import model
from optliq.errors import DomainError, ImpossibleObservationError


@pytest.fixture(scope="module")
def t2():
    return model.table2_spec()


def _expm_belief(spec, pi0, nu, t):
    # unnormalized linear flow with constant rate, normalized at the end
    tot = model.total_intensity(spec, 0.0, nu)
    p = np.asarray(pi0) @ expm((spec.chain.Q - np.diag(tot)) * t)
    return p / p.sum()


def test_drift_examples(t2):
    np.testing.assert_allclose(fl.drift(t2, 0.0, [0.5, 0.5], 0.0), [0.0, 0.0], atol=1e-12)
    v = fl.drift(t2, 0.0, [1.0, 0.0], 0.0)
    assert v[0] == pytest.approx(-4.0, abs=1e-12)
    assert v.sum() == pytest.approx(0.0, abs=1e-12)


def test_drift_single_regime_is_zero():
    s = model.counterexample_spec()
    assert fl.drift(s, 0.3, [1.0], 5000.0)[0] == 0.0


def test_drift_two_forms_agree_on_random_inputs(t2):
    rng = np.random.default_rng(11)
    for _ in range(10_000):
        p = rng.random()
        # raises when the innovation-sum and compact forms disagree
        v = fl.drift(t2, rng.random() * 2, [p, 1 - p], rng.random() * 9000)
        assert abs(v.sum()) < 1e-9


def test_drift_sign_with_selling(t2):
    # selling makes down-jumps likelier; the bad regime has more down-jumps, so
    # the absence of jumps shifts belief toward the good regime faster than Q alone
    v = fl.drift(t2, 0.0, [0.5, 0.5], 9000.0)
    gap = 1000 * 7e-6 * 9000 - 900 * 7e-6 * 9000
    assert v[0] == pytest.approx(0.25 * gap, rel=1e-12)


def test_drift_rejects_bad_inputs(t2):
    with pytest.raises(DomainError):
        fl.drift(t2, 0.0, [0.7, 0.7], 0.0)
    with pytest.raises(DomainError):
        fl.drift(t2, 0.0, [0.5, 0.5], -1.0)


def test_jump_update_examples(t2):
    post = fl.jump_update(t2, 0.0, [0.5, 0.5], 0.0, 0)
    assert post[0] == pytest.approx(1000 / 1900, rel=1e-14)
    assert post[0] == pytest.approx(0.5263, abs=5e-5)
    sym = model.two_tick_spec([1000.0, 1000.0], [900.0, 1000.0], Q=[[-1, 1], [1, -1]])
    np.testing.assert_array_equal(fl.jump_update(sym, 0.0, [0.3, 0.7], 0.0, 0), [0.3, 0.7])


def test_down_jump_update_independent_of_rate(t2):
    ref = fl.jump_update(t2, 0.0, [0.5, 0.5], 0.0, 1)
    expected = 0.5 * 900 / (0.5 * 900 + 0.5 * 1000)
    assert ref[0] == pytest.approx(expected, rel=1e-14)
    for nu in (1.0, 3000.0, 9000.0):
        np.testing.assert_array_equal(fl.jump_update(t2, 0.0, [0.5, 0.5], nu, 1), ref)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-6, 1 - 1e-6), st.floats(1e-3, 1e3), st.integers(0, 1))
def test_jump_update_invariant_under_common_scale(p, scale, j):
    s = model.table2_spec()
    pi = np.array([p, 1 - p])
    col = s.jumps.base_intensity[:, j].copy()
    a = fl.bayes_update(pi, col)
    b = fl.bayes_update(pi, col * scale)
    np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-300)


def test_impossible_observation():
    s = model.two_tick_spec([0.0, 0.0], [1000.0, 900.0], Q=[[-1, 1], [1, -1]])
    with pytest.raises(ImpossibleObservationError):
        fl.jump_update(s, 0.0, [1.0, 0.0], 0.0, 0)


def test_propagate_identity_and_symmetry(t2):
    st0 = fl.FilterState(np.array([0.3, 0.7]), 0.2)
    out = fl.propagate(t2, st0, 0.0, horizon=0.0)
    np.testing.assert_array_equal(out.pi, st0.pi)
    sym = fl.propagate(t2, fl.FilterState(np.array([0.5, 0.5]), 0.0), 0.0, horizon=1.7)
    np.testing.assert_allclose(sym.pi, [0.5, 0.5], atol=1e-14)


def test_propagate_closed_form_without_selling(t2):
    # equal total intensities: the belief follows the chain, pi1 = 0.5 + 0.5 exp(-8 t)
    for h in (1e-3, 0.05, 0.4):
        out = fl.propagate(t2, fl.FilterState(np.array([1.0, 0.0]), 0.0), 0.0, horizon=h)
        assert out.pi[0] == pytest.approx(0.5 + 0.5 * np.exp(-8 * h), abs=1e-10)
    small = fl.propagate(t2, fl.FilterState(np.array([1.0, 0.0]), 0.0), 0.0, horizon=1e-4)
    assert small.pi[0] == pytest.approx(1 - 4e-4, abs=5e-7)


@pytest.mark.parametrize("nu", [1500.0, 9000.0])
def test_propagate_matches_matrix_exponential(t2, nu):
    pi0 = [0.2, 0.8]
    out = fl.propagate(t2, fl.FilterState(np.array(pi0), 0.0), nu, horizon=0.3)
    np.testing.assert_allclose(out.pi, _expm_belief(t2, pi0, nu, 0.3), atol=1e-11)


def test_zakai_trivial_cases(t2):
    u = fl.UnnormalizedState(np.array([0.5, 0.5]), 0.0)
    np.testing.assert_array_equal(fl.normalize(fl.zakai_step(t2, u, 0.0, 0.0)), [0.5, 0.5])
    one = model.counterexample_spec()
    u1 = fl.UnnormalizedState(np.array([1.0]), 0.0)
    u1 = fl.zakai_step(one, u1, 4000.0, 0.3, mark_index=1)
    u1 = fl.zakai_step(one, u1, 4000.0, 0.5, mark_index=0)
    assert fl.normalize(u1)[0] == 1.0


def test_zakai_matches_matrix_exponential(t2):
    u = fl.zakai_step(t2, fl.UnnormalizedState(np.array([0.2, 0.8]), 0.0), 9000.0, 0.3)
    np.testing.assert_allclose(fl.normalize(u), _expm_belief(t2, [0.2, 0.8], 9000.0, 0.3), atol=1e-11)


def test_zakai_mass_is_likelihood_ratio(t2):
    # no jumps over [0, h]: the mass is E[exp(-int (total - reference))] under the chain
    h = 0.4
    tot = model.total_intensity(t2, 0.0, 9000.0)
    ref = model.intensity_matrix(t2, 0.0, 9000.0).max(axis=0).sum()
    expected = t2.chain.pi0 @ expm((t2.chain.Q - np.diag(tot - ref)) * h) @ np.ones(2)
    u = fl.zakai_step(t2, fl.UnnormalizedState(t2.chain.pi0.copy(), 0.0), 9000.0, h)
    assert u.log_mass == pytest.approx(np.log(expected), abs=1e-10)


def test_zakai_rescaling_keeps_mass_finite(t2):
    u = fl.UnnormalizedState(np.array([0.5, 0.5]), 0.0)
    u = fl.zakai_step(t2, u, 9000.0, 2.0, dt_target=1e-2)
    assert np.all(np.isfinite(u.p)) and 1e-101 < u.p.sum() < 1e101


def test_filter_event_log_examples(t2):
    empty = fl.EventLog(np.zeros(0), np.zeros(0, dtype=np.int64))
    tr = fl.filter_event_log(t2, empty, 0.0, horizon=0.5)
    direct = fl.propagate(t2, fl.FilterState(t2.chain.pi0, 0.0), 0.0, horizon=0.5)
    np.testing.assert_allclose(tr.final.pi, direct.pi, atol=1e-15)
    one = fl.EventLog(np.array([0.25]), np.array([0]))
    tr = fl.filter_event_log(t2, one, 0.0)
    assert tr.pi_post[0, 0] == pytest.approx(1000 / 1900, rel=1e-12)


def test_alternating_jumps_drift_to_half(t2):
    times = np.arange(1, 2001) * 1e-3
    log = fl.EventLog(times, np.arange(2000) % 2)
    tr = fl.filter_event_log(t2, log, 0.0, horizon=2.0, pi0=[0.9, 0.1])
    assert abs(tr.pi_post[1000:, 0].mean() - 0.5) < 0.03


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(1e-4, 0.05), st.integers(0, 1)), min_size=1, max_size=60),
       st.floats(1e-3, 1 - 1e-3), st.floats(0, 9000))
def test_simplex_and_interior_invariance(events, p0, nu):
    s = model.table2_spec()
    times = np.cumsum([e[0] for e in events])
    log = fl.EventLog(times, np.array([e[1] for e in events]))
    tr = fl.filter_event_log(s, log, nu, horizon=float(times[-1]) + 0.01, pi0=[p0, 1 - p0])
    for st_ in tr.states:
        assert abs(st_.pi.sum() - 1) <= 1e-10
        assert np.all(st_.pi > 0)


def test_zakai_and_ks_agree_on_random_log(t2):
    rng = np.random.default_rng(5)
    times = np.sort(rng.uniform(0, 2, 800))
    log = fl.EventLog(times, rng.integers(0, 2, 800))
    nu = lambda t: 9000.0 * (t < 0.6) + 2000.0 * (t >= 0.6)   # noqa: E731
    a = fl.filter_event_log(t2, log, nu)
    b = fl.zakai_event_log(t2, log, nu)
    assert np.abs(a.pi_post - b.pi_post).max() < 1e-6
    assert np.abs(a.pi_pre - b.pi_pre).max() < 1e-6


def test_event_log_csv_roundtrip(tmp_path, t2):
    log = fl.EventLog(np.array([0.1, 0.25, 0.7]), np.array([1, 0, 1]))
    p = tmp_path / "ev.csv"
    fl.write_event_log(p, log)
    back = fl.read_event_log(p)
    np.testing.assert_array_equal(back.times, log.times)
    np.testing.assert_array_equal(back.marks, log.marks)
    q = tmp_path / "ticks.csv"
    q.write_text("t,ticks\n0.1,-1\n0.2,1\n")
    ticks = fl.read_event_log(q, t2.jumps.support)
    np.testing.assert_array_equal(ticks.marks, [1, 0])
    np.testing.assert_array_equal(log.counts(2), [1, 2])
