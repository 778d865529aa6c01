import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optliq import hjb, model
from optliq.errors import DomainError, StabilityError


def _brute_rate(C, c_f, sig, nu_max, n=2_000_001):
    nu = np.linspace(0.0, nu_max, n)
    obj = nu * (1 - c_f * nu ** sig) - C * nu
    return nu[np.argmax(obj)]


def _quiet(**kw):
    # no jumps at all: price is frozen
    return model.two_tick_spec([0.0], [0.0], a=0.0, **kw)


@pytest.fixture(scope="module")
def small_t2():
    spec = model.table2_spec()
    return spec, hjb.solve(spec, hjb.Grid(100, 120, 10))


def test_optimal_rate_examples():
    s = model.table2_spec()
    assert hjb.optimal_rate(s, 1.5) == 0.0
    assert hjb.optimal_rate(s, 1.0) == 0.0
    assert hjb.optimal_rate(model.table2_spec(c_f=0.0), 0.3) == 9000.0
    s3 = model.table2_spec(c_f=1e-3)
    nu = hjb.optimal_rate(s3, 0.9)
    assert nu == pytest.approx(984.4, rel=1e-3)
    assert nu == pytest.approx(_brute_rate(0.9, 1e-3, 0.6, 9000.0), rel=1e-3)


@pytest.mark.filterwarnings("ignore:temporary impact")
@settings(max_examples=40, deadline=None)
@given(st.floats(-0.5, 1.2), st.floats(1e-7, 1e-3), st.floats(0.3, 1.5))
def test_optimal_rate_matches_brute_force(C, c_f, sig):
    s = model.table2_spec(c_f=c_f, sigma_exp=sig)
    got = hjb.optimal_rate(s, C)
    brute = _brute_rate(C, c_f, sig, 9000.0, n=200_001)
    obj = lambda x: x * (1 - c_f * x ** sig) - C * x   # noqa: E731
    assert obj(got) >= obj(brute) - 1e-6 * max(1.0, abs(obj(brute)))


def test_optimal_rate_general_impact_matches_power():
    pw = model.table2_spec(c_f=1e-3)
    gen = pw.replace(impact=model.ImpactSpec(general_f=lambda x: 1e-3 * x ** 0.6))
    for C in (0.2, 0.6, 0.9, 0.99):
        assert hjb.optimal_rate(gen, C) == pytest.approx(hjb.optimal_rate(pw, C), rel=2e-3)


def test_marginal_cost_on_linear_layer():
    spec = model.table2_spec()
    grid = hjb.Grid(10, 600, 20)
    w = grid.w_nodes(spec)
    V = np.repeat(w[:, None], 21, axis=1)
    C = hjb.marginal_cost(spec, grid, V, 10, 600, 10)
    # 1 + theta * w * (pi c1_down + (1 - pi) c2_down) * a
    assert C == pytest.approx(1 + 0.001 * 6000 * 950 * 7e-6, rel=1e-12)
    assert C == pytest.approx(1.0399, abs=1e-12)


def test_marginal_cost_without_impact_is_w_difference():
    spec = model.table2_spec(a=0.0)
    grid = hjb.Grid(10, 50, 10)
    rng = np.random.default_rng(3)
    V = np.cumsum(rng.random((51, 11)), axis=0)
    for i, k in [(1, 0), (20, 5), (50, 10)]:
        assert hjb.marginal_cost(spec, grid, V, 5, i, k) == pytest.approx((V[i, k] - V[i - 1, k]) / (6000 / 50))


def test_step_keeps_zero_boundary_and_degenerate_tie():
    spec = model.table2_spec()
    grid = hjb.Grid(400, 60, 10)
    V0 = np.zeros((61, 11))
    dt = hjb.stable_dt(spec, grid)
    V1, _ = hjb.step(spec, grid, V0, 1, dt=dt)
    np.testing.assert_array_equal(V1[0], 0.0)
    # frozen price, h(w) = w: selling and holding are equivalent, C = 1, tie goes to waiting
    quiet = _quiet(terminal=model.TerminalSpec("custom", custom=lambda w: w))
    g = hjb.Grid(400, 60, 1)
    w = g.w_nodes(quiet)
    V = np.repeat(w[:, None], 2, axis=1)
    V_next, nu = hjb.step(quiet, g, V, 400)
    np.testing.assert_array_equal(V_next, V)
    np.testing.assert_array_equal(nu, 0.0)


def test_step_rejects_unstable_dt():
    spec = model.table2_spec()
    grid = hjb.Grid(400, 600, 20)
    dt = 2.0 * hjb.stable_dt(spec, grid)
    V = np.repeat(grid.w_nodes(spec)[:, None], 21, axis=1) * 0.9
    with pytest.raises(StabilityError):
        hjb.step(spec, grid, V, 100, dt=dt)


def test_stable_dt_variants_ordered():
    spec = model.table2_spec()
    grid = hjb.Grid(400, 600, 20)
    assert hjb.stable_dt(spec, grid, "conservative") <= hjb.stable_dt(spec, grid, "sharp")


def test_frictionless_quiet_market_value_is_inventory():
    quiet = _quiet(terminal=model.TerminalSpec("custom", custom=lambda w: w))
    vf = hjb.solve(quiet, hjb.Grid(50, 60, 1))
    np.testing.assert_allclose(vf.V[0, :, 0], vf.w, rtol=1e-13, atol=1e-9)


def test_deterministic_quiet_market_transport():
    spec = _quiet(T=2.0, w0=6000.0, nu_max=9000.0)
    vf = hjb.solve_deterministic(spec, hjb.Grid(200, 300, 1))
    for n in (0, 100, 150, 190):
        t = vf.t[n]
        exact = np.minimum(vf.w, 9000.0 * (2.0 - t))
        assert np.abs(vf.V[n] - exact).max() <= 2 * 9000 * vf.dt + 1e-9


def test_embedded_single_regime_matches_deterministic_solver():
    spec = model.counterexample_spec()
    grid = hjb.Grid(100, 80, 1)
    a = hjb.solve(spec, grid)
    b = hjb.solve_deterministic(spec, grid)
    assert a.n_steps == b.n_steps
    np.testing.assert_allclose(a.V[..., 0], b.V, rtol=0, atol=1e-12 * b.V.max())
    np.testing.assert_allclose(a.V[..., 1], b.V, rtol=0, atol=1e-12 * b.V.max())


def test_mixture_model_solves():
    mix = model.stationary_mixture(model.table2_spec())
    vf = hjb.solve_deterministic(mix, hjb.Grid(100, 120, 1))
    assert np.all(np.isfinite(vf.V)) and vf.min_weight >= 0


def test_value_field_invariants(small_t2):
    spec, vf = small_t2
    assert np.all(vf.V >= 0)
    np.testing.assert_array_equal(vf.V[:, 0, :], 0.0)
    assert np.all(np.diff(vf.V, axis=1) >= -1e-12 * vf.V.max())
    assert spec.s0 * vf.V.max() <= model.value_upper_bound(spec) * (1 + 1e-9)
    assert vf.min_weight >= 0
    assert np.all((vf.nu_star >= 0) & (vf.nu_star <= spec.nu_max))


def test_closed_form_oracle_values():
    # direct evaluation: (9000 / eta) * (exp(eta * 2/3) - 1), eta = 0.001 * (900 - 1063)
    v = hjb.closed_form_oracle(0.001, 900.0, 1000.0, 7e-6, 9000.0, 2.0, 0.0, 6000.0)
    assert v == pytest.approx(5685.494496002178, rel=1e-12)
    assert hjb.closed_form_oracle(0.001, 900.0, 1000.0, 7e-6, 9000.0, 2.0, 0.0, 0.0) == 0.0
    assert hjb.closed_form_oracle(0.001, 900.0, 1000.0, 7e-6, 9000.0, 2.0, 2.0, 6000.0) == 0.0
    with pytest.raises(DomainError):
        hjb.closed_form_oracle(0.001, 1000.0, 900.0, 7e-6, 9000.0, 2.0, 0.0, 6000.0)
    with pytest.raises(DomainError):
        hjb.closed_form_oracle(0.001, 900.0, 1000.0, 7e-6, 9000.0, 2.0, 0.0, -1.0)


def test_counterexample_coarse_grid():
    spec = model.counterexample_spec()
    vf = hjb.solve(spec, hjb.Grid(100, 75, 1))
    assert hjb.oracle_error(vf, spec) < 0.01
    assert np.all(vf.nu_star[0, 1:, 0] == 9000.0)


def test_value_field_persistence(tmp_path, small_t2):
    _, vf = small_t2
    p = tmp_path / "vf.npz"
    vf.save(p)
    back = hjb.ValueField.load(p)
    np.testing.assert_array_equal(back.V, vf.V)
    np.testing.assert_array_equal(back.nu_star, vf.nu_star)
    assert back.dt == vf.dt and back.key == vf.key
    csv_path = tmp_path / "vf.csv"
    vf.to_csv(csv_path)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "t,w,pi,V,nu_star,C"
    assert len(lines) == 1 + vf.V.size


def test_cached_solve_reuses(tmp_path):
    spec = model.counterexample_spec()
    grid = hjb.Grid(40, 30, 1)
    a = hjb.cached_solve(spec, grid, tmp_path)
    assert len(list(tmp_path.glob("*.npz"))) == 1
    b = hjb.cached_solve(spec, grid, tmp_path)
    np.testing.assert_array_equal(a.V, b.V)
    hjb.cached_solve(spec.replace(nu_max=8000.0), grid, tmp_path)
    assert len(list(tmp_path.glob("*.npz"))) == 2
