import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from toys import discrete_problem, line_problem

from windowrisk import load_problem, parse
from windowrisk.montecarlo import (
    SamplingError, empirical_cdf, expected_shortfall, path_rng, simulate, windowed_averages,
    windowed_es_series, windowed_mean_series,
)


def brute_force_es(values, weights, eps, grid=20001):
    """Minimum over a grid of ``lam + E[(V - lam)_+] / eps``, refined around the best point."""
    w = np.asarray(weights, float) / np.sum(weights)
    v = np.asarray(values, float)

    def obj(lam):
        return lam + (w[None, :] * np.maximum(v[None, :] - lam[:, None], 0.0)).sum(axis=1) / eps

    lam = np.linspace(v.min() - 1, v.max() + 1, grid)
    best = lam[np.argmin(obj(lam))]
    step = lam[1] - lam[0]
    # the objective is piecewise linear with kinks at the samples, so a
    # sample point near the grid optimum attains the minimum
    cands = np.concatenate([np.linspace(best - step, best + step, 201), v])
    return float(obj(cands).min())


def test_es_four_points():
    assert expected_shortfall([1, 2, 3, 4], [1, 1, 1, 1], 0.5) == pytest.approx(3.5)
    assert expected_shortfall([1, 2, 3, 4], [1, 1, 1, 1], 1.0) == pytest.approx(2.5)
    with pytest.raises(SamplingError):
        expected_shortfall([1.0], [1.0], 0.0)


def test_es_matches_variational_form_on_random_inputs():
    rng = np.random.default_rng(42)
    for _ in range(50):
        v = rng.normal(size=50)
        w = rng.uniform(0.1, 1.0, size=50)
        eps = rng.uniform(0.05, 1.0)
        assert expected_shortfall(v, w, eps) == pytest.approx(brute_force_es(v, w, eps), abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=30), st.floats(0.01, 1.0))
def test_es_bounds(values, eps):
    v = np.array(values)
    es = expected_shortfall(v, np.ones_like(v), eps)
    assert v.mean() - 1e-9 <= es <= v.max() + 1e-9
    assert es >= expected_shortfall(v, np.ones_like(v), min(1.0, eps * 1.5)) - 1e-9


def test_empirical_cdf():
    F = empirical_cdf([0.3])
    assert F(0.3) == 1.0 and F(0.29) == 0.0
    G = empirical_cdf([1, 2, 3, 4])
    assert G.quantile(0.5) == 2.0
    assert G.quantile(0.51) == 3.0
    draws = np.random.default_rng(0).standard_normal(100_000)
    se = np.sqrt(0.25 / draws.size)
    assert abs(empirical_cdf(draws)(0.0) - 0.5) < 3 * se


def test_constant_path():
    pr = line_problem(drift="0", center=0.3, radius=1e-9, horizon=2.0, window=0.5)
    b = simulate(pr, 5, 0.01, seed=3)
    assert np.allclose(b.states[:, :, 0], b.states[:, :1, 0])
    s = windowed_mean_series(b, parse("0.7", ("x",)), 0.5)
    assert np.allclose(s.values, 0.7)


def test_linear_signal_window_average():
    # x(t) = t, so the window average ending at t is t - h/2
    pr = line_problem(drift="1", box=(-1.0, 10.0), center=0.0, radius=1e-12, horizon=4.0, window=1.0)
    b = simulate(pr, 3, 0.01, seed=0)
    s = windowed_mean_series(b, pr.cost, 1.0, "max")
    assert np.allclose(s.values, s.times - 0.5, atol=1e-9)
    assert s.times[0] == pytest.approx(1.0) and s.times[-1] == pytest.approx(4.0)


def test_es_with_full_level_equals_mean():
    pr = load_problem("twist")
    b = simulate(pr, 20, 0.01, seed=2)
    m = windowed_mean_series(b, pr.cost, pr.window, "max")
    e = windowed_es_series(b, pr.cost, pr.window, 1.0, "max")
    assert np.allclose(m.per_path, e.per_path, equal_nan=True, atol=1e-12)


def test_paths_stay_in_state_set_and_stop_at_boundary():
    pr = load_problem("stochastic_oscillator")
    b = simulate(pr, 100, 5e-3, seed=1)
    assert b.states.shape[1] == round(5 / 5e-3) + 1
    for i in range(b.count):
        s = b.stop_index[i]
        assert pr.state_set.contains(b.states[i, :s]).all()
        assert np.isnan(b.states[i, s:]).all()
    m, ends = 300, np.arange(300, b.times.size)
    _, W = windowed_averages(b, pr.cost, pr.window)
    assert np.isnan(W[b.stop_index[:, None] - 1 < ends[None, :]]).all()


def test_brownian_variance():
    pr = line_problem(drift="0", sigma="0.5", box=(-50.0, 50.0), center=0.0, radius=1e-9, horizon=1.0, window=0.5)
    b = simulate(pr, 10_000, 0.01, seed=5)
    xT = b.states[:, -1, 0]
    var = xT.var(ddof=1)
    se = 0.25 * np.sqrt(2.0 / (xT.size - 1))
    assert abs(var - 0.25) < 3 * se


def test_seed_reproducibility_and_path_independence():
    pr = load_problem("stochastic_oscillator")
    a = simulate(pr, 10, 0.01, seed=9)
    b = simulate(pr, 10, 0.01, seed=9)
    c = simulate(pr, 4, 0.01, seed=9)
    assert np.array_equal(a.states, b.states, equal_nan=True)
    assert np.array_equal(a.states[:4], c.states, equal_nan=True)
    assert not np.array_equal(a.states, simulate(pr, 10, 0.01, seed=10).states, equal_nan=True)
    assert a.to_csv() == b.to_csv()
    r1, r2 = path_rng(1, 0).random(3), path_rng(1, 1).random(3)
    assert not np.allclose(r1, r2)


def test_discrete_simulation_uses_map():
    pr = discrete_problem(update="lam*x")
    b = simulate(pr, 50, seed=0)
    assert b.dt == 0.25
    ratios = b.states[:, 1:, 0] / b.states[:, :-1, 0]
    assert set(np.round(ratios[np.isfinite(ratios)], 12)) <= {0.5, 1.0}
    s = windowed_mean_series(b, pr.cost, pr.window, "max")
    # left-point average of the two samples inside each window
    i, k = 0, 0
    e = int(round(s.times[k] / b.dt))
    assert s.per_path[i, k] == pytest.approx(b.states[i, e - 2:e, 0].mean())


def test_window_grid_errors():
    pr = line_problem()
    b = simulate(pr, 2, 0.1, seed=0)
    with pytest.raises(SamplingError):
        windowed_mean_series(b, pr.cost, 0.25)
    with pytest.raises(SamplingError):
        simulate(pr, 0, 0.1)
    with pytest.raises(SamplingError):
        simulate(pr, 2, 0.3)


def test_pooled_es_of_identical_paths_equals_path_es():
    pr = line_problem(drift="-x", center=0.5, radius=1e-12, horizon=3.0, window=1.0)
    b = simulate(pr, 3, 0.01, seed=0)
    pooled = windowed_es_series(b, pr.cost, 1.0, 0.2, "pooled")
    single = windowed_es_series(b, pr.cost, 1.0, 0.2, "max")
    assert np.allclose(pooled.values, single.values, atol=1e-9)


def test_series_csv(tmp_path):
    pr = line_problem()
    b = simulate(pr, 2, 0.1, seed=0)
    s = windowed_mean_series(b, pr.cost, 1.0)
    text = s.to_csv(tmp_path / "s.csv", header={"seed": 0})
    assert text.startswith("# kind=mean reduction=max seed=0\nt,value\n")
    assert (tmp_path / "s.csv").read_text() == text


def test_normal_law_sampling():
    from windowrisk import NoiseLaw

    draws = NoiseLaw.gaussian(1.0, 2.0).sample(np.random.default_rng(0), 20_000)
    assert stats.kstest((draws - 1.0) / 2.0, "norm").pvalue > 1e-3
