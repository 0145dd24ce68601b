import itertools

import numpy as np
import pytest

from greedyctrl import integrate
from greedyctrl.cost import (
    CostModel,
    exact_control_cost,
    measure,
    naive_cost,
    naive_sweeps,
    offline_cost,
    offline_sweeps,
    online_cost,
    parameter_independent_cost,
    write_table,
)
from greedyctrl.greedy import OfflineConfig, greedy_offline, naive_all_minimizers
from greedyctrl.model import ParameterGrid


def model(N=50, k=100, n=24, T=3.0, dt=3.0 / 600):
    return CostModel(N=N, k=k, n=n, T=T, dt=dt)


def test_unit_cost():
    m = model()
    assert m.C == pytest.approx(2 / 3 * 50**3 + 600 * 4 * 50**2)


def test_offline_without_snapshots():
    m = model(n=0)
    assert offline_cost(m) == pytest.approx(100 * (m.C + 150))


def test_offline_term_by_term():
    m = model()
    C, N, k, n = m.C, 50, 100, 24
    parts = [
        k * (C + 3 * N),
        n * (k - n / 2) * (2 * C + 7 * N),
        2 * n * n * N * (k - 2 * n / 3),
        2 * C * n * (N - n / 2),
        4 / 3 * N**3 * n,
    ]
    assert offline_cost(m) == pytest.approx(sum(parts), rel=1e-14)


def test_offline_limit_coefficient():
    # With n = k = N the C multiplier is exactly k + 2kN.
    for N in (5, 20, 50):
        m = model(N=N, k=N, n=N)
        assert offline_sweeps(m) == N + 2 * N * N == naive_sweeps(m) / 1


def test_online_examples():
    m = model(n=0)
    assert online_cost(m) == m.C
    m = model(n=50)
    assert online_cost(m) == pytest.approx(m.C * 101 + 4 * 50**3 - 2 * 50**2 / 3)


def test_online_ratio_linear_in_snapshot_fraction():
    N = 50
    ns = np.arange(0, N + 1, 5)
    ratios = [online_cost(model(n=int(n))) / exact_control_cost(model(n=int(n))) for n in ns]
    fit = np.polyfit(ns / N, ratios, 1)
    resid = ratios - np.polyval(fit, ns / N)
    assert np.abs(resid).max() < 0.02 * max(ratios)
    assert fit[0] > 0


def test_naive_examples():
    m = model(k=1)
    assert naive_cost(m) == pytest.approx(m.C * (1 + 2 * 50))
    m = model(n=5)
    assert parameter_independent_cost(m) == pytest.approx(m.C * (100 + 10 + 100))


@pytest.mark.parametrize("n,T,dt", [(3, 0.1, 0.1 / 4162), (24, 3.0, 3.0 / 162240), (24, 3.0, 3.0 / 600)])
def test_offline_cheaper_than_naive_for_benchmarks(n, T, dt):
    m = CostModel(N=50, k=100, n=n, T=T, dt=dt)
    assert offline_cost(m) < naive_cost(m)


def test_offline_cheaper_than_naive_sweep():
    for N, k, dt in itertools.product((10, 25, 50, 100, 200), (10, 40, 100, 200), (0.1, 0.01, 0.001)):
        for n in range(0, int(0.8 * min(N, k)) + 1):
            m = CostModel(N=N, k=k, n=n, T=1.0, dt=dt)
            assert offline_cost(m) < naive_cost(m), (N, k, n, dt)


def test_offline_formula_can_exceed_naive_near_full_basis():
    # Lower-order terms win once n is close to min(N, k): the strict
    # inequality is not universal.
    m = CostModel(N=100, k=100, n=96, T=1.0, dt=0.01)
    assert offline_cost(m) > naive_cost(m)


def test_monotone_in_counts():
    fns = (offline_cost, online_cost, naive_cost, parameter_independent_cost)
    for f in fns:
        for N, k, n in itertools.product((10, 20, 40), (10, 30, 60), (0, 3, 9)):
            base = f(CostModel(N=N, k=k, n=n, T=1.0, dt=0.01))
            assert f(CostModel(N=N + 1, k=k, n=n, T=1.0, dt=0.01)) >= base
            assert f(CostModel(N=N, k=k + 1, n=n, T=1.0, dt=0.01)) >= base
            assert f(CostModel(N=N, k=k, n=n + 1, T=1.0, dt=0.01)) >= base


def test_invalid_models():
    with pytest.raises(ValueError):
        CostModel(N=-1, k=1, n=0, T=1.0, dt=0.1)
    with pytest.raises(ValueError):
        CostModel(N=1, k=1, n=0, T=1.0, dt=0.0)
    with pytest.raises(ValueError):
        offline_cost(CostModel(N=5, k=3, n=4, T=1.0, dt=0.1))


def test_measured_offline_and_naive(heat10, tmp_path):
    grid = ParameterGrid.uniform(heat10.box, 20)
    res = greedy_offline(heat10, OfflineConfig(1e-6, grid))
    m = CostModel(N=10, k=20, n=res.n, T=0.1, dt=res.time_grid.dt)
    row = measure("offline", m, res.sweeps, res.elapsed)
    assert 0.5 <= row["ratio"] <= 2.0
    integrate.reset_sweeps()
    naive_all_minimizers(heat10, grid, time_grid=res.time_grid)
    naive = measure("naive", m, dict(integrate.SWEEPS))
    assert naive["measured_sweeps"] == 20 * (1 + 2 * 10)
    write_table(tmp_path / "c.csv", [row, naive])
    assert (tmp_path / "c.csv").read_text().splitlines()[0].startswith("phase,model_sweeps")
    with pytest.raises(ValueError):
        measure("bogus", m, {})
