import numpy as np
import pytest

from greedyctrl.gramian import (
    ControllabilityError,
    GramianBounds,
    GramianHandle,
    IllConditionedGramianWarning,
    UnsupportedModelError,
    affine_gramian_terms,
    apply_gramian,
    assemble_gramian,
    continuous_gramian,
    estimate_bounds,
    eval_J,
    exact_control,
    sandwich_distances,
    solve_minimizer,
    system_time_grid,
)
from greedyctrl.integrate import TimeGrid, solve_forward
from greedyctrl.model import ParameterGrid, build_affine_system, build_heat_system, eval_system

from conftest import random_controllable


def scalar_system(a, b, T=1.0):
    return build_affine_system(np.array([[a]]), [], np.array([1.0]), np.array([0.0]), T, [(0, 1)],
                               B0=np.array([[b]]))


def handle(sys, nu, steps):
    return GramianHandle(sys, nu, TimeGrid.from_horizon(sys.horizon, steps))


def test_apply_zero_and_symmetry(heat10):
    h = handle(heat10, [1.2], 300)
    assert np.all(apply_gramian(h, np.zeros(10)) == 0)
    rng = np.random.default_rng(0)
    phi, psi = rng.standard_normal(10), rng.standard_normal(10)
    a = apply_gramian(h, phi) @ psi
    b = phi @ apply_gramian(h, psi)
    assert abs(a - b) <= 1e-10 * abs(a)


def test_apply_matches_continuous_column():
    sys = build_heat_system(6, 0.1, [(1, 2)])
    A, B, _, _ = eval_system(sys, [1.0])
    ref = continuous_gramian(A, B, 0.1, panels=400)[:, 0]
    e1 = np.eye(6)[0]
    errs = [np.linalg.norm(apply_gramian(handle(sys, [1.0], n), e1) - ref) for n in (100, 200)]
    assert errs[0] < 1e-3 * np.linalg.norm(ref)
    assert 3.5 <= errs[0] / errs[1] <= 4.5


@pytest.mark.parametrize("a,b", [(-1.0, 2.0), (0.5, 1.0)])
def test_scalar_gramian_closed_form(a, b):
    exact = b * b * (np.exp(2 * a) - 1) / (2 * a)
    sys = scalar_system(a, b)
    errs = [abs(assemble_gramian(handle(sys, [0.5], n))[0, 0] - exact) for n in (100, 200)]
    assert errs[0] < 1e-3 * exact
    assert 3.5 <= errs[0] / errs[1] <= 4.5
    np.testing.assert_allclose(continuous_gramian(np.array([[a]]), np.array([[b]]), 1.0), [[exact]], rtol=1e-12)


def test_zero_control_matrix_gives_zero_gramian():
    sys = build_affine_system(-np.eye(3), [], np.ones(3), np.zeros(3), 1.0, [(0, 1)], B0=np.zeros((3, 1)))
    h = handle(sys, [0.5], 50)
    assert np.all(assemble_gramian(h) == 0)
    assert np.all(exact_control(h, np.ones(3)).samples == 0)


def test_assembly_is_cached_symmetric_and_spd():
    sys = build_heat_system(6, 0.1, [(1, 2)])
    h = handle(sys, [1.5], 400)
    G = assemble_gramian(h)
    assert assemble_gramian(h) is G
    assert not G.flags.writeable
    assert h.asymmetry <= 1e-10
    w = np.linalg.eigvalsh(G)
    assert w[0] > 0 and np.isfinite(w[-1] / w[0])


def test_solve_minimizer_examples(heat10):
    h = handle(heat10, [1.5], 400)
    assert np.all(solve_minimizer(h, np.zeros(10)) == 0)
    G = assemble_gramian(h)
    e3 = np.eye(10)[2]
    # Condition number ~1e13 here: only the residual is meaningful.
    phi = solve_minimizer(h, G @ e3)
    assert np.linalg.norm(G @ phi - G @ e3) <= 1e-8 * np.linalg.norm(G @ e3)
    well = handle(random_controllable(np.random.default_rng(5), 5), [0.5], 200)
    e3 = np.eye(5)[2]
    np.testing.assert_allclose(solve_minimizer(well, assemble_gramian(well) @ e3), e3, rtol=0, atol=1e-8)


def test_exact_control_closure_heat10(heat10):
    h = handle(heat10, [1.5], 400)
    rhs = h.rhs()
    phi = solve_minimizer(h, rhs)
    _, xT = solve_forward(h.prop, h.B, exact_control(h, phi), h.x0)
    assert np.linalg.norm(xT - h.x1) <= 1e-8 * np.linalg.norm(rhs)


def test_exact_control_zero_datum(heat10):
    h = handle(heat10, [1.5], 50)
    u = exact_control(h, np.zeros(10))
    assert u.samples.shape == (51, 1) and np.all(u.samples == 0)


def test_uncontrollable_raises():
    A = np.diag([-1.0, -2.0])
    sys = build_affine_system(A, [], np.ones(2), np.zeros(2), 1.0, [(0, 1)], B0=np.array([[1.0], [0.0]]))
    h = handle(sys, [0.5], 100)
    with pytest.raises(ControllabilityError):
        solve_minimizer(h, np.ones(2))
    with pytest.raises(ControllabilityError) as info:
        estimate_bounds(sys, ParameterGrid.uniform(sys.box, 3), 2, TimeGrid.from_horizon(1.0, 100))
    assert info.value.nu is not None


def test_ill_conditioned_gramian_warns_but_solves():
    sys = build_heat_system(50, 0.1, [(1, 2)])
    tg = system_time_grid(sys, ParameterGrid.uniform(sys.box, 100))
    h = GramianHandle(sys, [1.0], tg)
    rhs = h.rhs()
    with pytest.warns(IllConditionedGramianWarning):
        phi = solve_minimizer(h, rhs)
    assert np.linalg.norm(assemble_gramian(h) @ phi - rhs) <= 1e-6 * np.linalg.norm(rhs)


def test_eval_J_basic(heat10):
    h = handle(heat10, [1.1], 300)
    assert eval_J(h, np.zeros(10)) == 0.0
    phi = solve_minimizer(h, h.rhs())
    assert eval_J(h, phi) <= 0.0


@pytest.mark.parametrize("seed", range(5))
def test_eval_J_gradient(seed):
    sys = random_controllable(np.random.default_rng(seed), 5)
    h = handle(sys, [0.5], 200)
    phi = np.random.default_rng(100 + seed).standard_normal(5)
    grad = apply_gramian(h, phi) - h.rhs()
    step = 1e-5
    fd = np.array([(eval_J(h, phi + step * e) - eval_J(h, phi - step * e)) / (2 * step) for e in np.eye(5)])
    np.testing.assert_allclose(fd, grad, rtol=0, atol=1e-5 * max(1.0, np.abs(grad).max()))


def test_bounds_parameter_free_system():
    sys = random_controllable(np.random.default_rng(7), 4)
    tg = TimeGrid.from_horizon(1.0, 200)
    b = estimate_bounds(sys, ParameterGrid.uniform(sys.box, 5), 3, tg)
    w = np.linalg.eigvalsh(assemble_gramian(GramianHandle(sys, [0.0], tg)))
    assert b.lambda_minus == pytest.approx(w[0], rel=1e-12)
    assert b.lambda_plus == pytest.approx(w[-1], rel=1e-12)
    assert 0 < b.gamma <= 0.5


def test_bounds_bracket_small_heat_grid():
    sys = build_heat_system(6, 0.1, [(1, 2)])
    grid = ParameterGrid.uniform(sys.box, 20)
    tg = system_time_grid(sys, grid)
    b = estimate_bounds(sys, grid, 5, tg)
    eig = np.array([np.linalg.eigvalsh(assemble_gramian(GramianHandle(sys, nu, tg)))[[0, -1]] for nu in grid.points])
    assert b.lambda_minus <= eig[:, 0].min() * (1 + 1e-9)
    assert b.lambda_plus >= eig[:, 1].max() * (1 - 1e-9)
    assert len(b.sample) == 5


def test_bounds_validation():
    with pytest.raises(ValueError):
        GramianBounds(0.0, 1.0)
    with pytest.raises(ValueError):
        GramianBounds(2.0, 1.0)


def _affine_toy(L):
    rng = np.random.default_rng(11)
    A = rng.standard_normal((4, 4)) / 2 - np.eye(4)
    terms = [rng.standard_normal((4, 1)) for _ in range(L)]
    return build_affine_system(A, terms, np.ones(4), np.zeros(4), 1.0, [(0, 1)] * L)


def test_affine_single_term():
    sys = _affine_toy(1)
    tg = TimeGrid.from_horizon(1.0, 150)
    terms = affine_gramian_terms(sys, tg)
    np.testing.assert_allclose(terms.reconstruct([1.0]), assemble_gramian(GramianHandle(sys, [1.0], tg)), rtol=1e-12)
    np.testing.assert_allclose(terms.reconstruct([0.8]), 4 * terms.reconstruct([0.4]), rtol=1e-14)


def test_affine_two_terms():
    sys = _affine_toy(2)
    tg = TimeGrid.from_horizon(1.0, 150)
    terms = affine_gramian_terms(sys, tg)
    for nu in ([0.3, 0.7], [1.0, 0.0], [0.25, 0.9]):
        direct = assemble_gramian(GramianHandle(sys, nu, tg))
        rec = terms.reconstruct(nu)
        assert np.linalg.norm(rec - direct) <= 1e-8 * np.linalg.norm(direct)
        h = GramianHandle(sys, nu, tg, mode="affine", affine_terms=terms)
        np.testing.assert_allclose(assemble_gramian(h), rec)


def test_affine_requires_affine_model(heat10):
    with pytest.raises(UnsupportedModelError):
        affine_gramian_terms(heat10)
    with pytest.raises(UnsupportedModelError):
        GramianHandle(heat10, [1.0], TimeGrid.from_horizon(0.1, 10), mode="affine")
    sys = build_affine_system(-np.eye(2), [np.ones((2, 1))], np.ones(2), np.zeros(2), 1.0, [(0, 1)],
                              A_terms=[np.eye(2)])
    assert sys.affine is None


@pytest.mark.parametrize("seed", range(10))
def test_sandwich_property(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((6, 6))
    G = X @ X.T + 0.1 * np.eye(6)
    w = np.linalg.eigvalsh(G)
    phi, V = rng.standard_normal(6), rng.standard_normal((6, 2))
    d_phi, d_img = sandwich_distances(G, phi, V)
    assert w[0] * d_phi <= d_img * (1 + 1e-12)
    assert d_img <= w[-1] * d_phi * (1 + 1e-12)
