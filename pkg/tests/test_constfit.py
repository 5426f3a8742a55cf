import numpy as np
import pytest

from symreg import constfit as C
from symreg.vocab import Vocabulary, eval_rpn_points, tokenize

from conftest import rng_from


@pytest.fixture(scope="module")
def vb():
    return Vocabulary.default()


def make_problem(expr, true_constants, vb, n=60, seed=0, x_lo=-3.0, x_hi=3.0):
    tokens = tokenize(expr, vb)
    rng = rng_from(seed)
    xy = rng.uniform(x_lo, x_hi, size=(n, 2))
    y = eval_rpn_points(tokens, vb, xy, true_constants)
    keep = np.isfinite(y)
    pts = np.column_stack([xy[keep], y[keep]])
    return C.FitProblem(tokens, pts, vb)


# --- objective ------------------------------------------------------------------


def test_objective_zero_at_truth(vb):
    p = make_problem("C x1 *", [2.0], vb)
    assert C.objective([2.0], p) == pytest.approx(0.0, abs=1e-20)


def test_objective_quadratic_offset(vb):
    p = make_problem("C x1 *", [2.0], vb)
    # constants=[3]: residual is (3-2)*x1, so sse = sum x1^2.
    expected = float(np.sum(p.points[:, 0] ** 2))
    assert C.objective([3.0], p) == pytest.approx(expected, rel=1e-12)


def test_objective_penalizes_nonfinite(vb):
    tokens = tokenize("x1 log", vb)
    pts = np.array([[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    p = C.FitProblem(tokens, pts, vb)
    val = C.objective([], p)
    assert np.isfinite(val)
    assert val >= C.NONFINITE_PENALTY


def test_problem_rejects_invalid_skeleton(vb):
    with pytest.raises(ValueError):
        C.FitProblem(tokenize("+", vb), np.zeros((1, 3)), vb)


# --- differential evolution -------------------------------------------------------


def test_de_recovers_unimodal_minimum():
    best = C.differential_evolution(lambda c: float((c[0] - 2.0) ** 2),
                                    [(-10.0, 10.0)], rng_from(0))
    assert abs(best[0] - 2.0) <= 0.05


def test_de_zero_dimensional():
    out = C.differential_evolution(lambda c: 0.0, [], rng_from(0))
    assert out.size == 0


def test_de_deterministic_per_seed():
    fun = lambda c: float((c[0] + 1.0) ** 2 + (c[1] - 3.0) ** 2)
    bounds = [(-10.0, 10.0)] * 2
    a = C.differential_evolution(fun, bounds, rng_from(5))
    b = C.differential_evolution(fun, bounds, rng_from(5))
    assert np.array_equal(a, b)


def test_de_respects_bounds():
    seen = []
    def fun(c):
        seen.append(c.copy())
        return float(np.sum(c ** 2))
    C.differential_evolution(fun, [(-1.0, 2.0), (0.5, 3.0)], rng_from(2), iterations=10)
    arr = np.array(seen)
    assert arr[:, 0].min() >= -1.0 and arr[:, 0].max() <= 2.0
    assert arr[:, 1].min() >= 0.5 and arr[:, 1].max() <= 3.0


# --- L-BFGS -----------------------------------------------------------------------


def test_lbfgs_exact_on_quadratic():
    res = C.lbfgs(lambda c: float((c[0] - 2.0) ** 2), [0.0])
    assert res.converged
    assert abs(res.constants[0] - 2.0) <= 1e-6
    assert res.sse <= 1e-12


def test_lbfgs_empty_input():
    res = C.lbfgs(lambda c: 7.5, [])
    assert res.converged
    assert res.sse == 7.5
    assert res.evals == 1


def test_lbfgs_convex_quadratics_dims_up_to_five():
    rng = rng_from(11)
    for d in range(1, 6):
        a = rng.normal(size=(d, d))
        h = a @ a.T + d * np.eye(d)  # well-conditioned SPD
        target = rng.uniform(-2, 2, size=d)
        fun = lambda c: float(0.5 * (c - target) @ h @ (c - target))
        res = C.lbfgs(fun, np.zeros(d), max_iters=50)
        assert res.converged
        grad = h @ (res.constants - target)
        assert np.max(np.abs(grad)) <= 1e-6


def test_lbfgs_rosenbrock():
    fun = lambda c: float((1 - c[0]) ** 2 + 100 * (c[1] - c[0] ** 2) ** 2)
    res = C.lbfgs(fun, np.array([-1.2, 1.0]), max_iters=200)
    assert np.allclose(res.constants, [1.0, 1.0], atol=1e-4)


# --- full pipeline -----------------------------------------------------------------


def test_fit_two_constants_sin(vb):
    # y = 3 sin(x1) + 0.5
    p = make_problem("C x1 sin * C +", [3.0, 0.5], vb)
    res = C.fit_constants(p, rng_from(1))
    assert np.allclose(res.constants, [3.0, 0.5], rtol=1e-3)
    assert res.sse <= 1e-10


def test_fit_single_constant(vb):
    p = make_problem("C x1 * x2 +", [1.7], vb)
    res = C.fit_constants(p, rng_from(2))
    assert abs(res.constants[0] - 1.7) / 1.7 <= 1e-3


def test_fit_constant_free(vb):
    p = make_problem("x1 x2 +", [], vb)
    res = C.fit_constants(p, rng_from(3))
    assert res.constants.size == 0
    assert res.sse <= 1e-18
    assert res.converged


def test_fit_structurally_wrong_total(vb):
    tokens = tokenize("C x1 *", vb)
    rng = rng_from(4)
    xy = rng.uniform(-3, 3, size=(50, 2))
    y = np.exp(xy[:, 0])  # not a scalar multiple of x1
    p = C.FitProblem(tokens, np.column_stack([xy, y]), vb)
    res = C.fit_constants(p, rng_from(5))
    assert np.isfinite(res.sse)
    assert res.sse > 0


def test_fit_never_worse_than_de_stage(vb):
    p = make_problem("C x1 sin * C x2 * +", [1.2, -0.7], vb)
    fun = lambda c: C.objective(c, p)
    de_best = C.differential_evolution(fun, [p.bounds] * 2, rng_from(6))
    res = C.fit_constants(p, rng_from(6))
    assert res.sse <= fun(de_best) + 1e-15


def test_fit_deterministic(vb):
    p = make_problem("C x1 sin * C +", [3.0, 0.5], vb)
    r1 = C.fit_constants(p, rng_from(7))
    r2 = C.fit_constants(p, rng_from(7))
    assert np.array_equal(r1.constants, r2.constants)
    assert r1.sse == r2.sse
    assert r1.evals == r2.evals
