"""Constant fitting for predicted skeletons.

A differential-evolution global search (rand/1/bin) pre-initializes a
limited-memory quasi-Newton refinement with strong-Wolfe line search.
Gradients come from central finite differences; the squared-error objective
replaces non-finite point evaluations with a large finite penalty so the
search is total over any skeleton/point combination.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import LineSearchFailure
from .vocab import Vocabulary, count_constants, eval_rpn_points, validate_rpn

#: Contribution of a non-finite point evaluation to the objective; dominates
#: any genuine squared error at this data scale.
NONFINITE_PENALTY = 1e12

DEFAULT_BOUNDS = (-10.0, 10.0)
DE_ITERATIONS = 100
DE_MUTATION = 0.5
DE_CROSSOVER = 0.7


@dataclass
class FitProblem:
    tokens: np.ndarray           # valid RPN skeleton, padded
    points: np.ndarray           # (N, 3) observations
    vocab: Vocabulary
    bounds: Tuple[float, float] = DEFAULT_BOUNDS

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.points = np.asarray(self.points, dtype=np.float64)
        validity = validate_rpn(self.tokens, self.vocab)
        if not validity.valid:
            raise ValueError(f"skeleton is not valid RPN ({validity.failure})")
        self.n_constants = count_constants(self.tokens, self.vocab)


@dataclass
class FitResult:
    constants: np.ndarray
    sse: float
    converged: bool
    evals: int


def objective(constants: Sequence[float], problem: FitProblem) -> float:
    """Sum of squared errors over the problem's points, penalized and total."""
    yhat = eval_rpn_points(problem.tokens, problem.vocab,
                           problem.points[:, 0:2], constants)
    with np.errstate(all="ignore"):
        sq = (yhat - problem.points[:, 2]) ** 2
    sq = np.where(np.isfinite(sq), sq, NONFINITE_PENALTY)
    return float(sq.sum())


class _Counting:
    """Wraps an objective to count evaluations."""

    def __init__(self, fun: Callable[[np.ndarray], float]):
        self.fun = fun
        self.evals = 0

    def __call__(self, x: np.ndarray) -> float:
        self.evals += 1
        return self.fun(x)


def differential_evolution(
    fun: Callable[[np.ndarray], float],
    bounds: Sequence[Tuple[float, float]],
    rng: np.random.Generator,
    iterations: int = DE_ITERATIONS,
    mutation: float = DE_MUTATION,
    crossover: float = DE_CROSSOVER,
) -> np.ndarray:
    """rand/1/bin differential evolution; returns the best member.

    Population max(15, 10 d), `iterations` full generations, mutants clipped
    to the bounds. Deterministic per generator state.
    """
    d = len(bounds)
    if d == 0:
        return np.empty(0)
    lo = np.array([b[0] for b in bounds], dtype=np.float64)
    hi = np.array([b[1] for b in bounds], dtype=np.float64)
    pop_size = max(15, 10 * d)
    pop = rng.uniform(lo, hi, size=(pop_size, d))
    fit = np.array([fun(x) for x in pop])
    for _ in range(iterations):
        for i in range(pop_size):
            r1 = r2 = r3 = i
            while r1 == i:
                r1 = int(rng.integers(pop_size))
            while r2 == i or r2 == r1:
                r2 = int(rng.integers(pop_size))
            while r3 == i or r3 == r2 or r3 == r1:
                r3 = int(rng.integers(pop_size))
            v = np.clip(pop[r1] + mutation * (pop[r2] - pop[r3]), lo, hi)
            mask = rng.random(d) < crossover
            mask[int(rng.integers(d))] = True
            trial = np.where(mask, v, pop[i])
            f_trial = fun(trial)
            if f_trial <= fit[i]:
                pop[i] = trial
                fit[i] = f_trial
    return pop[int(np.argmin(fit))].copy()


def _fd_grad(fun: Callable, x: np.ndarray) -> np.ndarray:
    """Central finite differences, step 1e-6 * max(1, |x_j|) per coordinate."""
    g = np.empty_like(x)
    for j in range(x.size):
        h = 1e-6 * max(1.0, abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        g[j] = (fun(xp) - fun(xm)) / (2.0 * h)
    return g


def _zoom(phi, dphi, a_lo, a_hi, phi_lo, phi_0, dphi_0, c1, c2, max_iter=30):
    for _ in range(max_iter):
        a = 0.5 * (a_lo + a_hi)
        phi_a = phi(a)
        if phi_a > phi_0 + c1 * a * dphi_0 or phi_a >= phi_lo:
            a_hi = a
        else:
            d_a = dphi(a)
            if abs(d_a) <= -c2 * dphi_0:
                return a
            if d_a * (a_hi - a_lo) >= 0:
                a_hi = a_lo
            a_lo, phi_lo = a, phi_a
        if abs(a_hi - a_lo) < 1e-16 * max(1.0, abs(a_lo)):
            break
    raise LineSearchFailure("zoom interval collapsed")


def _strong_wolfe(fun, x, f0, g0, direction, c1=1e-4, c2=0.9, max_iter=25):
    """Step length satisfying the strong Wolfe conditions along `direction`."""
    dphi_0 = float(np.dot(g0, direction))
    if dphi_0 >= 0:
        raise LineSearchFailure("not a descent direction")

    def phi(a):
        return fun(x + a * direction)

    def dphi(a):
        return float(np.dot(_fd_grad(fun, x + a * direction), direction))

    a_prev, phi_prev = 0.0, f0
    a = 1.0
    for i in range(max_iter):
        phi_a = phi(a)
        if phi_a > f0 + c1 * a * dphi_0 or (i > 0 and phi_a >= phi_prev):
            return _zoom(phi, dphi, a_prev, a, phi_prev, f0, dphi_0, c1, c2)
        d_a = dphi(a)
        if abs(d_a) <= -c2 * dphi_0:
            return a
        if d_a >= 0:
            return _zoom(phi, dphi, a, a_prev, phi_a, f0, dphi_0, c1, c2)
        a_prev, phi_prev = a, phi_a
        a *= 2.0
        if a > 1e10:
            break
    raise LineSearchFailure("no acceptable step found")


def lbfgs(
    fun: Callable[[np.ndarray], float],
    x0: Sequence[float],
    max_iters: int = 200,
    history: int = 10,
    grad_tol: float = 1e-8,
    f_tol: float = 1e-12,
) -> FitResult:
    """Limited-memory BFGS with strong-Wolfe line search (c1=1e-4, c2=0.9).

    Terminates on gradient infinity-norm <= grad_tol, relative objective
    decrease <= f_tol, or max_iters. A line-search failure returns the best
    iterate with converged=False.
    """
    counting = _Counting(lambda v: float(fun(np.asarray(v, dtype=np.float64))))
    x = np.asarray(x0, dtype=np.float64).copy()
    f = counting(x)
    if x.size == 0:
        return FitResult(x, f, True, counting.evals)
    g = _fd_grad(counting, x)
    s_hist: List[np.ndarray] = []
    y_hist: List[np.ndarray] = []
    rho_hist: List[float] = []
    best_x, best_f = x.copy(), f
    converged = False
    for _ in range(max_iters):
        if np.max(np.abs(g)) <= grad_tol:
            converged = True
            break
        # Two-loop recursion.
        q = g.copy()
        alphas = []
        for s, y, rho in zip(reversed(s_hist), reversed(y_hist), reversed(rho_hist)):
            a = rho * np.dot(s, q)
            alphas.append(a)
            q -= a * y
        if y_hist:
            gamma = np.dot(s_hist[-1], y_hist[-1]) / np.dot(y_hist[-1], y_hist[-1])
            q *= gamma
        for (s, y, rho), a in zip(zip(s_hist, y_hist, rho_hist), reversed(alphas)):
            b = rho * np.dot(y, q)
            q += (a - b) * s
        direction = -q
        if np.dot(direction, g) >= 0:
            direction = -g
        try:
            alpha = _strong_wolfe(counting, x, f, g, direction)
        except LineSearchFailure:
            break
        x_new = x + alpha * direction
        f_new = counting(x_new)
        g_new = _fd_grad(counting, x_new)
        s = x_new - x
        y = g_new - g
        sy = float(np.dot(s, y))
        if sy > 1e-10:
            s_hist.append(s)
            y_hist.append(y)
            rho_hist.append(1.0 / sy)
            if len(s_hist) > history:
                s_hist.pop(0)
                y_hist.pop(0)
                rho_hist.pop(0)
        stalled = (f - f_new) <= f_tol * max(1.0, abs(f))
        x, f, g = x_new, f_new, g_new
        if f < best_f:
            best_x, best_f = x.copy(), f
        if stalled:
            converged = True
            break
    if np.max(np.abs(g)) <= grad_tol:
        converged = True
    return FitResult(best_x, best_f, converged, counting.evals)


def fit_constants(
    problem: FitProblem,
    rng: np.random.Generator,
    de_iterations: int = DE_ITERATIONS,
    lbfgs_max_iters: int = 200,
) -> FitResult:
    """Full pipeline: DE pre-initialization, then quasi-Newton refinement.

    Returns the better of the two stages by SSE, so the result never
    regresses below the global-search stage.
    """
    fun = _Counting(lambda c: objective(c, problem))
    if problem.n_constants == 0:
        sse = fun(np.empty(0))
        return FitResult(np.empty(0), sse, True, fun.evals)
    bounds = [problem.bounds] * problem.n_constants
    x_de = differential_evolution(fun, bounds, rng, iterations=de_iterations)
    f_de = fun(x_de)
    refined = lbfgs(fun.fun, x_de, max_iters=lbfgs_max_iters)
    total_evals = fun.evals + refined.evals
    if refined.sse <= f_de:
        return FitResult(refined.constants, refined.sse, refined.converged, total_evals)
    return FitResult(x_de, f_de, False, total_evals)
