"""Small dense minimisation and the random-map solve behind implicit sampling.

Every routine works on a batch of independent problems: states have shape
``(N, d)``, values ``(N,)``, Hessians ``(N, d, d)``. Rows never interact, so
the result for one row does not depend on what else is in the batch. Passing
a single ``(d,)`` state returns unbatched results.

``d`` is tiny in every use (1 or 3), so the factorisation and triangular
solves loop over ``d`` and vectorise over ``N``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

ARMIJO_C = 1e-4
MAX_BACKTRACKS = 60
ROUNDOFF_ULPS = 8.0
LAMBDA_BRACKET = 10.0
LAMBDA_MAX = 1e6


class OptimizationError(ArithmeticError):
    """Base error; ``rows`` lists the offending batch rows."""

    def __init__(self, message: str, rows=()):
        super().__init__(message)
        self.rows = [int(r) for r in np.atleast_1d(rows)]


class IndefiniteHessianError(OptimizationError):
    pass


class NonFiniteObjectiveError(OptimizationError):
    pass


class UnboundedDirectionError(OptimizationError):
    pass


@dataclass(frozen=True)
class ObjectiveHandle:
    """Objective with analytic derivatives, all vectorised over rows.

    ``value``: ``(N, d) -> (N,)``; ``gradient``: ``(N, d) -> (N, d)``;
    ``hessian``: ``(N, d, d)``. Objectives whose parameters differ per row
    (one per particle, say) also implement ``take(rows)`` returning the
    objective restricted to those rows; the default is row-independent.
    """

    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]

    def take(self, rows) -> "ObjectiveHandle":
        return self


def _restrict(obj, rows: np.ndarray, n: int):
    if rows.size == n:
        return obj
    take = getattr(obj, "take", None)
    return take(rows) if take is not None else obj


@dataclass
class MinimizeResult:
    x_min: np.ndarray
    f_min: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        return x.reshape(1, 1), True
    if x.ndim == 1:
        return x[None, :], True
    return x, False


# -- dense linear algebra -----------------------------------------------------


def cholesky_rows(H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise Cholesky of ``(N, d, d)``; returns ``(L, ok)``.

    Rows with a non-positive pivot have ``ok = False`` and garbage in ``L``.
    """
    H = np.asarray(H, dtype=float)
    n, d, _ = H.shape
    if d == 1:
        ok = H[:, 0, 0] > 0
        return np.sqrt(np.where(ok, H[:, 0, 0], 1.0))[:, None, None], ok
    L = np.zeros(H.shape)
    ok = np.ones(n, dtype=bool)
    for j in range(d):
        pivot = H[:, j, j] - np.einsum("nk,nk->n", L[:, j, :j], L[:, j, :j])
        good = pivot > 0
        ok &= good
        ljj = np.sqrt(np.where(good, pivot, 1.0))
        L[:, j, j] = ljj
        for i in range(j + 1, d):
            L[:, i, j] = (H[:, i, j] - np.einsum("nk,nk->n", L[:, i, :j], L[:, j, :j])) / ljj
    return L, ok


def cholesky(H) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == H`` for SPD ``H`` (or a stack)."""
    H = np.asarray(H, dtype=float)
    single = H.ndim == 2
    Hb = H[None] if single else H
    if Hb.ndim != 3 or Hb.shape[1] != Hb.shape[2]:
        raise ValueError("H must be square")
    if not np.isfinite(Hb).all():
        raise ValueError("H must be finite")
    scale = np.maximum(np.abs(Hb).max(axis=(1, 2)), 1.0)
    if np.any(np.abs(Hb - Hb.transpose(0, 2, 1)).max(axis=(1, 2)) > 1e-12 * scale):
        raise ValueError("H must be symmetric")
    L, ok = cholesky_rows(Hb)
    if not ok.all():
        raise IndefiniteHessianError("indefinite Hessian", np.flatnonzero(~ok))
    return L[0] if single else L


def solve_lower(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Forward substitution ``L z = b`` row-wise."""
    n, d = b.shape
    if d == 1:
        return b / L[:, 0]
    z = np.empty_like(b)
    for i in range(d):
        z[:, i] = (b[:, i] - np.einsum("nk,nk->n", L[:, i, :i], z[:, :i])) / L[:, i, i]
    return z


def solve_upper_t(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Back substitution ``L^T z = b`` row-wise."""
    n, d = b.shape
    if d == 1:
        return b / L[:, 0]
    z = np.empty_like(b)
    for i in range(d - 1, -1, -1):
        z[:, i] = (b[:, i] - np.einsum("nk,nk->n", L[:, i + 1:, i], z[:, i + 1:])) / L[:, i, i]
    return z


def cho_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    return solve_upper_t(L, solve_lower(L, b))


# -- Newton minimisation ----------------------------------------------------------


def _armijo(obj, x, f, p, slope):
    """Backtracking from the full step; returns ``(x_new, f_new, accepted)``.

    Non-finite trial values count as insufficient decrease. When the predicted
    decrease is below the rounding level of ``f`` the full step is taken as
    long as ``f`` does not rise beyond that level; otherwise the search would
    stall a few ulps short of the gradient tolerance.
    """
    trial = x + p
    f_trial = np.asarray(obj.value(trial), dtype=float)
    good = np.isfinite(f_trial) & (f_trial <= f + ARMIJO_C * slope)
    if good.all():
        return trial, f_trial, good
    noise = ROUNDOFF_ULPS * np.finfo(float).eps * np.maximum(np.abs(f), 1.0)
    good |= np.isfinite(f_trial) & (-slope <= noise) & (f_trial <= f + noise)
    if good.all():
        return trial, f_trial, good
    n = x.shape[0]
    t = np.where(good, 1.0, 0.5)
    accepted = good.copy()
    x_new = np.where(good[:, None], trial, x)
    f_new = np.where(good, f_trial, f)
    for _ in range(MAX_BACKTRACKS):
        todo = np.flatnonzero(~accepted)
        if todo.size == 0:
            break
        trial = x[todo] + t[todo, None] * p[todo]
        f_trial = np.asarray(_restrict(obj, todo, n).value(trial), dtype=float)
        good = np.isfinite(f_trial) & (f_trial <= f[todo] + ARMIJO_C * t[todo] * slope[todo])
        acc = todo[good]
        x_new[acc], f_new[acc] = trial[good], f_trial[good]
        accepted[acc] = True
        t[todo[~good]] *= 0.5
    return x_new, f_new, accepted


def minimize(obj: ObjectiveHandle, x0, grad_tol: float = 1e-8, max_iter: int = 100) -> MinimizeResult:
    """Damped Newton with Armijo backtracking, row by row.

    Rows whose Hessian is not positive definite take a steepest-descent step
    instead. Rows that exhaust ``max_iter`` come back with ``converged=False``.
    """
    if grad_tol <= 0:
        raise ValueError("grad_tol must be positive")
    x, single = _as_batch(x0)
    x = x.copy()
    n = x.shape[0]
    f = np.asarray(obj.value(x), dtype=float)
    bad = ~np.isfinite(f)
    if bad.any():
        raise NonFiniteObjectiveError("objective is not finite at the starting point", np.flatnonzero(bad))
    g = np.asarray(obj.gradient(x), dtype=float)
    iterations = np.zeros(n, dtype=int)
    converged = np.sqrt(np.einsum("nd,nd->n", g, g)) <= grad_tol
    stalled = np.zeros(n, dtype=bool)

    for _ in range(max_iter):
        active = np.flatnonzero(~converged & ~stalled)
        if active.size == 0:
            break
        full = active.size == n
        if full:
            xa, fa, ga, sub = x, f, g, obj
        else:
            xa, fa, ga = x[active], f[active], g[active]
            sub = _restrict(obj, active, n)
        L, ok = cholesky_rows(np.asarray(sub.hessian(xa), dtype=float))
        if ok.all():
            p = -cho_solve(L, ga)
        else:
            p = -ga.copy()
            if ok.any():
                p[ok] = -cho_solve(L[ok], ga[ok])
        slope = np.einsum("nd,nd->n", ga, p)
        x_new, f_new, accepted = _armijo(sub, xa, fa, p, slope)

        iterations[active] += 1
        moved = accepted & (x_new != xa).any(axis=1)
        if full and moved.all():
            x, f = x_new, f_new
            g = np.asarray(obj.gradient(x), dtype=float)
            converged = np.sqrt(np.einsum("nd,nd->n", g, g)) <= grad_tol
            continue
        stalled[active[~moved]] = True
        x[active], f[active] = x_new, f_new
        if moved.any():
            rows = active[moved]
            g[rows] = np.asarray(_restrict(obj, rows, n).gradient(x[rows]), dtype=float)
            converged[rows] = np.sqrt(np.einsum("nd,nd->n", g[rows], g[rows])) <= grad_tol

    if single:
        return MinimizeResult(x[0], float(f[0]), int(iterations[0]), bool(converged[0]))
    return MinimizeResult(x, f, iterations, converged)


# -- random map ----------------------------------------------------------------


@dataclass
class RandomMapSolution:
    x: np.ndarray
    lam: np.ndarray
    log_jacobian: np.ndarray
    residual: np.ndarray


def solve_random_map(obj: ObjectiveHandle, x_min, f_min, L, xi, offset=0.0,
                     rtol: float = 1e-11, max_iter: int = 200) -> RandomMapSolution:
    """Solve ``F(x_min + lam * L^{-T} xi/|xi|) - f_min = |xi|^2/2 + offset``.

    ``L`` is the Cholesky factor of the Hessian of ``F`` at ``x_min``. Newton
    on ``lam`` starts from the Gaussian guess ``|xi|`` and falls back to
    bisection once a root is bracketed; without an upper bracket the step is
    doubled from ``LAMBDA_BRACKET`` up to ``LAMBDA_MAX``.

    ``log_jacobian`` is ``log|det dx/dxi|`` of the resulting map.
    """
    xm, single = _as_batch(x_min)
    xi_b, _ = _as_batch(xi)
    Lb = np.asarray(L, dtype=float)
    if Lb.ndim == 2:
        Lb = Lb[None]
    fm = np.atleast_1d(np.asarray(f_min, dtype=float))
    n, d = xm.shape
    offset = np.asarray(offset, dtype=float)
    if (offset < 0).any():
        raise ValueError("offset must be nonnegative")

    rho = np.einsum("nd,nd->n", xi_b, xi_b)
    r = np.sqrt(rho)
    zero = r == 0
    any_zero = bool(zero.any())
    if any_zero:
        if np.any(zero & (offset > 0)):
            raise ValueError("xi = 0 needs offset = 0")
        u = np.where(zero[:, None], 0.0, xi_b / np.where(zero, 1.0, r)[:, None])
    else:
        u = xi_b / r[:, None]
    v = solve_upper_t(Lb, u)
    target = 0.5 * rho + offset
    tol = rtol * (1.0 + rho)

    # the Gaussian guess is exact for quadratic F, so try it on every row first
    lam = np.sqrt(2.0 * target)
    x = xm + lam[:, None] * v
    fx = np.asarray(obj.value(x), dtype=float)
    if not np.isfinite(fx).all():
        raise NonFiniteObjectiveError("objective is not finite along the ray", np.flatnonzero(~np.isfinite(fx)))
    phi = fx - fm - target
    slope = np.einsum("nd,nd->n", np.asarray(obj.gradient(x), dtype=float), v)
    done = zero | (np.abs(phi) <= tol)
    if not done.all():
        _refine_lambda(obj, xm, fm, v, target, tol, lam, phi, slope, done, max_iter)
        x = xm + lam[:, None] * v

    if any_zero:
        lam = np.where(zero, 0.0, lam)
        x = np.where(zero[:, None], xm, x)
        phi = np.where(zero, 0.0, phi)
    failed = ~done | (np.abs(phi) > 10.0 * tol)
    if failed.any():
        raise OptimizationError("random-map equation did not converge", np.flatnonzero(failed))
    flat = ~zero & (slope <= 0)
    if flat.any():
        raise OptimizationError("objective is not increasing at the root", np.flatnonzero(flat))

    log_jac = -np.log(np.diagonal(Lb, axis1=1, axis2=2)).sum(axis=1)
    r_safe = np.where(zero, 1.0, r) if any_zero else r
    radial = np.log(r_safe / np.where(zero, 1.0, slope) if any_zero else r / slope)
    if d > 1:
        radial = radial + (d - 1) * np.log(np.where(zero, 1.0, lam) / r_safe if any_zero else lam / r)
    log_jac = log_jac + (np.where(zero, 0.0, radial) if any_zero else radial)
    if single:
        return RandomMapSolution(x[0], float(lam[0]), float(log_jac[0]), float(phi[0]))
    return RandomMapSolution(x, lam, log_jac, phi)


def _refine_lambda(obj, xm, fm, v, target, tol, lam, phi, slope, done, max_iter) -> None:
    """Safeguarded Newton on ``lam`` for the rows not yet ``done`` (in place)."""
    n = xm.shape[0]
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    for _ in range(max_iter):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            return
        la, ph, dph = lam[idx], phi[idx], slope[idx]
        below = ph < 0
        lo[idx] = np.where(below, la, lo[idx])
        hi[idx] = np.where(below, hi[idx], la)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = la - ph / dph
        usable = (dph > 0) & np.isfinite(newton) & (newton > lo[idx]) & (newton < hi[idx])
        bracketed = np.isfinite(hi[idx])
        grow = np.maximum(2.0 * la, LAMBDA_BRACKET)
        nxt = np.where(usable, newton, np.where(bracketed, 0.5 * (lo[idx] + hi[idx]), grow))
        # once hi - lo is at rounding level no further progress is possible
        collapsed = bracketed & (nxt == la)
        done[idx[collapsed]] = True
        if np.any(nxt > LAMBDA_MAX):
            raise UnboundedDirectionError("unbounded direction", idx[nxt > LAMBDA_MAX])
        lam[idx] = nxt

        act = idx[~collapsed]
        if act.size == 0:
            return
        sub = _restrict(obj, act, n)
        xa = xm[act] + lam[act, None] * v[act]
        fa = np.asarray(sub.value(xa), dtype=float)
        if not np.isfinite(fa).all():
            raise NonFiniteObjectiveError("objective is not finite along the ray", act[~np.isfinite(fa)])
        phi[act] = fa - fm[act] - target[act]
        slope[act] = np.einsum("nd,nd->n", np.asarray(sub.gradient(xa), dtype=float), v[act])
        done[act[np.abs(phi[act]) <= tol[act]]] = True
