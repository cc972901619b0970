"""Iterative procedures: inner convex solves, sublinear solve, eigenpair,
ball-constrained minimization, monotone iteration, truncated minimization,
the mountain-pass path algorithm and extremal-parameter bracketing.

All minimizations use preconditioned descent with Armijo backtracking;
the preconditioner is the sparse local 2-Laplacian factorized once per
grid.  Newton is deliberately avoided for p != 2 (degenerate Hessian
where the gradient vanishes).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .lattice import Field, Grid, ModelParams
from .functionals import (
    EnergyBreakdown,
    clamped_primitive,
    energy,
    f_lambda,
    residual_dual_norm,
)
from .operators import (
    KernelMatrix,
    apply_operator,
    gagliardo_p,
    local_energy_p,
    rho_eps_p,
)

__all__ = [
    "SolveReport",
    "BranchPoint",
    "solve_inner",
    "solve_sublinear",
    "principal_eigenpair",
    "minimize_in_ball",
    "monotone_iterate",
    "minimize_truncated",
    "mountain_pass",
    "estimate_Lambda",
    "constant_beam",
]


@dataclass
class SolveReport:
    field: Field
    energy: EnergyBreakdown
    residual_norm: float
    iterations: int
    converged: bool
    kind: str  # minimizer | mountain-pass | eigenpair | iterate-limit
    tolerance: float
    message: str = ""


@dataclass(frozen=True)
class BranchPoint:
    lam: float
    sup_norm: float
    energy_total: float
    converged: bool


# ---------------------------------------------------------------------------
# preconditioner: sparse local 2-Laplacian per grid

_PRECOND_CACHE: dict = {}


def _local_p2_matrix(grid: Grid) -> sp.csc_matrix:
    n = grid.n_interior
    h = grid.h
    vol = grid.cell_volume
    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    nb = grid.neighbors
    for axis in range(grid.dim_d):
        j = nb[:, axis, 1]
        ii = np.nonzero(j >= 0)[0]
        jj = j[ii]
        w = vol / h**2
        rows.extend(ii); cols.extend(jj); vals.extend([-w] * len(ii))
        rows.extend(jj); cols.extend(ii); vals.extend([-w] * len(ii))
        np.add.at(diag, ii, w)
        np.add.at(diag, jj, w)
        for side in (0, 1):
            b = np.nonzero(nb[:, axis, side] < 0)[0]
            diag[b] += 2.0 * vol / h**2
    rows.extend(range(n)); cols.extend(range(n)); vals.extend(diag)
    return sp.csc_matrix((vals, (rows, cols)), shape=(n, n))


def _preconditioner(grid: Grid):
    key = id(grid)
    hit = _PRECOND_CACHE.get(key)
    if hit is not None and hit[0] is grid:
        return hit[1]
    lu = spla.splu(_local_p2_matrix(grid))
    _PRECOND_CACHE[key] = (grid, lu)
    return lu


def _weighted_local_matrix(grid: Grid, params: ModelParams, v: np.ndarray) -> sp.csc_matrix:
    """Lagged-diffusivity metric: local p-Laplacian linearized at v.

    Face weights (p-1)(|g_f| + mu)^{p-2} with a small relative floor mu
    keep the matrix SPD for degenerate (p > 2) and singular (p < 2)
    regimes alike.
    """
    n = grid.n_interior
    h = grid.h
    vol = grid.cell_volume
    p = params.p
    nb = grid.neighbors

    grads = []
    for axis in range(grid.dim_d):
        j = nb[:, axis, 1]
        ii = np.nonzero(j >= 0)[0]
        grads.append(np.abs(v[j[ii]] - v[ii]) / h)
        for side in (0, 1):
            b = np.nonzero(nb[:, axis, side] < 0)[0]
            grads.append(np.abs(2.0 * v[b] / h))
    gscale = max((float(np.max(g)) for g in grads if g.size), default=0.0)
    mu = 1e-6 * gscale + 1e-30

    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    for axis in range(grid.dim_d):
        j = nb[:, axis, 1]
        ii = np.nonzero(j >= 0)[0]
        jj = j[ii]
        a = (p - 1.0) * (np.abs(v[jj] - v[ii]) / h + mu) ** (p - 2.0)
        w = a * vol / h**2
        rows.extend(ii); cols.extend(jj); vals.extend(-w)
        rows.extend(jj); cols.extend(ii); vals.extend(-w)
        np.add.at(diag, ii, w)
        np.add.at(diag, jj, w)
        for side in (0, 1):
            b = np.nonzero(nb[:, axis, side] < 0)[0]
            ab = (p - 1.0) * (np.abs(2.0 * v[b] / h) + mu) ** (p - 2.0)
            diag[b] += 2.0 * ab * vol / h**2
    rows.extend(range(n)); cols.extend(range(n)); vals.extend(diag)
    return sp.csc_matrix((np.asarray(vals), (rows, cols)), shape=(n, n))


def _lagged_nonlocal_diag(kernel: KernelMatrix, params: ModelParams, v: np.ndarray):
    """Diagonal lumping of eps * Hessian of (1/p)[u]_{s,p}^p at v."""
    p = params.p
    vol = kernel.grid.cell_volume
    W = kernel.weights
    if p == 2.0:
        s = W.sum(axis=1)
        tail_part = 2.0 * kernel.tails
    else:
        mu = 1e-6 * float(np.max(np.abs(v)) if v.size else 0.0) + 1e-30
        n = v.shape[0]
        s = np.empty(n)
        blk = 512
        for start in range(0, n, blk):
            stop = min(start + blk, n)
            diff = np.abs(v[start:stop, None] - v[None, :]) + mu
            s[start:stop] = (p - 1.0) * np.einsum(
                "ij,ij->i", W[start:stop], diff ** (p - 2.0)
            )
        tail_part = 2.0 * kernel.tails * (p - 1.0) * (np.abs(v) + mu) ** (p - 2.0)
    return params.eps * vol * (s + tail_part)


def _metric_factory(grid: Grid, params: ModelParams, kernel: Optional[KernelMatrix] = None):
    """Returns make_solver(v) -> (solve callable) for the descent metric.

    The metric is the lagged weighted local matrix plus a diagonal
    lumping of the lagged nonlocal Hessian; for p = 2 both pieces are
    value-independent and factorized once.
    """
    if params.p == 2.0:
        if kernel is None:
            lu = _preconditioner(grid)
        else:
            key = ("p2", id(grid), id(kernel), params.eps)
            hit = _PRECOND_CACHE.get(key)
            if hit is not None and hit[0] is kernel:
                lu = hit[1]
            else:
                M = _local_p2_matrix(grid) + sp.diags(
                    _lagged_nonlocal_diag(kernel, params, np.zeros(grid.n_interior))
                )
                lu = spla.splu(sp.csc_matrix(M))
                _PRECOND_CACHE[key] = (kernel, lu)

        def make(_v):
            return lu.solve

        return make

    def make(v):
        # the dense nonlocal Hessian is left to the line search for p != 2:
        # its diagonal lumping grossly overestimates smooth-mode curvature
        lu = spla.splu(_weighted_local_matrix(grid, params, v))
        return lu.solve

    return make


# ---------------------------------------------------------------------------
# generic preconditioned Armijo descent


def _descent(
    x0: np.ndarray,
    objective: Callable[[np.ndarray], float],
    gradient: Callable[[np.ndarray], np.ndarray],
    grid: Grid,
    tol: float,
    max_iter: int,
    project: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    armijo: float = 1e-4,
    memory: int = 6,
    params: Optional[ModelParams] = None,
    kernel: Optional[KernelMatrix] = None,
    metric_every: int = 8,
):
    """Preconditioned descent with Armijo backtracking.

    The metric is the local 2-Laplacian for p = 2 and the lagged
    weighted local matrix otherwise, rebuilt every `metric_every`
    accepted steps; a Barzilai-Borwein step length and a short
    non-monotone window speed up the in-between iterations.

    Returns (x, f, dual_norm, iterations, converged, projection_active).
    """
    make_solver = (
        _metric_factory(grid, params, kernel) if params is not None
        else (lambda _v: _preconditioner(grid).solve)
    )
    sqvol = math.sqrt(grid.cell_volume)
    x = project(x0.copy()) if project else x0.copy()
    f = objective(x)
    recent = [f]
    alpha = 1.0
    proj_active = False
    x_prev = None
    z_prev = None
    solver = make_solver(x)
    since_rebuild = 0
    g = gradient(x)
    for it in range(max_iter):
        dual = np.linalg.norm(g) / sqvol
        if dual <= tol:
            return x, f, dual, it, True, proj_active
        if since_rebuild >= metric_every:
            solver = make_solver(x)
            since_rebuild = 0
            x_prev = z_prev = None
            alpha = 1.0
        z = solver(g)
        gz = float(g @ z)
        if not np.isfinite(gz) or gz <= 0.0:
            z, gz = g, float(g @ g)
        if x_prev is not None and z_prev is not None:
            s = x - x_prev
            y = z - z_prev  # gradient difference in the preconditioned metric
            sy = float(s @ y)
            if np.isfinite(sy) and sy > 0.0:
                alpha = max(min(float(s @ s) / sy, 1e6), 1e-12)
            else:
                alpha = min(alpha * 2.0, 1.0)
        x_prev, z_prev = x.copy(), z.copy()
        fmax = max(recent)
        improved = False
        for _ in range(60):
            trial = x - alpha * z
            was_projected = False
            if project is not None:
                projected = project(trial)
                was_projected = not np.array_equal(projected, trial)
                trial = projected
            ft = objective(trial)
            step = trial - x
            if ft <= fmax + armijo * float(g @ step) or (
                was_projected and ft <= fmax
            ):
                x, f = trial, ft
                proj_active = was_projected
                improved = True
                break
            alpha *= 0.5
        if not improved:
            if since_rebuild > 0:
                # stale metric may be the blocker; rebuild once and retry
                solver = make_solver(x)
                since_rebuild = 0
                x_prev = z_prev = None
                alpha = 1.0
                continue
            g = gradient(x)
            dual = np.linalg.norm(g) / sqvol
            return x, f, dual, it + 1, dual <= tol, proj_active
        since_rebuild += 1
        recent.append(f)
        if len(recent) > memory:
            recent.pop(0)
        g = gradient(x)
    dual = np.linalg.norm(g) / sqvol
    return x, f, dual, max_iter, dual <= tol, proj_active


# ---------------------------------------------------------------------------
# inner convex problem


def solve_inner(
    rhs: Field,
    kernel: KernelMatrix,
    params: ModelParams,
    tol: float = 1e-9,
    max_iter: int = 400,
    x0: Optional[np.ndarray] = None,
) -> SolveReport:
    """Minimize (1/p) rho_eps(u)^p - <rhs, u>; unique by strict convexity."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    grid = rhs.grid
    b = rhs.values
    if not np.all(np.isfinite(b)):
        raise ValueError("rhs must be finite")
    p = params.p

    def obj(v):
        u = Field(v, grid)
        return (local_energy_p(u, params) + params.eps * gagliardo_p(u, kernel, params)) / p - float(b @ v)

    def grad(v):
        u = Field(v, grid)
        return apply_operator(u, kernel, params, "mixed").values - b

    if x0 is None:
        x0 = _preconditioner(grid).solve(b)
        if p != 2.0 or params.eps > 0:
            # crude scale fix for the nonlinearity
            nrm = float(np.max(np.abs(x0)))
            if nrm > 0 and not np.isfinite(obj(x0)):
                x0 = x0 / nrm

    if p == 2.0:
        # the operator is linear and SPD: preconditioned CG to the bitter end
        n = grid.n_interior
        sqvol = math.sqrt(grid.cell_volume)
        msolve = _metric_factory(grid, params, kernel)(x0)
        A = spla.LinearOperator((n, n), matvec=lambda v: apply_operator(
            Field(v, grid), kernel, params, "mixed").values)
        M = spla.LinearOperator((n, n), matvec=msolve)
        x, _info = spla.cg(A, b, x0=x0, M=M, rtol=1e-300,
                           atol=0.5 * tol * sqvol, maxiter=20 * max_iter)
        dual = float(np.linalg.norm(grad(x)) / sqvol)
        u = Field(x, grid)
        conv = dual <= tol
        return SolveReport(
            field=u,
            energy=energy(u, kernel, params, "I"),
            residual_norm=dual,
            iterations=0,
            converged=conv,
            kind="minimizer" if conv else "iterate-limit",
            tolerance=tol,
        )

    x, fval, dual, its, conv, _ = _descent(x0, obj, grad, grid, tol, max_iter,
                                            params=params, kernel=kernel)
    u = Field(x, grid)
    return SolveReport(
        field=u,
        energy=energy(u, kernel, params, "I"),
        residual_norm=dual,
        iterations=its,
        converged=conv,
        kind="minimizer" if conv else "iterate-limit",
        tolerance=tol,
    )


def solve_sublinear(
    params: ModelParams,
    kernel: KernelMatrix,
    tol: float = 1e-9,
    max_iter: int = 600,
) -> SolveReport:
    """Global minimizer of the sublinear energy J; unique positive solution."""
    if params.lam <= 0:
        raise ValueError("the sublinear problem needs lam > 0")
    grid = kernel.grid
    vol = grid.cell_volume
    p, q, lam = params.p, params.q, params.lam

    def obj(v):
        u = Field(v, grid)
        up = np.maximum(v, 0.0)
        return (
            (local_energy_p(u, params) + params.eps * gagliardo_p(u, kernel, params)) / p
            - lam / q * float(np.sum(up**q) * vol)
        )

    def grad(v):
        u = Field(v, grid)
        up = np.maximum(v, 0.0)
        return apply_operator(u, kernel, params, "mixed").values - lam * vol * up ** (q - 1.0)

    # deterministic positive start: scaled distance-like bump, 1-D scan for depth
    lo, hi = grid.geometry.bounding_box()
    span = float(np.min(hi - lo))
    d2 = np.sum((grid.points - 0.5 * (np.asarray(lo) + np.asarray(hi))) ** 2, axis=1)
    bump = np.exp(-4.0 * d2 / span**2)
    scales = np.geomspace(1e-4, 1e4, 60)
    vals = [obj(c * bump) for c in scales]
    x0 = scales[int(np.argmin(vals))] * bump

    x, fval, dual, its, conv, _ = _descent(x0, obj, grad, grid, tol, max_iter,
                                            params=params, kernel=kernel)
    u = Field(x, grid)
    return SolveReport(
        field=u,
        energy=energy(u, kernel, params, "J"),
        residual_norm=dual,
        iterations=its,
        converged=conv,
        kind="minimizer" if conv else "iterate-limit",
        tolerance=tol,
    )


def principal_eigenpair(
    params: ModelParams,
    kernel: KernelMatrix,
    tol: float = 1e-8,
    max_iter: int = 2000,
):
    """First Dirichlet quotient min rho_eps(u)^p / ||u||_p^p and its minimizer.

    Normalized gradient flow on the Rayleigh quotient with ||u||_p = 1
    renormalization after every step; the minimizer is returned with
    positive sign normalization.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    grid = kernel.grid
    vol = grid.cell_volume
    p = params.p
    make_solver = _metric_factory(grid, params, kernel)
    sqvol = math.sqrt(vol)

    def normalize(v):
        nrm = float(np.sum(np.abs(v) ** p) * vol) ** (1.0 / p)
        return v / nrm

    def quotient(v):
        u = Field(v, grid)
        return rho_eps_p(u, kernel, params)  # with ||u||_p = 1

    lo, hi = grid.geometry.bounding_box()
    d2 = np.sum((grid.points - 0.5 * (np.asarray(lo) + np.asarray(hi))) ** 2, axis=1)
    span = float(np.min(hi - lo))
    x = normalize(np.exp(-4.0 * d2 / span**2))
    R = quotient(x)
    solver = make_solver(x)
    step = 1.0
    its = 0
    dual = math.inf
    for its in range(1, max_iter + 1):
        u = Field(x, grid)
        Au = apply_operator(u, kernel, params, "mixed").values
        gD = vol * np.sign(x) * np.abs(x) ** (p - 1.0)
        g = Au - R * gD  # gradient of N - R D; stationarity <=> eigenpair
        dual = float(np.linalg.norm(g) / sqvol)
        if dual <= tol * max(1.0, R):
            break
        if its % 8 == 0:
            solver = make_solver(x)
        z = solver(g)
        step = min(step * 2.0, 4.0)
        accepted = False
        for _ in range(50):
            xt = normalize(x - step * z)
            Rt = quotient(xt)
            if Rt < R:
                x, R = xt, Rt
                accepted = True
                break
            step *= 0.5
        if not accepted:
            solver = make_solver(x)
            step = 1.0
            zg = solver(g)
            for _ in range(50):
                xt = normalize(x - step * zg)
                Rt = quotient(xt)
                if Rt < R:
                    x, R = xt, Rt
                    accepted = True
                    break
                step *= 0.5
        if not accepted:
            break
    if float(np.sum(x)) < 0:
        x = -x
    e1 = Field(x, grid)
    return float(R), e1


def constant_beam(grid: Grid, value: float) -> Field:
    return Field(np.full(grid.n_interior, float(value)), grid)


def minimize_in_ball(
    params: ModelParams,
    kernel: KernelMatrix,
    radius: float,
    tol: float = 1e-8,
    max_iter: int = 800,
    margin_frac: float = 1e-3,
) -> SolveReport:
    """Descend the full energy inside the rho_eps ball of given radius.

    The iterates are radially projected back to radius*(1 - margin)
    whenever they leave the ball; an active projection at convergence is
    reported as boundary-stuck (converged = False), which signals that
    the radius/lambda configuration violates the interior guarantee.
    """
    if params.lam < 0:
        raise ValueError("minimize_in_ball needs lam >= 0")
    grid = kernel.grid
    vol = grid.cell_volume
    p, q, r, lam = params.p, params.q, params.r, params.lam
    rad_eff = radius * (1.0 - margin_frac)

    def rho(v):
        return rho_eps_p(Field(v, grid), kernel, params) ** (1.0 / p)

    def obj(v):
        u = Field(v, grid)
        up = np.maximum(v, 0.0)
        return (
            (local_energy_p(u, params) + params.eps * gagliardo_p(u, kernel, params)) / p
            - lam / q * float(np.sum(up**q) * vol)
            - 1.0 / r * float(np.sum(up**r) * vol)
        )

    def grad(v):
        u = Field(v, grid)
        up = np.maximum(v, 0.0)
        rhs = vol * (lam * up ** (q - 1.0) + up ** (r - 1.0))
        return apply_operator(u, kernel, params, "mixed").values - rhs

    def project(v):
        rv = rho(v)
        if rv > rad_eff:
            return v * (rad_eff / rv)
        return v

    # start on the ray through a central bump, at the in-ball scan minimum
    lo, hi = grid.geometry.bounding_box()
    span = float(np.min(hi - lo))
    d2 = np.sum((grid.points - 0.5 * (np.asarray(lo) + np.asarray(hi))) ** 2, axis=1)
    bump = np.exp(-4.0 * d2 / span**2)
    bump /= rho(bump)
    scales = np.geomspace(1e-6 * radius, rad_eff, 80)
    vals = [obj(c * bump) for c in scales]
    x0 = scales[int(np.argmin(vals))] * bump

    x, fval, dual, its, conv, proj_active = _descent(
        x0, obj, grad, grid, tol, max_iter, project=project, params=params,
        kernel=kernel,
    )
    u = Field(x, grid)
    stuck = proj_active and dual > tol
    return SolveReport(
        field=u,
        energy=energy(u, kernel, params, "I"),
        residual_norm=dual,
        iterations=its,
        converged=conv and not stuck,
        kind="minimizer" if conv and not stuck else "iterate-limit",
        tolerance=tol,
        message="boundary-stuck" if stuck else "",
    )


def monotone_iterate(
    sub: Field,
    super_: Optional[Field],
    params: ModelParams,
    kernel: KernelMatrix,
    tol: float = 1e-9,
    max_outer: int = 200,
    inner_tol: Optional[float] = None,
    slack: float = 1e-10,
    cap: Optional[float] = None,
    residual_target: Optional[float] = None,
) -> SolveReport:
    """Monotone iteration u_{n+1} = inner-solve of f_lam(u_n) from u_0 = sub.

    The iterates are node-wise nondecreasing within `slack`; with a
    supersolution (or cap beam) they stay below it.  Stops when the
    sup-change drops below tol; converged reports additionally satisfy
    the mode-I residual target.  Blowup past `cap` or an ordering breach
    ends the run unconverged with a diagnostic message.
    """
    grid = kernel.grid
    vol = grid.cell_volume
    if np.any(sub.values < -slack):
        raise ValueError("subsolution must be nonnegative")
    if super_ is not None and np.any(sub.values > super_.values + slack):
        raise ValueError("need sub <= super node-wise")
    if inner_tol is None:
        inner_tol = 0.1 * tol
    if residual_target is None:
        residual_target = 100.0 * tol
    if cap is None:
        cap = math.inf if super_ is None else 10.0 * super_.sup_norm() + 1.0

    u = sub.copy()
    message = ""
    converged = False
    its = 0
    for its in range(1, max_outer + 1):
        rhs = Field(vol * f_lambda(np.maximum(u.values, 0.0), params), grid)
        rep = solve_inner(rhs, kernel, params, tol=inner_tol, x0=u.values.copy())
        nxt = rep.field
        if np.any(nxt.values < u.values - max(slack, 1e3 * inner_tol)):
            message = "monotonicity-breach"
            u = nxt
            break
        if super_ is not None and np.any(nxt.values > super_.values + max(slack, 1e3 * inner_tol)):
            message = "super-exceeded"
            u = nxt
            break
        change = float(np.max(np.abs(nxt.values - u.values)))
        u = nxt
        if u.sup_norm() > cap:
            message = "blowup-cap"
            break
        if change <= tol:
            converged = True
            break

    _, dual = residual_dual_norm(u, kernel, params)
    converged = converged and dual <= residual_target
    return SolveReport(
        field=u,
        energy=energy(u, kernel, params, "I"),
        residual_norm=dual,
        iterations=its,
        converged=converged,
        kind="minimizer" if converged else "iterate-limit",
        tolerance=residual_target,
        message=message,
    )


def minimize_truncated(
    lower: Field,
    upper: Field,
    params: ModelParams,
    kernel: KernelMatrix,
    tol: float = 1e-9,
    max_iter: int = 800,
    slack: float = 1e-8,
) -> SolveReport:
    """Global descent on the clamped energy; the minimizer is pinched into
    [lower, upper] and then solves the unclamped equation."""
    if np.any(lower.values <= 0) or np.any(lower.values > upper.values):
        raise ValueError("need 0 < lower <= upper")
    grid = kernel.grid
    vol = grid.cell_volume
    p = params.p
    lov = lower.values
    upv = upper.values

    def obj(v):
        u = Field(v, grid)
        conc, crit = clamped_primitive(v, lov, upv, params)
        return (
            (local_energy_p(u, params) + params.eps * gagliardo_p(u, kernel, params)) / p
            - float(np.sum(conc + crit) * vol)
        )

    def grad(v):
        u = Field(v, grid)
        fhat = f_lambda(np.clip(v, lov, upv), params)
        return apply_operator(u, kernel, params, "mixed").values - vol * fhat

    x0 = 0.5 * (lov + upv)
    x, fval, dual, its, conv, _ = _descent(x0, obj, grad, grid, tol, max_iter,
                                            params=params, kernel=kernel)
    u = Field(x, grid)

    scale = max(upper.sup_norm(), 1.0)
    pinch_ok = bool(
        np.all(x >= lov - slack * scale) and np.all(x <= upv + slack * scale)
    )
    _, dual_untrunc = residual_dual_norm(u, kernel, params)
    message = "" if pinch_ok else "pinching-failure"
    return SolveReport(
        field=u,
        energy=energy(u, kernel, params, "I"),
        residual_norm=dual_untrunc,
        iterations=its,
        converged=conv and pinch_ok and dual_untrunc <= 2.0 * tol * 100.0,
        kind="minimizer" if conv else "iterate-limit",
        tolerance=tol,
        message=message,
    )


# ---------------------------------------------------------------------------
# mountain pass


def _path_reparametrize(states: np.ndarray, grid: Grid, kernel, params) -> np.ndarray:
    """Redistribute path nodes by rho_eps arc length, endpoints fixed."""
    K = states.shape[0]
    seg = np.empty(K - 1)
    for k in range(K - 1):
        seg[k] = rho_eps_p(Field(states[k + 1] - states[k], grid), kernel, params) ** (
            1.0 / params.p
        )
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if cum[-1] <= 0:
        return states
    targets = np.linspace(0.0, cum[-1], K)
    out = np.empty_like(states)
    out[0] = states[0]
    out[-1] = states[-1]
    for k in range(1, K - 1):
        t = targets[k]
        j = int(np.searchsorted(cum, t, side="right") - 1)
        j = min(max(j, 0), K - 2)
        w = (t - cum[j]) / max(cum[j + 1] - cum[j], 1e-300)
        out[k] = (1.0 - w) * states[j] + w * states[j + 1]
    return out


def mountain_pass(
    base: SolveReport,
    top: Field,
    params: ModelParams,
    kernel: KernelMatrix,
    path_nodes: int = 24,
    tol: float = 1e-6,
    max_outer: int = 4000,
    s0_estimate: Optional[float] = None,
    inner_steps: int = 2,
    reparam_every: int = 10,
) -> SolveReport:
    """Discretized-path steepest descent between base.field and top.

    A polyline of path_nodes states joins the two endpoints; the
    maximum-energy node is repeatedly displaced along its preconditioned
    negative residual until its residual norm drops below tol.  The
    converged maximum node is the mountain-pass point.
    """
    if path_nodes < 16:
        raise ValueError("need at least 16 path nodes")
    grid = kernel.grid
    vol = grid.cell_volume
    p, q, r, lam = params.p, params.q, params.r, params.lam
    make_solver = _metric_factory(grid, params, kernel)
    sqvol = math.sqrt(vol)

    def obj(v):
        u = Field(v, grid)
        up = np.maximum(v, 0.0)
        return (
            (local_energy_p(u, params) + params.eps * gagliardo_p(u, kernel, params)) / p
            - lam / q * float(np.sum(up**q) * vol)
            - 1.0 / r * float(np.sum(up**r) * vol)
        )

    def grad(v):
        u = Field(v, grid)
        up = np.maximum(v, 0.0)
        rhs = vol * (lam * up ** (q - 1.0) + up ** (r - 1.0))
        return apply_operator(u, kernel, params, "mixed").values - rhs

    e_top = obj(top.values)
    e_base = obj(base.field.values)
    if e_top >= e_base:
        raise ValueError("top endpoint must have lower energy than base")

    K = path_nodes
    tgrid = np.linspace(0.0, 1.0, K)
    states = np.array([(1 - t) * base.field.values + t * top.values for t in tgrid])
    energies = np.array([obj(v) for v in states])

    dual = math.inf
    kmax = int(np.argmax(energies[1:-1])) + 1
    for outer in range(1, max_outer + 1):
        kmax = int(np.argmax(energies[1:-1])) + 1
        v = states[kmax]
        g = grad(v)
        dual = float(np.linalg.norm(g) / sqvol)
        if dual <= tol:
            break
        solver = make_solver(v)
        for _ in range(inner_steps):
            g = grad(v)
            z = solver(g)
            gz = float(g @ z)
            if not np.isfinite(gz) or gz <= 0:
                z, gz = g, float(g @ g)
            alpha = 1.0
            f0 = obj(v)
            for _ in range(50):
                trial = v - alpha * z
                ft = obj(trial)
                if ft < f0 - 1e-4 * alpha * gz:
                    v = trial
                    break
                alpha *= 0.5
        states[kmax] = v
        energies[kmax] = obj(v)
        if outer % reparam_every == 0:
            states = _path_reparametrize(states, grid, kernel, params)
            energies = np.array([obj(w) for w in states])

    kmax = int(np.argmax(energies[1:-1])) + 1
    u = Field(states[kmax], grid)
    g = grad(states[kmax])
    dual = float(np.linalg.norm(g) / sqvol)
    converged = dual <= tol
    level = float(energies[kmax])

    message = ""
    if s0_estimate is not None:
        window_hi = e_base + s0_estimate ** (params.dim_N / p) / params.dim_N
        if not (0.0 < level < window_hi):
            message = "level-window-violation"
    return SolveReport(
        field=u,
        energy=energy(u, kernel, params, "I"),
        residual_norm=dual,
        iterations=outer,
        converged=converged,
        kind="mountain-pass" if converged else "iterate-limit",
        tolerance=tol,
        message=message,
    )


# ---------------------------------------------------------------------------
# extremal parameter bracket


def estimate_Lambda(
    params: ModelParams,
    kernel: KernelMatrix,
    lambda_hi: float,
    tol_lambda: float,
    lambda_sharp: float,
    cap: Optional[float] = None,
    max_outer: int = 120,
    tol: float = 1e-8,
):
    """Bisection bracket [lo, hi] around the largest solvable lambda.

    A lambda is solvable when the monotone iteration from the sublinear
    solution converges with sup-norm below the blowup cap; it is
    unsolvable when the iterates blow past the cap or fail to settle.
    lambda_hi must be unsolvable, lambda_sharp must be solvable.
    """
    if lambda_hi <= lambda_sharp:
        raise ValueError("lambda_hi must exceed lambda_sharp")

    def minimal_solution(lam, local_cap):
        prm = params.with_lambda(lam)
        w = solve_sublinear(prm, kernel, tol=tol)
        beam = constant_beam(kernel.grid, local_cap) if math.isfinite(local_cap) else None
        return monotone_iterate(
            w.field, beam, prm, kernel, tol=tol, max_outer=max_outer,
            cap=local_cap,
        )

    if cap is None:
        ref = minimal_solution(lambda_sharp, math.inf)
        if not ref.converged:
            raise ArithmeticError(
                "reference solve at lambda_sharp failed; lower the tolerance "
                "or refine the grid"
            )
        cap = 1e3 * max(ref.field.sup_norm(), 1e-12)

    def solvable(lam):
        rep = minimal_solution(lam, cap)
        return rep.converged and rep.field.sup_norm() < cap, rep

    ok_lo, _ = solvable(lambda_sharp)
    if not ok_lo:
        raise ArithmeticError("lambda_sharp probe is not solvable on this grid")
    ok_hi, _ = solvable(lambda_hi)
    if ok_hi:
        raise ArithmeticError(
            "lambda_hi is still solvable; raise lambda_hi to establish a bracket"
        )
    lo, hi = lambda_sharp, lambda_hi
    while hi - lo > tol_lambda:
        mid = 0.5 * (lo + hi)
        ok, _ = solvable(mid)
        if ok:
            lo = mid
        else:
            hi = mid
    return lo, hi
