"""Discrete p-Laplacian, fractional p-Laplacian and the associated norms.

Local part: face-gradient (staggered) divergence form.  Every face
between two interior cells carries the gradient (u_j - u_i)/h with
quadrature weight cell_volume; a face between an interior cell and the
zero-extension region resolves the boundary at half a cell, gradient
-2 u_i / h with weight cell_volume / 2.  The operator returned is the
exact gradient of the resulting discrete p-Dirichlet energy.

Nonlocal part: symmetric pairwise weights w_ij = 2 vol / |x_i - x_j|^{N+sp}
with zero diagonal (the principal value cancels in the symmetric form)
plus exact exterior tails.  An optional moment correction adds
c1 / h^2 to axis-adjacent pairs, with c1 the second moment of the
kernel over one cell; this restores the mass of the omitted singular
cell for both the pointwise operator and the energy quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .lattice import ExteriorTail, Field, Grid, ModelParams, exterior_tail

__all__ = [
    "KernelMatrix",
    "NormSet",
    "assemble_kernel",
    "apply_operator",
    "apply_local",
    "apply_nonlocal",
    "local_energy_p",
    "gagliardo_p",
    "rho_eps_p",
    "norms",
    "form_A",
    "diagonal_cell_moment",
]

_BLOCK = 512  # row-block size for dense pairwise traversals


@dataclass(frozen=True)
class KernelMatrix:
    """Dense symmetric fractional interaction weights + exterior tails."""

    weights: np.ndarray
    tails: np.ndarray
    grid: Grid
    dim_N: int
    s: float
    p: float
    diag_correction: bool

    @property
    def row_sums(self) -> np.ndarray:
        return self.weights.sum(axis=1)


@dataclass(frozen=True)
class NormSet:
    grad_p: float
    gagliardo: float
    rho_eps: float


def diagonal_cell_moment(grid: Grid, params: ModelParams) -> float:
    """c1 = int_{cell} z_1^2 |z|^{-N-sp} dz over one grid cell around 0.

    Finite only when N + sp < d + 2; callers skip the correction
    otherwise.  Ball part analytic, box-minus-ball by fine midpoint.
    """
    d = grid.dim_d
    beta = params.dim_N + params.sp
    if beta >= d + 2:
        raise ValueError("second kernel moment diverges for N + sp >= d + 2")
    h = grid.h
    rho = h / 2.0
    from .lattice import sphere_surface_area

    ball = (sphere_surface_area(d) / d) * rho ** (d + 2 - beta) / (d + 2 - beta)
    if d == 1:
        return ball  # cell == ball in 1-D
    m = 24
    ax = (np.arange(m) + 0.5) * (h / m) - h / 2.0
    mesh = np.meshgrid(*([ax] * d), indexing="ij")
    pts = np.stack([v.ravel() for v in mesh], axis=-1)
    r = np.linalg.norm(pts, axis=1)
    outside = r > rho
    vol = (h / m) ** d
    corner = float(np.sum(pts[outside, 0] ** 2 * r[outside] ** (-beta)) * vol)
    return ball + corner


def assemble_kernel(
    grid: Grid,
    params: ModelParams,
    tails: ExteriorTail | None = None,
    diag_correction: bool = True,
    max_nodes: int = 8192,
) -> KernelMatrix:
    """Build the dense kernel matrix for (grid, params).

    Rejects grids whose dense matrix would exceed the node budget.
    Deterministic; the result is immutable and shareable.
    """
    n = grid.n_interior
    if n > max_nodes:
        raise MemoryError(
            f"{n} interior nodes exceed the dense-kernel budget ({max_nodes})"
        )
    if params.dim_N + params.sp <= 0:
        raise ValueError("need N + s*p > 0")
    beta = params.dim_N + params.sp
    vol = grid.cell_volume
    pts = grid.points
    W = np.zeros((n, n))
    for start in range(0, n, _BLOCK):
        stop = min(start + _BLOCK, n)
        d2 = np.sum((pts[start:stop, None, :] - pts[None, :, :]) ** 2, axis=-1)
        np.sqrt(d2, out=d2)
        block = d2
        for i in range(start, stop):
            block[i - start, i] = 1.0
        W[start:stop] = 2.0 * vol * block ** (-beta)
        for i in range(start, stop):
            W[i, i] = 0.0

    applied_corr = False
    if diag_correction and beta < grid.dim_d + 2:
        c1 = diagonal_cell_moment(grid, params)
        dw = c1 / grid.h**2
        nb = grid.neighbors
        for axis in range(grid.dim_d):
            j = nb[:, axis, 1]
            ok = j >= 0
            ii = np.nonzero(ok)[0]
            W[ii, j[ok]] += dw
            W[j[ok], ii] += dw
        applied_corr = True

    if tails is None:
        tails = exterior_tail(grid, params)
    return KernelMatrix(
        weights=W,
        tails=tails.tail.copy(),
        grid=grid,
        dim_N=params.dim_N,
        s=params.s,
        p=params.p,
        diag_correction=applied_corr,
    )


def _check_same_grid(u: Field, kernel: KernelMatrix):
    if u.grid is not kernel.grid and u.grid.n_interior != kernel.grid.n_interior:
        raise ValueError("field and kernel live on different grids")


def _gpow(t: np.ndarray, p: float) -> np.ndarray:
    """|t|^{p-2} t, with 0 at 0."""
    if p == 2.0:
        return t
    return np.sign(t) * np.abs(t) ** (p - 1.0)


def local_energy_p(u: Field, params: ModelParams) -> float:
    """Discrete ||grad u||_p^p via face gradients."""
    grid = u.grid
    v = u.values
    h = grid.h
    vol = grid.cell_volume
    p = params.p
    total = 0.0
    nb = grid.neighbors
    for axis in range(grid.dim_d):
        j = nb[:, axis, 1]
        ii = j >= 0
        g = (v[j[ii]] - v[ii]) / h
        total += vol * np.sum(np.abs(g) ** p)
        for side in (0, 1):
            b = nb[:, axis, side] < 0
            gb = 2.0 * v[b] / h  # boundary at half a cell
            total += 0.5 * vol * np.sum(np.abs(gb) ** p)
    return float(total)


def apply_local(u: Field, params: ModelParams) -> np.ndarray:
    """Gradient of (1/p) ||grad u||_p^p with respect to nodal values."""
    grid = u.grid
    v = u.values
    h = grid.h
    vol = grid.cell_volume
    p = params.p
    out = np.zeros_like(v)
    nb = grid.neighbors
    for axis in range(grid.dim_d):
        j = nb[:, axis, 1]
        ii = np.nonzero(j >= 0)[0]
        jj = j[ii]
        flux = _gpow((v[jj] - v[ii]) / h, p) * (vol / h)
        np.subtract.at(out, ii, flux)
        np.add.at(out, jj, flux)
        for side in (0, 1):
            b = nb[:, axis, side] < 0
            # d/du_i of (vol/2)(1/p)|2u/h|^p
            out[b] += 0.5 * vol * _gpow(2.0 * v[b] / h, p) * (2.0 / h)
    return out


def _pairwise_rows(kernel: KernelMatrix, u: np.ndarray, p: float) -> np.ndarray:
    """sum_j w_ij |u_i-u_j|^{p-2}(u_i-u_j), blocked over rows."""
    W = kernel.weights
    n = u.shape[0]
    if p == 2.0:
        return u * W.sum(axis=1) - W @ u
    out = np.empty(n)
    for start in range(0, n, _BLOCK):
        stop = min(start + _BLOCK, n)
        diff = u[start:stop, None] - u[None, :]
        out[start:stop] = np.einsum("ij,ij->i", W[start:stop], _gpow(diff, p))
    return out


def apply_nonlocal(u: Field, kernel: KernelMatrix, params: ModelParams) -> np.ndarray:
    """Gradient of (1/p) [u]_{s,p}^p (discrete Gagliardo energy)."""
    _check_same_grid(u, kernel)
    vol = u.grid.cell_volume
    v = u.values
    pair = _pairwise_rows(kernel, v, params.p)
    return vol * (pair + 2.0 * kernel.tails * _gpow(v, params.p))


def gagliardo_p(u: Field, kernel: KernelMatrix, params: ModelParams) -> float:
    """[u]_{s,p}^p = 1/2 sum w_ij |u_i-u_j|^p vol + 2 sum T_i |u_i|^p vol."""
    _check_same_grid(u, kernel)
    vol = u.grid.cell_volume
    v = u.values
    p = params.p
    W = kernel.weights
    n = v.shape[0]
    if p == 2.0:
        rs = W.sum(axis=1)
        pair_half = float(v @ (rs * v) - v @ (W @ v))
    else:
        pair_half = 0.0
        for start in range(0, n, _BLOCK):
            stop = min(start + _BLOCK, n)
            diff = np.abs(v[start:stop, None] - v[None, :]) ** p
            pair_half += float(np.einsum("ij,ij->", W[start:stop], diff))
        pair_half *= 0.5
    tail = 2.0 * float(np.sum(kernel.tails * np.abs(v) ** p))
    return vol * (pair_half + tail)


def apply_operator(
    u: Field, kernel: KernelMatrix, params: ModelParams, mode: str = "mixed"
) -> Field:
    """Apply the discrete operator in 'local', 'nonlocal' or 'mixed' mode.

    All modes return the exact nodal gradient of the corresponding
    convex energy, i.e. volume-weighted weak-form values.
    """
    if params.p <= 1:
        raise ValueError("p must exceed 1")
    if mode == "local":
        return Field(apply_local(u, params), u.grid)
    if mode == "nonlocal":
        return Field(apply_nonlocal(u, kernel, params), u.grid)
    if mode == "mixed":
        return Field(
            apply_local(u, params) + params.eps * apply_nonlocal(u, kernel, params),
            u.grid,
        )
    raise ValueError(f"unknown operator mode {mode!r}")


def norms(u: Field, kernel: KernelMatrix, params: ModelParams) -> NormSet:
    gp = local_energy_p(u, params)
    gag = gagliardo_p(u, kernel, params)
    p = params.p
    rho = (gp + params.eps * gag) ** (1.0 / p)
    return NormSet(
        grad_p=gp ** (1.0 / p),
        gagliardo=gag ** (1.0 / p),
        rho_eps=rho,
    )


def rho_eps_p(u: Field, kernel: KernelMatrix, params: ModelParams) -> float:
    """rho_eps(u)^p without the final root."""
    return local_energy_p(u, params) + params.eps * gagliardo_p(u, kernel, params)


def form_A(u: Field, v: Field, kernel: KernelMatrix, params: ModelParams) -> float:
    """Nonlocal form: 1/2 sum w_ij |du|^{p-2} du (dv) vol + 2 sum T G(u) v vol.

    Satisfies form_A(u, u) = gagliardo_p(u) and
    dot(apply_nonlocal(u), v) = form_A(u, v) exactly.
    """
    _check_same_grid(u, kernel)
    _check_same_grid(v, kernel)
    vol = u.grid.cell_volume
    a = u.values
    b = v.values
    p = params.p
    W = kernel.weights
    n = a.shape[0]
    total = 0.0
    if p == 2.0:
        rs = W.sum(axis=1)
        total = float(b @ (rs * a) - b @ (W @ a))
    else:
        for start in range(0, n, _BLOCK):
            stop = min(start + _BLOCK, n)
            du = a[start:stop, None] - a[None, :]
            dv = b[start:stop, None] - b[None, :]
            total += 0.5 * float(np.einsum("ij,ij->", W[start:stop], _gpow(du, p) * dv))
    tail = 2.0 * float(np.sum(kernel.tails * _gpow(a, p) * b))
    return vol * (total + tail)
