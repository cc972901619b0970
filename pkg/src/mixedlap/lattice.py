"""Model parameters, discrete domains, quadrature and fields.

The domain Omega is an axis-aligned box or a ball, carried by a uniform
tensor-product grid of cell midpoints.  A Field assigns one value per
interior node and is implicitly zero on every non-interior node and on
all of the exterior -- the zero exterior condition is built into every
operator downstream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "ModelParams",
    "BoxGeometry",
    "BallGeometry",
    "Grid",
    "Field",
    "ExteriorTail",
    "build_grid",
    "exterior_tail",
    "lt_norm",
    "sphere_surface_area",
]


def sphere_surface_area(n: int) -> float:
    """Surface measure of the unit sphere S^{n-1} in R^n."""
    return 2.0 * math.pi ** (n / 2.0) / math.gamma(n / 2.0)


@dataclass(frozen=True)
class ModelParams:
    """The parameter tuple (N, p, q, s, eps, lam, r).

    r defaults to the critical exponent N*p/(N-p); leaving it at the
    default therefore requires N > p.  lam may be <= 0 for nonexistence
    runs, everything else is constrained on construction.
    """

    dim_N: int
    p: float
    q: float
    s: float
    eps: float
    lam: float
    r: Optional[float] = None

    def __post_init__(self):
        if self.dim_N < 1:
            raise ValueError("dim_N must be a positive integer")
        if not self.p > 1.0:
            raise ValueError("p must exceed 1")
        if not 1.0 < self.q < self.p:
            raise ValueError("need 1 < q < p")
        if not 0.0 < self.s < 1.0:
            raise ValueError("s must lie in (0, 1)")
        if not 0.0 < self.eps <= 1.0:
            raise ValueError("eps must lie in (0, 1]")
        if self.r is None:
            if self.dim_N <= self.p:
                raise ValueError(
                    "default critical exponent requires N > p; pass r explicitly"
                )
            object.__setattr__(self, "r", self.dim_N * self.p / (self.dim_N - self.p))
        if not self.r > self.p:
            raise ValueError("need r > p")

    @property
    def p_star(self) -> float:
        """Critical Sobolev exponent N p/(N - p)."""
        if self.dim_N <= self.p:
            raise ValueError("p_star undefined for N <= p")
        return self.dim_N * self.p / (self.dim_N - self.p)

    @property
    def sp(self) -> float:
        return self.s * self.p

    def with_lambda(self, lam: float) -> "ModelParams":
        return ModelParams(self.dim_N, self.p, self.q, self.s, self.eps, lam, self.r)

    def with_eps(self, eps: float) -> "ModelParams":
        return ModelParams(self.dim_N, self.p, self.q, self.s, eps, self.lam, self.r)


@dataclass(frozen=True)
class BoxGeometry:
    """Axis-aligned box: origin + per-axis side lengths."""

    lengths: tuple
    origin: tuple = None

    def __post_init__(self):
        lengths = tuple(float(v) for v in np.atleast_1d(self.lengths))
        if any(v <= 0 for v in lengths):
            raise ValueError("box sides must be positive")
        origin = self.origin
        if origin is None:
            origin = (0.0,) * len(lengths)
        origin = tuple(float(v) for v in np.atleast_1d(origin))
        if len(origin) != len(lengths):
            raise ValueError("origin/lengths dimension mismatch")
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "origin", origin)

    @property
    def dim(self) -> int:
        return len(self.lengths)

    def bounding_box(self):
        lo = np.asarray(self.origin)
        return lo, lo + np.asarray(self.lengths)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        lo, hi = self.bounding_box()
        return np.all((pts > lo) & (pts < hi), axis=-1)

    def diameter(self) -> float:
        return float(np.linalg.norm(self.lengths))

    def measure(self) -> float:
        return float(np.prod(self.lengths))

    def ray_exit(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Distance from each origin to the boundary along each direction.

        origins: (n, d); dirs: (m, d) unit vectors.  Returns (n, m).
        Valid for origins strictly inside the box.
        """
        lo, hi = self.bounding_box()
        with np.errstate(divide="ignore", invalid="ignore"):
            t_lo = (lo - origins[:, None, :]) / dirs[None, :, :]
            t_hi = (hi - origins[:, None, :]) / dirs[None, :, :]
        t_pos = np.where(t_lo > 0, t_lo, np.inf)
        t_pos = np.minimum(t_pos, np.where(t_hi > 0, t_hi, np.inf))
        t_pos = np.where(np.isnan(t_pos), np.inf, t_pos)
        return t_pos.min(axis=-1)


@dataclass(frozen=True)
class BallGeometry:
    """Ball of given radius centered at `center` (default origin)."""

    radius: float
    center: tuple = None
    dim: int = None

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("ball radius must be positive")
        center = self.center
        if center is None:
            if self.dim is None:
                raise ValueError("ball needs a center or an explicit dim")
            center = (0.0,) * self.dim
        center = tuple(float(v) for v in np.atleast_1d(center))
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dim", len(center))

    def bounding_box(self):
        c = np.asarray(self.center)
        return c - self.radius, c + self.radius

    def contains(self, pts: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center)
        return np.sum((pts - c) ** 2, axis=-1) < self.radius**2

    def diameter(self) -> float:
        return 2.0 * self.radius

    def measure(self) -> float:
        d = self.dim
        return math.pi ** (d / 2.0) / math.gamma(d / 2.0 + 1.0) * self.radius**d

    def ray_exit(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Exit distance along rays; origins strictly inside the ball."""
        c = np.asarray(self.center)
        rel = origins - c  # (n, d)
        b = np.einsum("nd,md->nm", rel, dirs)
        disc = b**2 - (np.sum(rel**2, axis=1)[:, None] - self.radius**2)
        return -b + np.sqrt(np.maximum(disc, 0.0))


@dataclass(frozen=True)
class Grid:
    """Uniform midpoint grid over the bounding box of Omega.

    nodes are all cell centers of the covering box; interior_mask flags
    the ones strictly inside Omega.  points/cell_volume carry the
    interior quadrature; neighbors[i, axis, side] is the interior index
    of the adjacent node (-1 when the neighbor is non-interior, i.e. the
    zero-extension region starts there).
    """

    geometry: object
    shape: tuple
    spacing: np.ndarray
    nodes: np.ndarray
    interior_mask: np.ndarray
    points: np.ndarray
    cell_volume: float
    neighbors: np.ndarray
    interior_index: np.ndarray

    @property
    def dim_d(self) -> int:
        return len(self.shape)

    @property
    def n_interior(self) -> int:
        return self.points.shape[0]

    @property
    def h(self) -> float:
        """Scalar mesh width (axes are uniform by construction)."""
        return float(self.spacing[0])

    def interior_volumes(self) -> np.ndarray:
        return np.full(self.n_interior, self.cell_volume)

    def field(self, values) -> "Field":
        return Field(np.asarray(values, dtype=float), self)

    def field_from_function(self, fn) -> "Field":
        return Field(np.asarray(fn(self.points), dtype=float), self)

    def zeros(self) -> "Field":
        return Field(np.zeros(self.n_interior), self)


@dataclass
class Field:
    """Nodal values on the interior nodes of a grid, zero elsewhere."""

    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n_interior,):
            raise ValueError("field length must equal interior node count")

    def copy(self) -> "Field":
        return Field(self.values.copy(), self.grid)

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def __add__(self, other):
        return Field(self.values + other.values, self.grid)

    def __sub__(self, other):
        return Field(self.values - other.values, self.grid)

    def __mul__(self, c):
        return Field(self.values * c, self.grid)

    __rmul__ = __mul__


@dataclass(frozen=True)
class ExteriorTail:
    """Per-node exterior kernel mass T_i = int_{Omega^c} |x_i-y|^{-N-sp} dy."""

    tail: np.ndarray
    truncation_radius: float


def build_grid(geometry, resolution) -> Grid:
    """Mesh the bounding box of `geometry` with `resolution` cells per axis.

    Nodes sit at cell midpoints; a node is interior iff its midpoint lies
    strictly inside the geometry.  Deterministic for identical inputs.
    """
    if isinstance(geometry, dict):
        geometry = _geometry_from_dict(geometry)
    d = geometry.dim
    res = np.atleast_1d(np.asarray(resolution, dtype=int))
    if res.size == 1:
        res = np.full(d, int(res[0]))
    if res.size != d:
        raise ValueError("resolution must be scalar or one entry per axis")
    if np.any(res < 3):
        raise ValueError("need at least 3 cells per axis")

    lo, hi = geometry.bounding_box()
    spacing = (hi - lo) / res
    if not np.allclose(spacing, spacing[0], rtol=1e-12):
        raise ValueError("covering box must mesh with uniform spacing; "
                         "adjust per-axis resolution")
    axes = [lo[k] + (np.arange(res[k]) + 0.5) * spacing[k] for k in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=-1)
    mask = geometry.contains(nodes)
    if not np.any(mask):
        raise ValueError("no interior nodes; raise the resolution")

    interior_index = np.full(nodes.shape[0], -1, dtype=int)
    interior_index[mask] = np.arange(int(mask.sum()))
    points = nodes[mask]
    cell_volume = float(np.prod(spacing))

    # interior adjacency per axis/side on the index lattice
    n_int = points.shape[0]
    neighbors = np.full((n_int, d, 2), -1, dtype=int)
    lattice = interior_index.reshape(tuple(res))
    for axis in range(d):
        for side, shift in ((0, -1), (1, +1)):
            shifted = np.full_like(lattice, -1)
            src = [slice(None)] * d
            dst = [slice(None)] * d
            if shift == -1:
                src[axis] = slice(0, -1)
                dst[axis] = slice(1, None)
            else:
                src[axis] = slice(1, None)
                dst[axis] = slice(0, -1)
            shifted[tuple(dst)] = lattice[tuple(src)]
            flat = shifted.ravel()[mask.ravel()]
            neighbors[:, axis, side] = flat

    return Grid(
        geometry=geometry,
        shape=tuple(int(v) for v in res),
        spacing=spacing.copy(),
        nodes=nodes,
        interior_mask=mask,
        points=points,
        cell_volume=cell_volume,
        neighbors=neighbors,
        interior_index=interior_index,
    )


def _geometry_from_dict(spec: dict):
    kind = spec.get("kind", "box")
    if kind == "box":
        return BoxGeometry(tuple(np.atleast_1d(spec["size"])),
                           spec.get("origin"))
    if kind == "ball":
        center = spec.get("center")
        if center is None:
            center = (0.0,) * int(spec.get("dim", 1))
        return BallGeometry(float(spec["size"] if "size" in spec else spec["radius"]),
                            tuple(np.atleast_1d(center)))
    raise ValueError(f"unknown geometry kind {kind!r}")


def lt_norm(u: Field, t: float) -> float:
    """Discrete L^t norm (sum |u|^t vol)^(1/t); t in (0,1) is the
    quasi-norm used by the interior-floor experiment."""
    if t <= 0:
        raise ValueError("t must be positive")
    vol = u.grid.cell_volume
    return float(np.sum(np.abs(u.values) ** t * vol) ** (1.0 / t))


# ---------------------------------------------------------------------------
# exterior tails


def _unit_directions(d: int, n_polar: int, n_azimuth: int) -> tuple:
    """Quadrature directions and weights on S^{d-1} (midpoint/Gauss product)."""
    if d == 1:
        return np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    if d == 2:
        theta = (np.arange(n_azimuth) + 0.5) * (2.0 * math.pi / n_azimuth)
        dirs = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        w = np.full(n_azimuth, 2.0 * math.pi / n_azimuth)
        return dirs, w
    if d == 3:
        # Gauss-Legendre in cos(polar) x midpoint in azimuth
        mu, wmu = np.polynomial.legendre.leggauss(n_polar)
        phi = (np.arange(n_azimuth) + 0.5) * (2.0 * math.pi / n_azimuth)
        sin_t = np.sqrt(1.0 - mu**2)
        dirs = np.stack(
            [
                np.outer(sin_t, np.cos(phi)).ravel(),
                np.outer(sin_t, np.sin(phi)).ravel(),
                np.outer(mu, np.ones_like(phi)).ravel(),
            ],
            axis=-1,
        )
        w = np.outer(wmu, np.full(n_azimuth, 2.0 * math.pi / n_azimuth)).ravel()
        return dirs, w
    raise ValueError("dim must be 1, 2 or 3")


def exterior_tail(
    grid: Grid,
    params: ModelParams,
    truncation_radius: Optional[float] = None,
    method: str = "ray",
    n_polar: int = 48,
    n_azimuth: int = 512,
    quad_refine: int = 2,
) -> ExteriorTail:
    """Exterior kernel mass per interior node.

    method="ray" integrates exactly in the radial variable and by
    quadrature over directions (exact in 1-D; Omega must be convex,
    which boxes and balls are).  method="annulus" uses midpoint
    quadrature over Omega^c within a ball of `truncation_radius` around
    each node plus the closed-form far tail
    omega_{N-1} * R^{-sp} / (sp); it exists as a cross-check and for
    truncation studies.
    """
    sp = params.sp
    if sp <= 0:
        raise ValueError("need s*p > 0")
    diam = grid.geometry.diameter()
    if truncation_radius is None:
        truncation_radius = 2.0 * diam
    if truncation_radius < 2.0 * diam - 1e-12:
        raise ValueError("truncation radius must cover Omega with a diameter margin")

    if method == "ray":
        tail = _tail_ray(grid, params, n_polar, n_azimuth)
    elif method == "annulus":
        tail = _tail_annulus(grid, params, truncation_radius, quad_refine)
    else:
        raise ValueError(f"unknown tail method {method!r}")
    return ExteriorTail(tail=tail, truncation_radius=float(truncation_radius))


def _tail_ray(grid: Grid, params: ModelParams, n_polar: int, n_azimuth: int):
    # T(x) = int_{S^{d-1}} rho_exit(x, theta)^{-sp} / sp dtheta for convex Omega
    sp = params.sp
    dirs, w = _unit_directions(grid.dim_d, n_polar, n_azimuth)
    rho = grid.geometry.ray_exit(grid.points, dirs)  # (n, m)
    return (rho ** (-sp) @ w) / sp


def _tail_annulus(grid: Grid, params: ModelParams, radius: float, refine: int):
    """Midpoint quadrature over Omega^c within B(x_i, radius) + analytic rest."""
    sp = params.sp
    beta = params.dim_N + sp
    geom = grid.geometry
    d = grid.dim_d
    h = grid.spacing / refine
    lo, hi = geom.bounding_box()
    qlo = lo - radius
    qhi = hi + radius
    counts = np.maximum(np.ceil((qhi - qlo) / h).astype(int), 1)
    axes = [qlo[k] + (np.arange(counts[k]) + 0.5) * h[k] for k in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    qpts = np.stack([m.ravel() for m in mesh], axis=-1)
    qpts = qpts[~geom.contains(qpts)]
    qvol = float(np.prod(h))

    far = sphere_surface_area(params.dim_N) * radius ** (-sp) / sp
    tail = np.empty(grid.n_interior)
    block = max(1, int(2e7 // max(qpts.shape[0], 1)))
    for start in range(0, grid.n_interior, block):
        pts = grid.points[start : start + block]
        d2 = np.sum((pts[:, None, :] - qpts[None, :, :]) ** 2, axis=-1)
        dist = np.sqrt(d2)
        inside = dist <= radius
        contrib = np.where(inside, dist ** (-beta), 0.0).sum(axis=1) * qvol
        tail[start : start + pts.shape[0]] = contrib + far
    return tail
