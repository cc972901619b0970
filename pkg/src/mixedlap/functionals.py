"""Energy functionals, residuals, thresholds and elementary-inequality oracles.

The main energy is

    I(u) = (1/p) rho_eps(u)^p - (lam/q) ||u_+||_q^q - (1/r) ||u_+||_r^r,

with the sublinear variant J (critical term dropped), the inner-problem
coupling K against a frozen positive field, and the truncated variant
I_hat whose nonlinearity is clamped into a sub/supersolution corridor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .lattice import Field, ModelParams
from .operators import (
    KernelMatrix,
    apply_operator,
    gagliardo_p,
    local_energy_p,
)

__all__ = [
    "EnergyBreakdown",
    "FiberingProfile",
    "Thresholds",
    "f_lambda",
    "clamped_primitive",
    "energy",
    "residual",
    "residual_dual_norm",
    "fibering_profile",
    "thresholds",
    "apq_condition",
    "moser_truncation",
    "inequality_suite",
    "find_beta0",
    "embedding_constants",
]


@dataclass(frozen=True)
class EnergyBreakdown:
    local_term: float
    nonlocal_term: float
    concave_term: float
    critical_term: float

    @property
    def total(self) -> float:
        return self.local_term + self.nonlocal_term - self.concave_term - self.critical_term


@dataclass(frozen=True)
class FiberingProfile:
    samples: np.ndarray  # (n, 2) columns t, g(t)
    t1: Optional[float]
    t2: Optional[float]
    classification: str  # "zero" | "one" | "two"
    max_level_nonpositive: bool  # two critical points but g(t2) <= 0


@dataclass(frozen=True)
class Thresholds:
    lambda_star: float
    r0: float
    delta0: float
    lambda_star_star: float
    lambda_sharp: float
    apq_ok: bool


def f_lambda(t, params: ModelParams, truncation=None):
    """lam |t|^{q-2} t + |t|^{r-2} t, optionally clamped per node.

    truncation = (lower: Field, upper: Field, node_index) evaluates the
    truncated nonlinearity at that node by clamping t into
    [lower_i, upper_i] first.
    """
    t = np.asarray(t, dtype=float)
    if truncation is not None:
        lower, upper, idx = truncation
        lo = lower.values[idx]
        hi = upper.values[idx]
        if np.any(lo > hi):
            raise ValueError("truncation needs lower <= upper")
        t = np.clip(t, lo, hi)
    q, r, lam = params.q, params.r, params.lam
    out = lam * np.sign(t) * np.abs(t) ** (q - 1.0) + np.sign(t) * np.abs(t) ** (r - 1.0)
    return out if out.ndim else float(out)


def _clamped_power_primitive(t: np.ndarray, a: np.ndarray, b: np.ndarray, m: float):
    """int_0^t clamp(tau, a, b)^{m-1} dtau for 0 < a <= b, vectorized."""
    below = a ** (m - 1.0) * t
    mid = a**m + (np.maximum(t, a) ** m - a**m) / m
    top = a**m + (b**m - a**m) / m + b ** (m - 1.0) * (t - b)
    out = np.where(t <= a, below, np.where(t <= b, mid, top))
    return out


def clamped_primitive(t: np.ndarray, lower: np.ndarray, upper: np.ndarray,
                      params: ModelParams):
    """(concave part, critical part) of int_0^t f_lambda(clamp(tau)) dtau."""
    lower = np.asarray(lower, float)
    upper = np.asarray(upper, float)
    if np.any(lower <= 0) or np.any(lower > upper):
        raise ValueError("need 0 < lower <= upper")
    conc = params.lam * _clamped_power_primitive(t, lower, upper, params.q)
    crit = _clamped_power_primitive(t, lower, upper, params.r)
    return conc, crit


def energy(
    u: Field,
    kernel: KernelMatrix,
    params: ModelParams,
    mode: str = "I",
    v: Optional[Field] = None,
    lower: Optional[Field] = None,
    upper: Optional[Field] = None,
) -> EnergyBreakdown:
    """Energy breakdown of u in mode 'I', 'J', 'K' or 'I_hat'.

    Mode K requires the frozen positive field v; mode I_hat the clamp
    corridor (lower, upper).  Both nonlinear terms of mode I use the
    positive part u_+.
    """
    p = params.p
    vol = u.grid.cell_volume
    loc = local_energy_p(u, params) / p
    nl = params.eps * gagliardo_p(u, kernel, params) / p
    up = np.maximum(u.values, 0.0)

    if mode == "I":
        conc = params.lam / params.q * float(np.sum(up**params.q) * vol)
        crit = 1.0 / params.r * float(np.sum(up**params.r) * vol)
    elif mode == "J":
        conc = params.lam / params.q * float(np.sum(up**params.q) * vol)
        crit = 0.0
    elif mode == "K":
        if v is None:
            raise ValueError("mode K needs the frozen field v")
        if np.any(v.values <= 0):
            raise ValueError("mode K needs v > 0 node-wise")
        conc = float(np.sum(f_lambda(v.values, params) * up) * vol)
        crit = 0.0
    elif mode == "I_hat":
        if lower is None or upper is None:
            raise ValueError("mode I_hat needs the clamp corridor")
        c, r_ = clamped_primitive(u.values, lower.values, upper.values, params)
        conc = float(np.sum(c) * vol)
        crit = float(np.sum(r_) * vol)
    else:
        raise ValueError(f"unknown energy mode {mode!r}")
    return EnergyBreakdown(loc, nl, conc, crit)


def residual(u: Field, kernel: KernelMatrix, params: ModelParams) -> Field:
    """Nodal gradient of the mode-I energy."""
    vol = u.grid.cell_volume
    up = np.maximum(u.values, 0.0)
    rhs = vol * (params.lam * up ** (params.q - 1.0) + up ** (params.r - 1.0))
    mixed = apply_operator(u, kernel, params, "mixed")
    return Field(mixed.values - rhs, u.grid)


def residual_dual_norm(u: Field, kernel: KernelMatrix, params: ModelParams):
    """(residual field, volume-normalized euclidean norm).

    The scalar is the declared discrete proxy for the dual norm: the
    L2 norm of the strong-form residual density.
    """
    res = residual(u, kernel, params)
    vol = u.grid.cell_volume
    return res, float(np.linalg.norm(res.values) / math.sqrt(vol))


# ---------------------------------------------------------------------------
# fibering map


def fibering_profile(
    u: Field,
    kernel: KernelMatrix,
    params: ModelParams,
    t_range=(1e-4, 1e2),
    n_samples: int = 512,
) -> FiberingProfile:
    """Profile of g(t) = I(t u / rho_eps(u)) along the ray through u.

    Critical points located by sign changes of the closed-form g' on a
    log grid, refined by bisection to 1e-10 relative; sign flips below a
    1e-12 magnitude floor are ignored.
    """
    from .operators import rho_eps_p

    rho_p = rho_eps_p(u, kernel, params)
    if rho_p <= 0:
        raise ValueError("fibering profile needs u != 0")
    p, q, r, lam = params.p, params.q, params.r, params.lam
    rho = rho_p ** (1.0 / p)
    vol = u.grid.cell_volume
    up = np.maximum(u.values, 0.0)
    A = float(np.sum(up**r) * vol) / rho**r
    B = float(np.sum(up**q) * vol) / rho**q

    def g(t):
        return t**p / p - A * t**r / r - lam * B * t**q / q

    def dg(t):
        return t ** (p - 1.0) - A * t ** (r - 1.0) - lam * B * t ** (q - 1.0)

    ts = np.geomspace(t_range[0], t_range[1], n_samples)
    gs = g(ts)
    ds = dg(ts)
    floor = 1e-12 * max(1.0, np.max(np.abs(ds)))
    sig = np.where(np.abs(ds) < floor, 0.0, np.sign(ds))

    crossings = []
    last_sign = 0.0
    last_idx = 0
    for i, sgn in enumerate(sig):
        if sgn == 0.0:
            continue
        if last_sign != 0.0 and sgn != last_sign:
            crossings.append((ts[last_idx], ts[i], last_sign))
        last_sign, last_idx = sgn, i

    roots = []
    for a, b, sign_before in crossings:
        lo, hi = a, b
        while (hi - lo) > 1e-10 * hi:
            midt = math.sqrt(lo * hi)
            if np.sign(dg(midt)) == sign_before:
                lo = midt
            else:
                hi = midt
        roots.append((0.5 * (lo + hi), sign_before))

    t1 = t2 = None
    for root, sign_before in roots:
        if sign_before < 0:  # - to +: local minimum
            t1 = root
        else:  # + to -: local maximum
            t2 = root
    count = sum(1 for _ in roots)
    classification = {0: "zero", 1: "one"}.get(count, "two")
    flagged = bool(count >= 2 and t2 is not None and g(t2) <= 0.0)
    return FiberingProfile(
        samples=np.stack([ts, gs], axis=-1),
        t1=t1,
        t2=t2,
        classification=classification,
        max_level_nonpositive=flagged,
    )


# ---------------------------------------------------------------------------
# thresholds


def apq_condition(p: float, q: float, dim_N: int) -> bool:
    """Exponent window for the two-solution energy estimate."""
    if 2.0 <= p < 3.0:
        return 1.0 < q < p
    if p >= 3.0:
        p_star = dim_N * p / (dim_N - p)
        return (p_star - 2.0 / (p - 1.0)) < q < p
    return False


def thresholds(
    params: ModelParams,
    S0_estimate: float,
    omega_measure: float,
    C1: float,
    C2: float,
) -> Thresholds:
    """lambda thresholds from the measured embedding constants.

    C1 bounds (1/r)||u_+||_r^r <= C1 rho_eps^r and C2 bounds
    (1/q)||u_+||_q^q <= C2 rho_eps^q on the discrete space.
    """
    if min(S0_estimate, omega_measure, C1, C2) <= 0:
        raise ValueError("thresholds need positive constants")
    p, q, r, N = params.p, params.q, params.r, params.dim_N
    if not q < p < r:
        raise ValueError("need q < p < r")

    lam_star = (
        (S0_estimate ** (N / p) / (N * omega_measure)) ** ((r - q) / r)
        * (1.0 / p - 1.0 / r) ** (q / r)
    ) / (1.0 / q - 1.0 / p)

    # shell lower bound g(rho) = rho^p / p - C1 rho^r
    def shell(rho):
        return rho**p / p - C1 * rho**r

    rho_peak = (1.0 / (r * C1)) ** (1.0 / (r - p))
    peak = shell(rho_peak)
    delta0 = peak / 4.0
    rho_zero = (p * C1) ** (-1.0 / (r - p))
    lo, hi = rho_peak, rho_zero
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if shell(mid) >= 2.0 * delta0:
            lo = mid
        else:
            hi = mid
    r0 = lo
    lam_star_star = delta0 / (C2 * r0**q)
    lam_sharp = min(lam_star, lam_star_star)
    return Thresholds(
        lambda_star=float(lam_star),
        r0=float(r0),
        delta0=float(delta0),
        lambda_star_star=float(lam_star_star),
        lambda_sharp=float(lam_sharp),
        apq_ok=apq_condition(p, q, N),
    )


# ---------------------------------------------------------------------------
# Moser truncation


def moser_truncation(t, beta: float, T: float):
    """Three-branch power/linear truncation and its a.e. derivative.

    phi(t) = |t|^beta on [-T, T], extended linearly with matching slope
    beta T^{beta-1} outside; phi <= |t|^beta everywhere.
    """
    if not (beta > 1.0 and T > 1.0):
        raise ValueError("need beta > 1 and T > 1")
    t = np.asarray(t, dtype=float)
    phi_mid = np.abs(t) ** beta
    dphi_mid = beta * np.sign(t) * np.abs(t) ** (beta - 1.0)
    slope = beta * T ** (beta - 1.0)
    phi_hi = slope * (t - T) + T**beta
    phi_lo = -slope * (t + T) + T**beta
    phi = np.where(t >= T, phi_hi, np.where(t <= -T, phi_lo, phi_mid))
    dphi = np.where(t >= T, slope, np.where(t <= -T, -slope, dphi_mid))
    if phi.ndim:
        return phi, dphi
    return float(phi), float(dphi)


# ---------------------------------------------------------------------------
# elementary inequality oracles


def _ineq_monotone(rng, n, t, dim):
    """min over samples of LHS / ((|xi|+|eta|)^{t-2} |xi-eta|^2)."""
    scales = np.exp(rng.uniform(math.log(1e-3), math.log(1e3), size=(n, 2)))
    xi = rng.standard_normal((n, dim)) * scales[:, :1]
    eta = rng.standard_normal((n, dim)) * scales[:, 1:]
    nxi = np.linalg.norm(xi, axis=1)
    neta = np.linalg.norm(eta, axis=1)
    gxi = nxi ** (t - 2.0)
    geta = neta ** (t - 2.0)
    lhs = np.einsum("nd,nd->n", gxi[:, None] * xi - geta[:, None] * eta, xi - eta)
    rhs = (nxi + neta) ** (t - 2.0) * np.sum((xi - eta) ** 2, axis=1)
    ok = rhs > 1e-300
    return float(np.min(lhs[ok] / rhs[ok]))


def _ineq_crossterm(rng, n, t):
    """max over samples of |(a+b)^t - a^t - b^t - t ab (a^{t-2}+b^{t-2})| / RHS."""
    a = np.ones(n)
    b = np.exp(rng.uniform(math.log(1e-6), 0.0, size=n))  # b <= a
    lhs = np.abs((a + b) ** t - a**t - b**t - t * a * b * (a ** (t - 2.0) + b ** (t - 2.0)))
    rhs = a * b ** (t - 1.0)
    return float(np.max(lhs / rhs))


def _ineq_binomial_lower(rng, n, t, with_power_term):
    """worst margin of (1+a)^t >= 1 + a^t + t a (+ t a^{t-1})."""
    a = np.exp(rng.uniform(math.log(1e-6), math.log(1e6), size=n))
    rhs = 1.0 + a**t + t * a
    if with_power_term:
        rhs = rhs + t * a ** (t - 1.0)
    lhs = (1.0 + a) ** t
    margin = (lhs - rhs) / np.maximum(lhs, 1.0)
    return float(np.min(margin))


def _ineq_cosine(rng, n, t, denom):
    """max over samples of ((1+a^2+2a cos)^{t/2} - 1 - a^t - t a cos)/denom(a)."""
    a = np.exp(rng.uniform(math.log(1e-4), math.log(1e4), size=n))
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    c = np.cos(theta)
    lhs = (1.0 + a**2 + 2.0 * a * c) ** (t / 2.0) - 1.0 - a**t - t * a * c
    ratio = lhs / denom(a)
    return float(max(np.max(ratio), 0.0))


def inequality_suite(sample_count: int, params: ModelParams, seed: int = 0):
    """Fit the constants of the six elementary inequalities on seeded samples.

    Returns a list of row dicts (name, t, constant at n and 2n samples,
    drift, passed).  A row passes when the fitted constant is finite,
    has the right sign, and drifts < 5% under sample doubling; the two
    exact lower bounds pass when no sampled violation exceeds roundoff.
    """
    if sample_count < 1000:
        raise ValueError("need at least 1000 samples")
    p, q, r = params.p, params.q, params.r
    dim = min(params.dim_N, 3)
    rows = []

    def record(name, t, fit, kind):
        c1 = fit(np.random.default_rng(seed), sample_count)
        c2 = fit(np.random.default_rng(seed + 1), 2 * sample_count)
        if kind == "min-positive":
            drift = abs(c2 - c1) / max(abs(c1), 1e-30)
            passed = c1 > 0 and c2 > 0 and drift < 0.05
        elif kind == "max-finite":
            drift = abs(c2 - c1) / max(abs(c1), 1e-30)
            passed = math.isfinite(c1) and math.isfinite(c2) and drift < 0.05
        else:  # nonnegative margin
            drift = 0.0
            passed = c1 >= -1e-12 and c2 >= -1e-12
        rows.append(
            dict(name=name, t=t, constant=c1, constant_doubled=c2,
                 drift=drift, passed=bool(passed))
        )

    record("monotone-difference", p,
           lambda rng, n: _ineq_monotone(rng, n, p, dim), "min-positive")

    t_cross = r if 1.0 <= r <= 3.0 else 2.5
    record("cross-term-bound", t_cross,
           lambda rng, n: _ineq_crossterm(rng, n, t_cross), "max-finite")

    t3 = max(3.0, r)
    record("binomial-lower-4term", t3,
           lambda rng, n: _ineq_binomial_lower(rng, n, t3, True), "margin")

    t4 = max(2.0, p)
    record("binomial-lower-3term", t4,
           lambda rng, n: _ineq_binomial_lower(rng, n, t4, False), "margin")

    t5 = p if 2.0 <= p < 3.0 else 2.5
    zeta1 = 0.5 * ((t5 - 1.0) + 2.0)
    record("cosine-bound-subcubic", t5,
           lambda rng, n: _ineq_cosine(rng, n, t5, lambda a: a**zeta1),
           "max-finite")

    t6 = p if p >= 3.0 else 3.5
    record("cosine-bound-supercubic", t6,
           lambda rng, n: _ineq_cosine(rng, n, t6, lambda a: a**2 + a ** (t6 - 1.0)),
           "max-finite")

    return rows


# ---------------------------------------------------------------------------
# comparison gap beta0


def find_beta0(lam: float, lam_prime: float, M: float, params: ModelParams,
               n_grid: int = 10_000) -> float:
    """Largest beta0 with f_lam(beta0 t) <= f_lam'(t) on (0, M].

    Verified on a log grid; bisection on beta0.  Requires lam < lam'.
    """
    if not 0.0 < lam < lam_prime:
        raise ValueError("need 0 < lam < lam'")
    if M <= 0:
        raise ValueError("need M > 0")
    q, r = params.q, params.r
    ts = np.geomspace(M * 1e-8, M, n_grid)

    def holds(beta):
        lhs = lam * (beta * ts) ** (q - 1.0) + (beta * ts) ** (r - 1.0)
        rhs = lam_prime * ts ** (q - 1.0) + ts ** (r - 1.0)
        return bool(np.all(lhs <= rhs * (1.0 + 1e-12)))

    lo = 1.0
    hi = (lam_prime / lam) ** (1.0 / (q - 1.0))
    if not holds(lo):
        raise ArithmeticError("even beta0 = 1 fails; inconsistent inputs")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if holds(mid):
            lo = mid
        else:
            hi = mid
    return lo


# ---------------------------------------------------------------------------
# embedding constant scans


def embedding_constants(
    grid,
    kernel: KernelMatrix,
    params: ModelParams,
    n_samples: int = 48,
    seed: int = 0,
    extra_fields=(),
    safety: float = 1.05,
):
    """Estimate (C1, C2) with C_m = sup (1/m)||u_+||_m^m / rho_eps^m.

    The scan covers single-node spikes (the discrete extremizers of the
    critical quotient, evaluated in closed form), seeded random fields,
    smooth bumps and any caller-provided candidates; the result is
    inflated by `safety`.
    """
    from .operators import rho_eps_p

    p, q, r = params.p, params.q, params.r
    vol = grid.cell_volume
    h = grid.h

    best_c1 = 0.0
    best_c2 = 0.0

    # spikes, all nodes in closed form
    nb_int = (grid.neighbors >= 0).sum(axis=(1, 2))
    n_faces = 2 * grid.dim_d
    bd_faces = n_faces - nb_int
    loc_p = vol * (nb_int * (1.0 / h) ** p + 0.5 * bd_faces * (2.0 / h) ** p)
    gag_p = vol * (kernel.row_sums + 2.0 * kernel.tails)
    rho_pow = loc_p + params.eps * gag_p  # rho_eps(spike_i)^p
    c1_spikes = (vol / r) / rho_pow ** (r / p)
    c2_spikes = (vol / q) / rho_pow ** (q / p)
    best_c1 = max(best_c1, float(np.max(c1_spikes)))
    best_c2 = max(best_c2, float(np.max(c2_spikes)))

    rng = np.random.default_rng(seed)
    candidates = []
    for _ in range(n_samples):
        candidates.append(rng.standard_normal(grid.n_interior))
        candidates.append(np.abs(rng.standard_normal(grid.n_interior)))
    # smooth radial bumps at a few anchors
    lo, hi = grid.geometry.bounding_box()
    span = float(np.min(hi - lo))
    for frac in (0.15, 0.3, 0.5):
        center = grid.points[rng.integers(0, grid.n_interior)]
        d2 = np.sum((grid.points - center) ** 2, axis=1)
        candidates.append(np.exp(-d2 / (frac * span) ** 2))
    for f in extra_fields:
        candidates.append(np.asarray(f.values if isinstance(f, Field) else f, float))

    for vals in candidates:
        u = Field(vals, grid)
        rho_pow = rho_eps_p(u, kernel, params)
        if rho_pow <= 0:
            continue
        up = np.maximum(vals, 0.0)
        c1 = (np.sum(up**r) * vol / r) / rho_pow ** (r / p)
        c2 = (np.sum(up**q) * vol / q) / rho_pow ** (q / p)
        best_c1 = max(best_c1, float(c1))
        best_c2 = max(best_c2, float(c2))

    return safety * best_c1, safety * best_c2
