"""Heat kernels on [0,1]^d and numerical checks of their discretization rates.

Four kernel kinds share one spectral shape sum_k w_k(t) phi_k(x) psi_k(y):

    exact       w = exp(-sum_j k_j^2 pi^2 t),  phi = psi = eigenfunctions
    space_disc  w = exp(lambda_k^n t)
    implicit    w = (1 - (T/m) lambda_k^n)^(-floor(mt/T))
    explicit    w = (1 + (T/m) lambda_k^n)^(floor(mt/T))

Discrete kinds use the piecewise-linear interpolated eigenvector in x and
the eigenvector at the cell-owning lattice point in y, so the y-slice is
piecewise constant on the noise cells.  The exact kernel switches to the
method-of-images form for small t, where the spectral series needs too
many terms; both forms agree to well below the truncation tolerance.

Kernel differences are measured in the Riesz-weighted squared norm
|phi|^2 = int int phi(y) |y-z|^(-alpha) phi(z) dy dz, evaluated exactly
on piecewise-constant representatives via the same cell integrals the
noise covariance uses.  rate_check_space and rate_check_time integrate
those distances over time on mesh ladders and fit log-log slopes.
"""

import csv
import math

import numpy as np
from scipy.linalg import toeplitz
from scipy.special import erf, roots_legendre
from scipy.stats import linregress

from .lattice import DIRICHLET, GridSpec
from .noise import _gamma_1d
from .operators import spectral_data

EXACT = "exact"
SPACE_DISC = "space_disc"
IMPLICIT = "implicit"
EXPLICIT = "explicit"

_KINDS = (EXACT, SPACE_DISC, IMPLICIT, EXPLICIT)

# below this time the image series (|k| <= _IMAGE_RANGE) beats the spectral
# series; at the crossover both are accurate to ~1e-15
_IMAGES_T_MAX = 0.1
_IMAGE_RANGE = 4
_TAIL_TOL = 1e-12

DEFAULT_SPACE_LADDER = (8, 16, 32, 64)
# the m^(alpha/2 - 1) envelope is sharp only while m << n^2, where modes
# above sqrt(m) keep an order-one weight error; past m ~ n^2 every mode is
# resolved and the distance drops at the faster smooth rate m^(-2)
DEFAULT_TIME_LADDER = (16, 32, 64, 128, 256)
DEFAULT_TIME_N = 64


class KernelSpec:
    """Kernel kind plus the grid it discretizes.

    k_max optionally caps the exact kernel's per-axis series; discrete
    kinds always use the full finite spectrum.
    """

    def __init__(self, kind, grid, k_max=None):
        if kind not in _KINDS:
            raise ValueError("kernel kind must be one of %s" % (_KINDS,))
        if k_max is not None:
            if kind != EXACT:
                raise ValueError("k_max applies to the exact kernel only")
            if int(k_max) < 1:
                raise ValueError("k_max must be positive")
            k_max = int(k_max)
        self.kind = kind
        self.grid = grid
        self.k_max = k_max


# --- per-axis building blocks ---------------------------------------------


def _axis_tables(grid):
    """(x knot table, y cell table, eigenvalues) for one axis.

    x table has one column per interpolation knot; y table one column per
    noise cell (the eigenvector at the owning lattice point).
    """
    spec = spectral_data(grid)
    n = grid.n
    if grid.bc == DIRICHLET:
        # knots 0..n with zero boundary columns
        xtab = np.zeros((n - 1, n + 1))
        xtab[:, 1:n] = spec.axis_vectors
        ytab = xtab  # cell k = [k/n,(k+1)/n) is owned by the point k/n
    else:
        xtab = spec.axis_vectors  # knots at the n cell centers
        ytab = spec.axis_vectors
    return xtab, ytab, spec.axis_eigenvalues


def _axis_phi_x(x, grid, xtab):
    """Piecewise-linear eigenfunction values at one coordinate, (J,)."""
    n = grid.n
    if grid.bc == DIRICHLET:
        i = min(int(math.floor(n * x)), n - 1)
        frac = n * x - i
        return (1.0 - frac) * xtab[:, i] + frac * xtab[:, i + 1]
    # Neumann knots sit at cell centers; extend as a constant past the ends
    u = n * x - 0.5
    i = min(max(int(math.floor(u)), 0), n - 2)
    frac = min(max(u - i, 0.0), 1.0)
    return (1.0 - frac) * xtab[:, i] + frac * xtab[:, i + 1]


def _axis_phi_y(y, grid, ytab):
    """Eigenfunction at the lattice point owning y's cell, (J,)."""
    n = grid.n
    if grid.bc == DIRICHLET:
        k = min(int(math.floor(n * y)), n)
        return ytab[:, k]
    c = min(int(math.floor(n * y)), n - 1)
    return ytab[:, c]


def _exact_axis(t, x, y, bc, k_max):
    """One-axis exact kernel value, images for small t, series otherwise."""
    sign = -1.0 if bc == DIRICHLET else 1.0
    if k_max is None and t <= _IMAGES_T_MAX:
        k = np.arange(-_IMAGE_RANGE, _IMAGE_RANGE + 1)
        norm = 1.0 / math.sqrt(4.0 * math.pi * t)
        direct = np.exp(-((x - y - 2.0 * k) ** 2) / (4.0 * t))
        mirror = np.exp(-((x + y - 2.0 * k) ** 2) / (4.0 * t))
        return norm * float(np.sum(direct + sign * mirror))
    K = k_max if k_max is not None else _series_length(t)
    j = np.arange(1, K + 1)
    w = np.exp(-(j * np.pi) ** 2 * t)
    if bc == DIRICHLET:
        return float(2.0 * np.sum(w * np.sin(j * np.pi * x)
                                  * np.sin(j * np.pi * y)))
    return float(1.0 + 2.0 * np.sum(w * np.cos(j * np.pi * x)
                                    * np.cos(j * np.pi * y)))


def _series_length(t):
    """Terms needed so the spectral tail is below _TAIL_TOL."""
    K = 1
    while math.exp(-((K + 1) * math.pi) ** 2 * t) * (K + 10) > _TAIL_TOL:
        K += 1
        if K > 100000:
            raise ValueError("series truncation failed for t=%g" % t)
    return K


def _kron_chain(factors):
    """Flatten per-axis vectors into lattice flat order (axis 1 fastest)."""
    total = factors[0]
    for f in factors[1:]:
        total = (total[None, :] * f[:, None]).reshape(-1)
    return total


def _discrete_weights(kind, grid, eigvals, t):
    if kind == SPACE_DISC:
        return np.exp(eigvals * t)
    i = int(math.floor(grid.m * t / grid.T))
    if kind == IMPLICIT:
        return (1.0 - grid.dt * eigvals) ** (-i)
    return (1.0 + grid.dt * eigvals) ** i


def eval_kernel(spec, t, x, y):
    """Kernel value at one (t, x, y); x and y are points of [0,1]^d."""
    grid = spec.grid
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != (grid.d,) or y.shape != (grid.d,):
        raise ValueError("x and y must have %d coordinates" % grid.d)
    if np.any((x < 0) | (x > 1)) or np.any((y < 0) | (y > 1)):
        raise ValueError("x and y must lie in the unit cube")
    if spec.kind == EXACT:
        if t <= 0.0:
            raise ValueError("exact kernel needs t > 0")
        out = 1.0
        for j in range(grid.d):
            out *= _exact_axis(t, x[j], y[j], grid.bc, spec.k_max)
        return out
    if t < 0.0:
        raise ValueError("discrete kernels need t >= 0")
    xtab, ytab, lam = _axis_tables(grid)
    factors = [_axis_phi_x(x[j], grid, xtab) * _axis_phi_y(y[j], grid, ytab)
               for j in range(grid.d)]
    flat = _kron_chain(factors)
    spect = spectral_data(grid)
    w = _discrete_weights(spec.kind, grid, spect.eigenvalues, t)
    return float(np.dot(w, flat))


# --- Riesz-weighted squared norm -------------------------------------------


def _gamma_matrix_1d(N, alpha):
    """Cell-pair integrals of |y-z|^(-alpha) on the uniform N-partition."""
    h = 1.0 / N
    col = _gamma_1d(np.arange(N) * h, h, alpha)
    return toeplitz(col)


def h_alpha_norm(sample, alpha, absolute=False):
    """Squared Riesz-weighted norm of a piecewise-constant function.

    sample holds cell values on the uniform partition of [0,1]^d into
    N^d cells (one array axis per dimension).  The bilinear form (no
    absolute values) is the default; absolute=True applies |.| to the
    sample first, matching the normed variant for sign-changing input.
    """
    sample = np.asarray(sample, dtype=float)
    d = sample.ndim
    if not 0.0 < alpha < min(2.0, d):
        raise ValueError("alpha must lie in (0, min(2, d))")
    if absolute:
        sample = np.abs(sample)
    if d == 1:
        v = sample
        return float(v @ _gamma_matrix_1d(v.size, alpha) @ v)
    N = sample.shape[0]
    if sample.shape != (N,) * d:
        raise ValueError("sample must be a cube of cell values")
    if sample.size > 4096:
        raise ValueError("d >= 2 norm limited to 4096 cells")
    from .noise import _gamma_nd
    cells = np.stack(np.meshgrid(*(np.arange(N),) * d, indexing="ij"),
                     axis=-1).reshape(-1, d)
    v = sample.reshape(-1)
    cache = {}
    total = 0.0
    for a in range(v.size):
        if v[a] == 0.0:
            continue
        for b in range(v.size):
            if v[b] == 0.0:
                continue
            gaps = tuple(sorted(np.abs(cells[a] - cells[b]).tolist()))
            g = cache.get(gaps)
            if g is None:
                g = _gamma_nd(np.array(gaps), 1.0 / N, alpha)
                cache[gaps] = g
            total += v[a] * v[b] * g
    return float(total)


# --- exact-kernel cell averages (d = 1, Dirichlet) --------------------------


def _exact_avg_rows(t, xs, N):
    """(len(xs), N) cell averages of G_1(t, x, .) on the N-partition.

    Exact via the antiderivative of the image series for small t and via
    termwise sine integration otherwise; midpoint sampling would misplace
    the kernel mass for t << 1/N^2 and is deliberately avoided.
    """
    xs = np.asarray(xs, dtype=float)
    edges = np.arange(N + 1) / N
    h = 1.0 / N
    if t <= _IMAGES_T_MAX:
        s = 2.0 * math.sqrt(t)
        out = np.zeros((xs.size, N))
        for k in range(-_IMAGE_RANGE, _IMAGE_RANGE + 1):
            direct = 0.5 * erf((xs[:, None] - edges[None, :] - 2.0 * k) / s)
            mirror = 0.5 * erf((xs[:, None] + edges[None, :] - 2.0 * k) / s)
            out += direct[:, :-1] - direct[:, 1:]
            out -= mirror[:, 1:] - mirror[:, :-1]
        return out / h
    K = _series_length(t)
    j = np.arange(1, K + 1)
    w = np.exp(-(j * np.pi) ** 2 * t)
    sin_x = np.sin(np.outer(xs, j * np.pi))
    cos_e = np.cos(np.outer(j * np.pi, edges))
    cell = (cos_e[:, :-1] - cos_e[:, 1:]) / (j[:, None] * np.pi * h)
    return 2.0 * (sin_x * w[None, :]) @ cell


# --- rate checks -------------------------------------------------------------


class RateCheckResult:
    """Mesh ladder, per-mesh squared-distance integrals, fitted slope."""

    def __init__(self, kind, alpha, meshes, values, target_slope):
        self.kind = kind
        self.alpha = float(alpha)
        self.meshes = [int(v) for v in meshes]
        self.values = [float(v) for v in values]
        self.target_slope = float(target_slope)
        fit = linregress(np.log(np.asarray(self.meshes, dtype=float)),
                         np.log(np.asarray(self.values, dtype=float)))
        self.slope = float(fit.slope)

    def rows(self):
        return [(self.kind, self.alpha, mesh, value, self.slope,
                 self.target_slope)
                for mesh, value in zip(self.meshes, self.values)]


def save_rate_csv(results, path):
    """One row per ladder entry: kind,alpha,mesh,integral_value,slope,target_slope."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "alpha", "mesh", "integral_value", "slope",
                    "target_slope"])
        for res in results:
            for row in res.rows():
                w.writerow([row[0], repr(row[1]), row[2], repr(row[3]),
                            repr(row[4]), repr(row[5])])


_PANEL_NODES, _PANEL_WEIGHTS = roots_legendre(8)


def _geometric_time_integral(f, t_start=1e-9, t_stop_min=1.0, t_hard=64.0):
    """Integrate f over (0, inf) on doubling panels with 8-point Gauss.

    Stops once past t_stop_min when a panel adds less than 1e-12 of the
    running total; f decays exponentially so the tail is negligible, and
    the portion below t_start is bounded by the integrable t^(-alpha/2)
    blowup over a width-1e-9 interval.
    """
    total = 0.0
    lo = t_start
    while lo < t_hard:
        hi = 2.0 * lo
        mid = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        panel = 0.0
        for node, weight in zip(_PANEL_NODES, _PANEL_WEIGHTS):
            panel += weight * f(mid + half * node)
        panel *= half
        total += panel
        if lo >= t_stop_min and panel < 1e-12 * total:
            break
        lo = hi
    return total


def _space_distance_integral(alpha, n, x_factor=8, cell_factor=4):
    """Time integral of max_x |G(t,x,.) - G^n(t,x,.)|^2_(alpha), d=1."""
    grid = GridSpec(1, n, 1)
    xtab, ytab, lam = _axis_tables(grid)
    N = cell_factor * n
    xs = np.arange(x_factor * n + 1) / (x_factor * n)
    # x-side interpolation weights for the whole x grid at once
    i = np.minimum((n * xs).astype(int), n - 1)
    frac = n * xs - i
    phi_x = (1.0 - frac[:, None]) * xtab[:, i].T + frac[:, None] * xtab[:, i + 1].T
    # y-side values on fine cells: constant over each n-cell
    owner = np.arange(N) * n // N
    phi_y = ytab[:, owner].T  # (N, J)
    gamma = _gamma_matrix_1d(N, alpha)

    def integrand(t):
        w = np.exp(lam * t)
        gn = phi_x @ (w[:, None] * phi_y.T)
        diff = _exact_avg_rows(t, xs, N) - gn
        return float(((diff @ gamma) * diff).sum(axis=1).max())

    return _geometric_time_integral(f=integrand)


def rate_check_space(alpha, ns=DEFAULT_SPACE_LADDER):
    """Fit the decay of the space-discretization error integral, d=1.

    For each n the error is int_0^inf max_x |G - G^n|^2_(alpha) dt with
    the max over a fixed refinement of the lattice (eighth-points, where
    doubling further moves the result by under 0.2%); the fitted log-log
    slope should sit near -(2 - alpha).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1) for d = 1")
    ns = sorted(int(n) for n in ns)
    if len(ns) < 2:
        raise ValueError("need at least two ladder values")
    values = [_space_distance_integral(alpha, n) for n in ns]
    return RateCheckResult("space", alpha, ns, values, -(2.0 - alpha))


def _xgrid_weights(grid, xtab, x_factor=2):
    n = grid.n
    xs = np.arange(x_factor * n + 1) / (x_factor * n)
    i = np.minimum((n * xs).astype(int), n - 1)
    frac = n * xs - i
    return (1.0 - frac[:, None]) * xtab[:, i].T \
        + frac[:, None] * xtab[:, i + 1].T


def kernel_distance_time(alpha, n, m, kind, shift=None):
    """int_0^T max_x |G^n(t,x,.) - K_m(t + shift, x, .)|^2_(alpha) dt, d=1.

    K_m is the implicit or explicit time-discrete kernel on the same
    spatial grid; shift defaults to T/m for the implicit comparison and
    0 for the explicit one.  The y-slices share the piecewise-constant
    cell representation, so the norm reduces exactly to the (J, J)
    Gram matrix of the cell eigenvector columns.
    """
    grid = GridSpec(1, n, m)
    if kind not in (IMPLICIT, EXPLICIT):
        raise ValueError("time comparison needs an implicit or explicit kind")
    if kind == EXPLICIT and n * n * grid.T / m > 0.5:
        # otherwise |1 + dt*lambda| > 1 and the kernel itself diverges
        raise ValueError("explicit kernel needs n^2 T/m <= 1/2, got %g"
                         % (n * n * grid.T / m))
    if shift is None:
        shift = grid.dt if kind == IMPLICIT else 0.0
    xtab, ytab, lam = _axis_tables(grid)
    phi_x = _xgrid_weights(grid, xtab)
    phi_y = ytab[:, :grid.n].T  # (n, J), cell k owned by point k/n
    M = phi_y.T @ _gamma_matrix_1d(grid.n, alpha) @ phi_y

    nodes, weights = roots_legendre(4)
    dt = grid.dt
    total = 0.0
    for lo_idx in range(0, grid.m, 512):
        hi_idx = min(lo_idx + 512, grid.m)
        starts = np.arange(lo_idx, hi_idx) * dt
        ts = (starts[:, None] + 0.5 * dt * (1.0 + nodes)[None, :]).reshape(-1)
        wa = np.exp(np.outer(ts, lam))
        expo = np.floor(grid.m * (ts + shift) / grid.T).astype(int)
        if kind == IMPLICIT:
            wb = (1.0 - dt * lam)[None, :] ** (-expo[:, None])
        else:
            wb = (1.0 + dt * lam)[None, :] ** expo[:, None]
        S = (wa - wb)[:, None, :] * phi_x[None, :, :]
        vals = np.einsum("txj,jk,txk->tx", S, M, S).max(axis=1)
        total += 0.5 * dt * float(
            (vals.reshape(-1, 4) @ weights).sum())
    return total


def rate_check_time(alpha, ms=DEFAULT_TIME_LADDER, n=DEFAULT_TIME_N,
                    kinds=(IMPLICIT,)):
    """Fit the decay of the time-discretization error integrals, d=1.

    Compares the space-discrete kernel against the implicit kernel one
    step ahead (and, when requested, the explicit kernel at equal
    times); each fitted log-log slope should sit near -(1 - alpha/2).
    The default ladder keeps m below n^2 so the slope reflects that
    envelope; the explicit kernel is only defined under n^2 T/m <= 1/2,
    where both kernels sit in the smooth regime and decay faster.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1) for d = 1")
    ms = sorted(int(m) for m in ms)
    if len(ms) < 2:
        raise ValueError("need at least two ladder values")
    out = []
    for kind in kinds:
        values = [kernel_distance_time(alpha, n, m, kind) for m in ms]
        out.append(RateCheckResult(kind, alpha, ms, values,
                                   -(1.0 - alpha / 2.0)))
    return out
