"""Space-time box increments of the driving noise.

The noise F is white in time and either white in space (d = 1 only) or
correlated by the Riesz kernel f(z) = |z|^(-alpha), 0 < alpha < min(2, d).
The schemes consume the scaled increments over one cell times one time
step,

    slab value at cell j = n^d (m/T) * F([t_i, t_i+1] x cell_j),

a centered Gaussian vector with covariance

    C_ab = n^(2d) (m/T) * gamma_ab,    gamma_ab = int_a int_b |y-z|^(-alpha)
    C_ab = n^d (m/T) * delta_ab        (space-time white).

In d = 1 the double cell integral has the closed antiderivative form

    gamma = F2(D+h) - 2 F2(D) + F2(D-h),   F2(r) = |r|^(2-a)/((1-a)(2-a)),

with D the (signed) distance of the cell low corners and h = 1/n; at
a = 1 the logarithmic branch F2(r) = |r|(log|r| - 1) applies.  In d >= 2
the difference-variable reduction

    gamma = int_{[-h,h]^d} prod_j (h - |u_j|) |D + u|^(-alpha) du

is computed by adaptive tensor Gauss quadrature.  Cubes touching the
singular point are split dyadically toward it; the innermost cube is
closed with the exact scaling tail s^(d-alpha) * J_d(alpha) of the
homogeneous kernel, so the quadrature never has to resolve the
singularity itself.

Covariances are factored by a pivoted Cholesky (LAPACK dpstrf) with
near-zero pivots truncated; sampling is then L @ xi with standard normal
xi.  A deterministic linear aggregation map coarsens fine-mesh slabs to
any divisible coarser mesh, which is how coupled refinement studies reuse
one noise trajectory across the whole mesh ladder.
"""

import struct

import numpy as np
from scipy.linalg import get_lapack_funcs
from scipy.special import roots_legendre

from .lattice import DIRICHLET, NEUMANN, GridSpec

WHITE = "white"
RIESZ = "riesz"

_PIVOT_TOL = 1e-10          # times trace(C), for factorization truncation
_QUAD_REL_TOL = 1e-8        # adaptive cell-integral tolerance

_MAGIC = b"SLCF0001"


class NoiseModel:
    """Noise description: space-time white (d=1) or Riesz-correlated."""

    __slots__ = ("kind", "alpha", "d")

    def __init__(self, kind, d, alpha=None):
        if kind not in (WHITE, RIESZ):
            raise ValueError("kind must be %r or %r" % (WHITE, RIESZ))
        if kind == WHITE:
            if d != 1:
                raise ValueError("space-time white noise requires d = 1")
            if alpha is not None:
                raise ValueError("white noise takes no alpha")
        else:
            limit = min(2.0, float(d))
            if alpha is None or not (0.0 < alpha < limit):
                raise ValueError(
                    "riesz exponent must satisfy 0 < alpha < min(2, d) = %g"
                    % limit)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "d", int(d))
        object.__setattr__(self, "alpha",
                           None if kind == WHITE else float(alpha))

    def __setattr__(self, name, value):
        raise AttributeError("NoiseModel is immutable")

    def __repr__(self):
        if self.kind == WHITE:
            return "NoiseModel(white, d=1)"
        return "NoiseModel(riesz, d=%d, alpha=%g)" % (self.d, self.alpha)


class NoiseSlab:
    """Realized scaled increments for one time step, one value per cell."""

    __slots__ = ("level", "values")

    def __init__(self, level, values):
        values = np.asarray(values, dtype=float)
        if values.ndim != 1:
            raise ValueError("slab values must be a vector")
        if not np.all(np.isfinite(values)):
            raise ValueError("slab values must be finite")
        self.level = int(level)
        self.values = values


# --- Riesz antiderivative and the d=1 closed form --------------------------

def _antiderivative(r, alpha):
    """F2 with F2'' = |r|^(-alpha) on r > 0, extended evenly; F2(0) = 0."""
    r = np.abs(r)
    if alpha == 1.0:
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(r > 0.0, r * (np.log(np.where(r > 0, r, 1.0)) - 1.0), 0.0)
        return out
    return r ** (2.0 - alpha) / ((1.0 - alpha) * (2.0 - alpha))


def _gamma_1d(delta, h, alpha):
    """int over two cells of length h with low-corner distance delta."""
    return (_antiderivative(delta + h, alpha)
            - 2.0 * _antiderivative(delta, alpha)
            + _antiderivative(delta - h, alpha))


# --- d >= 2 singular quadrature ---------------------------------------------

_GAUSS_NODES, _GAUSS_WEIGHTS = roots_legendre(4)


def _gauss_box(f, lo, hi):
    """4-point tensor Gauss on a box; f takes an (N, d) array of points."""
    d = len(lo)
    axes = []
    wts = []
    for j in range(d):
        c = 0.5 * (lo[j] + hi[j])
        s = 0.5 * (hi[j] - lo[j])
        axes.append(c + s * _GAUSS_NODES)
        wts.append(s * _GAUSS_WEIGHTS)
    grids = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.reshape(-1) for g in grids], axis=1)
    w = wts[0]
    for j in range(1, d):
        w = np.multiply.outer(w, wts[j])
    return float(f(pts) @ w.reshape(-1))


def _adaptive_smooth(f, lo, hi, tol, depth=0):
    """Adaptive tensor Gauss for an integrand smooth on the box."""
    coarse = _gauss_box(f, lo, hi)
    mid = 0.5 * (lo + hi)
    children = []
    fine = 0.0
    for mask in range(2 ** len(lo)):
        clo = np.where([(mask >> j) & 1 for j in range(len(lo))], mid, lo)
        chi = np.where([(mask >> j) & 1 for j in range(len(lo))], hi, mid)
        children.append((clo, chi))
        fine += _gauss_box(f, clo, chi)
    if abs(fine - coarse) <= tol or depth >= 24:
        return fine
    return sum(_adaptive_smooth(f, clo, chi, tol / len(children), depth + 1)
               for clo, chi in children)


_J_CONST_CACHE = {}


def _corner_constant(d, alpha):
    """J = int over [0,1]^d of |v|^(-alpha), by the scaling identity.

    Splitting off the sub-cube [0,1/2]^d leaves 2^d - 1 smooth boxes and a
    rescaled copy of the integral: J = S / (1 - 2^(alpha - d)).
    """
    key = (d, alpha)
    if key not in _J_CONST_CACHE:
        f = lambda p: np.sum(p * p, axis=1) ** (-alpha / 2.0)
        S = 0.0
        for mask in range(1, 2 ** d):
            lo = np.array([0.5 if (mask >> j) & 1 else 0.0 for j in range(d)])
            hi = lo + 0.5
            S += _adaptive_smooth(f, lo, hi, 1e-12)
        _J_CONST_CACHE[key] = S / (1.0 - 2.0 ** (alpha - d))
    return _J_CONST_CACHE[key]


def _gamma_nd(gaps, h, alpha):
    """Cell integral for d >= 2; gaps are the per-axis |k_a - k_b|."""
    d = len(gaps)
    delta = np.asarray(gaps, dtype=float) * h

    def integrand(u):
        w = np.prod(h - np.abs(u), axis=1)
        v = u + delta
        return w * np.sum(v * v, axis=1) ** (-alpha / 2.0)

    if np.any(np.asarray(gaps) >= 2):
        # singular point u = -delta lies outside [-h, h]^d
        lo = np.full(d, -h)
        hi = np.full(d, h)
        scale = h ** (2 * d - alpha) * max(np.max(gaps) - 1, 1) ** (-alpha)
        return _adaptive_smooth(integrand, lo, hi, _QUAD_REL_TOL * scale)

    # split each axis at the singular coordinate -delta_j (gap 0) or keep
    # the singularity at the cube corner (gap 1); all children are cubes of
    # side h and the singular point is a corner of those that touch it
    total = 0.0
    singular = []
    for mask in range(2 ** d):
        lo = np.empty(d)
        hi = np.empty(d)
        corner = True
        for j in range(d):
            if gaps[j] == 0:
                if (mask >> j) & 1:
                    lo[j], hi[j] = 0.0, h
                else:
                    lo[j], hi[j] = -h, 0.0
            else:
                if (mask >> j) & 1:
                    lo[j], hi[j] = -h, 0.0
                    # cube adjacent to the singular corner u_j = -h
                else:
                    lo[j], hi[j] = 0.0, h
                    corner = False
        sing = np.minimum(np.abs(lo + delta), np.abs(hi + delta))
        if corner and np.all(sing < 1e-14 * h):
            singular.append((lo, hi))
        else:
            total += _adaptive_smooth(integrand, lo, hi,
                                      _QUAD_REL_TOL * h ** (2 * d - alpha) / 2 ** d)

    J = _corner_constant(d, alpha)
    for lo, hi in singular:
        total += _singular_cube(integrand, lo, hi, delta, alpha, J, h)
    return total


def _singular_cube(integrand, lo, hi, delta, alpha, J, h):
    """Cube with |D + u| vanishing at one corner: dyadic shells plus tail.

    Each halving splits off 2^d - 1 smooth cubes; the remaining corner
    cube's weight factor prod(h - |u_j|) converges to its value at the
    corner, so once the cube is small its contribution is the homogeneous
    tail  w(corner) * s^(d - alpha) * J  up to a relative error of order
    s/h.
    """
    d = len(lo)
    corner = np.where(np.abs(lo + delta) <= np.abs(hi + delta), lo, hi)
    total = 0.0
    clo, chi = lo.copy(), hi.copy()
    for _ in range(30):
        s = chi[0] - clo[0]
        mid = 0.5 * (clo + chi)
        nlo, nhi = clo.copy(), chi.copy()
        for mask in range(2 ** d):
            blo = np.empty(d)
            bhi = np.empty(d)
            at_corner = True
            for j in range(d):
                near = (corner[j] == clo[j])
                if (mask >> j) & 1:
                    blo[j], bhi[j] = mid[j], chi[j]
                    if near:
                        at_corner = False
                else:
                    blo[j], bhi[j] = clo[j], mid[j]
                    if not near:
                        at_corner = False
            if at_corner:
                nlo, nhi = blo, bhi
            else:
                total += _adaptive_smooth(
                    integrand, blo, bhi,
                    _QUAD_REL_TOL * h ** (2 * d - alpha) / 2 ** (d + 2))
        clo, chi = nlo, nhi
        if s / h < 2e-6:
            break
    s = chi[0] - clo[0]
    w_corner = np.prod(h - np.abs(corner))
    total += w_corner * s ** (d - alpha) * J
    return total


# --- public cell covariance -------------------------------------------------

def _cell_gaps(grid, cell_a, cell_b):
    """Per-axis index gaps between two cells, from flat or multi indices."""
    from .lattice import unflatten_index
    if np.isscalar(cell_a):
        cell_a = unflatten_index(int(cell_a), grid)
    if np.isscalar(cell_b):
        cell_b = unflatten_index(int(cell_b), grid)
    ka = np.asarray(cell_a, dtype=int)
    kb = np.asarray(cell_b, dtype=int)
    if ka.shape != (grid.d,) or kb.shape != (grid.d,):
        raise ValueError("cell index must have %d axes" % grid.d)
    P = grid.points_per_axis
    for k in (ka, kb):
        if np.any(k < 1) or np.any(k > P):
            raise IndexError("cell index out of range 1..%d" % P)
    return np.abs(ka - kb)


def cell_covariance(model, grid, cell_a, cell_b):
    """gamma_ab = int_a int_b |y-z|^(-alpha) dy dz for two lattice cells.

    For white noise this is delta_ab * n^(-d) instead.  Cells are named by
    the lattice point that owns them (1-based flat or multi-index); equal
    gaps give equal values, so the matrix is (block) Toeplitz.
    """
    gaps = _cell_gaps(grid, cell_a, cell_b)
    h = 1.0 / grid.n
    if model.kind == WHITE:
        return h ** grid.d if np.all(gaps == 0) else 0.0
    if grid.d == 1:
        return float(_gamma_1d(gaps[0] * h, h, model.alpha))
    return float(_gamma_nd(tuple(int(g) for g in gaps), h, model.alpha))


# --- covariance assembly and factorization ----------------------------------

class CovarianceFactor:
    """Covariance of the scaled increments with its Cholesky-type factor.

    C     -- (K, K) covariance of the slab vector
    L     -- (K, rank) factor with L @ L.T == C up to the pivot tolerance
    rank  -- retained rank after pivot truncation
    """

    def __init__(self, grid, model, C, L, rank):
        self.grid = grid
        self.model = model
        self.C = C
        self.L = L
        self.rank = rank

    @property
    def n_cells(self):
        return self.C.shape[0]


class FactorizationError(RuntimeError):
    pass


def _unique_gamma_table(model, grid):
    """gamma for every per-axis gap combination, cached by sorted gaps."""
    P = grid.points_per_axis
    h = 1.0 / grid.n
    table = {}
    if grid.d == 1:
        for g in range(P):
            table[(g,)] = float(_gamma_1d(g * h, h, model.alpha))
        return table
    import itertools as it
    for gaps in it.product(range(P), repeat=grid.d):
        key = tuple(sorted(gaps))
        if key not in table:
            table[key] = float(_gamma_nd(key, h, model.alpha))
    return table


def build_covariance(model, grid):
    """Assemble and factor the slab covariance for one grid.

    The K x K matrix is dense; K = lattice_size, so this is practical for
    K up to a few thousand cells (d=1 any n here, d=2 n <= ~64, d=3
    n <= ~16).  Factorization is pivoted Cholesky with tolerance
    1e-10 * trace(C); trailing near-zero pivots are truncated.
    """
    if model.d != grid.d:
        raise ValueError("model dimension %d does not match grid dimension %d"
                         % (model.d, grid.d))
    K = grid.lattice_size
    scale_m = grid.m / grid.T
    if model.kind == WHITE:
        var = grid.n ** grid.d * scale_m
        C = np.eye(K) * var
        L = np.eye(K) * np.sqrt(var)
        return CovarianceFactor(grid, model, C, L, K)

    table = _unique_gamma_table(model, grid)
    P = grid.points_per_axis
    axes = np.unravel_index(np.arange(K), (P,) * grid.d)
    # axes[t] is the 0-based index along flat-order axis t; flat order has
    # axis 1 fastest, i.e. axes[-1] is axis 1 -- irrelevant here since only
    # gaps enter
    gamma = np.empty((K, K))
    for a in range(K):
        ga = [ax[a] for ax in axes]
        for b in range(a, K):
            gaps = tuple(sorted(abs(ga[t] - axes[t][b]) for t in range(grid.d)))
            gamma[a, b] = gamma[b, a] = table[gaps]
    C = gamma * (grid.n ** (2 * grid.d) * scale_m)

    L, rank = _pivoted_cholesky(C)
    err = np.max(np.abs(L @ L.T - C))
    if err > _PIVOT_TOL * np.trace(C):
        raise FactorizationError(
            "factor residual %.3e exceeds tolerance %.3e; matrix is "
            "indefinite beyond pivot truncation"
            % (err, _PIVOT_TOL * np.trace(C)))
    return CovarianceFactor(grid, model, C, L, rank)


def _pivoted_cholesky(C):
    (pstrf,) = get_lapack_funcs(("pstrf",), (C,))
    tol = _PIVOT_TOL * np.trace(C)
    c, piv, rank, info = pstrf(C, lower=1, tol=tol)
    if info < 0:
        raise FactorizationError("pivoted Cholesky failed, info=%d" % info)
    K = C.shape[0]
    L = np.tril(c)
    L[:, rank:] = 0.0
    # rows below the pivot rank are unreliable; they only multiply the
    # truncated columns, already zeroed above
    perm = np.asarray(piv) - 1
    out = np.zeros_like(L)
    out[perm, :] = L
    return out[:, :rank], rank


# --- sampling ----------------------------------------------------------------

def sample_slab(factor, rng, level=0):
    """Draw one slab: L @ xi with xi i.i.d. standard normal."""
    xi = rng.standard_normal(factor.rank)
    return NoiseSlab(level, factor.L @ xi)


def sample_slab_sequence(factor, rng, count, start_level=0):
    """Draw `count` independent slabs in level order from one stream."""
    xi = rng.standard_normal((count, factor.rank))
    vals = xi @ factor.L.T
    return [NoiseSlab(start_level + i, vals[i]) for i in range(count)]


# --- aggregation to coarser meshes -------------------------------------------

def _check_divisible(fine, coarse):
    if fine.d != coarse.d or fine.bc != coarse.bc or fine.T != coarse.T:
        raise ValueError("grids must share dimension, bc and horizon")
    if fine.n % coarse.n or fine.m % coarse.m:
        raise ValueError("coarse mesh (n=%d, m=%d) must divide fine mesh "
                         "(n=%d, m=%d)" % (coarse.n, coarse.m, fine.n, fine.m))


def _children_table(fine, coarse):
    """(K_coarse, r^d) flat 0-based fine-cell children of each coarse cell."""
    r = fine.n // coarse.n
    d = fine.d
    Pc = coarse.points_per_axis
    Pf = fine.points_per_axis
    if coarse.bc == DIRICHLET:
        # coarse point k owns [k/nc, (k+1)/nc] = fine cells k*r .. k*r+r-1
        starts_1d = np.arange(1, Pc + 1) * r          # 1-based fine k
    else:
        starts_1d = (np.arange(0, Pc)) * r + 1
    offsets_1d = np.arange(r)
    child_1d = starts_1d[:, None] + offsets_1d[None, :] - 1   # 0-based
    out = child_1d
    for t in range(1, d):
        slow = child_1d * Pf ** t
        out = (slow[:, None, :, None] + out[None, :, None, :]).reshape(
            Pc ** (t + 1), r ** (t + 1))
    return out


def aggregation_matrix(fine, coarse):
    """The linear map from one coarse step's worth of stacked fine slabs
    to the coarse slab: shape (K_c, rho * K_f) with rho = m_f / m_c fine
    steps per coarse step, entries lambda = (n_c^d m_c)/(n_f^d m_f) on
    merged cells.  Against C_stacked = kron(I_rho, C_fine) it satisfies
    A @ C_stacked @ A.T = C_coarse."""
    _check_divisible(fine, coarse)
    lam = (coarse.n ** coarse.d * coarse.m) / (fine.n ** fine.d * fine.m)
    rho = fine.m // coarse.m
    table = _children_table(fine, coarse)
    Kf = fine.lattice_size
    A = np.zeros((coarse.lattice_size, rho * Kf))
    for c in range(coarse.lattice_size):
        for b in range(rho):
            A[c, b * Kf + table[c]] = lam
    return A


def aggregate(fine_slabs, fine, coarse):
    """Coarsen a full sequence of fine slabs to the coarse mesh.

    Unscaled measure increments add over merged cells and merged time
    steps; the result is rescaled to the coarse slab normalization.  The
    map is deterministic and linear, so coupled coarse/fine runs share one
    underlying noise trajectory.
    """
    _check_divisible(fine, coarse)
    if len(fine_slabs) != fine.m:
        raise ValueError("expected %d fine slabs, got %d"
                         % (fine.m, len(fine_slabs)))
    vals = np.stack([s.values for s in fine_slabs])       # (m_f, K_f)
    rho = fine.m // coarse.m
    lam = (coarse.n ** coarse.d * coarse.m) / (fine.n ** fine.d * fine.m)
    time_merged = vals.reshape(coarse.m, rho, -1).sum(axis=1)
    table = _children_table(fine, coarse)
    merged = time_merged[:, table].sum(axis=2) * lam
    return [NoiseSlab(i, merged[i]) for i in range(coarse.m)]


# --- kernel product bound -----------------------------------------------------

def product_bound_exponents(d, alpha):
    """Exponents alpha_j with sum alpha and each < 1 wherever possible:
    alpha_j = alpha * 2^(-j) for j < d and alpha_d = alpha * 2^(-d+1).
    The bound |z|^(-alpha) <= prod_j |z_j|^(-alpha_j) holds with constant 1
    because |z| >= |z_j| for every axis."""
    if d < 2:
        raise ValueError("product bound is for d >= 2")
    ex = [alpha * 2.0 ** (-j) for j in range(1, d)]
    ex.append(alpha * 2.0 ** (-(d - 1)))
    return np.array(ex)


# --- factor dump/load ----------------------------------------------------------

def dump_factor(factor, path):
    """Binary dump: header keyed by (d, n, m, T, alpha, bc) plus the
    row-major factor, little-endian float64."""
    g, mo = factor.grid, factor.model
    kind = 0 if mo.kind == WHITE else 1
    bc = 0 if g.bc == DIRICHLET else 1
    alpha = 0.0 if mo.alpha is None else mo.alpha
    header = struct.pack("<8sIIQQdIdQQ", _MAGIC, g.d, bc, g.n, g.m, g.T,
                         kind, alpha, factor.C.shape[0], factor.rank)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(factor.L, dtype="<f8").tobytes())


def load_factor(path):
    """Load a dumped factor; C is reconstructed as L @ L.T."""
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize("<8sIIQQdIdQQ"))
        if len(header) < struct.calcsize("<8sIIQQdIdQQ") \
                or header[:8] != _MAGIC:
            raise ValueError("not a covariance factor file")
        magic, d, bc, n, m, T, kind, alpha, K, rank = struct.unpack(
            "<8sIIQQdIdQQ", header)
        body = fh.read(K * rank * 8)
    L = np.frombuffer(body, dtype="<f8").reshape(K, rank).astype(float)
    grid = GridSpec(d, n, m, T, DIRICHLET if bc == 0 else NEUMANN)
    model = (NoiseModel(WHITE, 1) if kind == 0
             else NoiseModel(RIESZ, d, alpha))
    return CovarianceFactor(grid, model, L @ L.T, L, rank)
