"""Discrete Laplacian on the lattice and the per-step linear algebra.

The one-dimensional second-difference matrix D_n has rows (1, -2, 1); under
Dirichlet conditions the boundary neighbours are dropped, under Neumann the
first and last diagonal entries become -1 (zero-flux mirror).  In d
dimensions the operator is the Kronecker sum of the per-axis matrices, and
every apply/solve here realizes the scaled operator n^2 * D_n^(d).

Eigenvalues are known in closed form,

    lambda_j = -4 n^2 sin^2(j pi / (2n)) = -j^2 pi^2 c_n^j,

with j = 1..n-1 (Dirichlet) or j = 0..n-1 (Neumann) per axis and
c_n^j in [4/pi^2, 1].  Eigenvectors are sampled sines sqrt(2) sin(j pi x)
at x = k/n, or cosines sqrt(2) cos(j pi x) (and the constant 1 for j = 0)
at the cell centers x = (2k-1)/(2n).  Multi-index eigenvalues add across
axes.

The backward-Euler system (Id - (T/m) n^2 D) x = rhs is solved by a
banded Cholesky factorization in d = 1 (the matrix is strictly diagonally
dominant, so no pivoting is needed) and by orthonormal fast sine/cosine
transforms along each axis in d >= 2.  Factorizations and transform plans
are cached per grid so repeated stepping is cheap.
"""

import numpy as np
from scipy.fft import dctn, dstn, idctn
from scipy.linalg import cho_solve_banded, cholesky_banded

from .lattice import DIRICHLET, LatticeField

MAX_DENSE_SIZE = 4096


class Laplacian:
    """Matrix-free n^2 * D_n^(d) with an explicit dense form for small grids."""

    def __init__(self, grid):
        self.grid = grid
        self._dense = None

    def apply(self, values):
        """Apply n^2 * D_n^(d).  values may be (K,) or (K, batch)."""
        grid = self.grid
        P = grid.points_per_axis
        batched = values.ndim == 2
        nbatch = values.shape[1] if batched else 1
        # flat index has axis 1 fastest, so C-order shape lists axis d first
        work = values.reshape((P,) * grid.d + (nbatch,))
        out = np.zeros_like(work)
        for ax in range(grid.d):
            out += _second_difference(work, ax, grid.bc)
        out = out.reshape(grid.lattice_size, nbatch) * float(grid.n) ** 2
        return out if batched else out[:, 0]

    def matrix(self):
        """Dense matrix form; only available for lattice_size <= 4096."""
        grid = self.grid
        K = grid.lattice_size
        if K > MAX_DENSE_SIZE:
            raise ValueError("dense form limited to %d points, grid has %d"
                             % (MAX_DENSE_SIZE, K))
        if self._dense is None:
            P = grid.points_per_axis
            D1 = _axis_matrix(P, grid.bc)
            total = np.zeros((K, K))
            for j in range(1, grid.d + 1):
                term = np.kron(np.eye(P ** (grid.d - j)),
                               np.kron(D1, np.eye(P ** (j - 1))))
                total += term
            self._dense = total * float(grid.n) ** 2
        return self._dense


def _axis_matrix(P, bc):
    D = np.zeros((P, P))
    idx = np.arange(P)
    D[idx, idx] = -2.0
    D[idx[:-1], idx[:-1] + 1] = 1.0
    D[idx[1:], idx[1:] - 1] = 1.0
    if bc != DIRICHLET:
        D[0, 0] = -1.0
        D[-1, -1] = -1.0
    return D


def _second_difference(work, ax, bc):
    """Second difference along one axis of the reshaped lattice array."""
    b = np.moveaxis(work, ax, 0)
    out = np.empty_like(b)
    P = b.shape[0]
    if P == 1:
        out[0] = -b[0] if bc != DIRICHLET else -2.0 * b[0]
        return np.moveaxis(out, 0, ax)
    out[1:-1] = b[:-2] - 2.0 * b[1:-1] + b[2:]
    if bc == DIRICHLET:
        out[0] = -2.0 * b[0] + b[1]
        out[-1] = b[-2] - 2.0 * b[-1]
    else:
        out[0] = b[1] - b[0]
        out[-1] = b[-2] - b[-1]
    return np.moveaxis(out, 0, ax)


def build_laplacian(grid):
    return Laplacian(grid)


class SpectralData:
    """Closed-form spectrum of n^2 * D_n^(d) on a grid.

    axis_eigenvalues -- per-axis 1-D eigenvalues, in index order
    eigenvalues      -- multi-index sums, in flattened lattice order
    axis_vectors     -- (P, P) table, row j-1 = eigenvector j at the
                        per-axis lattice coordinates (not normalized;
                        amplitude sqrt(2), constant 1 for Neumann j=0)
    """

    def __init__(self, grid):
        self.grid = grid
        n = grid.n
        P = grid.points_per_axis
        if grid.bc == DIRICHLET:
            j = np.arange(1, n)
        else:
            j = np.arange(0, n)
        self.axis_indices = j
        self.axis_eigenvalues = -4.0 * n * n * np.sin(j * np.pi / (2 * n)) ** 2
        coords = grid.axis_coords()
        if grid.bc == DIRICHLET:
            self.axis_vectors = np.sqrt(2.0) * np.sin(
                np.outer(j * np.pi, coords))
        else:
            self.axis_vectors = np.sqrt(2.0) * np.cos(
                np.outer(j * np.pi, coords))
            self.axis_vectors[0, :] = 1.0
        lam = self.axis_eigenvalues
        total = lam
        for _ in range(grid.d - 1):
            total = (total[None, :] + lam[:, None]).reshape(-1)
        # the loop above adds slower axes on the left, matching flat order
        self.eigenvalues = total

    def c_factors(self):
        """c_n^j = sin^2(j pi/2n) / (j pi/2n)^2 for the nonzero indices."""
        j = self.axis_indices
        j = j[j > 0]
        u = j * np.pi / (2 * self.grid.n)
        return (np.sin(u) / u) ** 2

    def vector(self, k):
        """Eigenvector for 1-based multi-index k, sampled on the lattice."""
        grid = self.grid
        k = np.atleast_1d(np.asarray(k, dtype=int))
        offset = 1 if grid.bc == DIRICHLET else 0
        v = self.axis_vectors[k[0] - offset]
        for kj in k[1:]:
            v = np.kron(self.axis_vectors[kj - offset], v)
        return v


def spectral_data(grid):
    return SpectralData(grid)


class ImplicitSolver:
    """Factored solver for (Id - (T/m) n^2 D_n^(d)) x = rhs."""

    def __init__(self, grid):
        self.grid = grid
        r = grid.dt * float(grid.n) ** 2
        P = grid.points_per_axis
        if grid.d == 1:
            # banded upper form of the SPD tridiagonal system
            ab = np.zeros((2, P))
            ab[1, :] = 1.0 + 2.0 * r
            ab[0, 1:] = -r
            if grid.bc != DIRICHLET:
                ab[1, 0] = 1.0 + r
                ab[1, -1] = 1.0 + r
            self._cb = cholesky_banded(ab, lower=False)
            self._denom = None
        else:
            spec = spectral_data(grid)
            denom = 1.0 - grid.dt * spec.eigenvalues
            self._denom = denom.reshape((P,) * grid.d + (1,))
            self._cb = None

    def solve(self, rhs):
        """rhs may be (K,) or (K, batch); returns the same shape."""
        grid = self.grid
        if grid.d == 1:
            return cho_solve_banded((self._cb, False), rhs)
        P = grid.points_per_axis
        batched = rhs.ndim == 2
        nbatch = rhs.shape[1] if batched else 1
        work = rhs.reshape((P,) * grid.d + (nbatch,))
        axes = tuple(range(grid.d))
        if grid.bc == DIRICHLET:
            # orthonormal DST-I is involutive
            coef = dstn(work, type=1, axes=axes, norm="ortho")
            coef /= self._denom
            out = dstn(coef, type=1, axes=axes, norm="ortho")
        else:
            coef = dctn(work, type=2, axes=axes, norm="ortho")
            coef /= self._denom
            out = idctn(coef, type=2, axes=axes, norm="ortho")
        out = out.reshape(grid.lattice_size, nbatch)
        return out if batched else out[:, 0]


_solver_cache = {}


def _solver_for(grid):
    solver = _solver_cache.get(grid)
    if solver is None:
        solver = ImplicitSolver(grid)
        _solver_cache[grid] = solver
    return solver


def implicit_step(rhs, grid=None):
    """Solve (Id - (T/m) n^2 D_n^(d)) x = rhs.

    Accepts a LatticeField or a plain array; returns the same kind.  The
    operator is always invertible since every eigenvalue is <= 0.
    """
    if isinstance(rhs, LatticeField):
        out = _solver_for(rhs.grid).solve(rhs.values)
        return LatticeField(rhs.grid, rhs.level, out)
    return _solver_for(grid).solve(np.asarray(rhs, dtype=float))


def explicit_step(field, grid=None):
    """Apply (Id + (T/m) n^2 D_n^(d)).  Stability is the caller's duty."""
    if isinstance(field, LatticeField):
        grid = field.grid
        values = field.values
        out = values + grid.dt * build_laplacian(grid).apply(values)
        return LatticeField(grid, field.level, out)
    values = np.asarray(field, dtype=float)
    return values + grid.dt * build_laplacian(grid).apply(values)
