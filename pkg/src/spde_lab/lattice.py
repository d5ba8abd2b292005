"""Grid geometry on the unit cube [0,1]^d.

The solver works on a uniform lattice with n subdivisions per axis and m
time steps on [0,T].  Under Dirichlet conditions the unknowns live at the
(n-1)^d interior points k/n, k = 1..n-1 per axis; under Neumann conditions
they live at the n^d cell centers (2k-1)/(2n), k = 1..n.  Cell-centered
Neumann points make the closed-form cosine eigenvectors of the discrete
Laplacian exact.

Multi-indices are 1-based and flattened with the first axis fastest:

    flat = (k_d - 1) * P^(d-1) + ... + (k_2 - 1) * P + k_1

where P is the number of points per axis.  Storage arrays are 0-based, so
array position = flat - 1.

Each lattice point owns one noise cell of side 1/n: Dirichlet point k/n
owns [k/n, (k+1)/n] (the cell [0, 1/n] next to the left boundary is not
used), Neumann point (2k-1)/(2n) owns [(k-1)/n, k/n].
"""

import itertools

import numpy as np

DIRICHLET = "dirichlet"
NEUMANN = "neumann"


class GridSpec:
    """Immutable description of the space-time grid.

    d   -- spatial dimension, >= 1
    n   -- space subdivisions per axis, >= 2
    m   -- time steps, >= 1
    T   -- time horizon, > 0
    bc  -- DIRICHLET or NEUMANN
    """

    __slots__ = ("d", "n", "m", "T", "bc")

    def __init__(self, d, n, m, T=1.0, bc=DIRICHLET):
        if not (isinstance(d, (int, np.integer)) and d >= 1):
            raise ValueError("dimension d must be an integer >= 1")
        if not (isinstance(n, (int, np.integer)) and n >= 2):
            raise ValueError("space subdivisions n must be an integer >= 2")
        if not (isinstance(m, (int, np.integer)) and m >= 1):
            raise ValueError("time steps m must be an integer >= 1")
        if not (T > 0):
            raise ValueError("horizon T must be positive")
        if bc not in (DIRICHLET, NEUMANN):
            raise ValueError("bc must be %r or %r" % (DIRICHLET, NEUMANN))
        object.__setattr__(self, "d", int(d))
        object.__setattr__(self, "n", int(n))
        object.__setattr__(self, "m", int(m))
        object.__setattr__(self, "T", float(T))
        object.__setattr__(self, "bc", bc)

    def __setattr__(self, name, value):
        raise AttributeError("GridSpec is immutable")

    def __eq__(self, other):
        return (isinstance(other, GridSpec)
                and (self.d, self.n, self.m, self.T, self.bc)
                == (other.d, other.n, other.m, other.T, other.bc))

    def __hash__(self):
        return hash((self.d, self.n, self.m, self.T, self.bc))

    def __repr__(self):
        return ("GridSpec(d=%d, n=%d, m=%d, T=%g, bc=%r)"
                % (self.d, self.n, self.m, self.T, self.bc))

    @property
    def points_per_axis(self):
        return self.n - 1 if self.bc == DIRICHLET else self.n

    @property
    def lattice_size(self):
        return self.points_per_axis ** self.d

    @property
    def dt(self):
        return self.T / self.m

    def times(self):
        """Time mesh t_i = i*T/m, i = 0..m."""
        return np.arange(self.m + 1) * (self.T / self.m)

    def axis_coords(self):
        """1-D array of per-axis lattice coordinates, in index order."""
        n = self.n
        if self.bc == DIRICHLET:
            return np.arange(1, n) / n
        return (2.0 * np.arange(1, n + 1) - 1.0) / (2.0 * n)

    def lattice_points(self):
        """(lattice_size, d) array of point coordinates in flattened order."""
        c = self.axis_coords()
        P = self.points_per_axis
        pts = np.empty((self.lattice_size, self.d))
        for j in range(self.d):
            # axis j+1 has stride P^j in the flat index
            reps_inner = P ** j
            reps_outer = P ** (self.d - 1 - j)
            pts[:, j] = np.tile(np.repeat(c, reps_inner), reps_outer)
        return pts

    def cell_low_corners(self):
        """(lattice_size, d) low corners of the noise cell owned by each point."""
        n = self.n
        if self.bc == DIRICHLET:
            lows = np.arange(1, n) / n
        else:
            lows = np.arange(0, n) / n
        P = self.points_per_axis
        out = np.empty((self.lattice_size, self.d))
        for j in range(self.d):
            reps_inner = P ** j
            reps_outer = P ** (self.d - 1 - j)
            out[:, j] = np.tile(np.repeat(lows, reps_inner), reps_outer)
        return out


class LatticeField:
    """Solution values on the interior lattice at one time level.

    values are stored in flattened order and kept read-only; all entries
    must be finite.
    """

    __slots__ = ("grid", "level", "values")

    def __init__(self, grid, level, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (grid.lattice_size,):
            raise ValueError("expected %d values, got shape %r"
                             % (grid.lattice_size, values.shape))
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        if not (0 <= level <= grid.m):
            raise ValueError("level must lie in 0..m")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "level", int(level))
        object.__setattr__(self, "values", values)

    def __setattr__(self, name, value):
        raise AttributeError("LatticeField is immutable")

    @property
    def t(self):
        return self.level * self.grid.dt

    def at(self, x):
        return interpolate(self, x)


def flatten_index(k, grid):
    """Flatten a 1-based multi-index (k_1, ..., k_d) to a 1-based flat index.

    The first axis varies fastest:
    flat = (k_d-1)*P^(d-1) + ... + (k_2-1)*P + k_1.
    """
    k = np.atleast_1d(np.asarray(k, dtype=int))
    if k.shape != (grid.d,):
        raise ValueError("need %d axis indices, got %r" % (grid.d, k.shape))
    P = grid.points_per_axis
    if np.any(k < 1) or np.any(k > P):
        raise IndexError("axis index out of range 1..%d: %r" % (P, tuple(k)))
    flat = 0
    for kj in k[::-1]:
        flat = flat * P + (int(kj) - 1)
    return flat + 1


def unflatten_index(flat, grid):
    """Inverse of flatten_index; returns the 1-based multi-index tuple."""
    P = grid.points_per_axis
    if not (1 <= flat <= grid.lattice_size):
        raise IndexError("flat index out of range 1..%d: %r"
                         % (grid.lattice_size, flat))
    rem = int(flat) - 1
    k = []
    for _ in range(grid.d):
        k.append(rem % P + 1)
        rem //= P
    return tuple(k)


def kappa_n(y, n):
    """Project y in [0,1]^d onto the grid: componentwise floor(n*y)/n."""
    y = np.asarray(y, dtype=float)
    if np.any(y < 0.0) or np.any(y > 1.0):
        raise ValueError("point outside [0,1]^d: %r" % (y,))
    return np.floor(n * y) / n


def cell_of(y, n):
    """0-based index of the side-1/n cell containing y, componentwise.

    The right boundary y_j = 1 is assigned to the last cell n-1 so that
    every point of [0,1]^d belongs to exactly one cell.
    """
    y = np.asarray(y, dtype=float)
    idx = np.floor(n * y).astype(int)
    return np.minimum(idx, n - 1)


def interpolate(field, x):
    """Multilinear interpolation of a lattice field at x in [0,1]^d.

    Dirichlet fields are extended by zero on the boundary; Neumann fields
    replicate the nearest lattice value outward (zero-slope extension).
    Exact at lattice points, and bounded by the surrounding corner values.
    """
    grid = field.grid
    pairs = _interp_pairs(grid, x)
    values = field.values
    total = 0.0
    for flat0, w in zip(*_corner_list(grid, pairs)):
        total += w * values[flat0]
    return total


def _interp_pairs(grid, x):
    """Per axis: the two bracketing 0-based storage indices (or -1 for a
    Dirichlet zero boundary sample) with the weight of the upper one."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (grid.d,):
        raise ValueError("point must have %d coordinates" % grid.d)
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("point outside [0,1]^d: %r" % (x,))
    n = grid.n
    P = grid.points_per_axis
    pairs = []
    for j in range(grid.d):
        if grid.bc == DIRICHLET:
            s = x[j] * n          # position on the full 0..n grid
            i0 = min(int(np.floor(s)), n - 1)
            w = s - i0
            lo = i0 - 1 if 1 <= i0 <= n - 1 else -1       # grid node i0
            hi = i0 if 1 <= i0 + 1 <= n - 1 else -1       # grid node i0+1
        else:
            s = x[j] * n - 0.5    # position in 0-based point units
            i0 = int(np.floor(s))
            w = s - i0
            if i0 < 0:
                lo = hi = 0
                w = 0.0
            elif i0 >= P - 1:
                lo = hi = P - 1
                w = 0.0
            else:
                lo, hi = i0, i0 + 1
        pairs.append(((lo, 1.0 - w), (hi, w)))
    return pairs


def _corner_list(grid, pairs):
    """Corner (flat 0-based index, weight) lists; zero-weight and
    Dirichlet-boundary corners are dropped."""
    P = grid.points_per_axis
    idxs = []
    weights = []
    for corner in itertools.product(*pairs):
        w = 1.0
        flat0 = 0
        outside = False
        for j in range(grid.d - 1, -1, -1):
            idx, wj = corner[j]
            w *= wj
            if idx < 0:
                outside = True
            else:
                flat0 = flat0 * P + idx
        if w == 0.0 or outside:
            continue
        idxs.append(flat0)
        weights.append(w)
    return idxs, weights


def interpolation_weights(grid, x):
    """Sparse multilinear sampling weights of a point: (indices, weights).

    Indices are 0-based storage positions; a field's value at x is
    sum(w * field.values[i]).  Useful for building reusable sampling
    matrices over many fields on one grid.
    """
    idxs, weights = _corner_list(grid, _interp_pairs(grid, x))
    return np.asarray(idxs, dtype=int), np.asarray(weights, dtype=float)
