"""Time stepping of the implicit and explicit finite-difference schemes.

One step advances the lattice vector u_i by

    implicit:  (Id - (T/m) n^2 D) u_{i+1} = u_i + (T/m) (sigma(t_i,x,u_i) * W_i
                                                          + b(t_i,x,u_i))
    explicit:  u_{i+1} = u_i + (T/m) n^2 D u_i + (T/m) (sigma * W_i + b)

where W_i is the scaled noise slab for step i and sigma, b act pointwise
at the lattice sites.  The implicit scheme is unconditionally stable; the
explicit scheme requires n^2 T / m <= q < 1/2 and construction fails
otherwise.  Overflow during a run raises SchemeOverflowError carrying the
offending level so callers can report or exclude the replica.

Coefficient families follow the convergence experiments: constant c,
affine a*u + b, and cosine a + b*cos(u); affine and cosine are globally
Lipschitz in u with constant at most max(|a|, |b|).
"""

import csv
import struct

import numpy as np

from .lattice import DIRICHLET, LatticeField
from .noise import build_covariance, sample_slab_sequence
from .operators import build_laplacian, _solver_for

IMPLICIT = "implicit"
EXPLICIT = "explicit"

DEFAULT_CFL = 0.45

_TRAJ_MAGIC = b"SLTR0001"


class StabilityError(ValueError):
    """Explicit scheme configured outside n^2 T / m <= q < 1/2."""


class SchemeOverflowError(RuntimeError):
    """Non-finite values appeared while stepping."""

    def __init__(self, level, message=None):
        self.level = level
        super().__init__(message or
                         "non-finite solution values at time level %d" % level)


class CoefficientSet:
    """Diffusion sigma and drift b, each from a small family.

    Families: ("constant", c), ("affine", a, b) meaning a*u + b, and
    ("cosine", a, b) meaning a + b*cos(u).  Coefficients are evaluated at
    (t, x, u) but the families only read u.
    """

    FAMILIES = ("constant", "affine", "cosine")

    def __init__(self, sigma, b):
        self.sigma_spec = self._check(sigma)
        self.b_spec = self._check(b)

    @staticmethod
    def _check(spec):
        family = spec[0]
        params = tuple(float(p) for p in spec[1:])
        if family == "constant":
            if len(params) != 1:
                raise ValueError("constant family takes one parameter")
        elif family in ("affine", "cosine"):
            if len(params) != 2:
                raise ValueError("%s family takes two parameters" % family)
        else:
            raise ValueError("unknown coefficient family %r" % (family,))
        return (family,) + params

    @staticmethod
    def _eval(spec, t, x, u):
        family = spec[0]
        if family == "constant":
            return np.full_like(np.asarray(u, dtype=float), spec[1])
        if family == "affine":
            return spec[1] * u + spec[2]
        return spec[1] + spec[2] * np.cos(u)

    def sigma(self, t, x, u):
        return self._eval(self.sigma_spec, t, x, u)

    def b(self, t, x, u):
        return self._eval(self.b_spec, t, x, u)

    @staticmethod
    def _lipschitz(spec):
        if spec[0] == "constant":
            return 0.0
        return max(abs(spec[1]), abs(spec[2]))

    def lipschitz_bound(self):
        """Common Lipschitz-in-u constant for both coefficients."""
        return max(self._lipschitz(self.sigma_spec),
                   self._lipschitz(self.b_spec))

    @classmethod
    def zero(cls):
        return cls(("constant", 0.0), ("constant", 0.0))


class InitialCondition:
    """Initial profile u_0 sampled at the lattice points.

    Families: zero, sine_product (prod_j sin(pi x_j)), bump
    (prod_j x_j (1 - x_j)) and table (explicit values in flattened
    order).  The first three vanish on the boundary, as Dirichlet
    conditions require; a table is the caller's responsibility.
    """

    def __init__(self, family, values=None):
        if family not in ("zero", "sine_product", "bump", "table"):
            raise ValueError("unknown initial condition family %r" % (family,))
        if family == "table":
            if values is None:
                raise ValueError("table initial condition needs values")
            values = np.asarray(values, dtype=float)
        elif values is not None:
            raise ValueError("only the table family takes values")
        self.family = family
        self.table = values

    def sample(self, grid):
        if self.family == "zero":
            return np.zeros(grid.lattice_size)
        if self.family == "table":
            if self.table.shape != (grid.lattice_size,):
                raise ValueError("table has %d values, lattice needs %d"
                                 % (self.table.size, grid.lattice_size))
            return self.table.copy()
        pts = grid.lattice_points()
        if self.family == "sine_product":
            return np.prod(np.sin(np.pi * pts), axis=1)
        return np.prod(pts * (1.0 - pts), axis=1)


class SchemeRun:
    """Everything needed to run one scheme: grid, coefficients, initial
    condition, noise model, scheme kind, seed, and the set of time levels
    to keep.  recorded_levels=None keeps every level."""

    def __init__(self, grid, coefficients, initial, noise_model=None,
                 kind=IMPLICIT, seed=0, recorded_levels=None, q=DEFAULT_CFL):
        if kind not in (IMPLICIT, EXPLICIT):
            raise ValueError("scheme kind must be %r or %r"
                             % (IMPLICIT, EXPLICIT))
        if kind == EXPLICIT:
            if not (q < 0.5):
                raise StabilityError("stability threshold q=%g must be < 1/2" % q)
            ratio = grid.n ** 2 * grid.T / grid.m
            if ratio > q:
                raise StabilityError(
                    "explicit scheme unstable: n^2 T/m = %g > q = %g "
                    "(needs n^2 T/m <= q < 1/2)" % (ratio, q))
        if noise_model is not None and noise_model.d != grid.d:
            raise ValueError("noise dimension does not match grid")
        if recorded_levels is None:
            recorded_levels = range(grid.m + 1)
        levels = sorted(set(int(l) for l in recorded_levels))
        if levels and (levels[0] < 0 or levels[-1] > grid.m):
            raise ValueError("recorded levels must lie in 0..m")
        self.grid = grid
        self.coefficients = coefficients
        self.initial = initial
        self.noise_model = noise_model
        self.kind = kind
        self.seed = seed
        self.recorded_levels = levels
        self.q = q


def _advance(values, slab_values, t, level, run, lattice_pts, laplacian,
             solver):
    """One step of either scheme on (K,) or (K, batch) arrays.

    `level` indexes the state being advanced; non-finite output raises
    SchemeOverflowError(level + 1).
    """
    grid = run.grid
    dt = grid.dt
    coeff = run.coefficients
    with np.errstate(over="ignore", invalid="ignore"):
        sig = coeff.sigma(t, lattice_pts, values)
        drift = coeff.b(t, lattice_pts, values)
        forcing = dt * (sig * slab_values + drift)
        if run.kind == IMPLICIT:
            rhs = values + forcing
            # the banded solver rejects non-finite input loudly; fail first
            if not np.all(np.isfinite(rhs)):
                raise SchemeOverflowError(level + 1)
            out = solver.solve(rhs)
        else:
            out = values + dt * laplacian.apply(values) + forcing
    if not np.all(np.isfinite(out)):
        raise SchemeOverflowError(level + 1)
    return out


def step_implicit(field, slab, t, run):
    """Backward-Euler step; returns the field at the next level."""
    return _step(field, slab, t, run, IMPLICIT)


def step_explicit(field, slab, t, run):
    """Forward-Euler step; stability was checked when run was built."""
    return _step(field, slab, t, run, EXPLICIT)


def _step(field, slab, t, run, expected_kind):
    if run.kind != expected_kind:
        raise ValueError("run is configured for the %s scheme" % run.kind)
    grid = run.grid
    out = _advance(field.values, slab.values, t, field.level, run,
                   grid.lattice_points(), build_laplacian(grid),
                   _solver_for(grid))
    return LatticeField(grid, field.level + 1, out)


class Trajectory:
    """Recorded levels of one run, immutable LatticeFields keyed by level."""

    def __init__(self, grid, fields):
        self.grid = grid
        self.fields = {f.level: f for f in fields}

    @property
    def levels(self):
        return sorted(self.fields)

    def __getitem__(self, level):
        return self.fields[level]

    def sup_norms(self):
        """Max absolute value per recorded level, in level order."""
        return [(lv, float(np.max(np.abs(self.fields[lv].values))))
                for lv in self.levels]

    def save_csv(self, path):
        """Columns: level, t, flat_index (1-based), value."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "t", "flat_index", "value"])
            for lv in self.levels:
                f = self.fields[lv]
                for i, v in enumerate(f.values):
                    w.writerow([lv, repr(f.t), i + 1, repr(float(v))])

    def save_binary(self, path):
        """Header plus per-level (u64 level, f64 t, K float64 values)."""
        g = self.grid
        bc = 0 if g.bc == DIRICHLET else 1
        levels = self.levels
        with open(path, "wb") as fh:
            fh.write(struct.pack("<8sIIQQdQQ", _TRAJ_MAGIC, g.d, bc, g.n,
                                 g.m, g.T, len(levels), g.lattice_size))
            for lv in levels:
                f = self.fields[lv]
                fh.write(struct.pack("<Qd", lv, f.t))
                fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def load_trajectory_binary(path):
    from .lattice import GridSpec, NEUMANN
    head_fmt = "<8sIIQQdQQ"
    with open(path, "rb") as fh:
        header = fh.read(struct.calcsize(head_fmt))
        if len(header) < struct.calcsize(head_fmt) \
                or header[:8] != _TRAJ_MAGIC:
            raise ValueError("not a trajectory file")
        magic, d, bc, n, m, T, nlev, K = struct.unpack(head_fmt, header)
        grid = GridSpec(d, n, m, T, DIRICHLET if bc == 0 else NEUMANN)
        fields = []
        for _ in range(nlev):
            lv, t = struct.unpack("<Qd", fh.read(16))
            vals = np.frombuffer(fh.read(K * 8), dtype="<f8")
            fields.append(LatticeField(grid, lv, vals))
    return Trajectory(grid, fields)


def run(scheme_run, slabs=None):
    """Iterate the configured scheme from u_0 and return the recorded levels.

    slabs may be a precomputed sequence of m NoiseSlabs (the coupling path
    used by refinement studies).  Otherwise they are sampled from the
    run's noise model and seed; with no noise model the forcing slabs are
    zero.  Deterministic given (seed -> slabs).
    """
    grid = scheme_run.grid
    if slabs is None:
        if scheme_run.noise_model is None:
            slab_values = np.zeros((grid.m, grid.lattice_size))
        else:
            factor = build_covariance(scheme_run.noise_model, grid)
            rng = np.random.default_rng(scheme_run.seed)
            slabs = sample_slab_sequence(factor, rng, grid.m)
            slab_values = np.stack([s.values for s in slabs])
    else:
        if len(slabs) != grid.m:
            raise ValueError("need %d slabs, got %d" % (grid.m, len(slabs)))
        slab_values = np.stack([s.values for s in slabs])

    values = scheme_run.initial.sample(grid)
    recorded = []
    want = set(scheme_run.recorded_levels)
    if 0 in want:
        recorded.append(LatticeField(grid, 0, values))
    pts = grid.lattice_points()
    lap = build_laplacian(grid)
    solver = _solver_for(grid)
    dt = grid.dt
    for i in range(grid.m):
        values = _advance(values, slab_values[i], i * dt, i, scheme_run,
                          pts, lap, solver)
        if (i + 1) in want:
            recorded.append(LatticeField(grid, i + 1, values))
    return Trajectory(grid, recorded)
