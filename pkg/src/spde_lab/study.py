"""Coupled-mesh Monte-Carlo convergence studies with log-log regression.

Each replica draws one finest-mesh noise trajectory, coarsens it to every
ladder mesh, runs the scheme on all of them, and compares each coarse
solution to the finest one at an evaluation point (the mid estimator) and
across the coarsest lattice the ladder shares (the sup estimator).
Averaging the squared differences over replicas estimates the
discretization error alone; the noise cancels through the coupling.

ln(error) is regressed on -ln(mesh), so a positive slope means the error
shrinks as the mesh refines; slopes land near the theoretical exponents
1 - alpha/2 (time) and 2 - alpha (space), or 1/2 and 1 for white noise.

Replicas are independent: each gets its own spawned random stream, runs
are batched and may be spread over worker threads, and per-batch partial
sums are combined in a fixed order, so reports are bitwise reproducible
for a given (plan, seed) at any thread count.
"""

import csv
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from scipy.stats import linregress

from .lattice import DIRICHLET, GridSpec, interpolation_weights
from .noise import _children_table, build_covariance
from .operators import _solver_for, build_laplacian
from .schemes import DEFAULT_CFL, EXPLICIT, IMPLICIT, StabilityError

TIME = "time"
SPACE = "space"

_BATCH = 16
_ABORT_FRACTION = 0.01


class StudyAbortError(RuntimeError):
    """More than the tolerated share of replicas overflowed."""


def theoretical_exponent(alpha_or_white, axis, d=1):
    """Predicted decay exponent of the squared error in the mesh count.

    Riesz noise: 1 - alpha/2 on the time axis, 2 - alpha on the space
    axis.  White noise exists only for d = 1 and gives 1/2 and 1.
    """
    if axis not in (TIME, SPACE):
        raise ValueError("axis must be %r or %r" % (TIME, SPACE))
    if isinstance(alpha_or_white, str):
        if alpha_or_white != "white":
            raise ValueError("expected an alpha value or 'white'")
        if d != 1:
            raise ValueError("white noise is restricted to d = 1")
        return 0.5 if axis == TIME else 1.0
    alpha = float(alpha_or_white)
    if not 0.0 < alpha < min(2.0, d):
        raise ValueError("alpha must lie in (0, min(2, d))")
    return 1.0 - alpha / 2.0 if axis == TIME else 2.0 - alpha


def loglog_regression(points):
    """OLS of ln(error) on -ln(mesh): (slope, intercept, slope_stddev).

    Positive slope = error decreasing in the mesh count.  With exactly
    two points the fit is exact and the stddev is reported as 0.
    """
    points = [(float(m), float(e)) for m, e in points]
    if len(points) < 2:
        raise ValueError("regression needs at least 2 points")
    if any(e <= 0.0 for _, e in points):
        raise ValueError("regression needs positive error values")
    x = -np.log([m for m, _ in points])
    y = np.log([e for _, e in points])
    fit = linregress(x, y)
    stddev = 0.0 if len(points) == 2 else float(fit.stderr)
    return float(fit.slope), float(fit.intercept), stddev


class StudyPlan:
    """One convergence experiment: finest grid, a divisor ladder on one
    mesh axis, replica count, coefficients, noise, and evaluation point.

    grid is the finest (reference) discretization; divisors are the
    coarse mesh counts, each of which must divide the reference count on
    the chosen axis.  noise=None runs the deterministic scheme (zero
    forcing slabs)."""

    def __init__(self, axis, grid, divisors, replicas, coefficients,
                 initial, noise=None, kind=IMPLICIT, tstar=1.0, xstar=None,
                 seed=0, q=DEFAULT_CFL):
        if axis not in (TIME, SPACE):
            raise ValueError("axis must be %r or %r" % (TIME, SPACE))
        divisors = sorted(int(v) for v in divisors)
        if not divisors:
            raise ValueError("divisor ladder is empty")
        finest = grid.m if axis == TIME else grid.n
        for v in divisors:
            if v < 1 or finest % v:
                raise ValueError("ladder entry %d does not divide the "
                                 "finest mesh %d" % (v, finest))
        if axis == SPACE and min(divisors) < 2:
            raise ValueError("space ladder entries must be at least 2")
        if noise is not None and noise.d != grid.d:
            raise ValueError("noise dimension does not match the grid")
        replicas = int(replicas)
        if replicas < 1:
            raise ValueError("need at least one replica")
        if kind not in (IMPLICIT, EXPLICIT):
            raise ValueError("scheme kind must be %r or %r"
                             % (IMPLICIT, EXPLICIT))
        tstar = float(tstar)
        if not 0.0 < tstar <= grid.T:
            raise ValueError("tstar must lie in (0, T]")
        if xstar is None:
            xstar = (0.5,) * grid.d
        xstar = np.asarray(xstar, dtype=float)
        if xstar.shape != (grid.d,) or np.any((xstar < 0) | (xstar > 1)):
            raise ValueError("xstar must be a point of [0,1]^d")

        self.axis = axis
        self.grid = grid
        self.divisors = divisors
        self.replicas = replicas
        self.coefficients = coefficients
        self.initial = initial
        self.noise = noise
        self.kind = kind
        self.tstar = tstar
        self.xstar = xstar
        self.seed = int(seed)
        self.q = float(q)

        for g in self.all_grids():
            level = g.m * tstar / g.T
            if abs(level - round(level)) > 1e-9:
                raise ValueError("tstar=%g is not a time level of every "
                                 "ladder mesh" % tstar)
            if kind == EXPLICIT and g.n ** 2 * g.T / g.m > self.q:
                raise StabilityError(
                    "explicit scheme unstable on ladder grid (n=%d, m=%d): "
                    "n^2 T/m = %g > q = %g" % (g.n, g.m,
                                               g.n ** 2 * g.T / g.m, self.q))

    def ladder_grids(self):
        g = self.grid
        if self.axis == TIME:
            return [GridSpec(g.d, g.n, v, g.T, g.bc) for v in self.divisors]
        return [GridSpec(g.d, v, g.m, g.T, g.bc) for v in self.divisors]

    def all_grids(self):
        return self.ladder_grids() + [self.grid]

    def alpha_or_white(self):
        if self.noise is None:
            return "none"
        return "white" if self.noise.kind == "white" else self.noise.alpha


class ConvergenceReport:
    """Per-mesh error estimates plus the fitted slopes.

    slope_stddev is the regression standard error of the mid-estimator
    slope (the sup variant's is kept in slope_stddev_sup); replicas is
    the count actually averaged, after abort exclusion.
    """

    def __init__(self, plan, meshes, error_mid, stderr_mid, error_sup,
                 stderr_sup, second_moment_sup, aborted):
        self.axis = plan.axis
        self.alpha_or_white = plan.alpha_or_white()
        self.seed = plan.seed
        self.meshes = [int(m) for m in meshes]
        self.error_mid = [float(v) for v in error_mid]
        self.stderr_mid = [float(v) for v in stderr_mid]
        self.error_sup = [float(v) for v in error_sup]
        self.stderr_sup = [float(v) for v in stderr_sup]
        self.second_moment_sup = [float(v) for v in second_moment_sup]
        self.aborted = int(aborted)
        self.replicas = plan.replicas - self.aborted
        if plan.noise is None:
            self.theory_exponent = float("nan")
        else:
            self.theory_exponent = theoretical_exponent(
                self.alpha_or_white, plan.axis, plan.grid.d)
        self.slope_mid = self.intercept_mid = None
        self.slope_sup = self.intercept_sup = None
        self.slope_stddev = self.slope_stddev_sup = None

    def fit(self):
        self.slope_mid, self.intercept_mid, self.slope_stddev = \
            loglog_regression(list(zip(self.meshes, self.error_mid)))
        self.slope_sup, self.intercept_sup, self.slope_stddev_sup = \
            loglog_regression(list(zip(self.meshes, self.error_sup)))
        return self

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["axis", "alpha_or_white", "mesh", "error_mid",
                        "stderr_mid", "error_sup", "stderr_sup", "slope_mid",
                        "slope_sup", "slope_stddev", "theory_exponent",
                        "replicas", "aborted", "seed"])
            for i, mesh in enumerate(self.meshes):
                w.writerow([self.axis, self.alpha_or_white, mesh,
                            repr(self.error_mid[i]), repr(self.stderr_mid[i]),
                            repr(self.error_sup[i]), repr(self.stderr_sup[i]),
                            repr(self.slope_mid), repr(self.slope_sup),
                            repr(self.slope_stddev),
                            repr(self.theory_exponent), self.replicas,
                            self.aborted, self.seed])


# --- the engine ---------------------------------------------------------------


def _common_lattice_points(plan):
    """Interior points of the coarsest lattice every ladder entry shares."""
    import math
    ns = [g.n for g in plan.all_grids()]
    g = ns[0]
    for v in ns[1:]:
        g = math.gcd(g, v)
    axis_pts = np.arange(1, g) / g if g > 1 else np.array([0.5])
    d = plan.grid.d
    mesh = np.meshgrid(*(axis_pts,) * d, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def _sampling_matrix(grid, points):
    """(len(points), lattice_size) multilinear evaluation matrix."""
    W = np.zeros((len(points), grid.lattice_size))
    for r, x in enumerate(points):
        idx, wts = interpolation_weights(grid, x)
        W[r, idx] = wts
    return W


class _LadderEntry:
    """Precomputed per-mesh machinery shared by all replicas."""

    def __init__(self, grid, plan, points):
        self.grid = grid
        fine = plan.grid
        self.rho = fine.m // grid.m
        self.lam = (grid.n ** grid.d * grid.m) / (fine.n ** fine.d * fine.m)
        self.table = (None if grid.n == fine.n
                      else _children_table(fine, grid))
        self.level = int(round(grid.m * plan.tstar / grid.T))
        self.solver = _solver_for(grid) if plan.kind == IMPLICIT else None
        self.laplacian = build_laplacian(grid) if plan.kind == EXPLICIT \
            else None
        self.W_pts = _sampling_matrix(grid, points)
        idx, wts = interpolation_weights(grid, plan.xstar)
        self.w_star_idx = idx
        self.w_star = wts
        self.u0 = plan.initial.sample(grid)

    def coarsen(self, slab_values):
        """(m_fine, K_fine, B) noise values to this entry's mesh."""
        out = slab_values
        if self.rho > 1:
            m, _, B = out.shape
            out = out.reshape(self.grid.m, self.rho, -1, B).sum(axis=1)
        if self.table is not None:
            out = out[:, self.table, :].sum(axis=2)
        if self.lam != 1.0:
            out = out * self.lam
        return out

    def run_batch(self, slab_values, plan):
        """Step a whole batch; returns values at the evaluation level and
        a per-column abort mask."""
        grid = self.grid
        B = slab_values.shape[2]
        u = np.repeat(self.u0[:, None], B, axis=1)
        aborted = np.zeros(B, dtype=bool)
        pts = grid.lattice_points()
        dt = grid.dt
        coeff = plan.coefficients
        out = u
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(self.level):
                t = i * dt
                sig = coeff.sigma(t, pts, out)
                drift = coeff.b(t, pts, out)
                forcing = dt * (sig * slab_values[i] + drift)
                if plan.kind == IMPLICIT:
                    rhs = out + forcing
                    bad = ~np.isfinite(rhs).all(axis=0)
                    if bad.any():
                        aborted |= bad
                        rhs[:, bad] = 0.0
                    out = self.solver.solve(rhs)
                else:
                    out = out + dt * self.laplacian.apply(out) + forcing
                bad = ~np.isfinite(out).all(axis=0)
                if bad.any():
                    aborted |= bad
                    out[:, bad] = 0.0
        return out, aborted


def _batch_partials(plan, entries, ref, factor, streams, batch):
    """Accumulate one batch of replicas; returns fixed-shape partials."""
    fine = plan.grid
    B = len(batch)
    K0 = fine.lattice_size
    if factor is None:
        slab0 = np.zeros((fine.m, K0, B))
    else:
        slab0 = np.empty((fine.m, K0, B))
        for b, r in enumerate(batch):
            xi = np.random.default_rng(streams[r]).standard_normal(
                (fine.m, factor.rank))
            slab0[:, :, b] = xi @ factor.L.T
    ref_vals, aborted = ref.run_batch(slab0, plan)
    ref_pts = ref.W_pts @ ref_vals.reshape(K0, B)
    ref_star = ref.w_star @ ref_vals[ref.w_star_idx]

    L = len(entries)
    P = ref_pts.shape[0]
    s1_mid = np.zeros(L)
    s2_mid = np.zeros(L)
    s1_sup = np.zeros((L, P))
    s2_sup = np.zeros((L, P))
    moment = np.zeros((L, P))
    per_entry = []
    for i, entry in enumerate(entries):
        vals, bad = entry.run_batch(entry.coarsen(slab0), plan)
        aborted |= bad
        per_entry.append(vals)
    keep = ~aborted
    for i, entry in enumerate(entries):
        vals = per_entry[i][:, keep]
        pts = entry.W_pts @ vals
        d_sup = (pts - ref_pts[:, keep]) ** 2
        s1_sup[i] = d_sup.sum(axis=1)
        s2_sup[i] = (d_sup ** 2).sum(axis=1)
        moment[i] = (pts ** 2).sum(axis=1)
        d_mid = (entry.w_star @ vals[entry.w_star_idx]
                 - ref_star[keep]) ** 2
        s1_mid[i] = d_mid.sum()
        s2_mid[i] = (d_mid ** 2).sum()
    return s1_mid, s2_mid, s1_sup, s2_sup, moment, int(aborted.sum())


def compute_errors(plan, threads=1):
    """Coupled Monte-Carlo error estimates without the regression step.

    Returns a ConvergenceReport whose slope fields are unset; run_study
    adds the fits.  Split out so degenerate ladders (for example one that
    includes the reference mesh itself, whose error is exactly zero) can
    still be estimated.
    """
    points = _common_lattice_points(plan)
    entries = [_LadderEntry(g, plan, points) for g in plan.ladder_grids()]
    ref = _LadderEntry(plan.grid, plan, points)
    factor = None
    if plan.noise is not None:
        factor = build_covariance(plan.noise, plan.grid)
    streams = np.random.SeedSequence(plan.seed).spawn(plan.replicas)

    batches = [range(lo, min(lo + _BATCH, plan.replicas))
               for lo in range(0, plan.replicas, _BATCH)]
    work = lambda b: _batch_partials(plan, entries, ref, factor, streams, b)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            partials = list(pool.map(work, batches))
    else:
        partials = [work(b) for b in batches]

    L, P = len(entries), len(points)
    s1_mid = np.zeros(L)
    s2_mid = np.zeros(L)
    s1_sup = np.zeros((L, P))
    s2_sup = np.zeros((L, P))
    moment = np.zeros((L, P))
    aborted = 0
    # fixed batch order keeps the floating-point reduction deterministic
    for pm1, pm2, ps1, ps2, mom, ab in partials:
        s1_mid += pm1
        s2_mid += pm2
        s1_sup += ps1
        s2_sup += ps2
        moment += mom
        aborted += ab

    if aborted > _ABORT_FRACTION * plan.replicas:
        raise StudyAbortError("%d of %d replicas overflowed"
                              % (aborted, plan.replicas))
    K = plan.replicas - aborted
    error_mid = s1_mid / K
    stderr_mid = _stderr(s1_mid, s2_mid, K)
    mean_sup = s1_sup / K
    arg = np.argmax(mean_sup, axis=1)
    rows = np.arange(L)
    error_sup = mean_sup[rows, arg]
    stderr_sup = _stderr(s1_sup[rows, arg], s2_sup[rows, arg], K)
    second_moment = (moment / K).max(axis=1)
    return ConvergenceReport(plan, plan.divisors, error_mid, stderr_mid,
                             error_sup, stderr_sup, second_moment, aborted)


def _stderr(s1, s2, K):
    if K < 2:
        return np.zeros_like(np.asarray(s1, dtype=float))
    var = np.maximum(s2 - s1 ** 2 / K, 0.0) / (K - 1)
    return np.sqrt(var / K)


def run_study(plan, threads=1):
    """Full experiment: coupled error estimates plus the log-log fits."""
    return compute_errors(plan, threads=threads).fit()
